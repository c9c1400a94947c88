use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use topicmatch_acceptance::{markdown_report, run_suite, trace, SuiteOptions};

/// Runs the acceptance criteria in order and writes a Markdown report.
#[derive(Parser)]
#[command(name = "run-acceptance")]
struct Args {
    /// Skip the training-based criteria (7 and 8).
    #[arg(long)]
    fast_only: bool,
    /// Report destination.
    #[arg(long, default_value = "acceptance_report.md")]
    out: PathBuf,
    /// Run only these criteria, e.g. `--only 1,5,9`.
    #[arg(long, value_delimiter = ',')]
    only: Option<Vec<u8>>,
    #[arg(long, hide = true)]
    tamper_checkpoint_version: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let opts = SuiteOptions { fast_only: args.fast_only, tamper_checkpoint_version: args.tamper_checkpoint_version, only: args.only };
    let results = run_suite(&opts, |r| println!("{}", r.summary_line()));
    let trace = match trace::check() {
        Ok(t) => t,
        Err(e) => trace::TraceReport { entries: 0, dangling: vec![format!("trace map unreadable: {e}")] },
    };
    println!("[{}] trace map: {} entries, {} dangling", if trace.ok() { "PASS" } else { "FAIL" }, trace.entries, trace.dangling.len());
    if let Err(e) = std::fs::write(&args.out, markdown_report(&results, Some(&trace))) {
        eprintln!("error: cannot write {}: {e}", args.out.display());
        return ExitCode::from(2);
    }
    println!("report written to {}", args.out.display());
    if results.iter().all(|r| r.passed) && trace.ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
