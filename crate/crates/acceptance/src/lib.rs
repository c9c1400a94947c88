//! Acceptance criteria for the topicmatch workspace, each checked against an
//! independent oracle, plus the Markdown report writer.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

pub mod efficiency;
pub mod equivalence;
pub mod formats;
pub mod geometry_suite;
pub mod gradients;
pub mod oracles;
pub mod overfit;
pub mod simplex;
pub mod soft_argmax;
pub mod trace;
mod util;

/// One measured quantity and whether it met its threshold.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub label: String,
    pub value: String,
    pub ok: bool,
}

impl Check {
    pub fn new(label: impl Into<String>, value: impl Into<String>, ok: bool) -> Self {
        Self { label: label.into(), value: value.into(), ok }
    }

    /// `value ≤ limit`, formatted in scientific notation.
    pub fn at_most(label: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::new(label, format!("{value:.3e} (limit {limit:.0e})"), value <= limit)
    }

    /// Informational line that never fails.
    pub fn info(label: impl Into<String>, value: impl Into<String>) -> Self {
        Self::new(label, value, true)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub title: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub error: Option<String>,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl CriterionResult {
    pub fn within_budget(&self) -> bool {
        self.seconds <= self.budget_seconds
    }

    /// `PASS`/`FAIL` line used by the test harness and the binary.
    pub fn summary_line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut line = format!("[{status}] criterion {} {}: {:.1}s (budget {:.0}s)", self.id, self.title, self.seconds, self.budget_seconds);
        if let Some(e) = &self.error {
            let _ = write!(line, " error: {e}");
        }
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.ok).map(|c| c.label.as_str()).collect();
        if !failed.is_empty() {
            let _ = write!(line, " failed checks: {}", failed.join(", "));
        }
        line
    }
}

/// Runs `f`, timing it and folding errors into a failed result.
pub fn run_criterion(id: u8, title: &str, budget_seconds: f64, f: impl FnOnce() -> anyhow::Result<Vec<Check>>) -> CriterionResult {
    let start = Instant::now();
    let outcome = f();
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(checks) => CriterionResult {
            id,
            title: title.to_string(),
            passed: !checks.is_empty() && checks.iter().all(|c| c.ok),
            checks,
            error: None,
            seconds,
            budget_seconds,
        },
        Err(e) => CriterionResult {
            id,
            title: title.to_string(),
            passed: false,
            checks: Vec::new(),
            error: Some(format!("{e:#}").lines().next().unwrap_or_default().to_string()),
            seconds,
            budget_seconds,
        },
    }
}

/// Options for a full acceptance run.
#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Skip the training-based criteria (overfit and co-visible sweep).
    pub fast_only: bool,
    /// Corrupt the checkpoint format version before reloading it.
    pub tamper_checkpoint_version: bool,
    /// Restrict the run to these criterion ids.
    pub only: Option<Vec<u8>>,
}

impl SuiteOptions {
    fn wants(&self, id: u8) -> bool {
        self.only.as_ref().is_none_or(|ids| ids.contains(&id))
    }
}

pub const SUITE_SEED: u64 = 20_240_601;

/// Executes the criteria in order. `on_result` sees each result as soon as
/// it is available.
pub fn run_suite(opts: &SuiteOptions, mut on_result: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let mut results = Vec::new();
    let mut push = |r: CriterionResult, results: &mut Vec<CriterionResult>| {
        on_result(&r);
        results.push(r);
    };
    if opts.wants(1) {
        push(run_criterion(1, "simplex suite", 30.0, || simplex::run(SUITE_SEED)), &mut results);
    }
    if opts.wants(2) {
        push(run_criterion(2, "oracle equivalence", 60.0, || equivalence::run(SUITE_SEED)), &mut results);
    }
    if opts.wants(3) {
        push(run_criterion(3, "geometry suite", 60.0, || geometry_suite::run(SUITE_SEED)), &mut results);
    }
    if opts.wants(4) {
        push(run_criterion(4, "gradient checks", 120.0, || gradients::run(SUITE_SEED)), &mut results);
    }
    if opts.wants(5) {
        push(run_criterion(5, "soft-argmax limit", 10.0, || soft_argmax::run(SUITE_SEED)), &mut results);
    }
    if opts.wants(6) {
        push(run_criterion(6, "efficiency claim", 60.0, || efficiency::run(SUITE_SEED)), &mut results);
    }
    if !opts.fast_only && (opts.wants(7) || opts.wants(8)) {
        let settings = overfit::OverfitSettings::default();
        let mut plus_model = None;
        if opts.wants(7) {
            push(
                run_criterion(7, "overfit experiment", 1800.0, || {
                    let (checks, plus) = overfit::run(&settings)?;
                    plus_model = Some(plus);
                    Ok(checks)
                }),
                &mut results,
            );
        }
        if opts.wants(8) {
            push(run_criterion(8, "co-visible sweep", 300.0, || overfit::covis_trend(&settings, plus_model.take())), &mut results);
        }
    }
    if opts.wants(9) {
        push(
            run_criterion(9, "determinism and formats", 120.0, || formats::run(opts.tamper_checkpoint_version)),
            &mut results,
        );
    }
    results
}

/// Markdown report with a summary table and the measured values of every
/// criterion.
pub fn markdown_report(results: &[CriterionResult], trace: Option<&trace::TraceReport>) -> String {
    let mut out = String::from("# Acceptance report\n\n| # | Criterion | Status | Runtime (s) | Budget (s) |\n|---|---|---|---|---|\n");
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let budget = if r.within_budget() { format!("{:.0}", r.budget_seconds) } else { format!("{:.0} (exceeded)", r.budget_seconds) };
        let _ = writeln!(out, "| {} | {} | {} | {:.1} | {} |", r.id, r.title, status, r.seconds, budget);
    }
    if let Some(t) = trace {
        let status = if t.ok() { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "\nTrace map: {status} ({} entries, {} dangling)", t.entries, t.dangling.len());
        for d in &t.dangling {
            let _ = writeln!(out, "- dangling: {d}");
        }
    }
    for r in results {
        let _ = writeln!(out, "\n## {}. {}\n", r.id, r.title);
        if let Some(e) = &r.error {
            let _ = writeln!(out, "Error: `{e}`\n");
        }
        for c in &r.checks {
            let mark = if c.ok { "ok" } else { "FAIL" };
            let _ = writeln!(out, "- {} = {} [{mark}]", c.label, c.value);
        }
    }
    out
}
