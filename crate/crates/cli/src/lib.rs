//! Command-line front end: dataset generation, training, matching,
//! evaluation, profiling and topic visualization.

pub mod config;
pub mod error;
pub mod viz;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::ffi::OsString;

use clap::{Args, Parser, Subcommand};
use topicmatch::checkpoint::model_from_checkpoint;
use topicmatch::evaluator::{
    count_ops, covis_sweep, evaluate_pairs, render_topic_overlay, stage_rows, write_ppm_bytes, CostInputs, MatchSource,
};
use topicmatch::model::ModelConfig;
use topicmatch::nn::ForwardCtx;
use topicmatch::synth_data::{
    build_dataset, ingest_image_folder, load_image_padded, load_pair, DatasetManifest, Pairing, ScenePair, Split,
};
use topicmatch::topic_matcher::Variant;
use topicmatch::trainer::{train, DUMP_FILE};

use crate::config::ConfigFile;
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "topicmatch", version, about = "Topic-guided dense image matching")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact ground truth.
    GenData(GenDataArgs),
    /// Build an image-only manifest from a folder of photos.
    Ingest(IngestArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Match two images and write the correspondences as CSV.
    Match(MatchArgs),
    /// Homography accuracy on a dataset split.
    Eval(EvalArgs),
    /// Analytic multiply-accumulate counts per stage.
    Profile(ProfileArgs),
    /// Render topic assignments of a pair.
    VizTopics(VizTopicsArgs),
    /// Re-evaluate a plus-variant checkpoint at several co-visible topic counts.
    CovisSweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long)]
    dims: Option<String>,
    /// Largest rotation angle in degrees.
    #[arg(long)]
    pose_range: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "sequential")]
    pairing: Pairing,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Use the small desk-scale architecture.
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct MatchArgs {
    image_a: PathBuf,
    image_b: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    /// File name of the match CSV inside --out.
    #[arg(long, default_value = "matches.csv")]
    out_matches: String,
    /// File name of a side-by-side PPM drawing inside --out.
    #[arg(long)]
    viz: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use ground-truth correspondences instead of a model.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value = "val")]
    split: SplitArg,
    #[arg(long)]
    source: Option<SourceArg>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SourceArg {
    Fine,
    Coarse,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PopulationArg {
    Uniform,
    Dominant,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long)]
    k_covis: Option<usize>,
    #[arg(long, value_enum, default_value = "uniform")]
    populations: PopulationArg,
    /// Coarse matches passed to the fine stage.
    #[arg(long, default_value_t = 0)]
    matches: usize,
}

#[derive(Args)]
struct VizTopicsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pair: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    palette_seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8])]
    k: Vec<usize>,
    #[arg(long, default_value = "val")]
    split: SplitArg,
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Config(format!("dims must look like 128x128, got '{s}'"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    if a.n == 0 {
        return Err(CliError::Config("n must be positive".into()));
    }
    let mut params = ConfigFile::load(a.config.as_deref())?.scene;
    if let Some(d) = &a.dims {
        (params.height, params.width) = parse_dims(d)?;
    }
    if let Some(r) = a.pose_range {
        params.max_rotation_deg = r;
    }
    params.validate()?;
    create_out(&a.out)?;
    let manifest = build_dataset(a.n, &a.out, &params, a.seed)?;
    println!("wrote {} pairs to {}", manifest.pairs.len(), a.out.display());
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let manifest = ingest_image_folder(&a.images, a.pairing)?;
    create_out(&a.out)?;
    manifest.write(&a.out)?;
    println!("wrote {} pairs to {}", manifest.pairs.len(), a.out.display());
    Ok(())
}

fn apply_tiny(cfg: &mut ModelConfig) {
    let variant = cfg.matcher.variant;
    let tiny = ModelConfig::tiny(variant);
    cfg.backbone = tiny.backbone;
    cfg.matcher.num_topics = tiny.matcher.num_topics;
    cfg.fine = tiny.fine;
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = ConfigFile::load(a.config.as_deref())?.train;
    if let Some(v) = a.variant {
        cfg.model.matcher.variant = v;
    }
    if a.tiny {
        apply_tiny(&mut cfg.model);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.validate()?;
    let manifest = DatasetManifest::read(&a.data)?;
    create_out(&a.out)?;
    fs::write(a.out.join("train_config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    match train(&manifest, &a.data, &cfg, &a.out) {
        Ok((_, report)) => {
            println!(
                "trained {} epochs ({} steps, variant {}); checkpoint {}",
                report.epochs.len(),
                report.steps.len(),
                cfg.model.matcher.variant,
                report.final_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
            );
            Ok(())
        }
        Err(e @ topicmatch::trainer::TrainError::NonFiniteLoss { .. }) => {
            eprintln!("diagnostic dump: {}", a.out.join(DUMP_FILE).display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    let (img_a, dims_a) = load_image_padded(&a.image_a)?;
    let (img_b, dims_b) = load_image_padded(&a.image_b)?;
    let (mut model, _) = model_from_checkpoint(&a.checkpoint)?;
    if let Some(t) = a.tau {
        model.cfg.matcher.tau = t;
    }
    model.cfg.validate()?;
    create_out(&a.out)?;
    let out = model.match_pair(&ForwardCtx::eval(), &img_a, &img_b)?;
    let inside = |p: [f64; 2], d: topicmatch::synth_data::ImageDims| {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < d.width as f64 && p[1] < d.height as f64
    };
    let kept: Vec<_> = out.fine.iter().filter(|m| inside(m.xa, dims_a) && inside(m.xb, dims_b)).collect();
    let mut csv = csv::Writer::from_path(a.out.join(&a.out_matches)).map_err(|e| CliError::Io(e.to_string()))?;
    let io = |e: csv::Error| CliError::Io(e.to_string());
    csv.write_record(["xa", "ya", "xb", "yb", "conf"]).map_err(io)?;
    for m in &kept {
        let row = [m.xa[0], m.xa[1], m.xb[0], m.xb[1], m.confidence].map(|v| format!("{v:.3}"));
        csv.write_record(&row).map_err(io)?;
    }
    csv.flush()?;
    if let Some(name) = &a.viz {
        let mut canvas = viz::Canvas::side_by_side(&img_a, &img_b);
        for m in &kept {
            let color = viz::confidence_color(m.confidence);
            canvas.line(m.xa, [m.xb[0] + img_a.width as f64, m.xb[1]], color);
        }
        write_ppm_bytes(&a.out.join(name), &canvas.rgb, canvas.width, canvas.height)?;
    }
    println!("{} matches", kept.len());
    Ok(())
}

fn split_ids(manifest: &DatasetManifest, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => manifest.ids(Split::Train),
        SplitArg::Val => manifest.ids(Split::Val),
        SplitArg::All => manifest.pairs.iter().map(|p| p.id).collect(),
    }
}

fn load_pairs(data: &Path, split: SplitArg) -> Result<Vec<(usize, ScenePair)>> {
    let manifest = DatasetManifest::read(data)?;
    let pairs = split_ids(&manifest, split)
        .into_iter()
        .map(|id| Ok((id, load_pair(&manifest, data, id)?)))
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(CliError::Config("the selected split is empty".into()));
    }
    Ok(pairs)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = ConfigFile::load(a.config.as_deref())?.eval;
    cfg.oracle |= a.oracle;
    if let Some(s) = a.source {
        cfg.source = match s {
            SourceArg::Fine => MatchSource::Fine,
            SourceArg::Coarse => MatchSource::Coarse,
        };
    }
    let model = match (&a.checkpoint, cfg.oracle) {
        (Some(p), _) => Some(model_from_checkpoint(p)?.0),
        (None, true) => None,
        (None, false) => return Err(CliError::Config("--checkpoint is required unless --oracle is given".into())),
    };
    let pairs = load_pairs(&a.data, a.split)?;
    create_out(&a.out)?;
    let report = evaluate_pairs(model.as_ref(), &pairs, &cfg)?;
    fs::write(a.out.join("eval_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "AUC@3/5/10px: {:.4} {:.4} {:.4} ({} failures of {})",
        report.auc[0],
        report.auc[1],
        report.auc[2],
        report.failures,
        report.pairs.len()
    );
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let mut cfg = ConfigFile::load(a.config.as_deref())?.train.model;
    if let Some(v) = a.variant {
        cfg.matcher.variant = v;
    }
    if a.tiny {
        apply_tiny(&mut cfg);
    }
    if let Some(k) = a.topics {
        cfg.matcher.num_topics = k;
    }
    if let Some(k) = a.k_covis {
        cfg.matcher.k_covis = k;
    }
    cfg.validate()?;
    let k = cfg.matcher.num_topics;
    let n = (a.height / 8) * (a.width / 8);
    let pops: Vec<usize> = match a.populations {
        PopulationArg::Uniform => (0..k).map(|t| n / k + usize::from(t < n % k)).collect(),
        PopulationArg::Dominant => (0..k).map(|t| if t == 0 { n } else { 0 }).collect(),
    };
    let inputs = CostInputs {
        height_a: a.height,
        width_a: a.width,
        height_b: a.height,
        width_b: a.width,
        populations_a: pops.clone(),
        populations_b: pops,
        covisible: (0..cfg.matcher.k_covis.min(k)).collect(),
        num_matches: a.matches,
    };
    let cost = count_ops(&cfg, &inputs)?;
    create_out(&a.out)?;
    let mut f = fs::File::create(a.out.join("profile.csv"))?;
    writeln!(f, "stage,macs")?;
    for (name, macs) in stage_rows(&cost) {
        writeln!(f, "{name},{macs}")?;
    }
    writeln!(f, "total,{}", cost.total())?;
    let summary = serde_json::json!({
        "variant": cfg.matcher.variant,
        "units": "multiply-accumulates",
        "inputs": inputs,
        "stages": stage_rows(&cost).into_iter().collect::<std::collections::BTreeMap<_, _>>(),
        "coarse_total": cost.coarse_total(),
        "total": cost.total(),
    });
    fs::write(a.out.join("profile.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("total {} MACs ({} variant)", cost.total(), cfg.matcher.variant);
    Ok(())
}

fn cmd_viz_topics(a: VizTopicsArgs) -> Result<()> {
    let (model, _) = model_from_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::read(&a.data)?;
    let pair = load_pair(&manifest, &a.data, a.pair)?;
    create_out(&a.out)?;
    let out = model.match_pair(&ForwardCtx::eval(), &pair.image_a, &pair.image_b)?;
    let oa = render_topic_overlay(&out.theta_a, &pair.image_a, a.palette_seed)?;
    let ob = render_topic_overlay(&out.theta_b, &pair.image_b, a.palette_seed)?;
    oa.write(&a.out, &format!("pair{:05}_a", a.pair))?;
    ob.write(&a.out, &format!("pair{:05}_b", a.pair))?;
    oa.write_palette(&a.out.join("palette.json"))?;
    println!("wrote topic overlays to {}", a.out.display());
    Ok(())
}

fn cmd_covis_sweep(a: SweepArgs) -> Result<()> {
    let (mut model, _) = model_from_checkpoint(&a.checkpoint)?;
    let pairs = load_pairs(&a.data, a.split)?;
    create_out(&a.out)?;
    let rows = covis_sweep(&mut model, &pairs, &a.k, &Default::default())?;
    let mut f = fs::File::create(a.out.join("sweep.csv"))?;
    writeln!(f, "k_covis,auc3,auc5,auc10,coarse_macs")?;
    for r in &rows {
        writeln!(f, "{},{:.6},{:.6},{:.6},{}", r.k_covis, r.auc[0], r.auc[1], r.auc[2], r.coarse_macs)?;
    }
    println!("wrote {} sweep rows", rows.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Match(a) => cmd_match(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Profile(a) => cmd_profile(a),
        Command::VizTopics(a) => cmd_viz_topics(a),
        Command::CovisSweep(a) => cmd_covis_sweep(a),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Fixed inputs of the golden match test: an untrained tiny checkpoint
/// (seed 7) and one 64×64 synthetic pair (seed 3), matched at τ = 0.01.
pub mod golden {
    use std::path::{Path, PathBuf};

    use topicmatch::checkpoint::save_checkpoint;
    use topicmatch::model::{Model, ModelConfig};
    use topicmatch::synth_data::{generate_scene_pair, write_pgm, SceneParams};
    use topicmatch::topic_matcher::Variant;

    pub const TAU: &str = "0.01";
    pub const FILE: &str = "tests/golden/match_seed7.csv";

    /// Path of the committed golden CSV.
    pub fn golden_path() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join(FILE)
    }

    /// Writes `model.ckpt`, `a.pgm` and `b.pgm` into `dir`.
    pub fn write_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
        let model = Model::new(ModelConfig::tiny(Variant::Fast), 7).expect("valid tiny model");
        let ckpt = dir.join("model.ckpt");
        save_checkpoint(&ckpt, &model, None, 0).expect("writable fixture dir");
        let params = SceneParams { height: 64, width: 64, ..SceneParams::default() };
        let pair = generate_scene_pair(3, &params).expect("valid scene");
        let (a, b) = (dir.join("a.pgm"), dir.join("b.pgm"));
        write_pgm(&a, &pair.image_a).expect("writable fixture dir");
        write_pgm(&b, &pair.image_b).expect("writable fixture dir");
        (ckpt, a, b)
    }
}
