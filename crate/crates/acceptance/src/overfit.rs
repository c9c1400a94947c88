//! Scaled-down overfit experiment and the co-visible topic sweep on its
//! plus-variant model.

use topicmatch::evaluator::{count_ops, covis_sweep, evaluate_pairs, CostInputs, EvalConfig, EvalReport};
use topicmatch::model::{Model, ModelConfig};
use topicmatch::synth_data::{generate_scene_pair, SceneParams, ScenePair};
use topicmatch::topic_matcher::Variant;
use topicmatch::trainer::{TrainConfig, TrainOn, Trainer};

use crate::Check;

#[derive(Debug, Clone)]
pub struct OverfitSettings {
    pub pairs: usize,
    pub steps: u64,
    pub scene_seed: u64,
    pub seed: u64,
    pub lr: f64,
}

impl Default for OverfitSettings {
    fn default() -> Self {
        Self { pairs: 20, steps: 2000, scene_seed: 1000, seed: 0, lr: 1e-3 }
    }
}

pub const LOSS_RATIO_LIMIT: f64 = 0.10;
pub const AUC5_TARGET: f64 = 0.80;
pub const FINE_BEATS_COARSE_TARGET: f64 = 0.70;
pub const SWEEP_K: [usize; 3] = [2, 4, 8];

/// The held-in 128×128 training pairs.
pub fn pairs(s: &OverfitSettings) -> anyhow::Result<Vec<(usize, ScenePair)>> {
    let params = SceneParams::default();
    (0..s.pairs)
        .map(|i| Ok((i, generate_scene_pair(s.scene_seed + i as u64, &params)?)))
        .collect()
}

pub struct OverfitRun {
    pub variant: Variant,
    /// Mean total loss over the first pass through the pairs.
    pub initial_loss: f64,
    /// Mean total loss over the last pass.
    pub final_loss: f64,
    pub steps: u64,
    pub report: EvalReport,
    pub model: Model,
}

pub fn train_variant(variant: Variant, s: &OverfitSettings, data: &[(usize, ScenePair)]) -> anyhow::Result<OverfitRun> {
    let cfg = TrainConfig {
        model: ModelConfig::tiny(variant),
        lr: s.lr,
        seed: s.seed,
        epochs: s.steps.div_ceil(data.len() as u64) as usize,
        max_steps: Some(s.steps),
        train_on: TrainOn::All,
        validate_every: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg)?;
    let train = trainer.run(data, &[], None)?;
    let (first, last) = match (train.epochs.first(), train.epochs.last()) {
        (Some(f), Some(l)) => (f.mean_total, l.mean_total),
        _ => anyhow::bail!("training produced no epochs"),
    };
    let report = evaluate_pairs(Some(&trainer.model), data, &EvalConfig::default())?;
    Ok(OverfitRun { variant, initial_loss: first, final_loss: last, steps: trainer.step, report, model: trainer.model })
}

fn run_checks(run: &OverfitRun, require_refinement: bool) -> Vec<Check> {
    let v = run.variant;
    let ratio = run.final_loss / run.initial_loss;
    let auc = run.report.auc;
    let beats = run.report.fine_beats_coarse_fraction();
    vec![
        Check::new(
            format!("{v}: final/initial total loss after {} steps", run.steps),
            format!("{:.4} / {:.4} = {ratio:.3} (limit {LOSS_RATIO_LIMIT})", run.final_loss, run.initial_loss),
            ratio < LOSS_RATIO_LIMIT,
        ),
        Check::new(
            format!("{v}: AUC@5px over the held-in pairs"),
            format!("{:.3} (AUC@3 {:.3}, AUC@10 {:.3}; target {AUC5_TARGET})", auc[1], auc[0], auc[2]),
            auc[1] >= AUC5_TARGET,
        ),
        Check::new(
            format!("{v}: pairs where fine matches beat coarse centers"),
            format!("{beats:.2} (target {FINE_BEATS_COARSE_TARGET}{})", if require_refinement { "" } else { ", informational" }),
            !require_refinement || beats >= FINE_BEATS_COARSE_TARGET,
        ),
        Check::info(
            format!("{v}: mean matches / failures / mean precision@1,3,5px"),
            format!("{:.1} / {} / {:.3?}", run.report.mean_matches, run.report.failures, run.report.mean_precision),
        ),
    ]
}

/// Trains both variants; returns the checks and the trained plus model.
pub fn run(s: &OverfitSettings) -> anyhow::Result<(Vec<Check>, Model)> {
    let data = pairs(s)?;
    let fast = train_variant(Variant::Fast, s, &data)?;
    let mut checks = run_checks(&fast, true);
    let plus = train_variant(Variant::Plus, s, &data)?;
    checks.extend(run_checks(&plus, false));
    Ok((checks, plus.model))
}

/// Coarse MACs at `k` co-visible topics with features spread evenly over
/// all topics of a `height × width` pair.
pub fn uniform_cost(cfg: &ModelConfig, height: usize, width: usize, k: usize) -> anyhow::Result<u64> {
    let topics = cfg.matcher.num_topics;
    let n = (height / 8) * (width / 8);
    let pops: Vec<usize> = (0..topics).map(|t| n / topics + usize::from(t < n % topics)).collect();
    let inputs = CostInputs {
        height_a: height,
        width_a: width,
        height_b: height,
        width_b: width,
        populations_a: pops.clone(),
        populations_b: pops,
        covisible: (0..k).collect(),
        num_matches: 0,
    };
    let mut cfg = cfg.clone();
    cfg.matcher.k_covis = k;
    Ok(count_ops(&cfg, &inputs)?.coarse_total())
}

pub fn covis_trend(s: &OverfitSettings, model: Option<Model>) -> anyhow::Result<Vec<Check>> {
    let data = pairs(s)?;
    let mut model = match model {
        Some(m) => m,
        None => train_variant(Variant::Plus, s, &data)?.model,
    };
    let rows = covis_sweep(&mut model, &data, &SWEEP_K, &EvalConfig::default())?;
    let mut checks = Vec::new();
    for r in &rows {
        checks.push(Check::info(
            format!("k_covis={}: AUC@3,5,10 / observed coarse MACs", r.k_covis),
            format!("{:.3?} / {}", r.auc, r.coarse_macs),
        ));
    }
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    checks.push(Check::new(
        "AUC@5 at k_covis=8 ≥ AUC@5 at k_covis=2",
        format!("{:.3} vs {:.3}", last.auc[1], first.auc[1]),
        last.auc[1] >= first.auc[1],
    ));
    let costs: Vec<u64> = SWEEP_K
        .iter()
        .map(|&k| uniform_cost(&model.cfg, 128, 128, k))
        .collect::<anyhow::Result<_>>()?;
    checks.push(Check::new(
        "analytic coarse MACs strictly increase with k_covis",
        format!("{costs:?}"),
        costs.windows(2).all(|w| w[1] > w[0]),
    ));
    Ok(checks)
}
