//! Optimization loop over synthetic pairs.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::evaluator::{evaluate_pairs, EvalConfig, EvalError};
use crate::losses::{
    coarse_feature_loss, fine_epipolar_loss, topic_matching_loss, total_loss_tensor, LossError, LossWeights,
    SupervisionBundle, LOG_EPSILON,
};
use crate::model::{Model, ModelConfig, ModelError};
use crate::nn::{ForwardCtx, Mode};
use crate::optim::{clip_global_norm, cosine_lr, Adam, AdamConfig};
use crate::synth_data::{load_pair, sha256_hex, DatasetManifest, ScenePair, Split, SynthError};
use crate::topic_matcher::{CoarseMatchSet, Variant};

pub const REPORT_FILE: &str = "train_log.jsonl";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const DUMP_FILE: &str = "nonfinite_dump.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {component} loss on pair {pair_id} at step {step}")]
    NonFiniteLoss { pair_id: usize, step: u64, component: String },
    #[error("parameter {0} became non-finite")]
    NonFiniteParameter(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no trainable pairs")]
    NoPairs,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which manifest pairs are optimized on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainOn {
    Train,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Pairs whose gradients are averaged into one update.
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub grad_clip: f64,
    /// Stop after this many updates.
    pub max_steps: Option<u64>,
    /// Ground-truth coarse pairs refined per step.
    pub max_fine_matches: usize,
    pub n_negatives: usize,
    pub train_on: TrainOn,
    /// Epochs between validation runs; 0 disables validation.
    pub validate_every: usize,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            batch_size: 1,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            grad_clip: 1.0,
            max_steps: None,
            max_fine_matches: 64,
            n_negatives: 5,
            train_on: TrainOn::Train,
            validate_every: 1,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::Config("grad_clip must be positive".into()));
        }
        if self.n_negatives == 0 {
            return Err(TrainError::Config("n_negatives must be at least 1".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Loss components of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub pair_id: usize,
    pub total: f64,
    pub coarse_feature: f64,
    pub topic: f64,
    pub fine: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub variant: Variant,
    pub lr: f64,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_coarse_feature: f64,
    pub mean_topic: f64,
    pub mean_fine: Option<f64>,
    /// Spread of the per-step totals and topic losses within the epoch.
    pub std_total: f64,
    pub std_topic: f64,
    pub val_auc: Option<[f64; 3]>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub skipped_pairs: usize,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    pair_id: usize,
    step: u64,
    epoch: usize,
    component: &'a str,
    coarse_feature: f64,
    topic: f64,
    fine: Option<f64>,
    num_gt: usize,
    model: &'a ModelConfig,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// SHA-256 over every parameter's raw values, in name order.
pub fn parameter_digest(model: &Model) -> Result<String> {
    let mut bytes = Vec::new();
    for (name, var) in model.store.params() {
        bytes.extend_from_slice(name.as_bytes());
        for v in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(sha256_hex(&bytes))
}

/// Population standard deviation; zero for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Deterministic visiting order of `n` pairs in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
}

struct LossValues {
    coarse_feature: f64,
    topic: f64,
    fine: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        Self::from_model(model, cfg)
    }

    pub fn from_model(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let named = model.store.params().iter().map(|(n, v)| (n.clone(), v.clone())).collect();
        let adam = Adam::new(named, cfg.adam)?;
        Ok(Self { cfg, model, adam, step: 0 })
    }

    fn pair_loss(&self, ctx: &ForwardCtx, pair_id: usize, pair: &ScenePair, epoch: usize) -> Result<(Tensor, LossValues)> {
        let fwd = self.model.forward_coarse(ctx, &pair.image_a, &pair.image_b)?;
        let mut sup = SupervisionBundle::new(pair.gt_coarse.clone(), pair.fundamental);
        sup.n_negatives = self.cfg.n_negatives;
        sup.epsilon = LOG_EPSILON;
        let feat = coarse_feature_loss(&fwd.coarse.p_c, &sup.gt_coarse, sup.epsilon)?;
        let topic = ctx.with_rng(|rng| topic_matching_loss(&fwd.coarse.dist_a.theta, &fwd.coarse.dist_b.theta, &sup, rng))?;

        let mut chosen = pair.gt_coarse.clone();
        ctx.with_rng(|rng| chosen.shuffle(rng));
        chosen.truncate(self.cfg.max_fine_matches);
        chosen.sort_unstable();
        let fine_out = self.model.refine(ctx, &fwd, &CoarseMatchSet::from_index_pairs(&chosen))?;
        let fine = match (&fine_out.xa, &fine_out.xb) {
            (Some(xa), Some(xb)) => Some(fine_epipolar_loss(xa, xb, &pair.fundamental)?),
            _ => None,
        };

        let values = LossValues {
            coarse_feature: scalar(&feat)?,
            topic: scalar(&topic)?,
            fine: fine.as_ref().map(scalar).transpose()?,
        };
        let bad = [("coarse_feature", values.coarse_feature), ("topic", values.topic), ("fine", values.fine.unwrap_or(0.0))]
            .into_iter()
            .find(|(_, v)| !v.is_finite());
        if let Some((component, _)) = bad {
            return Err(self.non_finite(pair_id, epoch, component, &values, pair.gt_coarse.len()));
        }
        let total = total_loss_tensor(&feat, &topic, fine.as_ref(), self.cfg.loss)
            .map_err(|_| self.non_finite(pair_id, epoch, "total", &values, pair.gt_coarse.len()))?;
        Ok((total, values))
    }

    fn non_finite(&self, pair_id: usize, epoch: usize, component: &str, v: &LossValues, num_gt: usize) -> TrainError {
        log::error!("non-finite {component} loss on pair {pair_id}");
        LAST_DUMP.with(|d| {
            *d.borrow_mut() = serde_json::to_string_pretty(&NonFiniteDump {
                pair_id,
                step: self.step,
                epoch,
                component,
                coarse_feature: v.coarse_feature,
                topic: v.topic,
                fine: v.fine,
                num_gt,
                model: &self.model.cfg,
            })
            .ok();
        });
        TrainError::NonFiniteLoss { pair_id, step: self.step, component: component.into() }
    }

    /// One update from a batch of pairs. Pairs without ground truth are
    /// skipped; returns one record per used pair.
    pub fn train_step(&mut self, batch: &[(usize, &ScenePair)], epoch: usize) -> Result<Vec<StepRecord>> {
        let lr = cosine_lr(self.cfg.lr, epoch, self.cfg.epochs);
        let mut summed: Option<Vec<Option<Tensor>>> = None;
        let mut records = Vec::new();
        for (k, (id, pair)) in batch.iter().enumerate() {
            if pair.gt_coarse.is_empty() {
                log::warn!("pair {id} has no ground-truth matches, skipped");
                continue;
            }
            let ctx_seed = self.cfg.seed ^ (self.step.wrapping_mul(1_000_003) + k as u64 + 1);
            let ctx = ForwardCtx::new(Mode::Train, ctx_seed);
            let (total, loss) = self.pair_loss(&ctx, *id, pair, epoch)?;
            let grads = self.adam.collect(&total.backward()?);
            summed = Some(match summed {
                None => grads,
                Some(acc) => acc
                    .into_iter()
                    .zip(grads)
                    .map(|(a, g)| match (a, g) {
                        (Some(a), Some(g)) => (a + g).map(Some),
                        (a, g) => Ok(a.or(g)),
                    })
                    .collect::<candle_core::Result<_>>()?,
            });
            records.push(StepRecord {
                step: self.step,
                epoch,
                pair_id: *id,
                total: scalar(&total)?,
                coarse_feature: loss.coarse_feature,
                topic: loss.topic,
                fine: loss.fine,
                grad_norm: 0.0,
                lr,
            });
        }
        let Some(mut grads) = summed else { return Ok(records) };
        if records.len() > 1 {
            let scale = 1.0 / records.len() as f64;
            for g in grads.iter_mut().flatten() {
                *g = (&*g * scale)?;
            }
        }
        let norm = clip_global_norm(&mut grads, self.cfg.grad_clip)?;
        self.adam.apply(&grads, lr)?;
        self.step += 1;
        self.check_finite()?;
        for r in &mut records {
            r.grad_norm = norm;
        }
        Ok(records)
    }

    fn check_finite(&self) -> Result<()> {
        for (name, var) in self.model.store.params() {
            let s = var.as_tensor().sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Err(TrainError::NonFiniteParameter(name.clone()));
            }
        }
        Ok(())
    }

    /// Runs the configured number of epochs. With an output directory the
    /// epoch report, loss trace and checkpoints are written there.
    pub fn run(&mut self, train: &[(usize, ScenePair)], val: &[(usize, ScenePair)], out_dir: Option<&Path>) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(TrainError::NoPairs);
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            File::create(dir.join(REPORT_FILE))?;
            fs::write(dir.join(TRACE_FILE), "step,epoch,pair_id,total,coarse_feature,topic,fine,grad_norm,lr\n")?;
        }
        let mut report = TrainReport { epochs: Vec::new(), steps: Vec::new(), final_checkpoint: None, skipped_pairs: 0 };
        'epochs: for epoch in 0..self.cfg.epochs {
            let start = Instant::now();
            let order = epoch_order(train.len(), self.cfg.seed, epoch);
            let mut epoch_steps = Vec::new();
            for chunk in order.chunks(self.cfg.batch_size) {
                if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                    break;
                }
                let batch: Vec<(usize, &ScenePair)> = chunk.iter().map(|&i| (train[i].0, &train[i].1)).collect();
                let records = match self.train_step(&batch, epoch) {
                    Ok(r) => r,
                    Err(e @ TrainError::NonFiniteLoss { .. }) => {
                        if let Some(dir) = out_dir {
                            LAST_DUMP.with(|d| d.borrow().as_ref().map(|s| fs::write(dir.join(DUMP_FILE), s)).transpose())?;
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                report.skipped_pairs += batch.len() - records.len();
                if let Some(dir) = out_dir {
                    append_trace(&dir.join(TRACE_FILE), &records)?;
                    if self.cfg.checkpoint_every > 0 && !records.is_empty() && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                        save_checkpoint(&dir.join(format!("step_{:06}.ckpt", self.step)), &self.model, Some(&self.adam), self.step)?;
                    }
                }
                epoch_steps.extend(records);
            }
            if epoch_steps.is_empty() {
                break 'epochs;
            }
            let n = epoch_steps.len() as f64;
            let totals: Vec<f64> = epoch_steps.iter().map(|r| r.total).collect();
            let topics: Vec<f64> = epoch_steps.iter().map(|r| r.topic).collect();
            let fines: Vec<f64> = epoch_steps.iter().filter_map(|r| r.fine).collect();
            let val_auc = if self.cfg.validate_every > 0 && (epoch + 1) % self.cfg.validate_every == 0 && !val.is_empty() {
                Some(evaluate_pairs(Some(&self.model), val, &self.cfg.eval)?.auc)
            } else {
                None
            };
            let record = EpochRecord {
                epoch,
                variant: self.model.cfg.matcher.variant,
                lr: cosine_lr(self.cfg.lr, epoch, self.cfg.epochs),
                steps: epoch_steps.len(),
                mean_total: totals.iter().sum::<f64>() / n,
                mean_coarse_feature: epoch_steps.iter().map(|r| r.coarse_feature).sum::<f64>() / n,
                mean_topic: topics.iter().sum::<f64>() / n,
                mean_fine: (!fines.is_empty()).then(|| fines.iter().sum::<f64>() / fines.len() as f64),
                std_total: std_dev(&totals),
                std_topic: std_dev(&topics),
                val_auc,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!("epoch {epoch}: loss {:.4} ({} steps)", record.mean_total, record.steps);
            if let Some(dir) = out_dir {
                let mut f = fs::OpenOptions::new().append(true).open(dir.join(REPORT_FILE))?;
                writeln!(f, "{}", serde_json::to_string(&record)?)?;
            }
            report.epochs.push(record);
            report.steps.extend(epoch_steps);
        }
        if let Some(dir) = out_dir {
            let path = dir.join(FINAL_CHECKPOINT);
            save_checkpoint(&path, &self.model, Some(&self.adam), self.step)?;
            report.final_checkpoint = Some(path);
        }
        Ok(report)
    }
}

thread_local! {
    static LAST_DUMP: std::cell::RefCell<Option<String>> = const { std::cell::RefCell::new(None) };
}

fn append_trace(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    for r in records {
        let fine = r.fine.map(|v| v.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{},{},{},{},{},{}", r.step, r.epoch, r.pair_id, r.total, r.coarse_feature, r.topic, fine, r.grad_norm, r.lr)?;
    }
    Ok(())
}

/// Loads the manifest pairs selected by `cfg.train_on` plus the validation
/// split, trains from scratch and writes artifacts to `out_dir`.
pub fn train(manifest: &DatasetManifest, root: &Path, cfg: &TrainConfig, out_dir: &Path) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let load = |ids: Vec<usize>| -> Result<Vec<(usize, ScenePair)>> {
        ids.into_iter().map(|id| Ok((id, load_pair(manifest, root, id)?))).collect()
    };
    let train_ids = match cfg.train_on {
        TrainOn::Train => manifest.ids(Split::Train),
        TrainOn::All => manifest.pairs.iter().map(|p| p.id).collect(),
    };
    let train_pairs = load(train_ids)?;
    let val_pairs = load(manifest.ids(Split::Val))?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let report = trainer.run(&train_pairs, &val_pairs, Some(out_dir))?;
    Ok((trainer.model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{generate_scene_pair, SceneParams};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { model: ModelConfig::tiny(Variant::Fast), epochs: 1, validate_every: 0, ..TrainConfig::default() }
    }

    fn pairs(n: u64) -> Vec<(usize, ScenePair)> {
        let params = SceneParams { height: 64, width: 64, ..SceneParams::default() };
        (0..n).map(|s| (s as usize, generate_scene_pair(s, &params).unwrap())).collect()
    }

    #[test]
    fn config_guards() {
        assert!(TrainConfig { epochs: 0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..tiny_cfg() }.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn default_hyperparameters() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.model.matcher.num_topics, 100);
        assert_eq!(cfg.model.matcher.tau, 0.2);
        assert_eq!((cfg.loss.lambda_c, cfg.loss.lambda_f), (0.25, 0.25));
    }

    #[test]
    fn spread_of_step_losses() {
        assert_eq!(std_dev(&[3.0]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
        let partial: TrainConfig = serde_json::from_str(r#"{"lr": 0.5}"#).unwrap();
        assert_eq!(partial, TrainConfig { lr: 0.5, ..TrainConfig::default() });
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 3, 1);
        assert_eq!(a, epoch_order(10, 3, 1));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(10, 3, 2));
    }

    #[test]
    fn one_step_produces_finite_losses() {
        let data = pairs(1);
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let recs = t.train_step(&[(0, &data[0].1)], 0).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].total.is_finite());
        assert!(recs[0].fine.is_some());
        assert_eq!(t.step, 1);
    }

    #[test]
    fn validation_does_not_touch_parameters() {
        let data = pairs(2);
        let t = Trainer::new(tiny_cfg()).unwrap();
        let before = parameter_digest(&t.model).unwrap();
        evaluate_pairs(Some(&t.model), &data, &EvalConfig::default()).unwrap();
        assert_eq!(before, parameter_digest(&t.model).unwrap());
    }
}
