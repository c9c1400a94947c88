//! Homography accuracy and match statistics, the analytic multiply-
//! accumulate cost model, topic overlays and the co-visible topic sweep.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneParams, ImageTensor, COARSE_STRIDE};
use crate::geometry::{
    auc_at_thresholds, corner_error, estimate_homography_ransac, symmetric_epipolar_distance_floored,
    CorrespondenceSet, GeometryError, Point2,
};
use crate::model::{coarse_anchor, Model, ModelConfig, ModelError};
use crate::nn::{ForwardCtx, MacTally, Stage};
use crate::synth_data::ScenePair;
use crate::topic_matcher::{argmax, Variant};

pub const AUC_THRESHOLDS: [f64; 3] = [3.0, 5.0, 10.0];
pub const PRECISION_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("populations sum to {found}, expected {expected} features")]
    PopulationMismatch { expected: usize, found: usize },
    #[error("invalid evaluation configuration: {0}")]
    Config(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Which correspondences feed the homography estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchSource {
    Fine,
    Coarse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ransac_threshold: f64,
    pub ransac_iters: usize,
    pub ransac_seed: u64,
    /// Replace the matcher by exact ground-truth correspondences.
    pub oracle: bool,
    pub source: MatchSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ransac_threshold: 3.0, ransac_iters: 2000, ransac_seed: 0, oracle: false, source: MatchSource::Fine }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub id: usize,
    /// `None` when no homography could be estimated.
    pub corner_error: Option<f64>,
    pub num_coarse: usize,
    pub num_matches: usize,
    /// Fraction of matches with reprojection error below 1, 3 and 5 px.
    pub precision: [f64; 3],
    pub median_epipolar_fine: Option<f64>,
    pub median_epipolar_coarse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairEval>,
    /// AUC of the corner error at 3, 5 and 10 px.
    pub auc: [f64; 3],
    pub failures: usize,
    pub mean_matches: f64,
    pub mean_precision: [f64; 3],
    pub median_epipolar_fine: Option<f64>,
    pub stage_seconds: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Fraction of pairs whose fine matches have a strictly smaller median
    /// epipolar distance than their coarse matches.
    pub fn fine_beats_coarse_fraction(&self) -> f64 {
        let (mut wins, mut total) = (0usize, 0usize);
        for p in &self.pairs {
            if let (Some(f), Some(c)) = (p.median_epipolar_fine, p.median_epipolar_coarse) {
                total += 1;
                if f < c {
                    wins += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            wins as f64 / total as f64
        }
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Exact correspondences: every ground-truth A anchor and its image under
/// the true homography.
pub fn oracle_correspondences(pair: &ScenePair) -> Vec<(Point2, Point2)> {
    let cols = pair.image_a.width / COARSE_STRIDE;
    pair.gt_coarse
        .iter()
        .filter_map(|&(i, _)| {
            let x = coarse_anchor(i, cols);
            pair.homography.warp_point(x).ok().map(|y| (x, y))
        })
        .collect()
}

fn score_pair(
    id: usize,
    pair: &ScenePair,
    matches: &[(Point2, Point2)],
    coarse: &[(Point2, Point2)],
    fine: &[(Point2, Point2)],
    cfg: &EvalConfig,
) -> PairEval {
    let h = &pair.homography;
    let precision = PRECISION_THRESHOLDS.map(|eps| {
        if matches.is_empty() {
            return 0.0;
        }
        let good = matches
            .iter()
            .filter(|(a, b)| h.warp_point(*a).map(|p| ((p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2)).sqrt() < eps).unwrap_or(false))
            .count();
        good as f64 / matches.len() as f64
    });
    let corner = (|| {
        let (a, b): (Vec<Point2>, Vec<Point2>) = matches.iter().copied().unzip();
        let set = CorrespondenceSet::new(a, b).ok()?;
        let est = estimate_homography_ransac(&set, cfg.ransac_threshold, cfg.ransac_iters, cfg.ransac_seed).ok()?;
        corner_error(&est.homography, h, pair.image_a.width, pair.image_a.height).ok()
    })();
    let med = |m: &[(Point2, Point2)]| {
        let mut d: Vec<f64> = m.iter().map(|(a, b)| symmetric_epipolar_distance_floored(&pair.fundamental, *a, *b)).collect();
        median(&mut d)
    };
    PairEval {
        id,
        corner_error: corner,
        num_coarse: coarse.len(),
        num_matches: matches.len(),
        precision,
        median_epipolar_fine: med(fine),
        median_epipolar_coarse: med(coarse),
    }
}

/// Matches every pair (or uses the oracle), estimates homographies with
/// RANSAC and aggregates the metrics.
pub fn evaluate_pairs(model: Option<&Model>, pairs: &[(usize, ScenePair)], cfg: &EvalConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    if model.is_none() && !cfg.oracle {
        return Err(EvalError::Config("a model is required unless the oracle is used".into()));
    }
    let mut results = Vec::with_capacity(pairs.len());
    let mut seconds: BTreeMap<String, f64> = BTreeMap::new();
    let mut all_fine = Vec::new();
    for (id, pair) in pairs {
        let (matches, coarse, fine) = if cfg.oracle {
            let m = oracle_correspondences(pair);
            (m.clone(), m.clone(), m)
        } else {
            let model = model.expect("checked above");
            let ctx = ForwardCtx::eval();
            let out = model.match_pair(&ctx, &pair.image_a, &pair.image_b)?;
            for (stage, s) in ctx.stage_seconds() {
                *seconds.entry(stage.name().to_string()).or_default() += s;
            }
            let coarse: Vec<(Point2, Point2)> = out
                .coarse
                .pairs
                .iter()
                .map(|m| (coarse_anchor(m.i, out.grid_a.1), coarse_anchor(m.j, out.grid_b.1)))
                .collect();
            let fine: Vec<(Point2, Point2)> = out.fine.iter().map(|m| (m.xa, m.xb)).collect();
            let matches = match cfg.source {
                MatchSource::Fine => fine.clone(),
                MatchSource::Coarse => coarse.clone(),
            };
            (matches, coarse, fine)
        };
        for (a, b) in &fine {
            all_fine.push(symmetric_epipolar_distance_floored(&pair.fundamental, *a, *b));
        }
        results.push(score_pair(*id, pair, &matches, &coarse, &fine, cfg));
    }
    let errors: Vec<f64> = results.iter().map(|r| r.corner_error.unwrap_or(f64::INFINITY)).collect();
    let auc = auc_at_thresholds(&errors, &AUC_THRESHOLDS)?;
    let n = results.len() as f64;
    let mean_precision = [0, 1, 2].map(|k| results.iter().map(|r| r.precision[k]).sum::<f64>() / n);
    Ok(EvalReport {
        failures: results.iter().filter(|r| r.corner_error.is_none()).count(),
        mean_matches: results.iter().map(|r| r.num_matches as f64).sum::<f64>() / n,
        auc: [auc[0], auc[1], auc[2]],
        mean_precision,
        median_epipolar_fine: median(&mut all_fine),
        stage_seconds: seconds,
        pairs: results,
    })
}

/// Shapes and populations the cost model is evaluated at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub height_a: usize,
    pub width_a: usize,
    pub height_b: usize,
    pub width_b: usize,
    /// Members of each topic in image A (length K, summing to N_A).
    pub populations_a: Vec<usize>,
    pub populations_b: Vec<usize>,
    /// Co-visible topics; only used by the plus variant.
    pub covisible: Vec<usize>,
    /// Coarse matches refined by the fine stage.
    pub num_matches: usize,
}

impl CostInputs {
    /// Same-size images with every feature in topic 0.
    pub fn single_topic(height: usize, width: usize, k: usize, num_matches: usize) -> Self {
        let n = (height / COARSE_STRIDE) * (width / COARSE_STRIDE);
        let mut pops = vec![0; k];
        if k > 0 {
            pops[0] = n;
        }
        Self {
            height_a: height,
            width_a: width,
            height_b: height,
            width_b: width,
            populations_a: pops.clone(),
            populations_b: pops,
            covisible: vec![0],
            num_matches,
        }
    }
}

/// Multiply-accumulate counts per stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub stages: BTreeMap<Stage, u64>,
}

impl CostModel {
    pub fn get(&self, stage: Stage) -> u64 {
        self.stages.get(&stage).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.stages.values().sum()
    }

    /// Pooling, topic inference, merging/augmentation and dual softmax.
    pub fn coarse_total(&self) -> u64 {
        [Stage::ContextPooling, Stage::TopicInference, Stage::ContextMerging, Stage::TopicAugmentation, Stage::DualSoftmax]
            .iter()
            .map(|s| self.get(*s))
            .sum()
    }

    pub fn from_tally(tally: &MacTally) -> Self {
        Self { stages: tally.iter().collect() }
    }
}

/// MACs of a pre-norm attention block with `nq` queries and `nk` keys.
pub fn attention_block_macs(nq: u64, nk: u64, d: u64, ffn_hidden: u64) -> u64 {
    2 * nq * d * d + 2 * nk * d * d + 2 * nq * nk * d + 2 * nq * d * ffn_hidden
}

/// MACs of one mixer block over `patches` patches of `np` tokens.
pub fn mixer_block_macs(patches: u64, np: u64, d: u64, token_hidden: u64, channel_hidden: u64) -> u64 {
    2 * patches * np * d * (token_hidden + channel_hidden)
}

/// Closed-form multiply-accumulate counts of one forward pass of a pair.
pub fn count_ops(cfg: &ModelConfig, inputs: &CostInputs) -> Result<CostModel> {
    let k = cfg.matcher.num_topics;
    let grid = |h: usize, w: usize| (h / COARSE_STRIDE) * (w / COARSE_STRIDE);
    let n_a = grid(inputs.height_a, inputs.width_a);
    let n_b = grid(inputs.height_b, inputs.width_b);
    for (pops, n) in [(&inputs.populations_a, n_a), (&inputs.populations_b, n_b)] {
        let found: usize = pops.iter().sum();
        if found != n {
            return Err(EvalError::PopulationMismatch { expected: n, found });
        }
        if pops.len() != k {
            return Err(EvalError::Config(format!("{} populations given for {k} topics", pops.len())));
        }
    }
    if inputs.covisible.iter().any(|&t| t >= k) {
        return Err(EvalError::Config("co-visible topic index out of range".into()));
    }
    let d = cfg.coarse_dim() as u64;
    let hf = cfg.ffn_width() as u64;
    let (k, n_a, n_b) = (k as u64, n_a as u64, n_b as u64);
    let mut stages = BTreeMap::new();

    let backbone = |h: usize, w: usize| if h == 0 || w == 0 { 0 } else { BackboneParams::macs(&cfg.backbone, h, w) };
    stages.insert(Stage::Backbone, backbone(inputs.height_a, inputs.width_a) + backbone(inputs.height_b, inputs.width_b));

    let pool = |n: u64| if n == 0 { 0 } else { attention_block_macs(k, n, d, hf) };
    stages.insert(Stage::ContextPooling, pool(n_a) + pool(n_b));
    stages.insert(Stage::TopicInference, (n_a + n_b) * k * d);

    let (merging, augmentation) = match cfg.matcher.variant {
        Variant::Fast => {
            let merge = |n: u64| n * k * d + n * d * d + 2 * n * d * hf;
            (merge(n_a) + merge(n_b), 0)
        }
        Variant::Plus => {
            let mut total = 0;
            for &t in &inputs.covisible {
                let (a, b) = (inputs.populations_a[t] as u64, inputs.populations_b[t] as u64);
                if a == 0 || b == 0 {
                    continue;
                }
                total += attention_block_macs(a, a, d, hf)
                    + attention_block_macs(b, b, d, hf)
                    + attention_block_macs(a, b, d, hf)
                    + attention_block_macs(b, a, d, hf);
            }
            (0, total)
        }
    };
    stages.insert(Stage::ContextMerging, merging);
    stages.insert(Stage::TopicAugmentation, augmentation);
    stages.insert(Stage::DualSoftmax, n_a * n_b * d);

    let m = inputs.num_matches as u64;
    let f = &cfg.fine;
    let (np, df) = (f.num_cells() as u64, cfg.backbone.fine as u64);
    let (th, ch) = (f.token_hidden as u64, f.channel_hidden as u64);
    let mut fine = 0;
    if m > 0 {
        fine += 2 * mixer_block_macs(2 * m, np, df, th, ch);
        if !f.fixed_center {
            fine += 2 * mixer_block_macs(m, np, df, th, ch) + m * np * df;
        }
        // Two soft-argmax expectations and the in-patch correlation.
        fine += 2 * (m * np * 2 + m * np * df) + m * np * df;
    }
    stages.insert(Stage::FineRefinement, fine);
    Ok(CostModel { stages })
}

/// Number of features carrying each of `k` labels.
pub fn populations(labels: &[usize], k: usize) -> Vec<usize> {
    let mut pops = vec![0; k];
    for &l in labels {
        pops[l] += 1;
    }
    pops
}

/// Argmax topic of each coarse cell.
pub fn topic_index_map(theta: &[Vec<f64>]) -> Vec<usize> {
    theta.iter().map(|r| argmax(r)).collect()
}

/// Per-cell topic map rendered at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicOverlay {
    pub width: usize,
    pub height: usize,
    /// Topic index of every pixel.
    pub index: Vec<u8>,
    /// RGB overlay, half image and half topic color.
    pub rgb: Vec<u8>,
    pub palette: Vec<[u8; 3]>,
}

/// Deterministic palette of `k` colors.
pub fn palette(k: usize, seed: u64) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]).collect()
}

/// Argmax topic per coarse cell, upsampled by nearest neighbor and blended
/// with the image at factor 0.5.
pub fn render_topic_overlay(theta: &[Vec<f64>], image: &ImageTensor, palette_seed: u64) -> Result<TopicOverlay> {
    let (rows, cols) = image.coarse_dims();
    if theta.len() != rows * cols {
        return Err(EvalError::Config(format!("{} topic rows for a {rows}×{cols} grid", theta.len())));
    }
    let k = theta.first().map_or(0, |r| r.len());
    if k > 256 {
        return Err(EvalError::Config("indexed images support at most 256 topics".into()));
    }
    let cells = topic_index_map(theta);
    let colors = palette(k.max(1), palette_seed);
    let (h, w) = (image.height, image.width);
    let mut index = vec![0u8; h * w];
    let mut rgb = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let t = cells[(y / COARSE_STRIDE) * cols + x / COARSE_STRIDE];
            index[y * w + x] = t as u8;
            let g = image.at(x, y).clamp(0.0, 1.0) * 255.0;
            for c in 0..3 {
                rgb[(y * w + x) * 3 + c] = (0.5 * g + 0.5 * colors[t][c] as f32).round() as u8;
            }
        }
    }
    Ok(TopicOverlay { width: w, height: h, index, rgb, palette: colors })
}

fn pnm(path: &Path, bytes: &[u8], w: usize, h: usize, subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(subtype)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(())
}

pub fn write_pgm_bytes(path: &Path, bytes: &[u8], w: usize, h: usize) -> Result<()> {
    pnm(path, bytes, w, h, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

pub fn write_ppm_bytes(path: &Path, bytes: &[u8], w: usize, h: usize) -> Result<()> {
    pnm(path, bytes, w, h, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

impl TopicOverlay {
    /// Writes `<stem>_topics.pgm` (index map) and `<stem>_overlay.ppm`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_pgm_bytes(&dir.join(format!("{stem}_topics.pgm")), &self.index, self.width, self.height)?;
        write_ppm_bytes(&dir.join(format!("{stem}_overlay.ppm")), &self.rgb, self.width, self.height)
    }

    pub fn write_palette(&self, path: &Path) -> Result<()> {
        let entries: Vec<serde_json::Value> = self
            .palette
            .iter()
            .enumerate()
            .map(|(k, c)| serde_json::json!({ "topic": k, "rgb": c }))
            .collect();
        fs::write(path, serde_json::to_string_pretty(&entries)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_covis: usize,
    pub auc: [f64; 3],
    /// Coarse-stage MACs summed over all pairs at the observed populations.
    pub coarse_macs: u64,
}

/// Re-evaluates a plus-variant model at each co-visible topic count.
pub fn covis_sweep(model: &mut Model, pairs: &[(usize, ScenePair)], k_values: &[usize], cfg: &EvalConfig) -> Result<Vec<SweepRow>> {
    if model.cfg.matcher.variant != Variant::Plus {
        return Err(EvalError::Config("the co-visible sweep requires a plus-variant model".into()));
    }
    let k_topics = model.cfg.matcher.num_topics;
    if let Some(&bad) = k_values.iter().find(|&&k| k == 0 || k > k_topics) {
        return Err(EvalError::Config(format!("k_covis must lie in 1..={k_topics}, got {bad}")));
    }
    let original = model.cfg.matcher.k_covis;
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        model.cfg.matcher.k_covis = k;
        let result = (|| -> Result<SweepRow> {
            let report = evaluate_pairs(Some(model), pairs, cfg)?;
            let mut macs = 0;
            for (_, pair) in pairs {
                let out = model.match_pair(&ForwardCtx::eval(), &pair.image_a, &pair.image_b)?;
                macs += count_ops(&model.cfg, &observed_inputs(pair, &out, k_topics))?.coarse_total();
            }
            Ok(SweepRow { k_covis: k, auc: report.auc, coarse_macs: macs })
        })();
        match result {
            Ok(row) => rows.push(row),
            Err(e) => {
                model.cfg.matcher.k_covis = original;
                return Err(e);
            }
        }
    }
    model.cfg.matcher.k_covis = original;
    Ok(rows)
}

/// Cost-model inputs matching an actual eval-mode run.
pub fn observed_inputs(pair: &ScenePair, out: &crate::model::PairMatches, k: usize) -> CostInputs {
    let pops = |labels: &Option<Vec<usize>>, theta: &[Vec<f64>]| match labels {
        Some(l) => populations(l, k),
        None => populations(&topic_index_map(theta), k),
    };
    CostInputs {
        height_a: pair.image_a.height,
        width_a: pair.image_a.width,
        height_b: pair.image_b.height,
        width_b: pair.image_b.width,
        populations_a: pops(&out.labels_a, &out.theta_a),
        populations_b: pops(&out.labels_b, &out.theta_b),
        covisible: out.covisible.clone().unwrap_or_default(),
        num_matches: out.fine.len(),
    }
}

/// Runs `f` and returns its result with the elapsed seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Stage names and counts in pipeline order.
pub fn stage_rows(cost: &CostModel) -> Vec<(String, u64)> {
    Stage::ALL.iter().map(|s| (s.name().to_string(), cost.get(*s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{generate_scene_pair, SceneParams};

    #[test]
    fn oracle_matches_give_perfect_auc() {
        let params = SceneParams { height: 64, width: 64, ..SceneParams::default() };
        let pairs: Vec<_> = (0..3).map(|s| (s as usize, generate_scene_pair(s, &params).unwrap())).collect();
        let report = evaluate_pairs(None, &pairs, &EvalConfig { oracle: true, ..EvalConfig::default() }).unwrap();
        assert!(report.auc[0] > 0.99, "{:?}", report.auc);
        assert_eq!(report.failures, 0);
    }

    #[test]
    fn no_matches_means_zero_auc() {
        let errors = vec![f64::INFINITY; 4];
        assert_eq!(auc_at_thresholds(&errors, &AUC_THRESHOLDS).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn empty_grid_costs_nothing() {
        let cfg = ModelConfig::tiny(Variant::Plus);
        let inputs = CostInputs {
            height_a: 0,
            width_a: 0,
            height_b: 0,
            width_b: 0,
            populations_a: vec![0; 16],
            populations_b: vec![0; 16],
            covisible: vec![],
            num_matches: 0,
        };
        assert_eq!(count_ops(&cfg, &inputs).unwrap().total(), 0);
    }

    #[test]
    fn population_mismatch_is_rejected() {
        let cfg = ModelConfig::tiny(Variant::Fast);
        let mut inputs = CostInputs::single_topic(64, 64, 16, 0);
        inputs.populations_a[0] -= 1;
        assert!(matches!(count_ops(&cfg, &inputs), Err(EvalError::PopulationMismatch { .. })));
    }

    #[test]
    fn fast_is_cheaper_with_one_dominant_topic() {
        let mut fast = ModelConfig::tiny(Variant::Fast);
        fast.matcher.num_topics = 100;
        let mut plus = fast.clone();
        plus.matcher.variant = Variant::Plus;
        let inputs = CostInputs::single_topic(512, 512, 100, 0);
        let f = count_ops(&fast, &inputs).unwrap().coarse_total();
        let p = count_ops(&plus, &inputs).unwrap().coarse_total();
        assert!(f < p);
    }

    #[test]
    fn overlay_tie_and_one_hot() {
        let img = ImageTensor::new(vec![0.5; 16 * 16], 16, 16).unwrap();
        let uniform = vec![vec![0.25; 4]; 4];
        let o = render_topic_overlay(&uniform, &img, 1).unwrap();
        assert!(o.index.iter().all(|&v| v == 0));
        let hot: Vec<Vec<f64>> = (0..4).map(|c| (0..4).map(|k| if k == 3 - c { 1.0 } else { 0.0 }).collect()).collect();
        let o = render_topic_overlay(&hot, &img, 1).unwrap();
        assert_eq!(o.index[0], 3);
        assert_eq!(o.index[15], 2);
        assert_eq!(o.index[15 * 16], 1);
        assert_eq!(o.index[255], 0);
        assert_eq!(render_topic_overlay(&hot, &img, 1).unwrap(), o);
    }
}
