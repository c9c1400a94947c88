//! Coarse matching with latent topics.
//!
//! A fixed bank of `K` topic embeddings attends to the coarse features of an
//! image (context pooling) to produce image-conditioned topics. Each feature
//! gets a distribution over topics from its dot products with those topics.
//! Topic context is then merged back into the features, either through the
//! expectation over topics (`fast`) or through self/cross attention inside
//! sampled co-visible topics (`plus`). Matching probabilities come from a
//! dual softmax; coarse matches are its thresholded mutual nearest neighbors.

use candle_core::{Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::FeaturePyramid;
use crate::nn::{
    index_tensor, matmul, softmax_last, to_f64_rows, to_f64_vec, AttentionBlock, FeedForward, ForwardCtx, Init,
    LayerNorm, Linear, Mode, ParamStore, Stage,
};

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid matcher configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, MatcherError>;

/// Context-merging strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Expectation-weighted merge of pooled topics into every feature.
    Fast,
    /// Self/cross attention restricted to features sharing a co-visible topic.
    Plus,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fast" => Ok(Variant::Fast),
            "plus" => Ok(Variant::Plus),
            other => Err(format!("unknown variant '{other}' (expected fast or plus)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Fast => "fast",
            Variant::Plus => "plus",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub num_topics: usize,
    pub tau: f64,
    pub k_covis: usize,
    pub variant: Variant,
    pub dual_softmax_temperature: f64,
    pub attention_heads: usize,
    pub mc_samples: usize,
    pub dropout_rate: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            num_topics: 100,
            tau: 0.2,
            k_covis: 8,
            variant: Variant::Fast,
            dual_softmax_temperature: 0.1,
            attention_heads: 4,
            mc_samples: 1,
            dropout_rate: 0.1,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MatcherError::Config(m));
        if self.num_topics == 0 {
            return fail("num_topics must be at least 1".into());
        }
        if self.k_covis == 0 || self.k_covis > self.num_topics {
            return fail(format!("k_covis must lie in 1..={}, got {}", self.num_topics, self.k_covis));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.dual_softmax_temperature > 0.0) {
            return fail("dual_softmax_temperature must be positive".into());
        }
        if self.attention_heads == 0 {
            return fail("attention_heads must be positive".into());
        }
        if self.mc_samples != 1 {
            return fail("only a single topic sample per step is supported".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Learnable global topic embeddings `T` (`K × D`).
#[derive(Clone)]
pub struct TopicBank {
    pub global: Var,
    pub dropout_rate: f64,
}

impl TopicBank {
    pub fn new(store: &mut ParamStore, num_topics: usize, dim: usize, dropout_rate: f64) -> candle_core::Result<Self> {
        let global = store.param("topics.bank", &[num_topics, dim], Init::Normal(1.0 / (dim as f64).sqrt()))?;
        Ok(Self { global, dropout_rate })
    }

    pub fn num_topics(&self) -> usize {
        self.global.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.global.dims()[1]
    }

    /// Bank rows after topic dropout: in training mode each row is zeroed
    /// with probability `dropout_rate` and survivors are rescaled.
    pub fn rows(&self, ctx: &ForwardCtx) -> candle_core::Result<Tensor> {
        let t = self.global.as_tensor().clone();
        if ctx.mode != Mode::Train || self.dropout_rate == 0.0 {
            return Ok(t);
        }
        let keep = 1.0 - self.dropout_rate;
        let k = self.num_topics();
        let mask: Vec<f64> = ctx.with_rng(|rng| {
            (0..k)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        });
        let mask = Tensor::from_vec(mask, (k, 1), t.device())?.to_dtype(t.dtype())?;
        t.broadcast_mul(&mask)
    }
}

/// Image-conditioned topics `T̂` (`K × D`).
#[derive(Debug, Clone)]
pub struct PooledTopics {
    pub local: Tensor,
    pub source_image_id: usize,
}

/// Per-feature topic distributions `θ` (`N × K`) and their normalized sum.
#[derive(Debug, Clone)]
pub struct TopicDistribution {
    pub theta: Tensor,
    pub image_level: Tensor,
}

impl TopicDistribution {
    pub fn theta_rows(&self) -> candle_core::Result<Vec<Vec<f64>>> {
        to_f64_rows(&self.theta)
    }

    pub fn image_level_vec(&self) -> candle_core::Result<Vec<f64>> {
        to_f64_vec(&self.image_level)
    }
}

/// One coarse correspondence between flat cell indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

/// One-to-one coarse matches with confidence at least `τ`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatchSet {
    pub pairs: Vec<CoarseMatch>,
}

impl CoarseMatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn from_index_pairs(pairs: &[(usize, usize)]) -> Self {
        Self {
            pairs: pairs.iter().map(|&(i, j)| CoarseMatch { i, j, confidence: 1.0 }).collect(),
        }
    }
}

/// `F + W·E[T̂]` followed by a pre-norm feed-forward sublayer, where the
/// attention weights of the merge are the topic distribution itself.
#[derive(Clone)]
pub struct MergeLayer {
    pub proj: Linear,
    pub norm_ff: LayerNorm,
    pub ffn: FeedForward,
    pub feed_forward: bool,
}

impl MergeLayer {
    pub fn new(store: &mut ParamStore, dim: usize, hidden: usize) -> candle_core::Result<Self> {
        Ok(Self {
            proj: Linear::with_std(store, "topics.merge.proj", dim, dim, false, 0.5 / (dim as f64).sqrt())?,
            norm_ff: LayerNorm::new(store, "topics.merge.norm_ff", dim)?,
            ffn: FeedForward::new(store, "topics.merge.ffn", dim, hidden)?,
            feed_forward: true,
        })
    }
}

/// Topic-matcher parameters. Only the layers of the configured variant are
/// allocated.
#[derive(Clone)]
pub struct TopicMatcherParams {
    pub bank: TopicBank,
    pub pool: AttentionBlock,
    pub merge: Option<MergeLayer>,
    pub self_block: Option<AttentionBlock>,
    pub cross_block: Option<AttentionBlock>,
}

impl TopicMatcherParams {
    pub fn new(store: &mut ParamStore, cfg: &MatcherConfig, dim: usize, ffn_hidden: usize) -> Result<Self> {
        cfg.validate()?;
        let bank = TopicBank::new(store, cfg.num_topics, dim, cfg.dropout_rate)?;
        let pool = AttentionBlock::new(store, "topics.pool", dim, cfg.attention_heads, ffn_hidden)?;
        let (merge, self_block, cross_block) = match cfg.variant {
            Variant::Fast => (Some(MergeLayer::new(store, dim, ffn_hidden)?), None, None),
            Variant::Plus => (
                None,
                Some(AttentionBlock::new(store, "topics.self", dim, cfg.attention_heads, ffn_hidden)?),
                Some(AttentionBlock::new(store, "topics.cross", dim, cfg.attention_heads, ffn_hidden)?),
            ),
        };
        Ok(Self { bank, pool, merge, self_block, cross_block })
    }
}

fn check_dim(f: &Tensor, dim: usize) -> Result<usize> {
    let (n, d) = f.dims2()?;
    if d != dim {
        return Err(MatcherError::Shape(format!("feature width {d} does not match topic width {dim}")));
    }
    Ok(n)
}

/// Cross attention with the (possibly dropped-out) bank rows as queries and
/// the coarse tokens `F` (`N × D`) as keys and values.
pub fn context_pool(
    ctx: &ForwardCtx,
    bank: &TopicBank,
    pool: &AttentionBlock,
    f: &Tensor,
    source_image_id: usize,
) -> Result<PooledTopics> {
    let n = check_dim(f, bank.dim())?;
    if n == 0 {
        return Err(MatcherError::Shape("cannot pool topics from an empty feature map".into()));
    }
    ctx.set_stage(Stage::ContextPooling);
    let t = bank.rows(ctx)?;
    let local = pool.forward(ctx, &t, f)?;
    Ok(PooledTopics { local, source_image_id })
}

/// `θ_{i,k} = softmax_k ⟨T̂_k, F_i⟩`; the image-level distribution is the
/// column mean of `θ`.
pub fn infer_topic_distribution(ctx: &ForwardCtx, pooled: &PooledTopics, f: &Tensor) -> Result<TopicDistribution> {
    let dim = pooled.local.dim(1)?;
    let n = check_dim(f, dim)?;
    ctx.set_stage(Stage::TopicInference);
    let logits = matmul(ctx, f, &pooled.local.t()?)?;
    let theta = softmax_last(&logits)?;
    let image_level = (theta.sum(0)? / n as f64)?;
    Ok(TopicDistribution { theta, image_level })
}

/// Probability that two features share some topic, and its complement.
pub fn coassign_probability(theta_i: &[f64], theta_j: &[f64]) -> (f64, f64) {
    let p_same: f64 = theta_i.iter().zip(theta_j).map(|(a, b)| a * b).sum();
    let p_same = p_same.clamp(0.0, 1.0);
    (p_same, 1.0 - p_same)
}

/// The `k_covis` topics with the largest product of image-level
/// probabilities, best first; ties go to the lower topic index.
pub fn covisible_topics(image_a: &[f64], image_b: &[f64], k_covis: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = image_a.iter().zip(image_b).map(|(a, b)| a * b).enumerate().collect();
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    scored.into_iter().take(k_covis).map(|(k, _)| k).collect()
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// One topic label per feature: a categorical draw in training mode, the
/// arg-max in eval mode.
pub fn assign_topics(theta: &[Vec<f64>], ctx: &ForwardCtx) -> Vec<usize> {
    match ctx.mode {
        Mode::Eval => theta.iter().map(|r| argmax(r)).collect(),
        Mode::Train => ctx.with_rng(|rng| theta.iter().map(|r| sample_categorical(r, rng.random::<f64>())).collect()),
    }
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = k;
        }
        acc += p;
        if target < acc {
            return k;
        }
    }
    last_positive
}

/// Topics skipped by in-topic augmentation and the member counts of each
/// augmented topic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentDiagnostics {
    /// Co-visible topics without members in at least one image.
    pub empty_topics: Vec<usize>,
    /// `(topic, members in A, members in B)` for every augmented topic.
    pub populations: Vec<(usize, usize, usize)>,
}

/// For every co-visible topic, self attention within each image's member
/// set followed by cross attention between the two sets. Features whose
/// label is not co-visible are returned unchanged.
#[allow(clippy::too_many_arguments)]
pub fn in_topic_augment(
    ctx: &ForwardCtx,
    f_a: &Tensor,
    f_b: &Tensor,
    labels_a: &[usize],
    labels_b: &[usize],
    covis: &[usize],
    self_block: &AttentionBlock,
    cross_block: &AttentionBlock,
) -> Result<(Tensor, Tensor, AugmentDiagnostics)> {
    let (na, nb) = (f_a.dim(0)?, f_b.dim(0)?);
    if labels_a.len() != na || labels_b.len() != nb {
        return Err(MatcherError::Shape("one topic label per feature is required".into()));
    }
    if covis.is_empty() {
        return Err(MatcherError::Config("at least one co-visible topic is required".into()));
    }
    ctx.set_stage(Stage::TopicAugmentation);
    let mut diag = AugmentDiagnostics::default();
    // Final row k of each image is either the original row or a row of the
    // concatenated updates.
    let mut source_a: Vec<usize> = (0..na).collect();
    let mut source_b: Vec<usize> = (0..nb).collect();
    let mut updates_a = Vec::new();
    let mut updates_b = Vec::new();
    let (mut off_a, mut off_b) = (na, nb);
    for &topic in covis {
        let idx_a: Vec<usize> = (0..na).filter(|&i| labels_a[i] == topic).collect();
        let idx_b: Vec<usize> = (0..nb).filter(|&j| labels_b[j] == topic).collect();
        if idx_a.is_empty() || idx_b.is_empty() {
            diag.empty_topics.push(topic);
            continue;
        }
        diag.populations.push((topic, idx_a.len(), idx_b.len()));
        let sub_a = f_a.index_select(&index_tensor(&idx_a)?, 0)?;
        let sub_b = f_b.index_select(&index_tensor(&idx_b)?, 0)?;
        let self_a = self_block.forward(ctx, &sub_a, &sub_a)?;
        let self_b = self_block.forward(ctx, &sub_b, &sub_b)?;
        let cross_a = cross_block.forward(ctx, &self_a, &self_b)?;
        let cross_b = cross_block.forward(ctx, &self_b, &self_a)?;
        for (r, &i) in idx_a.iter().enumerate() {
            source_a[i] = off_a + r;
        }
        for (r, &j) in idx_b.iter().enumerate() {
            source_b[j] = off_b + r;
        }
        off_a += idx_a.len();
        off_b += idx_b.len();
        updates_a.push(cross_a);
        updates_b.push(cross_b);
    }
    let scatter = |f: &Tensor, updates: Vec<Tensor>, source: &[usize]| -> Result<Tensor> {
        if updates.is_empty() {
            return Ok(f.clone());
        }
        let mut parts = vec![f.clone()];
        parts.extend(updates);
        let all = Tensor::cat(&parts, 0)?;
        Ok(all.index_select(&index_tensor(source)?, 0)?)
    };
    let out_a = scatter(f_a, updates_a, &source_a)?;
    let out_b = scatter(f_b, updates_b, &source_b)?;
    Ok((out_a, out_b, diag))
}

/// Result of the expectation merge.
#[derive(Debug, Clone)]
pub struct MergedFeatures {
    pub features: Tensor,
    /// `E_i[T̂] = Σ_k θ_{i,k} T̂_k` (`N × D`).
    pub context: Tensor,
}

/// Adds the expected topic embedding under each feature's topic
/// distribution, projected by `W`, then applies the feed-forward sublayer.
pub fn merge_context(
    ctx: &ForwardCtx,
    layer: &MergeLayer,
    f: &Tensor,
    pooled: &PooledTopics,
    dist: &TopicDistribution,
) -> Result<MergedFeatures> {
    let (k, dim) = pooled.local.dims2()?;
    let n = check_dim(f, dim)?;
    let (tn, tk) = dist.theta.dims2()?;
    if tn != n || tk != k {
        return Err(MatcherError::Shape(format!("θ is {tn}×{tk}, expected {n}×{k}")));
    }
    ctx.set_stage(Stage::ContextMerging);
    let context = matmul(ctx, &dist.theta, &pooled.local)?;
    let mut out = (f + layer.proj.forward(ctx, &context)?)?;
    if layer.feed_forward {
        out = (&out + layer.ffn.forward(ctx, &layer.norm_ff.forward(&out)?)?)?;
    }
    Ok(MergedFeatures { features: out, context })
}

/// `P = softmax_rows(S) ⊙ softmax_cols(S)` with `S = F_A F_Bᵀ / temperature`.
pub fn dual_softmax(ctx: &ForwardCtx, f_a: &Tensor, f_b: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(MatcherError::Config("temperature must be positive".into()));
    }
    ctx.set_stage(Stage::DualSoftmax);
    let s = (matmul(ctx, f_a, &f_b.t()?)? / temperature)?;
    let rows = softmax_last(&s)?;
    let cols = softmax_last(&s.t()?)?.t()?;
    Ok((rows * cols)?)
}

/// Mutual nearest neighbors of `p` (row-major `rows × cols`) with
/// probability at least `tau`; arg-max ties go to the lower index.
pub fn extract_coarse_matches(p: &[f64], rows: usize, cols: usize, tau: f64) -> CoarseMatchSet {
    assert_eq!(p.len(), rows * cols, "matching matrix has the wrong size");
    if rows == 0 || cols == 0 {
        return CoarseMatchSet::default();
    }
    let row_best: Vec<usize> = (0..rows).map(|i| argmax(&p[i * cols..(i + 1) * cols])).collect();
    let mut col_best = vec![0usize; cols];
    for (j, best) in col_best.iter_mut().enumerate() {
        for i in 1..rows {
            if p[i * cols + j] > p[*best * cols + j] {
                *best = i;
            }
        }
    }
    let pairs = row_best
        .iter()
        .enumerate()
        .filter_map(|(i, &j)| {
            let conf = p[i * cols + j];
            (col_best[j] == i && conf >= tau).then_some(CoarseMatch { i, j, confidence: conf })
        })
        .collect();
    CoarseMatchSet { pairs }
}

/// Everything the coarse stage produces for one image pair.
#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub matches: CoarseMatchSet,
    pub dist_a: TopicDistribution,
    pub dist_b: TopicDistribution,
    /// `N_A × N_B` matching probabilities.
    pub p_c: Tensor,
    pub labels_a: Option<Vec<usize>>,
    pub labels_b: Option<Vec<usize>>,
    pub covisible: Option<Vec<usize>>,
    pub augment: Option<AugmentDiagnostics>,
}

/// Rescales every row to unit length.
fn l2_normalize_rows(x: &Tensor) -> candle_core::Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    x.broadcast_div(&norm)
}

/// Full coarse stage: pooling on each image with the shared bank, topic
/// inference, the configured context merge, unit-normalization of the merged
/// features, dual softmax and mutual-nearest-neighbor extraction.
pub fn coarse_match(
    ctx: &ForwardCtx,
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    params: &TopicMatcherParams,
    cfg: &MatcherConfig,
) -> Result<CoarseOutput> {
    let f_a = pyr_a.coarse_tokens()?;
    let f_b = pyr_b.coarse_tokens()?;
    let pooled_a = context_pool(ctx, &params.bank, &params.pool, &f_a, 0)?;
    let pooled_b = context_pool(ctx, &params.bank, &params.pool, &f_b, 1)?;
    let dist_a = infer_topic_distribution(ctx, &pooled_a, &f_a)?;
    let dist_b = infer_topic_distribution(ctx, &pooled_b, &f_b)?;

    let (merged_a, merged_b, labels_a, labels_b, covisible, augment) = match cfg.variant {
        Variant::Fast => {
            let layer = params
                .merge
                .as_ref()
                .ok_or_else(|| MatcherError::Config("fast variant requires merge parameters".into()))?;
            let a = merge_context(ctx, layer, &f_a, &pooled_a, &dist_a)?;
            let b = merge_context(ctx, layer, &f_b, &pooled_b, &dist_b)?;
            (a.features, b.features, None, None, None, None)
        }
        Variant::Plus => {
            let (Some(sb), Some(cb)) = (&params.self_block, &params.cross_block) else {
                return Err(MatcherError::Config("plus variant requires attention parameters".into()));
            };
            let theta_a = dist_a.theta_rows()?;
            let theta_b = dist_b.theta_rows()?;
            let labels_a = assign_topics(&theta_a, ctx);
            let labels_b = assign_topics(&theta_b, ctx);
            let covis = covisible_topics(&dist_a.image_level_vec()?, &dist_b.image_level_vec()?, cfg.k_covis);
            let (a, b, diag) = in_topic_augment(ctx, &f_a, &f_b, &labels_a, &labels_b, &covis, sb, cb)?;
            (a, b, Some(labels_a), Some(labels_b), Some(covis), Some(diag))
        }
    };

    let p_c = dual_softmax(
        ctx,
        &l2_normalize_rows(&merged_a)?,
        &l2_normalize_rows(&merged_b)?,
        cfg.dual_softmax_temperature,
    )?;
    let (rows, cols) = p_c.dims2()?;
    let matches = extract_coarse_matches(&to_f64_vec(&p_c)?, rows, cols, cfg.tau);
    Ok(CoarseOutput { matches, dist_a, dist_b, p_c, labels_a, labels_b, covisible, augment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(rows: &[&[f64]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(data, (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
    }

    #[test]
    fn coassign_examples() {
        assert_eq!(coassign_probability(&[0.0, 1.0], &[0.0, 1.0]), (1.0, 0.0));
        assert_eq!(coassign_probability(&[0.0, 1.0], &[1.0, 0.0]), (0.0, 1.0));
        assert_eq!(coassign_probability(&[0.25; 4], &[0.25; 4]), (0.25, 0.75));
    }

    #[test]
    fn covisible_examples() {
        let mut hot = vec![0.0; 5];
        hot[3] = 1.0;
        assert_eq!(covisible_topics(&hot, &hot, 1), vec![3]);
        let ones = [1.0; 4];
        assert_eq!(covisible_topics(&[0.1, 0.4, 0.4, 0.0], &ones, 2), vec![1, 2]);
    }

    #[test]
    fn eval_assignment_is_argmax_with_low_ties() {
        let ctx = ForwardCtx::eval();
        let theta = vec![vec![0.2, 0.5, 0.3], vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(assign_topics(&theta, &ctx), vec![1, 0, 2]);
    }

    #[test]
    fn train_assignment_on_one_hot_rows() {
        let ctx = ForwardCtx::new(Mode::Train, 11);
        let theta = vec![vec![0.0, 1.0, 0.0]; 50];
        assert!(assign_topics(&theta, &ctx).iter().all(|&l| l == 1));
    }

    #[test]
    fn train_assignment_frequency() {
        let ctx = ForwardCtx::new(Mode::Train, 5);
        let theta = vec![vec![0.5, 0.5]; 10_000];
        let ones = assign_topics(&theta, &ctx).iter().filter(|&&l| l == 1).count();
        let freq = ones as f64 / 10_000.0;
        assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn dual_softmax_single_cell() {
        let ctx = ForwardCtx::eval();
        let p = dual_softmax(&ctx, &t(&[&[0.3, -2.0]]), &t(&[&[1.5, 0.7]]), 0.1).unwrap();
        assert_eq!(to_f64_vec(&p).unwrap(), vec![1.0]);
    }

    #[test]
    fn dual_softmax_two_by_two() {
        // With identity features S = [[2,0],[0,2]] at temperature 1.
        let ctx = ForwardCtx::eval();
        let s2 = 2f64.sqrt();
        let f = t(&[&[s2, 0.0], &[0.0, s2]]);
        let p = to_f64_vec(&dual_softmax(&ctx, &f, &f, 1.0).unwrap()).unwrap();
        let r = 1f64.exp().powi(2) / (1f64.exp().powi(2) + 1.0);
        assert!((p[0] - r * r).abs() < 1e-12);
        assert_eq!(ctx.tally().get(Stage::DualSoftmax), 8);
    }

    #[test]
    fn dual_softmax_rejects_nonpositive_temperature() {
        let ctx = ForwardCtx::eval();
        let f = t(&[&[1.0]]);
        assert!(dual_softmax(&ctx, &f, &f, 0.0).is_err());
    }

    #[test]
    fn coarse_match_extraction_examples() {
        let m = extract_coarse_matches(&[0.9, 0.05, 0.05, 0.9], 2, 2, 0.2);
        assert_eq!(
            m.pairs,
            vec![CoarseMatch { i: 0, j: 0, confidence: 0.9 }, CoarseMatch { i: 1, j: 1, confidence: 0.9 }]
        );
        assert!(extract_coarse_matches(&[0.1; 6], 2, 3, 0.2).is_empty());
        assert!(extract_coarse_matches(&[], 0, 3, 0.2).is_empty());
    }

    #[test]
    fn uniform_logits_give_uniform_topics() {
        let ctx = ForwardCtx::eval();
        let pooled = PooledTopics { local: Tensor::zeros((4, 3), DType::F64, &Device::Cpu).unwrap(), source_image_id: 0 };
        let f = t(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 0.0]]);
        let dist = infer_topic_distribution(&ctx, &pooled, &f).unwrap();
        for row in dist.theta_rows().unwrap() {
            assert!(row.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
        assert!(dist.image_level_vec().unwrap().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn saturated_topic_is_one_hot() {
        let ctx = ForwardCtx::eval();
        let pooled = PooledTopics { local: t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]), source_image_id: 0 };
        let f = t(&[&[0.0, 50.0, 0.0]]);
        let row = &infer_topic_distribution(&ctx, &pooled, &f).unwrap().theta_rows().unwrap()[0];
        // softmax([0, 50, 0])[1] = 1 / (1 + 2e⁻⁵⁰)
        assert!((row[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn augment_with_nothing_covisible_passes_through() {
        let mut store = ParamStore::new(DType::F64, 0);
        let sb = AttentionBlock::new(&mut store, "s", 4, 2, 8).unwrap();
        let cb = AttentionBlock::new(&mut store, "c", 4, 2, 8).unwrap();
        let ctx = ForwardCtx::eval();
        let fa = t(&[&[1.0, 2.0, 3.0, 4.0], &[0.5, 0.1, -0.2, 0.3]]);
        let fb = t(&[&[0.0, 1.0, 0.0, 1.0]]);
        let (oa, ob, diag) = in_topic_augment(&ctx, &fa, &fb, &[0, 1], &[1], &[0], &sb, &cb).unwrap();
        assert_eq!(to_f64_vec(&oa).unwrap(), to_f64_vec(&fa).unwrap());
        assert_eq!(to_f64_vec(&ob).unwrap(), to_f64_vec(&fb).unwrap());
        assert_eq!(diag.empty_topics, vec![0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MatcherConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.k_covis = 0;
        assert!(cfg.validate().is_err());
        cfg.k_covis = 101;
        assert!(cfg.validate().is_err());
    }
}
