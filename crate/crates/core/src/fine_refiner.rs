//! Dynamic sub-pixel refinement of coarse matches.
//!
//! For every coarse match a `w × w` window is cropped from each image's
//! 1/2-resolution feature map. Both windows pass through shared MLP-Mixer
//! blocks; a detector scores the cells of the A-window and its soft-argmax
//! gives the keypoint. The keypoint descriptor is then correlated with the
//! B-window and the soft-argmax of that heatmap gives the correspondence.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{FeaturePyramid, COARSE_STRIDE, FINE_STRIDE};
use crate::nn::{
    batched_matmul, index_tensor, softmax_last, to_f64_rows, to_f64_vec, ForwardCtx, LayerNorm, Linear, ParamStore,
    Stage,
};
use crate::topic_matcher::CoarseMatchSet;

/// Fine cells per coarse cell along each axis.
pub const STRIDE_RATIO: usize = COARSE_STRIDE / FINE_STRIDE;

#[derive(Debug, Error)]
pub enum FineError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("every cell of the patch is masked")]
    AllMasked,
    #[error("invalid fine configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, FineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineConfig {
    /// Odd patch width on the fine grid.
    pub window: usize,
    /// Temperature of the detector heatmap.
    pub temperature: f64,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    /// Ablation: use the patch center instead of a detected keypoint.
    pub fixed_center: bool,
}

impl Default for FineConfig {
    fn default() -> Self {
        Self { window: 5, temperature: 0.1, token_hidden: 32, channel_hidden: 64, fixed_center: false }
    }
}

impl FineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(FineError::Config(format!("window must be odd, got {}", self.window)));
        }
        if !(self.temperature > 0.0) {
            return Err(FineError::Config("temperature must be positive".into()));
        }
        if self.token_hidden == 0 || self.channel_hidden == 0 {
            return Err(FineError::Config("mixer hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.window * self.window
    }
}

/// Row-major coordinates `(x, y)` of the cells of a `w × w` patch relative
/// to its top-left cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub w: usize,
    pub g: Vec<[f64; 2]>,
}

impl GridMap {
    pub fn new(w: usize) -> Self {
        let g = (0..w * w).map(|n| [(n % w) as f64, (n / w) as f64]).collect();
        Self { w, g }
    }

    /// `N_p × 2` tensor of the grid coordinates.
    pub fn tensor(&self, dtype: DType) -> candle_core::Result<Tensor> {
        let flat: Vec<f64> = self.g.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::from_vec(flat, (self.g.len(), 2), &candle_core::Device::Cpu)?.to_dtype(dtype)
    }
}

/// Cropped windows for a batch of coarse matches.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    /// `M × N_p × D_f` windows from image A.
    pub patches_a: Tensor,
    /// `M × N_p × D_f` windows from image B.
    pub patches_b: Tensor,
    pub mask_a: Vec<Vec<bool>>,
    pub mask_b: Vec<Vec<bool>>,
    /// Fine-grid window centers `(x, y)`.
    pub centers_a: Vec<(usize, usize)>,
    pub centers_b: Vec<(usize, usize)>,
    pub w: usize,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.centers_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers_a.is_empty()
    }
}

/// Fine-grid center `(x, y)` of coarse cell `index` on a grid `cols` wide.
pub fn fine_center(index: usize, coarse_cols: usize) -> (usize, usize) {
    ((index % coarse_cols) * STRIDE_RATIO, (index / coarse_cols) * STRIDE_RATIO)
}

/// Crops `w × w` windows of `fine` (`D × H × W`) centered at the given
/// fine-grid positions. Cells outside the map are zero and masked invalid.
pub fn crop_windows(fine: &Tensor, centers: &[(usize, usize)], w: usize) -> Result<(Tensor, Vec<Vec<bool>>)> {
    if w.is_multiple_of(2) {
        return Err(FineError::Config(format!("window must be odd, got {w}")));
    }
    let (d, h, wd) = fine.dims3()?;
    let r = w / 2;
    let np = w * w;
    if centers.is_empty() {
        return Ok((Tensor::zeros((0, np, d), fine.dtype(), fine.device())?, Vec::new()));
    }
    let padded = fine.pad_with_zeros(1, r, r)?.pad_with_zeros(2, r, r)?;
    let (hp, wp) = (h + 2 * r, wd + 2 * r);
    let tokens = padded.reshape((d, hp * wp))?.t()?.contiguous()?;
    let mut idx = Vec::with_capacity(centers.len() * np);
    let mut masks = Vec::with_capacity(centers.len());
    for &(cx, cy) in centers {
        if cx >= wd || cy >= h {
            return Err(FineError::Shape(format!("center ({cx}, {cy}) outside {wd}×{h} fine map")));
        }
        let mut mask = Vec::with_capacity(np);
        for n in 0..np {
            let (gx, gy) = (n % w, n / w);
            // Padded coordinates of cell (cx − r + gx, cy − r + gy).
            let (px, py) = (cx + gx, cy + gy);
            idx.push(py * wp + px);
            let inside = px >= r && px < wd + r && py >= r && py < h + r;
            mask.push(inside);
        }
        masks.push(mask);
    }
    let gathered = tokens.index_select(&index_tensor(&idx)?, 0)?;
    Ok((gathered.reshape((centers.len(), np, d))?, masks))
}

/// Crops the window pair of every coarse match.
pub fn crop_patches(pyr_a: &FeaturePyramid, pyr_b: &FeaturePyramid, coarse: &CoarseMatchSet, w: usize) -> Result<PatchBatch> {
    let (rows_a, cols_a) = pyr_a.coarse_grid();
    let (rows_b, cols_b) = pyr_b.coarse_grid();
    let (n_a, n_b) = (rows_a * cols_a, rows_b * cols_b);
    let mut centers_a = Vec::with_capacity(coarse.len());
    let mut centers_b = Vec::with_capacity(coarse.len());
    for m in &coarse.pairs {
        if m.i >= n_a || m.j >= n_b {
            return Err(FineError::Shape(format!("coarse match ({}, {}) out of range", m.i, m.j)));
        }
        centers_a.push(fine_center(m.i, cols_a));
        centers_b.push(fine_center(m.j, cols_b));
    }
    let (patches_a, mask_a) = crop_windows(&pyr_a.fine, &centers_a, w)?;
    let (patches_b, mask_b) = crop_windows(&pyr_b.fine, &centers_b, w)?;
    Ok(PatchBatch { patches_a, patches_b, mask_a, mask_b, centers_a, centers_b, w })
}

/// Token-mixing then channel-mixing, each a pre-norm residual perceptron.
#[derive(Clone)]
pub struct MixerBlock {
    pub token_norm: LayerNorm,
    pub token_fc1: Linear,
    pub token_fc2: Linear,
    pub channel_norm: LayerNorm,
    pub channel_fc1: Linear,
    pub channel_fc2: Linear,
}

impl MixerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_tokens: usize,
        dim: usize,
        token_hidden: usize,
        channel_hidden: usize,
    ) -> candle_core::Result<Self> {
        Ok(Self {
            token_norm: LayerNorm::new(store, &format!("{name}.token_norm"), dim)?,
            token_fc1: Linear::new(store, &format!("{name}.token_fc1"), num_tokens, token_hidden, true)?,
            token_fc2: Linear::with_std(
                store,
                &format!("{name}.token_fc2"),
                token_hidden,
                num_tokens,
                true,
                0.5 / (token_hidden as f64).sqrt(),
            )?,
            channel_norm: LayerNorm::new(store, &format!("{name}.channel_norm"), dim)?,
            channel_fc1: Linear::new(store, &format!("{name}.channel_fc1"), dim, channel_hidden, true)?,
            channel_fc2: Linear::with_std(
                store,
                &format!("{name}.channel_fc2"),
                channel_hidden,
                dim,
                true,
                0.5 / (channel_hidden as f64).sqrt(),
            )?,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.token_fc1.d_in()
    }

    /// Applies the block to `M × N_p × D` (or `N_p × D`) patches.
    pub fn forward(&self, ctx: &ForwardCtx, p: &Tensor) -> Result<Tensor> {
        let rank = p.rank();
        let tok_dim = rank.checked_sub(2).ok_or_else(|| FineError::Shape("mixer input needs rank ≥ 2".into()))?;
        let np = p.dim(tok_dim)?;
        if np != self.num_tokens() {
            return Err(FineError::Shape(format!("mixer expects {} tokens, got {np}", self.num_tokens())));
        }
        let normed = self.token_norm.forward(p)?.transpose(tok_dim, tok_dim + 1)?;
        let mixed = self.token_fc2.forward(ctx, &self.token_fc1.forward(ctx, &normed)?.gelu()?)?;
        let x = (p + mixed.transpose(tok_dim, tok_dim + 1)?)?;
        let ch = self.channel_fc2.forward(ctx, &self.channel_fc1.forward(ctx, &self.channel_norm.forward(&x)?)?.gelu()?)?;
        Ok((x + ch)?)
    }
}

#[derive(Clone)]
pub struct FineRefinerParams {
    pub mixer: Vec<MixerBlock>,
    pub detector: Vec<MixerBlock>,
    pub head: Linear,
}

impl FineRefinerParams {
    pub fn new(store: &mut ParamStore, cfg: &FineConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let np = cfg.num_cells();
        let block = |store: &mut ParamStore, name: String| {
            MixerBlock::new(store, &name, np, dim, cfg.token_hidden, cfg.channel_hidden)
        };
        let mixer = (0..2).map(|i| block(store, format!("fine.mixer{i}"))).collect::<candle_core::Result<_>>()?;
        let detector = (0..2).map(|i| block(store, format!("fine.detector{i}"))).collect::<candle_core::Result<_>>()?;
        let head = Linear::new(store, "fine.detector_head", dim, 1, true)?;
        Ok(Self { mixer, detector, head })
    }
}

fn mask_tensor(mask: &[Vec<bool>], np: usize, dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = mask.iter().flat_map(|m| m.iter().map(|&v| if v { 0.0 } else { f64::NEG_INFINITY })).collect();
    let m = mask.len();
    Ok(Tensor::from_vec(flat, (m, np), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Softmax over valid cells of `M × N_p` logits; masked cells get zero.
pub fn masked_softmax(logits: &Tensor, mask: &[Vec<bool>]) -> Result<Tensor> {
    let (m, np) = logits.dims2()?;
    if mask.len() != m || mask.iter().any(|r| r.len() != np) {
        return Err(FineError::Shape("mask does not match logits".into()));
    }
    if mask.iter().any(|r| !r.iter().any(|&v| v)) {
        return Err(FineError::AllMasked);
    }
    let additive = mask_tensor(mask, np, logits.dtype())?;
    Ok(softmax_last(&(logits + additive)?)?)
}

/// `(Σ_n H_n G_n, Σ_n H_n P_n)` for `M × N_p` heat and `M × N_p × D` patches.
pub fn expectation(ctx: &ForwardCtx, heat: &Tensor, grid: &GridMap, patches: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, np) = heat.dims2()?;
    let g = grid.tensor(heat.dtype())?.unsqueeze(0)?.broadcast_as((m, np, 2))?.contiguous()?;
    let h = heat.unsqueeze(1)?;
    let coords = batched_matmul(ctx, &h, &g)?.squeeze(1)?;
    let desc = batched_matmul(ctx, &h, patches)?.squeeze(1)?;
    Ok((coords, desc))
}

/// Detected keypoints of a batch of transformed A-patches.
#[derive(Debug, Clone)]
pub struct Keypoints {
    /// `M × 2` patch-local coordinates.
    pub local: Tensor,
    /// `M × D` descriptors.
    pub descriptors: Tensor,
    /// `M × N_p` pre-softmax scores.
    pub score: Tensor,
    /// `M × N_p` heatmaps.
    pub heat: Tensor,
}

/// Detector score map, masked `softmax(S / t)` and soft-argmax.
pub fn detect_keypoint(
    ctx: &ForwardCtx,
    params: &FineRefinerParams,
    patches: &Tensor,
    mask: &[Vec<bool>],
    grid: &GridMap,
    t: f64,
) -> Result<Keypoints> {
    if !(t > 0.0) {
        return Err(FineError::Config("temperature must be positive".into()));
    }
    let mut x = patches.clone();
    for block in &params.detector {
        x = block.forward(ctx, &x)?;
    }
    let score = params.head.forward(ctx, &x)?.squeeze(D::Minus1)?;
    let heat = masked_softmax(&(&score / t)?, mask)?;
    let (local, descriptors) = expectation(ctx, &heat, grid, patches)?;
    Ok(Keypoints { local, descriptors, score, heat })
}

/// In-patch correspondences of a batch of descriptors.
#[derive(Debug, Clone)]
pub struct PatchCorrespondence {
    pub local: Tensor,
    pub descriptors: Tensor,
    pub heat: Tensor,
    pub confidence: Vec<f64>,
}

/// `H_y = softmax_n ⟨f̂_x, P̂_{y,n}⟩` over valid cells and its soft-argmax.
pub fn match_in_patch(
    ctx: &ForwardCtx,
    descriptors: &Tensor,
    patches_b: &Tensor,
    mask: &[Vec<bool>],
    grid: &GridMap,
) -> Result<PatchCorrespondence> {
    let logits = batched_matmul(ctx, patches_b, &descriptors.unsqueeze(2)?)?.squeeze(2)?;
    let heat = masked_softmax(&logits, mask)?;
    let (local, desc) = expectation(ctx, &heat, grid, patches_b)?;
    let confidence = to_f64_rows(&heat)?
        .iter()
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .collect();
    Ok(PatchCorrespondence { local, descriptors: desc, heat, confidence })
}

/// One refined correspondence in original-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineMatch {
    pub xa: [f64; 2],
    pub xb: [f64; 2],
    pub desc_a: Vec<f64>,
    pub desc_b: Vec<f64>,
    pub confidence: f64,
    /// Coarse pair `(i, j)` this match was refined from.
    pub source: (usize, usize),
}

/// Differentiable outputs of [`refine_matches`] plus the extracted matches.
#[derive(Debug, Clone)]
pub struct FineOutput {
    pub matches: Vec<FineMatch>,
    /// `M × 2` keypoints in A pixels.
    pub xa: Option<Tensor>,
    /// `M × 2` correspondences in B pixels.
    pub xb: Option<Tensor>,
    pub heat_a: Option<Tensor>,
    pub heat_b: Option<Tensor>,
    /// Coarse pairs dropped because a window was fully masked.
    pub dropped: usize,
}

impl FineOutput {
    fn empty(dropped: usize) -> Self {
        Self { matches: Vec::new(), xa: None, xb: None, heat_a: None, heat_b: None, dropped }
    }
}

/// `2 · (center − r + local)` for every row.
fn to_pixels(local: &Tensor, centers: &[(usize, usize)], r: usize) -> Result<Tensor> {
    let offs: Vec<f64> = centers
        .iter()
        .flat_map(|&(cx, cy)| [cx as f64 - r as f64, cy as f64 - r as f64])
        .collect();
    let offs = Tensor::from_vec(offs, (centers.len(), 2), &candle_core::Device::Cpu)?.to_dtype(local.dtype())?;
    Ok(((local + offs)? * FINE_STRIDE as f64)?)
}

/// Crop, shared mixer, keypoint detection on A, correspondence on B, and
/// conversion to image pixels.
pub fn refine_matches(
    ctx: &ForwardCtx,
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    coarse: &CoarseMatchSet,
    params: &FineRefinerParams,
    cfg: &FineConfig,
) -> Result<FineOutput> {
    cfg.validate()?;
    if coarse.is_empty() {
        return Ok(FineOutput::empty(0));
    }
    ctx.set_stage(Stage::FineRefinement);
    let batch = crop_patches(pyr_a, pyr_b, coarse, cfg.window)?;
    let keep: Vec<usize> = (0..batch.len())
        .filter(|&k| batch.mask_a[k].iter().any(|&v| v) && batch.mask_b[k].iter().any(|&v| v))
        .collect();
    let dropped = batch.len() - keep.len();
    if keep.is_empty() {
        return Ok(FineOutput::empty(dropped));
    }
    let (batch, pairs) = if dropped > 0 {
        let idx = index_tensor(&keep)?;
        let pick = |v: &[Vec<bool>]| keep.iter().map(|&k| v[k].clone()).collect::<Vec<_>>();
        let pick_c = |v: &[(usize, usize)]| keep.iter().map(|&k| v[k]).collect::<Vec<_>>();
        (
            PatchBatch {
                patches_a: batch.patches_a.index_select(&idx, 0)?,
                patches_b: batch.patches_b.index_select(&idx, 0)?,
                mask_a: pick(&batch.mask_a),
                mask_b: pick(&batch.mask_b),
                centers_a: pick_c(&batch.centers_a),
                centers_b: pick_c(&batch.centers_b),
                w: batch.w,
            },
            keep.iter().map(|&k| coarse.pairs[k]).collect::<Vec<_>>(),
        )
    } else {
        (batch, coarse.pairs.clone())
    };
    let m = batch.len();
    let grid = GridMap::new(cfg.window);

    let mut joint = Tensor::cat(&[&batch.patches_a, &batch.patches_b], 0)?;
    for block in &params.mixer {
        joint = block.forward(ctx, &joint)?;
    }
    let pa = joint.narrow(0, 0, m)?;
    let pb = joint.narrow(0, m, m)?;

    let (local_a, desc_a, heat_a) = if cfg.fixed_center {
        let np = cfg.num_cells();
        let mut onehot = vec![0.0; m * np];
        for k in 0..m {
            onehot[k * np + np / 2] = 1.0;
        }
        let heat = Tensor::from_vec(onehot, (m, np), &candle_core::Device::Cpu)?.to_dtype(pa.dtype())?;
        let (local, desc) = expectation(ctx, &heat, &grid, &pa)?;
        (local, desc, heat)
    } else {
        let kp = detect_keypoint(ctx, params, &pa, &batch.mask_a, &grid, cfg.temperature)?;
        (kp.local, kp.descriptors, kp.heat)
    };
    let corr = match_in_patch(ctx, &desc_a, &pb, &batch.mask_b, &grid)?;

    let r = cfg.window / 2;
    let xa = to_pixels(&local_a, &batch.centers_a, r)?;
    let xb = to_pixels(&corr.local, &batch.centers_b, r)?;
    let xa_v = to_f64_rows(&xa)?;
    let xb_v = to_f64_rows(&xb)?;
    let da = to_f64_rows(&desc_a)?;
    let db = to_f64_rows(&corr.descriptors)?;
    let matches = (0..m)
        .map(|k| FineMatch {
            xa: [xa_v[k][0], xa_v[k][1]],
            xb: [xb_v[k][0], xb_v[k][1]],
            desc_a: da[k].clone(),
            desc_b: db[k].clone(),
            confidence: corr.confidence[k],
            source: (pairs[k].i, pairs[k].j),
        })
        .collect();
    Ok(FineOutput { matches, xa: Some(xa), xb: Some(xb), heat_a: Some(heat_a), heat_b: Some(corr.heat), dropped })
}

/// Pixel position of the center of coarse cell `index` on a grid `cols` wide.
pub fn coarse_center_px(index: usize, cols: usize) -> [f64; 2] {
    [((index % cols) * COARSE_STRIDE) as f64, ((index / cols) * COARSE_STRIDE) as f64]
}

/// Flattened heat values, for diagnostics.
pub fn heat_values(heat: &Tensor) -> candle_core::Result<Vec<f64>> {
    to_f64_vec(heat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topic_matcher::CoarseMatch;
    use candle_core::Device;

    fn fine_map(d: usize, h: usize, w: usize) -> Tensor {
        let v: Vec<f64> = (0..d * h * w).map(|i| i as f64).collect();
        Tensor::from_vec(v, (d, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn grid_is_row_major() {
        let g = GridMap::new(5);
        assert_eq!(g.g[0], [0.0, 0.0]);
        assert_eq!(g.g[7], [2.0, 1.0]);
        assert_eq!(g.g[24], [4.0, 4.0]);
    }

    #[test]
    fn interior_window_is_fully_valid_and_centered() {
        let f = fine_map(3, 16, 16);
        let (p, masks) = crop_windows(&f, &[(8, 4)], 5).unwrap();
        assert!(masks[0].iter().all(|&v| v));
        let rows = to_f64_rows(&p.squeeze(0).unwrap()).unwrap();
        // Center token 12 is fine cell (x=8, y=4): channel c value c·256 + 4·16 + 8.
        assert_eq!(rows[12], vec![72.0, 256.0 + 72.0, 512.0 + 72.0]);
    }

    #[test]
    fn corner_window_has_nine_valid_cells() {
        let f = fine_map(2, 16, 16);
        let (p, masks) = crop_windows(&f, &[(0, 0)], 5).unwrap();
        let expected = (0..5).flat_map(|y| (0..5).map(move |x| (x, y))).filter(|&(x, y)| x >= 2 && y >= 2).count();
        assert_eq!(masks[0].iter().filter(|&&v| v).count(), expected);
        assert_eq!(expected, 9);
        let rows = to_f64_rows(&p.squeeze(0).unwrap()).unwrap();
        assert_eq!(rows[0], vec![0.0, 0.0]);
    }

    #[test]
    fn coarse_cell_maps_to_fine_center() {
        assert_eq!(fine_center(0, 16), (0, 0));
        assert_eq!(fine_center(17, 16), (4, 4));
        assert_eq!(fine_center(35, 16), (12, 8));
    }

    #[test]
    fn zero_weight_mixer_is_identity() {
        let mut store = ParamStore::new(DType::F64, 1);
        let block = MixerBlock::new(&mut store, "m", 4, 3, 5, 6).unwrap();
        for (name, var) in store.params() {
            if name.contains("fc2") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::from_vec((0..12).map(|v| v as f64 * 0.3 - 1.0).collect::<Vec<_>>(), (4, 3), &Device::Cpu).unwrap();
        let y = block.forward(&ForwardCtx::eval(), &x).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), to_f64_vec(&x).unwrap());
    }

    #[test]
    fn mixer_rejects_wrong_token_count() {
        let mut store = ParamStore::new(DType::F64, 1);
        let block = MixerBlock::new(&mut store, "m", 4, 3, 5, 6).unwrap();
        let x = Tensor::zeros((5, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(block.forward(&ForwardCtx::eval(), &x), Err(FineError::Shape(_))));
    }

    #[test]
    fn one_hot_and_uniform_expectations() {
        let grid = GridMap::new(5);
        let ctx = ForwardCtx::eval();
        let patches = Tensor::from_vec((0..25).map(|v| v as f64).collect::<Vec<_>>(), (1, 25, 1), &Device::Cpu).unwrap();
        let mut hot = vec![0.0; 25];
        hot[3 * 5 + 2] = 1.0;
        let heat = Tensor::from_vec(hot, (1, 25), &Device::Cpu).unwrap();
        let (c, d) = expectation(&ctx, &heat, &grid, &patches).unwrap();
        assert_eq!(to_f64_vec(&c).unwrap(), vec![2.0, 3.0]);
        assert_eq!(to_f64_vec(&d).unwrap(), vec![17.0]);
        let heat = Tensor::full(1.0 / 25.0, (1, 25), &Device::Cpu).unwrap();
        let (c, _) = expectation(&ctx, &heat, &grid, &patches).unwrap();
        for v in to_f64_vec(&c).unwrap() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_patch_gives_valid_centroid() {
        let grid = GridMap::new(5);
        let ctx = ForwardCtx::eval();
        let pb = Tensor::ones((1, 25, 2), DType::F64, &Device::Cpu).unwrap();
        let desc = Tensor::new(&[[0.3f64, 0.4]], &Device::Cpu).unwrap();
        let mask: Vec<bool> = (0..25).map(|n| n % 5 >= 2 && n / 5 >= 2).collect();
        let out = match_in_patch(&ctx, &desc, &pb, &[mask], &grid).unwrap();
        let loc = to_f64_vec(&out.local).unwrap();
        assert!((loc[0] - 3.0).abs() < 1e-12 && (loc[1] - 3.0).abs() < 1e-12);
        assert!((out.confidence[0] - 1.0 / 9.0).abs() < 1e-12);
        let heat = to_f64_vec(&out.heat).unwrap();
        assert_eq!(heat[0], 0.0);
    }

    #[test]
    fn single_valid_cell_has_full_confidence() {
        let grid = GridMap::new(3);
        let ctx = ForwardCtx::eval();
        let pb = Tensor::ones((1, 9, 2), DType::F64, &Device::Cpu).unwrap();
        let desc = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        let mut mask = vec![false; 9];
        mask[4] = true;
        let out = match_in_patch(&ctx, &desc, &pb, &[mask], &grid).unwrap();
        assert_eq!(to_f64_vec(&out.local).unwrap(), vec![1.0, 1.0]);
        assert_eq!(out.confidence, vec![1.0]);
        assert!(matches!(
            match_in_patch(&ctx, &desc, &pb, &[vec![false; 9]], &grid),
            Err(FineError::AllMasked)
        ));
    }

    #[test]
    fn empty_coarse_set_gives_no_fine_matches() {
        let mut store = ParamStore::new(DType::F64, 0);
        let cfg = FineConfig::default();
        let params = FineRefinerParams::new(&mut store, &cfg, 4).unwrap();
        let pyr = FeaturePyramid {
            coarse: Tensor::zeros((4, 2, 2), DType::F64, &Device::Cpu).unwrap(),
            fine: Tensor::zeros((4, 8, 8), DType::F64, &Device::Cpu).unwrap(),
        };
        let out = refine_matches(&ForwardCtx::eval(), &pyr, &pyr, &CoarseMatchSet::default(), &params, &cfg).unwrap();
        assert!(out.matches.is_empty());
        let set = CoarseMatchSet { pairs: vec![CoarseMatch { i: 3, j: 0, confidence: 0.5 }] };
        let out = refine_matches(&ForwardCtx::eval(), &pyr, &pyr, &set, &params, &cfg).unwrap();
        assert_eq!(out.matches.len(), 1);
        assert_eq!(out.matches[0].source, (3, 0));
        let [x, y] = out.matches[0].xa;
        assert!((4.0..=12.0).contains(&x) && (4.0..=12.0).contains(&y));
    }
}
