//! Convolutional feature pyramid: a three-stage stride-2 encoder built from
//! conv → batch-norm → GELU blocks, and a two-level top-down path that emits
//! the 1/8 (coarse) and 1/2 (fine) resolution maps.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{BatchNorm2d, Conv2d, ForwardCtx, Mode, ParamStore, Stage};

pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

/// Grayscale image with values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl ImageTensor {
    pub fn new(pixels: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(BackboneError::Shape(format!(
                "{} pixels for a {height}×{width} image",
                pixels.len()
            )));
        }
        if height == 0 || width == 0 || !height.is_multiple_of(COARSE_STRIDE) || !width.is_multiple_of(COARSE_STRIDE) {
            return Err(BackboneError::Shape(format!(
                "image {height}×{width} is not divisible by {COARSE_STRIDE}"
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(BackboneError::Shape("non-finite pixel".into()));
        }
        Ok(Self { pixels, height, width })
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn coarse_dims(&self) -> (usize, usize) {
        (self.height / COARSE_STRIDE, self.width / COARSE_STRIDE)
    }
}

/// Channel widths of the three encoder stages and of the fine output. The
/// last encoder width is the coarse feature dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneWidths {
    pub stages: [usize; 3],
    pub fine: usize,
}

impl Default for BackboneWidths {
    fn default() -> Self {
        Self { stages: [32, 64, 128], fine: 64 }
    }
}

impl BackboneWidths {
    pub fn coarse(&self) -> usize {
        self.stages[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.contains(&0) || self.fine == 0 {
            return Err(BackboneError::Shape(format!("channel widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Coarse and fine feature maps of one image, channel-first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `(D_c, H/8, W/8)`.
    pub coarse: Tensor,
    /// `(D_f, H/2, W/2)`.
    pub fine: Tensor,
}

impl FeaturePyramid {
    pub fn coarse_grid(&self) -> (usize, usize) {
        let d = self.coarse.dims();
        (d[1], d[2])
    }

    pub fn fine_grid(&self) -> (usize, usize) {
        let d = self.fine.dims();
        (d[1], d[2])
    }

    /// Coarse features as an `(N, D_c)` token matrix in row-major cell order.
    pub fn coarse_tokens(&self) -> candle_core::Result<Tensor> {
        let (c, h, w) = self.coarse.dims3()?;
        self.coarse.reshape((c, h * w))?.t()?.contiguous()
    }
}

#[derive(Clone)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> candle_core::Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, 3, stride)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    fn forward(&self, ctx: &ForwardCtx, x: &Tensor) -> candle_core::Result<Tensor> {
        self.bn.forward(ctx, &self.conv.forward(ctx, x)?)?.gelu()
    }
}

fn upsample2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))
}

/// Backbone parameters (convolution kernels, normalization affine terms and
/// running statistics live in the shared [`ParamStore`]).
#[derive(Clone)]
pub struct BackboneParams {
    pub widths: BackboneWidths,
    enc: [ConvBlock; 6],
    coarse_out: Conv2d,
    lat2: Conv2d,
    top2: Conv2d,
    merge2: ConvBlock,
    lat1: Conv2d,
    top1: Conv2d,
    merge1: ConvBlock,
    fine_out: Conv2d,
}

impl BackboneParams {
    pub fn new(store: &mut ParamStore, widths: BackboneWidths) -> Result<Self> {
        widths.validate()?;
        let [c1, c2, c3] = widths.stages;
        let f = widths.fine;
        let enc = [
            ConvBlock::new(store, "backbone.enc1a", 1, c1, 2)?,
            ConvBlock::new(store, "backbone.enc1b", c1, c1, 1)?,
            ConvBlock::new(store, "backbone.enc2a", c1, c2, 2)?,
            ConvBlock::new(store, "backbone.enc2b", c2, c2, 1)?,
            ConvBlock::new(store, "backbone.enc3a", c2, c3, 2)?,
            ConvBlock::new(store, "backbone.enc3b", c3, c3, 1)?,
        ];
        Ok(Self {
            widths,
            enc,
            coarse_out: Conv2d::new(store, "backbone.coarse_out", c3, c3, 1, 1)?,
            lat2: Conv2d::new(store, "backbone.lat2", c2, c2, 1, 1)?,
            top2: Conv2d::new(store, "backbone.top2", c3, c2, 1, 1)?,
            merge2: ConvBlock::new(store, "backbone.merge2", c2, c2, 1)?,
            lat1: Conv2d::new(store, "backbone.lat1", c1, f, 1, 1)?,
            top1: Conv2d::new(store, "backbone.top1", c2, f, 1, 1)?,
            merge1: ConvBlock::new(store, "backbone.merge1", f, f, 1)?,
            fine_out: Conv2d::new(store, "backbone.fine_out", f, f, 1, 1)?,
        })
    }

    /// Closed-form number of trainable scalars for `widths`.
    pub fn parameter_count(widths: &BackboneWidths) -> usize {
        let [c1, c2, c3] = widths.stages;
        let f = widths.fine;
        let convs = 9 * (c1 + c1 * c1 + c1 * c2 + c2 * c2 + c2 * c3 + c3 * c3 + c2 * c2 + f * f)
            + c3 * c3
            + c2 * c2
            + c3 * c2
            + c1 * f
            + c2 * f
            + f * f;
        let norms = 2 * (2 * c1 + 3 * c2 + 2 * c3 + f);
        convs + norms
    }

    /// Runs the pyramid on a stack of images sharing one size. In training
    /// mode the batch statistics are pooled over the whole stack.
    pub fn forward(&self, ctx: &ForwardCtx, images: &[&ImageTensor], dtype: DType) -> Result<Vec<FeaturePyramid>> {
        let first = images.first().ok_or_else(|| BackboneError::Shape("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        if images.iter().any(|im| im.height != h || im.width != w) {
            return Err(BackboneError::Shape("images in a batch must share dimensions".into()));
        }
        if h % COARSE_STRIDE != 0 || w % COARSE_STRIDE != 0 {
            return Err(BackboneError::Shape(format!("image {h}×{w} is not divisible by {COARSE_STRIDE}")));
        }
        let prev_stage = ctx.stage();
        ctx.set_stage(Stage::Backbone);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            data.extend_from_slice(&im.pixels);
        }
        let x = Tensor::from_vec(data, (images.len(), 1, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?;

        let s1 = self.enc[1].forward(ctx, &self.enc[0].forward(ctx, &x)?)?;
        let s2 = self.enc[3].forward(ctx, &self.enc[2].forward(ctx, &s1)?)?;
        let s3 = self.enc[5].forward(ctx, &self.enc[4].forward(ctx, &s2)?)?;
        let coarse = self.coarse_out.forward(ctx, &s3)?;

        let up2 = upsample2(&self.top2.forward(ctx, &s3)?)?;
        let p2 = self.merge2.forward(ctx, &(self.lat2.forward(ctx, &s2)? + up2)?)?;
        let up1 = upsample2(&self.top1.forward(ctx, &p2)?)?;
        let p1 = self.merge1.forward(ctx, &(self.lat1.forward(ctx, &s1)? + up1)?)?;
        let fine = self.fine_out.forward(ctx, &p1)?;
        ctx.set_stage(prev_stage);

        (0..images.len())
            .map(|b| {
                Ok(FeaturePyramid {
                    coarse: coarse.get(b)?,
                    fine: fine.get(b)?,
                })
            })
            .collect()
    }

    /// Multiply-accumulates of one forward pass over a single `h × w` image.
    pub fn macs(widths: &BackboneWidths, h: usize, w: usize) -> u64 {
        let [c1, c2, c3] = widths.stages;
        let f = widths.fine;
        let px = |s: usize| ((h / s) * (w / s)) as u64;
        let k9 = |ci: usize, co: usize| (9 * ci * co) as u64;
        let k1 = |ci: usize, co: usize| (ci * co) as u64;
        px(2) * (k9(1, c1) + k9(c1, c1) + k1(c1, f) + k9(f, f) + k1(f, f))
            + px(4) * (k9(c1, c2) + k9(c2, c2) + k1(c2, c2) + k9(c2, c2) + k1(c2, f))
            + px(8) * (k9(c2, c3) + k9(c3, c3) + k1(c3, c3) + k1(c3, c2))
    }
}

/// Deterministic fan-in scaled initialization of a standalone backbone.
pub fn init_backbone(seed: u64, widths: BackboneWidths, dtype: DType) -> Result<(ParamStore, BackboneParams)> {
    let mut store = ParamStore::new(dtype, seed);
    let params = BackboneParams::new(&mut store, widths)?;
    Ok((store, params))
}

/// Single-image convenience wrapper around [`BackboneParams::forward`].
pub fn extract_pyramid(img: &ImageTensor, params: &BackboneParams, mode: Mode, dtype: DType) -> Result<FeaturePyramid> {
    let ctx = ForwardCtx::new(mode, 0);
    let mut out = params.forward(&ctx, &[img], dtype)?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let px = (0..h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        ImageTensor::new(px, h, w).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let widths = BackboneWidths { stages: [4, 8, 16], fine: 6 };
        let (_, params) = init_backbone(1, widths, DType::F32).unwrap();
        let pyr = extract_pyramid(&ramp(64, 64), &params, Mode::Eval, DType::F32).unwrap();
        assert_eq!(pyr.coarse.dims(), &[16, 8, 8]);
        assert_eq!(pyr.fine.dims(), &[6, 32, 32]);
        assert!(to_f64_vec(&pyr.fine).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_is_deterministic() {
        let widths = BackboneWidths { stages: [4, 8, 16], fine: 6 };
        let (_, params) = init_backbone(3, widths, DType::F32).unwrap();
        let img = ramp(32, 48);
        let a = extract_pyramid(&img, &params, Mode::Eval, DType::F32).unwrap();
        let b = extract_pyramid(&img, &params, Mode::Eval, DType::F32).unwrap();
        assert_eq!(to_f64_vec(&a.coarse).unwrap(), to_f64_vec(&b.coarse).unwrap());
        assert_eq!(to_f64_vec(&a.fine).unwrap(), to_f64_vec(&b.fine).unwrap());
    }

    #[test]
    fn same_seed_same_parameters() {
        let widths = BackboneWidths { stages: [4, 8, 16], fine: 6 };
        let (a, _) = init_backbone(9, widths, DType::F64).unwrap();
        let (b, _) = init_backbone(9, widths, DType::F64).unwrap();
        for ((na, va), (nb, vb)) in a.params().iter().zip(b.params()) {
            assert_eq!(na, nb);
            assert_eq!(to_f64_vec(va).unwrap(), to_f64_vec(vb).unwrap());
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let widths = BackboneWidths { stages: [16, 32, 64], fine: 32 };
        let (store, _) = init_backbone(0, widths, DType::F32).unwrap();
        // Hand count: 3×3 kernels 9·(16 + 256 + 512 + 1024 + 2048 + 4096 + 1024 + 1024),
        // 1×1 kernels 4096 + 1024 + 2048 + 512 + 1024 + 1024, norm affine 2·(32 + 96 + 128 + 32).
        let hand = 9 * (16 + 256 + 512 + 1024 + 2048 + 4096 + 1024 + 1024)
            + (4096 + 1024 + 2048 + 512 + 1024 + 1024)
            + 2 * (32 + 96 + 128 + 32);
        assert_eq!(store.num_params(), hand);
        assert_eq!(BackboneParams::parameter_count(&widths), hand);
    }

    #[test]
    fn zero_width_is_rejected() {
        let widths = BackboneWidths { stages: [0, 8, 16], fine: 6 };
        assert!(matches!(init_backbone(0, widths, DType::F32), Err(BackboneError::Shape(_))));
    }

    #[test]
    fn non_divisible_image_is_rejected() {
        assert!(matches!(ImageTensor::new(vec![0.0; 70 * 64], 70, 64), Err(BackboneError::Shape(_))));
    }

    #[test]
    fn mac_formula_matches_counter() {
        let widths = BackboneWidths { stages: [4, 8, 16], fine: 6 };
        let (store, params) = init_backbone(0, widths, DType::F32).unwrap();
        let ctx = ForwardCtx::eval();
        params.forward(&ctx, &[&ramp(32, 48)], store.dtype()).unwrap();
        assert_eq!(ctx.tally().get(Stage::Backbone), BackboneParams::macs(&widths, 32, 48));
    }
}
