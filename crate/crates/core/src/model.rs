//! The full matcher: backbone, topic matcher and fine refiner sharing one
//! parameter store.

use candle_core::DType;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, BackboneParams, BackboneWidths, FeaturePyramid, ImageTensor, COARSE_STRIDE};
use crate::fine_refiner::{refine_matches, FineConfig, FineError, FineMatch, FineOutput, FineRefinerParams};
use crate::nn::{ForwardCtx, Mode, ParamStore};
use crate::synth_data::sha256_hex;
use crate::topic_matcher::{coarse_match, CoarseMatchSet, CoarseOutput, MatcherConfig, MatcherError, Variant};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Fine(#[from] FineError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneWidths,
    pub matcher: MatcherConfig,
    pub fine: FineConfig,
    /// Hidden width of attention feed-forward sublayers; 0 means twice the
    /// coarse width.
    pub ffn_hidden: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneWidths::default(),
            matcher: MatcherConfig::default(),
            fine: FineConfig::default(),
            ffn_hidden: 0,
            precision: Precision::F32,
        }
    }
}

/// Architecture fields only; thresholds and sampling settings do not affect
/// which tensors exist.
#[derive(Serialize)]
struct ArchitectureKey<'a> {
    backbone: &'a BackboneWidths,
    num_topics: usize,
    attention_heads: usize,
    variant: Variant,
    window: usize,
    token_hidden: usize,
    channel_hidden: usize,
    ffn_hidden: usize,
    precision: Precision,
}

impl ModelConfig {
    /// The small model used for desk-scale experiments.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            backbone: BackboneWidths { stages: [16, 32, 64], fine: 32 },
            matcher: MatcherConfig { num_topics: 16, variant, ..MatcherConfig::default() },
            fine: FineConfig { token_hidden: 32, channel_hidden: 64, ..FineConfig::default() },
            ffn_hidden: 0,
            precision: Precision::F32,
        }
    }

    pub fn coarse_dim(&self) -> usize {
        self.backbone.coarse()
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_hidden == 0 {
            2 * self.coarse_dim()
        } else {
            self.ffn_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.matcher.validate()?;
        self.fine.validate()?;
        if !self.coarse_dim().is_multiple_of(self.matcher.attention_heads) {
            return Err(ModelError::Config(format!(
                "coarse width {} is not divisible by {} heads",
                self.coarse_dim(),
                self.matcher.attention_heads
            )));
        }
        Ok(())
    }

    /// SHA-256 of the architecture-defining fields.
    pub fn config_hash(&self) -> String {
        let key = ArchitectureKey {
            backbone: &self.backbone,
            num_topics: self.matcher.num_topics,
            attention_heads: self.matcher.attention_heads,
            variant: self.matcher.variant,
            window: self.fine.window,
            token_hidden: self.fine.token_hidden,
            channel_hidden: self.fine.channel_hidden,
            ffn_hidden: self.ffn_width(),
            precision: self.precision,
        };
        sha256_hex(serde_json::to_string(&key).expect("serializable").as_bytes())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub matcher: crate::topic_matcher::TopicMatcherParams,
    pub fine: FineRefinerParams,
}

/// Pyramids and coarse-stage output of one pair.
pub struct CoarseForward {
    pub pyr_a: FeaturePyramid,
    pub pyr_b: FeaturePyramid,
    pub coarse: CoarseOutput,
}

/// Result of matching one image pair in eval mode.
#[derive(Debug, Clone)]
pub struct PairMatches {
    pub coarse: CoarseMatchSet,
    pub fine: Vec<FineMatch>,
    /// Coarse grid `(rows, cols)` of each image.
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
    pub theta_a: Vec<Vec<f64>>,
    pub theta_b: Vec<Vec<f64>>,
    pub labels_a: Option<Vec<usize>>,
    pub labels_b: Option<Vec<usize>>,
    pub covisible: Option<Vec<usize>>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.precision.dtype(), seed);
        let backbone = BackboneParams::new(&mut store, cfg.backbone)?;
        let matcher = crate::topic_matcher::TopicMatcherParams::new(&mut store, &cfg.matcher, cfg.coarse_dim(), cfg.ffn_width())?;
        let fine = FineRefinerParams::new(&mut store, &cfg.fine, cfg.backbone.fine)?;
        Ok(Self { cfg, store, backbone, matcher, fine })
    }

    pub fn dtype(&self) -> DType {
        self.cfg.precision.dtype()
    }

    /// Backbone on both images (one batch) and the coarse stage.
    pub fn forward_coarse(&self, ctx: &ForwardCtx, a: &ImageTensor, b: &ImageTensor) -> Result<CoarseForward> {
        let mut pyramids = if a.height == b.height && a.width == b.width {
            self.backbone.forward(ctx, &[a, b], self.dtype())?
        } else {
            let mut pa = self.backbone.forward(ctx, &[a], self.dtype())?;
            pa.extend(self.backbone.forward(ctx, &[b], self.dtype())?);
            pa
        };
        let pyr_b = pyramids.pop().expect("two pyramids");
        let pyr_a = pyramids.pop().expect("two pyramids");
        let coarse = coarse_match(ctx, &pyr_a, &pyr_b, &self.matcher, &self.cfg.matcher)?;
        Ok(CoarseForward { pyr_a, pyr_b, coarse })
    }

    pub fn refine(&self, ctx: &ForwardCtx, fwd: &CoarseForward, coarse: &CoarseMatchSet) -> Result<FineOutput> {
        Ok(refine_matches(ctx, &fwd.pyr_a, &fwd.pyr_b, coarse, &self.fine, &self.cfg.fine)?)
    }

    /// Eval-mode matching with the model's configuration.
    pub fn match_pair(&self, ctx: &ForwardCtx, a: &ImageTensor, b: &ImageTensor) -> Result<PairMatches> {
        if ctx.mode != Mode::Eval {
            return Err(ModelError::Config("matching requires an eval-mode context".into()));
        }
        let fwd = self.forward_coarse(ctx, a, b)?;
        let fine = self.refine(ctx, &fwd, &fwd.coarse.matches)?;
        Ok(PairMatches {
            coarse: fwd.coarse.matches.clone(),
            fine: fine.matches,
            grid_a: fwd.pyr_a.coarse_grid(),
            grid_b: fwd.pyr_b.coarse_grid(),
            theta_a: fwd.coarse.dist_a.theta_rows()?,
            theta_b: fwd.coarse.dist_b.theta_rows()?,
            labels_a: fwd.coarse.labels_a.clone(),
            labels_b: fwd.coarse.labels_b.clone(),
            covisible: fwd.coarse.covisible.clone(),
        })
    }
}

/// Pixel position of the anchor of coarse cell `index` on a grid `cols` wide.
pub fn coarse_anchor(index: usize, cols: usize) -> [f64; 2] {
    [((index % cols) * COARSE_STRIDE) as f64, ((index / cols) * COARSE_STRIDE) as f64]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_ignores_thresholds() {
        let a = ModelConfig::tiny(Variant::Plus);
        let mut b = a.clone();
        b.matcher.tau = 0.5;
        b.matcher.k_covis = 2;
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.backbone.fine = 16;
        assert_ne!(a.config_hash(), c.config_hash());
        assert_ne!(a.config_hash(), ModelConfig::tiny(Variant::Fast).config_hash());
    }

    #[test]
    fn identical_images_match_on_the_diagonal() {
        let mut cfg = ModelConfig::tiny(Variant::Fast);
        cfg.matcher.tau = 1e-6;
        let model = Model::new(cfg, 3).unwrap();
        let pair = crate::synth_data::generate_scene_pair(0, &crate::synth_data::SceneParams {
            height: 64,
            width: 64,
            ..Default::default()
        })
        .unwrap();
        let out = model.match_pair(&ForwardCtx::eval(), &pair.image_a, &pair.image_a).unwrap();
        assert!(!out.coarse.is_empty());
        assert!(out.coarse.pairs.iter().all(|m| m.i == m.j));
    }
}
