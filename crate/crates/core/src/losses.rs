//! Training objectives: topic matching, coarse feature matching and the
//! fine symmetric epipolar loss, plus their weighted sum.

use candle_core::{Tensor, D};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FundamentalMatrix, EPIPOLAR_DENOMINATOR_FLOOR};
use crate::nn::index_tensor;

/// Floor applied to every log argument.
pub const LOG_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no ground-truth matches")]
    NoGroundTruth,
    #[error("no fine matches")]
    NoMatches,
    #[error("non-finite loss component: {0}")]
    NonFinite(String),
    #[error("invalid supervision: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 0.25, lambda_f: 0.25 }
    }
}

/// Ground truth for one image pair.
#[derive(Debug, Clone)]
pub struct SupervisionBundle {
    pub gt_coarse: Vec<(usize, usize)>,
    pub fundamental: FundamentalMatrix,
    pub n_negatives: usize,
    pub epsilon: f64,
}

impl SupervisionBundle {
    pub fn new(gt_coarse: Vec<(usize, usize)>, fundamental: FundamentalMatrix) -> Self {
        Self { gt_coarse, fundamental, n_negatives: 5, epsilon: LOG_EPSILON }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_negatives == 0 {
            return Err(LossError::Invalid("n_negatives must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(LossError::Invalid(format!("epsilon {} outside (0, 1e-3]", self.epsilon)));
        }
        Ok(())
    }
}

/// For each ground-truth pair `(i, j)`, up to `n` distinct `j'` with
/// `(i, j')` not a ground-truth pair, drawn uniformly without replacement.
pub fn sample_negatives<R: Rng + ?Sized>(gt: &[(usize, usize)], n_b: usize, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(gt.len() * n);
    for &(i, _) in gt {
        let candidates: Vec<usize> = (0..n_b).filter(|&jp| !gt.contains(&(i, jp))).collect();
        let take = n.min(candidates.len());
        for k in sample(rng, candidates.len(), take) {
            out.push((i, candidates[k]));
        }
    }
    out
}

fn rows_dot(a: &Tensor, b: &Tensor, ia: &[usize], ib: &[usize]) -> candle_core::Result<Tensor> {
    let ra = a.index_select(&index_tensor(ia)?, 0)?;
    let rb = b.index_select(&index_tensor(ib)?, 0)?;
    (ra * rb)?.sum(D::Minus1)
}

/// `mean −log max(⟨θ_i, θ_j⟩, ε)` over ground-truth pairs plus
/// `mean −log max(1 − ⟨θ_i, θ_j'⟩, ε)` over sampled negatives.
pub fn topic_matching_loss<R: Rng + ?Sized>(
    theta_a: &Tensor,
    theta_b: &Tensor,
    sup: &SupervisionBundle,
    rng: &mut R,
) -> Result<Tensor> {
    sup.validate()?;
    if sup.gt_coarse.is_empty() {
        return Err(LossError::NoGroundTruth);
    }
    let (n_a, n_b) = (theta_a.dim(0)?, theta_b.dim(0)?);
    if sup.gt_coarse.iter().any(|&(i, j)| i >= n_a || j >= n_b) {
        return Err(LossError::Invalid("ground-truth index out of range".into()));
    }
    let (ia, ib): (Vec<usize>, Vec<usize>) = sup.gt_coarse.iter().copied().unzip();
    let pos = rows_dot(theta_a, theta_b, &ia, &ib)?.maximum(sup.epsilon)?.log()?.neg()?.mean_all()?;
    let negatives = sample_negatives(&sup.gt_coarse, n_b, sup.n_negatives, rng);
    if negatives.is_empty() {
        return Ok(pos);
    }
    let (na, nb): (Vec<usize>, Vec<usize>) = negatives.into_iter().unzip();
    let p = rows_dot(theta_a, theta_b, &na, &nb)?;
    let neg = (1.0 - p)?.maximum(sup.epsilon)?.log()?.neg()?.mean_all()?;
    Ok((pos + neg)?)
}

/// `−mean log max(P_c(i, j), ε)` over ground-truth cells.
pub fn coarse_feature_loss(p_c: &Tensor, gt: &[(usize, usize)], epsilon: f64) -> Result<Tensor> {
    if gt.is_empty() {
        return Err(LossError::NoGroundTruth);
    }
    let (rows, cols) = p_c.dims2()?;
    if gt.iter().any(|&(i, j)| i >= rows || j >= cols) {
        return Err(LossError::Invalid("ground-truth index out of range".into()));
    }
    let flat: Vec<usize> = gt.iter().map(|&(i, j)| i * cols + j).collect();
    let picked = p_c.flatten_all()?.index_select(&index_tensor(&flat)?, 0)?;
    Ok(picked.maximum(epsilon)?.log()?.neg()?.mean_all()?)
}

fn homogeneous(x: &Tensor) -> candle_core::Result<Tensor> {
    let ones = Tensor::ones((x.dim(0)?, 1), x.dtype(), x.device())?;
    Tensor::cat(&[x, &ones], 1)
}

/// Per-match symmetric epipolar distances of `M × 2` point tensors with
/// denominators floored at [`EPIPOLAR_DENOMINATOR_FLOOR`].
pub fn epipolar_distances(xa: &Tensor, xb: &Tensor, f: &FundamentalMatrix) -> Result<Tensor> {
    let m = f.matrix();
    let vals: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect();
    let ft = Tensor::from_vec(vals, (3, 3), xa.device())?.to_dtype(xa.dtype())?;
    let ha = homogeneous(xa)?;
    let hb = homogeneous(xb)?;
    // Row k of `line_b` is Fᵀx̂_k, row k of `line_a` is Fŷ_k.
    let line_b = ha.matmul(&ft)?;
    let line_a = hb.matmul(&ft.t()?)?;
    let r = (&ha * &line_a)?.sum(D::Minus1)?;
    let norm = |l: &Tensor| -> candle_core::Result<Tensor> {
        l.narrow(1, 0, 2)?.sqr()?.sum(D::Minus1)?.maximum(EPIPOLAR_DENOMINATOR_FLOOR)
    };
    let inv = (norm(&line_b)?.recip()? + norm(&line_a)?.recip()?)?;
    Ok((r.sqr()? * inv)?)
}

/// Mean symmetric epipolar distance of refined matches.
pub fn fine_epipolar_loss(xa: &Tensor, xb: &Tensor, f: &FundamentalMatrix) -> Result<Tensor> {
    if xa.dim(0)? == 0 {
        return Err(LossError::NoMatches);
    }
    Ok(epipolar_distances(xa, xb, f)?.mean_all()?)
}

/// `λ_c · (feat + topic) + λ_f · fine`.
pub fn total_loss(l_coarse_feat: f64, l_topic: f64, l_fine: f64, w: LossWeights) -> Result<f64> {
    for (name, v) in [("coarse_feature", l_coarse_feat), ("topic", l_topic), ("fine", l_fine)] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name.into()));
        }
    }
    Ok(w.lambda_c * (l_coarse_feat + l_topic) + w.lambda_f * l_fine)
}

/// Tensor form of [`total_loss`] for back-propagation.
pub fn total_loss_tensor(l_coarse_feat: &Tensor, l_topic: &Tensor, l_fine: Option<&Tensor>, w: LossWeights) -> Result<Tensor> {
    let coarse = ((l_coarse_feat + l_topic)? * w.lambda_c)?;
    let total = match l_fine {
        Some(f) => (coarse + (f * w.lambda_f)?)?,
        None => coarse,
    };
    let v = total.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(LossError::NonFinite("total".into()));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use candle_core::Device;
    use nalgebra::Matrix3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(data, (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        to_f64_vec(x).unwrap()[0]
    }

    fn rectified() -> FundamentalMatrix {
        FundamentalMatrix::new(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)).unwrap()
    }

    #[test]
    fn perfect_topic_assignment_has_zero_loss() {
        let a = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let sup = SupervisionBundle { n_negatives: 1, ..SupervisionBundle::new(vec![(0, 0), (1, 1)], rectified()) };
        let l = topic_matching_loss(&a, &a, &sup, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(scalar(&l).abs() < 1e-12);
    }

    #[test]
    fn uniform_topic_loss_closed_form() {
        let u = t(&[&[0.25; 4], &[0.25; 4]]);
        let sup = SupervisionBundle { n_negatives: 1, ..SupervisionBundle::new(vec![(0, 0)], rectified()) };
        let l = scalar(&topic_matching_loss(&u, &u, &sup, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
        assert!((l - (-(0.25f64).ln() - (0.75f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn negatives_avoid_ground_truth() {
        let gt = vec![(0, 0), (0, 1), (1, 1)];
        let negs = sample_negatives(&gt, 4, 5, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(negs.iter().all(|p| !gt.contains(p)));
        assert_eq!(negs.iter().filter(|p| p.0 == 0).count(), 2 * 2);
        assert_eq!(negs.iter().filter(|p| p.0 == 1).count(), 3);
    }

    #[test]
    fn coarse_feature_loss_examples() {
        let p = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(scalar(&coarse_feature_loss(&p, &[(0, 0), (1, 1)], LOG_EPSILON).unwrap()).abs() < 1e-15);
        let p = t(&[&[(-1.0f64).exp()]]);
        assert!((scalar(&coarse_feature_loss(&p, &[(0, 0)], LOG_EPSILON).unwrap()) - 1.0).abs() < 1e-12);
        assert!(matches!(coarse_feature_loss(&p, &[], LOG_EPSILON), Err(LossError::NoGroundTruth)));
    }

    #[test]
    fn fine_loss_on_rectified_pairs() {
        let f = rectified();
        let xa = t(&[&[3.0, 2.0], &[10.0, 5.0]]);
        let xb = t(&[&[7.0, 2.0], &[1.0, 5.0]]);
        assert!(scalar(&fine_epipolar_loss(&xa, &xb, &f).unwrap()).abs() < 1e-9);
        let xa = t(&[&[0.0, 0.0], &[4.0, 3.0]]);
        let xb = t(&[&[0.0, 1.0], &[9.0, 4.0]]);
        let expected = crate::geometry::symmetric_epipolar_distance(&f, [0.0, 0.0], [0.0, 1.0]).unwrap();
        assert!((scalar(&fine_epipolar_loss(&xa, &xb, &f).unwrap()) - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(2.0, 2.0, 4.0, w).unwrap(), 2.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, w).unwrap(), 0.0);
        assert_eq!(total_loss(5.0, 1.0, 3.0, LossWeights { lambda_c: 0.0, lambda_f: 1.0 }).unwrap(), 3.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, w).is_err());
    }
}
