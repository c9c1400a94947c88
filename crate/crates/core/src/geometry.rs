//! Two-view projective geometry: homographies, fundamental matrices,
//! epipolar distances, ground-truth coarse correspondences and the
//! homography accuracy metrics used by the evaluator.
//!
//! Pixel coordinates follow the pixel-index convention: the center of pixel
//! `(u, v)` sits at the integer coordinate `(u, v)`. A coarse cell `(r, c)`
//! is anchored at pixel `(8c, 8r)`, which is also the center of the receptive
//! field of the stride-8 backbone output at that cell.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 2D point `[x, y]` in pixel coordinates.
pub type Point2 = [f64; 2];

/// Smallest homogeneous `w` accepted when dehomogenizing a warped point.
pub const MIN_HOMOGENEOUS_W: f64 = 1e-12;
/// Floor applied to the epipolar line norms when the distance is used as a
/// training loss.
pub const EPIPOLAR_DENOMINATOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("homogeneous coordinate vanished while warping point ({0}, {1})")]
    DegenerateWarp(f64, f64),
    #[error("relative pose has no baseline; a pure rotation has no fundamental matrix")]
    DegeneratePose,
    #[error("epipolar distance undefined: point lies at an epipole")]
    UndefinedDistance,
    #[error("need at least 4 correspondences, got {0}")]
    InsufficientMatches(usize),
    #[error("RANSAC found no consensus set of at least 4 inliers")]
    NoConsensus,
    #[error("empty input")]
    EmptyInput,
    #[error("singular homography")]
    SingularHomography,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Planar projective transform mapping image A pixels to image B pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    h: Matrix3<f64>,
}

impl Homography {
    /// Wraps `h`, scaling it so that `h[2][2] = 1` when that entry is nonzero.
    pub fn new(h: Matrix3<f64>) -> Result<Self> {
        if !h.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidInput("non-finite homography".into()));
        }
        let det = h.determinant();
        let scale = h.abs().max();
        if scale == 0.0 || det.abs() <= 1e-14 * scale.powi(3) {
            return Err(GeometryError::SingularHomography);
        }
        Ok(Self { h: normalize_h(h) })
    }

    pub fn identity() -> Self {
        Self { h: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            h: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.h.try_inverse().ok_or(GeometryError::SingularHomography)?;
        Self::new(inv)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.h * other.h)
    }

    pub fn warp_point(&self, p: Point2) -> Result<Point2> {
        let v = self.h * Vector3::new(p[0], p[1], 1.0);
        if v.z.abs() < MIN_HOMOGENEOUS_W {
            return Err(GeometryError::DegenerateWarp(p[0], p[1]));
        }
        Ok([v.x / v.z, v.y / v.z])
    }
}

fn normalize_h(h: Matrix3<f64>) -> Matrix3<f64> {
    let s = h[(2, 2)];
    if s != 0.0 {
        h / s
    } else {
        h
    }
}

/// Applies `h` to every point, dehomogenizing the result.
pub fn warp_points(h: &Homography, pts: &[Point2]) -> Result<Vec<Point2>> {
    pts.iter().map(|&p| h.warp_point(p)).collect()
}

/// Rank-2 matrix `F` with `x_Aᵀ F x_B = 0` for corresponding points, scaled
/// to unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundamentalMatrix {
    f: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Normalizes `f` to unit Frobenius norm and checks that it has rank 2.
    pub fn new(f: Matrix3<f64>) -> Result<Self> {
        let norm = f.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GeometryError::InvalidInput("zero or non-finite fundamental matrix".into()));
        }
        let f = f / norm;
        let sv = f.singular_values();
        let (max, min) = (sv.max(), sv.min());
        if min > 1e-6 * max {
            return Err(GeometryError::InvalidInput(format!(
                "fundamental matrix is not rank 2 (σ_min/σ_max = {:e})",
                min / max
            )));
        }
        Ok(Self { f })
    }

    /// Wraps a matrix without normalization or rank checks. Used when
    /// reloading values that were validated when first constructed.
    pub fn from_raw(f: Matrix3<f64>) -> Self {
        Self { f }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.f
    }

    pub fn transpose(&self) -> Self {
        Self { f: self.f.transpose() }
    }

    /// Algebraic residual `x̂ᵀ F ŷ`.
    pub fn residual(&self, x: Point2, y: Point2) -> f64 {
        let xh = Vector3::new(x[0], x[1], 1.0);
        let yh = Vector3::new(y[0], y[1], 1.0);
        xh.dot(&(self.f * yh))
    }
}

/// Relative pose mapping camera-B coordinates into camera A:
/// `X_A = rotation · X_B + translation`. Both cameras share `intrinsics`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub intrinsics: Matrix3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, intrinsics: Matrix3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(GeometryError::InvalidInput(format!(
                "rotation is not orthonormal (deviation {ortho:e})"
            )));
        }
        if (intrinsics[(2, 2)] - 1.0).abs() > 0.0
            || intrinsics[(1, 0)] != 0.0
            || intrinsics[(2, 0)] != 0.0
            || intrinsics[(2, 1)] != 0.0
        {
            return Err(GeometryError::InvalidInput(
                "intrinsics must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        Ok(Self { rotation, translation, intrinsics })
    }

    /// Pinhole intrinsics with focal length `focal` and principal point `(cx, cy)`.
    pub fn pinhole(focal: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0)
    }
}

/// `[t]ₓ`, the cross-product matrix of `t`.
pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `F = K⁻ᵀ [t]ₓ R K⁻¹`, unit-Frobenius normalized.
pub fn fundamental_from_pose(pose: &CameraPose) -> Result<FundamentalMatrix> {
    if pose.translation.norm() <= 1e-9 {
        return Err(GeometryError::DegeneratePose);
    }
    let k_inv = pose
        .intrinsics
        .try_inverse()
        .ok_or_else(|| GeometryError::InvalidInput("singular intrinsics".into()))?;
    let f = k_inv.transpose() * skew(&pose.translation) * pose.rotation * k_inv;
    FundamentalMatrix::new(f)
}

fn epipolar_terms(f: &Matrix3<f64>, x: Point2, y: Point2) -> (f64, f64, f64) {
    let xh = Vector3::new(x[0], x[1], 1.0);
    let yh = Vector3::new(y[0], y[1], 1.0);
    let line_b = f.transpose() * xh;
    let line_a = f * yh;
    let r = xh.dot(&line_a);
    (
        r * r,
        line_b.x * line_b.x + line_b.y * line_b.y,
        line_a.x * line_a.x + line_a.y * line_a.y,
    )
}

/// Symmetric epipolar distance `(x̂ᵀFŷ)² · (1/‖Fᵀx̂‖²₀:₂ + 1/‖Fŷ‖²₀:₂)`.
///
/// Fails with [`GeometryError::UndefinedDistance`] when both line norms
/// vanish. A single vanishing line norm yields `+∞` unless the residual is
/// exactly zero.
pub fn symmetric_epipolar_distance(f: &FundamentalMatrix, x: Point2, y: Point2) -> Result<f64> {
    let (num, nb, na) = epipolar_terms(&f.f, x, y);
    if nb < EPIPOLAR_DENOMINATOR_FLOOR && na < EPIPOLAR_DENOMINATOR_FLOOR {
        return Err(GeometryError::UndefinedDistance);
    }
    if num == 0.0 {
        return Ok(0.0);
    }
    Ok(num * (1.0 / nb + 1.0 / na))
}

/// Same quantity with both denominators floored at
/// [`EPIPOLAR_DENOMINATOR_FLOOR`]; always finite for finite input.
pub fn symmetric_epipolar_distance_floored(f: &FundamentalMatrix, x: Point2, y: Point2) -> f64 {
    let (num, nb, na) = epipolar_terms(&f.f, x, y);
    num * (1.0 / nb.max(EPIPOLAR_DENOMINATOR_FLOOR) + 1.0 / na.max(EPIPOLAR_DENOMINATOR_FLOOR))
}

/// Paired 2D correspondences, optionally weighted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub points_a: Vec<Point2>,
    pub points_b: Vec<Point2>,
    pub weights: Option<Vec<f64>>,
}

impl CorrespondenceSet {
    pub fn new(points_a: Vec<Point2>, points_b: Vec<Point2>) -> Result<Self> {
        let set = Self { points_a, points_b, weights: None };
        set.validate()?;
        Ok(set)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_a.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.points_a.len() != self.points_b.len() {
            return Err(GeometryError::InvalidInput(format!(
                "{} points in A but {} in B",
                self.points_a.len(),
                self.points_b.len()
            )));
        }
        let finite = |p: &Point2| p[0].is_finite() && p[1].is_finite();
        if !self.points_a.iter().chain(&self.points_b).all(finite) {
            return Err(GeometryError::InvalidInput("non-finite coordinate".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.points_a.len() || w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(GeometryError::InvalidInput("weights must be per-pair values in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Hartley normalization: translate to the centroid and scale so the mean
/// distance from it is √2.
fn hartley_normalize(pts: &[Point2]) -> (Vec<Point2>, Matrix3<f64>) {
    let n = pts.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for p in pts {
        cx += p[0];
        cy += p[1];
    }
    cx /= n;
    cy /= n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = pts.iter().map(|p| [s * (p[0] - cx), s * (p[1] - cy)]).collect();
    (out, t)
}

/// Normalized direct linear transform for `b ≈ H a` from ≥ 4 pairs.
pub fn homography_dlt(a: &[Point2], b: &[Point2]) -> Result<Homography> {
    if a.len() != b.len() {
        return Err(GeometryError::InvalidInput("mismatched correspondence lengths".into()));
    }
    if a.len() < 4 {
        return Err(GeometryError::InsufficientMatches(a.len()));
    }
    let (an, ta) = hartley_normalize(a);
    let (bn, tb) = hartley_normalize(b);
    let rows = (2 * a.len()).max(9);
    let mut m = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in an.iter().zip(&bn).enumerate() {
        let (x, y, u, v) = (p[0], p[1], q[0], q[1]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            m[(2 * i, c)] = r0[c];
            m[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = m.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeometryError::InvalidInput("SVD did not converge".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .ok_or(GeometryError::EmptyInput)?;
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let tb_inv = tb.try_inverse().ok_or(GeometryError::SingularHomography)?;
    Homography::new(tb_inv * hn * ta)
}

/// RMS of forward and backward transfer distances for one pair.
fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, a: Point2, b: Point2) -> f64 {
    let fwd = h.h * Vector3::new(a[0], a[1], 1.0);
    let bwd = h_inv.h * Vector3::new(b[0], b[1], 1.0);
    if fwd.z.abs() < MIN_HOMOGENEOUS_W || bwd.z.abs() < MIN_HOMOGENEOUS_W {
        return f64::INFINITY;
    }
    let d1 = (fwd.x / fwd.z - b[0]).powi(2) + (fwd.y / fwd.z - b[1]).powi(2);
    let d2 = (bwd.x / bwd.z - a[0]).powi(2) + (bwd.y / bwd.z - a[1]).powi(2);
    (0.5 * (d1 + d2)).sqrt()
}

fn triangle_area2(p: Point2, q: Point2, r: Point2) -> f64 {
    ((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])).abs()
}

fn has_collinear_triple(pts: &[Point2; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| triangle_area2(pts[t[0]], pts[t[1]], pts[t[2]]) < 1e-6)
}

/// Result of robust homography fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacEstimate {
    pub homography: Homography,
    pub inliers: Vec<bool>,
}

impl RansacEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask(h: &Homography, c: &CorrespondenceSet, threshold: f64) -> Option<(Vec<bool>, usize, f64)> {
    let h_inv = h.inverse().ok()?;
    let mut mask = Vec::with_capacity(c.len());
    let mut count = 0;
    let mut err_sum = 0.0;
    for (a, b) in c.points_a.iter().zip(&c.points_b) {
        let e = symmetric_transfer_error(h, &h_inv, *a, *b);
        let inlier = e <= threshold;
        if inlier {
            count += 1;
            err_sum += e;
        }
        mask.push(inlier);
    }
    Some((mask, count, err_sum))
}

fn refit(c: &CorrespondenceSet, mask: &[bool]) -> Option<Homography> {
    let (a, b): (Vec<Point2>, Vec<Point2>) = c
        .points_a
        .iter()
        .zip(&c.points_b)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (*a, *b))
        .unzip();
    homography_dlt(&a, &b).ok()
}

/// RANSAC over minimal 4-point normalized DLT fits with a symmetric transfer
/// error inlier test, followed by a least-squares refit on the inliers.
/// Bitwise deterministic for a given `seed`.
pub fn estimate_homography_ransac(
    c: &CorrespondenceSet,
    threshold_px: f64,
    iters: usize,
    seed: u64,
) -> Result<RansacEstimate> {
    let n = c.len();
    if n < 4 {
        return Err(GeometryError::InsufficientMatches(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<bool>, usize, f64)> = None;
    let mut required = iters;
    let mut it = 0;
    while it < required.min(iters) {
        it += 1;
        let idx = rand::seq::index::sample(&mut rng, n, 4);
        let sa = [c.points_a[idx.index(0)], c.points_a[idx.index(1)], c.points_a[idx.index(2)], c.points_a[idx.index(3)]];
        let sb = [c.points_b[idx.index(0)], c.points_b[idx.index(1)], c.points_b[idx.index(2)], c.points_b[idx.index(3)]];
        if has_collinear_triple(&sa) || has_collinear_triple(&sb) {
            continue;
        }
        let Ok(h) = homography_dlt(&sa, &sb) else { continue };
        let Some((mask, count, err)) = inlier_mask(&h, c, threshold_px) else { continue };
        let better = match &best {
            None => true,
            Some((_, bc, be)) => count > *bc || (count == *bc && err < *be),
        };
        if better {
            let ratio = count as f64 / n as f64;
            let miss = 1.0 - ratio.powi(4);
            required = if miss <= f64::EPSILON {
                it
            } else {
                let k = (1.0f64 - 0.999).ln() / miss.ln();
                if k.is_finite() { (k.ceil() as usize).max(it) } else { iters }
            };
            best = Some((mask, count, err));
        }
    }
    let (mut mask, count, _) = best.ok_or(GeometryError::NoConsensus)?;
    if count < 4 {
        return Err(GeometryError::NoConsensus);
    }
    let mut h = refit(c, &mask).ok_or(GeometryError::NoConsensus)?;
    for _ in 0..3 {
        let Some((new_mask, new_count, _)) = inlier_mask(&h, c, threshold_px) else { break };
        if new_mask == mask || new_count < 4 {
            break;
        }
        let Some(h2) = refit(c, &new_mask) else { break };
        h = h2;
        mask = new_mask;
    }
    Ok(RansacEstimate { homography: h, inliers: mask })
}

/// Image corners in the pixel-index convention.
pub fn image_corners(width: usize, height: usize) -> [Point2; 4] {
    let (w, h) = ((width as f64 - 1.0).max(0.0), (height as f64 - 1.0).max(0.0));
    [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
}

/// Mean distance between the four image corners warped by each homography.
pub fn corner_error(h_est: &Homography, h_gt: &Homography, width: usize, height: usize) -> Result<f64> {
    let corners = image_corners(width, height);
    let mut total = 0.0;
    for c in corners {
        let p = h_est.warp_point(c)?;
        let q = h_gt.warp_point(c)?;
        total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    }
    Ok(total / 4.0)
}

/// Area under the cumulative-accuracy curve `x ↦ #{e ≤ x}/n` on `[0, t]`,
/// divided by `t`, for each threshold `t`. The curve is a step function, so
/// the trapezoidal rule over the sorted errors (with a vertical jump at each
/// error) is exact. Non-finite errors count as failures.
pub fn auc_at_thresholds(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() || thresholds.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    if errors.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(GeometryError::InvalidInput("errors must be nonnegative".into()));
    }
    if thresholds.iter().any(|t| !(*t > 0.0)) || thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(GeometryError::InvalidInput("thresholds must be positive and ascending".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let aucs = thresholds
        .iter()
        .map(|&t| {
            // Trapezoids between consecutive curve vertices; each jump is a
            // zero-width segment.
            let mut area = 0.0;
            let mut x_prev = 0.0;
            let mut y_prev = 0.0;
            for (k, &e) in sorted.iter().enumerate() {
                if e > t {
                    break;
                }
                area += (e - x_prev) * y_prev;
                x_prev = e;
                y_prev = (k + 1) as f64 / n;
            }
            area += (t - x_prev) * y_prev;
            (area / t).clamp(0.0, 1.0)
        })
        .collect();
    Ok(aucs)
}

/// Row/column extent of a coarse feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel anchor of flat cell index `i` for a grid with stride `cell_px`.
    pub fn anchor(&self, i: usize, cell_px: usize) -> Point2 {
        let (r, c) = (i / self.cols, i % self.cols);
        [(c * cell_px) as f64, (r * cell_px) as f64]
    }
}

/// Ground-truth coarse pairs under `h` (A → B): each A-cell anchor is warped
/// into B and paired with the nearest B anchor when that anchor lies inside
/// the grid and within `cell_px / 2` of the warped point. Each B-cell keeps
/// only its closest A-cell. Returned sorted by A index.
pub fn gt_coarse_matches(h: &Homography, grid_a: GridShape, grid_b: GridShape, cell_px: usize) -> Vec<(usize, usize)> {
    let step = cell_px as f64;
    let radius = step / 2.0;
    let mut best: Vec<Option<(f64, usize)>> = vec![None; grid_b.len()];
    for i in 0..grid_a.len() {
        let Ok(q) = h.warp_point(grid_a.anchor(i, cell_px)) else { continue };
        let (c, r) = ((q[0] / step).round(), (q[1] / step).round());
        if !(c >= 0.0 && r >= 0.0 && c < grid_b.cols as f64 && r < grid_b.rows as f64) {
            continue;
        }
        let d = ((q[0] - c * step).powi(2) + (q[1] - r * step).powi(2)).sqrt();
        if d > radius {
            continue;
        }
        let j = r as usize * grid_b.cols + c as usize;
        match best[j] {
            Some((bd, _)) if bd <= d => {}
            _ => best[j] = Some((d, i)),
        }
    }
    let mut pairs: Vec<(usize, usize)> = best
        .iter()
        .enumerate()
        .filter_map(|(j, b)| b.map(|(_, i)| (i, j)))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rectified() -> FundamentalMatrix {
        FundamentalMatrix::from_raw(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0))
    }

    #[test]
    fn identity_and_translation_warps() {
        let p = warp_points(&Homography::identity(), &[[3.0, 4.0]]).unwrap();
        assert_eq!(p, vec![[3.0, 4.0]]);
        let p = warp_points(&Homography::translation(5.0, 0.0), &[[1.0, 1.0]]).unwrap();
        assert_eq!(p, vec![[6.0, 1.0]]);
    }

    #[test]
    fn warp_rejects_points_on_the_line_at_infinity() {
        let h = Homography::new(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0)).unwrap();
        assert!(matches!(h.warp_point([-1.0, 0.0]), Err(GeometryError::DegenerateWarp(..))));
    }

    #[test]
    fn normalization_is_idempotent() {
        let m = Matrix3::new(2.0, 0.1, 3.0, 0.2, 1.5, -1.0, 0.001, 0.002, 4.0);
        let h = Homography::new(m).unwrap();
        assert_eq!(h.matrix()[(2, 2)], 1.0);
        assert_eq!(Homography::new(*h.matrix()).unwrap(), h);
    }

    #[test]
    fn rectified_fundamental_from_pose() {
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0), Matrix3::identity()).unwrap();
        let f = fundamental_from_pose(&pose).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -s, 0.0, s, 0.0);
        assert_abs_diff_eq!(*f.matrix(), expected, epsilon = 1e-15);
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let pose = CameraPose::new(Matrix3::identity(), Vector3::zeros(), Matrix3::identity()).unwrap();
        assert_eq!(fundamental_from_pose(&pose), Err(GeometryError::DegeneratePose));
    }

    #[test]
    fn epipolar_distance_examples() {
        let f = rectified();
        assert_eq!(symmetric_epipolar_distance(&f, [3.0, 2.0], [7.0, 2.0]).unwrap(), 0.0);
        // Point-to-line distances: each point is 1px from the other's line.
        assert_abs_diff_eq!(symmetric_epipolar_distance(&f, [0.0, 0.0], [0.0, 1.0]).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn epipolar_distance_undefined_at_epipole() {
        // F with both epipoles at the origin of each image.
        let f = FundamentalMatrix::from_raw(Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(
            symmetric_epipolar_distance(&f, [0.0, 0.0], [0.0, 0.0]),
            Err(GeometryError::UndefinedDistance)
        );
        assert!(symmetric_epipolar_distance_floored(&f, [0.0, 0.0], [0.0, 0.0]).is_finite());
    }

    #[test]
    fn corner_error_examples() {
        let h = Homography::new(Matrix3::new(1.1, 0.05, 3.0, -0.02, 0.95, 1.0, 1e-4, 2e-4, 1.0)).unwrap();
        assert_eq!(corner_error(&h, &h, 64, 48).unwrap(), 0.0);
        let shifted = Homography::translation(1.0, 0.0).compose(&h).unwrap();
        assert_abs_diff_eq!(corner_error(&shifted, &h, 64, 48).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_at_thresholds(&[0.0, 0.0, 0.0], &[5.0]).unwrap(), vec![1.0]);
        assert_eq!(auc_at_thresholds(&[11.0, 12.0], &[10.0]).unwrap(), vec![0.0]);
        assert_eq!(auc_at_thresholds(&[], &[10.0]), Err(GeometryError::EmptyInput));
        let inf = auc_at_thresholds(&[f64::INFINITY, 0.0], &[3.0]).unwrap();
        assert_abs_diff_eq!(inf[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn ransac_needs_four_matches() {
        let pts = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let c = CorrespondenceSet::new(pts.clone(), pts).unwrap();
        assert_eq!(estimate_homography_ransac(&c, 3.0, 100, 0), Err(GeometryError::InsufficientMatches(3)));
    }

    #[test]
    fn gt_matches_identity_and_one_cell_shift() {
        let g = GridShape::new(4, 5);
        let diag = gt_coarse_matches(&Homography::identity(), g, g, 8);
        assert_eq!(diag, (0..20).map(|i| (i, i)).collect::<Vec<_>>());
        let shifted = gt_coarse_matches(&Homography::translation(8.0, 0.0), g, g, 8);
        let expected: Vec<_> = (0..20).filter(|i| i % 5 != 4).map(|i| (i, i + 1)).collect();
        assert_eq!(shifted, expected);
    }

    #[test]
    fn correspondence_set_rejects_mismatched_lengths() {
        assert!(CorrespondenceSet::new(vec![[0.0, 0.0]], vec![]).is_err());
        assert!(CorrespondenceSet::new(vec![[f64::NAN, 0.0]], vec![[0.0, 0.0]]).is_err());
    }
}
