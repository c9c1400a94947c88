//! Epipolar consistency of the synthesized ground truth, scale invariance
//! of the epipolar distance and a vanishing fine loss on exact matches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicmatch::geometry::{symmetric_epipolar_distance, FundamentalMatrix, Point2};
use topicmatch::losses::fine_epipolar_loss;
use topicmatch::synth_data::{generate_scene_pair, SceneParams, ScenePair};

use crate::oracles::point_line_epipolar;
use crate::util::tensor;
use crate::Check;

pub const SCENES: u64 = 20;
pub const POINTS_PER_SCENE: usize = 100;

/// Uniform points of A whose homography image lands inside B.
pub fn gt_points(pair: &ScenePair, n: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<(Vec<Point2>, Vec<Point2>)> {
    let (w, h) = (pair.image_a.width as f64, pair.image_a.height as f64);
    let (wb, hb) = (pair.image_b.width as f64, pair.image_b.height as f64);
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..100 * n {
        if a.len() == n {
            break;
        }
        let x = [rng.random_range(0.0..w - 1.0), rng.random_range(0.0..h - 1.0)];
        let y = pair.homography.warp_point(x)?;
        if (0.0..=wb - 1.0).contains(&y[0]) && (0.0..=hb - 1.0).contains(&y[1]) {
            a.push(x);
            b.push(y);
        }
    }
    anyhow::ensure!(a.len() == n, "scene {} has too little overlap for {n} points", pair.seed);
    Ok((a, b))
}

fn residual(f: &FundamentalMatrix, x: Point2, y: Point2) -> f64 {
    let m = f.matrix();
    let xh = [x[0], x[1], 1.0];
    let yh = [y[0], y[1], 1.0];
    let mut r = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            r += xh[i] * m[(i, j)] * yh[j];
        }
    }
    r.abs()
}

pub fn run(seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let params = SceneParams::default();
    let (mut worst_residual, mut worst_rescale, mut worst_loss, mut worst_oracle) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut count = 0;
    for s in 0..SCENES {
        let pair = generate_scene_pair(seed + s, &params)?;
        let f = &pair.fundamental;
        let (a, b) = gt_points(&pair, POINTS_PER_SCENE, &mut rng)?;
        for (x, y) in a.iter().zip(&b) {
            worst_residual = worst_residual.max(residual(f, *x, *y));
            count += 1;
        }

        let m = f.matrix();
        let rows = [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]];
        for (x, y) in a.iter().zip(&b).take(20) {
            let y_off = [y[0] + rng.random_range(-3.0..3.0), y[1] + rng.random_range(-3.0..3.0)];
            let d = symmetric_epipolar_distance(f, *x, y_off)?;
            worst_oracle = worst_oracle.max((d - point_line_epipolar(&rows, *x, y_off)).abs() / d.max(1e-12));
            for scale in [1e-3, 0.37, 7.5, 1e4] {
                let scaled = FundamentalMatrix::from_raw(m * scale);
                let ds = symmetric_epipolar_distance(&scaled, *x, y_off)?;
                worst_rescale = worst_rescale.max((ds - d).abs() / d.max(1e-300));
            }
        }

        let flat = |pts: &[Point2]| pts.iter().flat_map(|p| [p[0], p[1]]).collect::<Vec<f64>>();
        let xa = tensor(flat(&a), &[a.len(), 2])?;
        let xb = tensor(flat(&b), &[b.len(), 2])?;
        let loss = fine_epipolar_loss(&xa, &xb, f)?.to_scalar::<f64>()?;
        worst_loss = worst_loss.max(loss.abs());
    }
    Ok(vec![
        Check::at_most(format!("max |xᵀF y| over {count} GT pairs in {SCENES} scenes"), worst_residual, 1e-9),
        Check::at_most("max relative change of the epipolar distance under F rescaling", worst_rescale, 1e-9),
        Check::at_most("max fine epipolar loss on GT correspondences", worst_loss, 1e-9),
        Check::at_most("max relative deviation from the point-to-line oracle", worst_oracle, 1e-9),
    ])
}
