//! Every topic distribution and fine heatmap is a probability vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicmatch::fine_refiner::{detect_keypoint, match_in_patch, FineConfig, FineRefinerParams, GridMap};
use topicmatch::nn::{to_f64_rows, ForwardCtx};
use topicmatch::topic_matcher::{infer_topic_distribution, PooledTopics};

use crate::util::{f64_store, jitter_store, normals, tensor};
use crate::Check;

pub const CASES: usize = 1000;
const TOLERANCE: f64 = 1e-6;

struct Worst {
    sum_dev: f64,
    min_value: f64,
    masked_mass: f64,
    rows: usize,
}

impl Worst {
    fn new() -> Self {
        Self { sum_dev: 0.0, min_value: f64::INFINITY, masked_mass: 0.0, rows: 0 }
    }

    fn row(&mut self, row: &[f64], mask: Option<&[bool]>) {
        self.rows += 1;
        let s: f64 = row.iter().sum();
        self.sum_dev = self.sum_dev.max(if s.is_finite() { (s - 1.0).abs() } else { f64::INFINITY });
        for (n, &v) in row.iter().enumerate() {
            self.min_value = self.min_value.min(if v.is_nan() { f64::NEG_INFINITY } else { v });
            if mask.is_some_and(|m| !m[n]) {
                self.masked_mass = self.masked_mass.max(v.abs());
            }
        }
    }

    fn checks(&self, name: &str) -> Vec<Check> {
        vec![
            Check::at_most(format!("{name}: max |Σ − 1| over {} rows", self.rows), self.sum_dev, TOLERANCE),
            Check::new(format!("{name}: min entry"), format!("{:.3e}", self.min_value), self.min_value >= 0.0),
        ]
    }
}

fn random_mask(rng: &mut ChaCha8Rng, np: usize) -> Vec<bool> {
    let keep = [1.0, 0.6, 0.15][rng.random_range(0..3)];
    let mut mask: Vec<bool> = (0..np).map(|_| rng.random::<f64>() < keep).collect();
    mask[rng.random_range(0..np)] = true;
    mask
}

pub fn run(seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = ForwardCtx::eval();
    let dim_f = 8;
    let mut fine = Vec::new();
    for window in [3, 5, 7] {
        let mut store = f64_store(seed + window as u64);
        let cfg = FineConfig { window, token_hidden: 8, channel_hidden: 16, ..FineConfig::default() };
        fine.push((window, FineRefinerParams::new(&mut store, &cfg, dim_f)?));
        jitter_store(&store, &mut rng, 0.1)?;
    }

    let (mut theta, mut image, mut heat) = (Worst::new(), Worst::new(), Worst::new());
    for case in 0..CASES {
        let n = rng.random_range(1..=64);
        let k = rng.random_range(1..=32);
        let d = [4, 8, 16][rng.random_range(0..3)];
        let scale = [1e-3, 1.0, 10.0, 100.0][rng.random_range(0..4)];
        let f = tensor(normals(&mut rng, n * d, scale), &[n, d])?;
        let pooled = PooledTopics { local: tensor(normals(&mut rng, k * d, 1.0), &[k, d])?, source_image_id: 0 };
        let dist = infer_topic_distribution(&ctx, &pooled, &f)?;
        for row in dist.theta_rows()? {
            theta.row(&row, None);
        }
        image.row(&dist.image_level_vec()?, None);

        let (window, params) = &fine[case % fine.len()];
        let np = window * window;
        let m = rng.random_range(1..=4);
        let grid = GridMap::new(*window);
        let patches_a = tensor(normals(&mut rng, m * np * dim_f, scale), &[m, np, dim_f])?;
        let patches_b = tensor(normals(&mut rng, m * np * dim_f, scale), &[m, np, dim_f])?;
        let mask_a: Vec<Vec<bool>> = (0..m).map(|_| random_mask(&mut rng, np)).collect();
        let mask_b: Vec<Vec<bool>> = (0..m).map(|_| random_mask(&mut rng, np)).collect();
        let t = [1e-3, 0.1, 1.0][rng.random_range(0..3)];
        let kp = detect_keypoint(&ctx, params, &patches_a, &mask_a, &grid, t)?;
        for (row, mask) in to_f64_rows(&kp.heat)?.iter().zip(&mask_a) {
            heat.row(row, Some(mask));
        }
        let corr = match_in_patch(&ctx, &kp.descriptors, &patches_b, &mask_b, &grid)?;
        for (row, mask) in to_f64_rows(&corr.heat)?.iter().zip(&mask_b) {
            heat.row(row, Some(mask));
        }
    }
    let mut checks = theta.checks("θ rows");
    checks.extend(image.checks("image-level distributions"));
    checks.extend(heat.checks("fine heatmaps"));
    checks.push(Check::new("fine heatmaps: max mass on masked cells", format!("{:.3e}", heat.masked_mass), heat.masked_mass == 0.0));
    Ok(checks)
}
