//! At a vanishing temperature the detected keypoint is the arg-max cell.

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicmatch::fine_refiner::{detect_keypoint, FineConfig, FineRefinerParams, GridMap, MixerBlock};
use topicmatch::nn::{to_f64_rows, ForwardCtx, Linear};

use crate::oracles::masked_argmax;
use crate::util::{f64_store, normals, tensor};
use crate::Check;

pub const MAPS: usize = 100;
pub const TEMPERATURE: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
const MIN_GAP: f64 = 0.05;

fn zero_linear(l: &Linear) -> candle_core::Result<()> {
    l.weight.set(&l.weight.as_tensor().zeros_like()?)?;
    if let Some(b) = &l.bias {
        b.set(&b.as_tensor().zeros_like()?)?;
    }
    Ok(())
}

/// Residual blocks with zeroed output layers pass their input through.
fn make_identity(block: &MixerBlock) -> candle_core::Result<()> {
    zero_linear(&block.token_fc2)?;
    zero_linear(&block.channel_fc2)
}

/// Detector whose score map is channel 0 of the patch.
pub fn channel_zero_detector(window: usize, dim: usize, seed: u64) -> anyhow::Result<FineRefinerParams> {
    let mut store = f64_store(seed);
    let cfg = FineConfig { window, ..FineConfig::default() };
    let params = FineRefinerParams::new(&mut store, &cfg, dim)?;
    for block in &params.detector {
        make_identity(block)?;
    }
    zero_linear(&params.head)?;
    let mut head = vec![0.0; dim];
    head[0] = 1.0;
    params.head.weight.set(&tensor(head, &[1, dim])?)?;
    Ok(params)
}

pub fn run(seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let ctx = ForwardCtx::eval();
    let dim = 4;
    let mut worst: f64 = 0.0;
    let mut maps = 0;
    for window in [3, 5, 7] {
        let params = channel_zero_detector(window, dim, seed)?;
        let grid = GridMap::new(window);
        let np = window * window;
        let count = MAPS / 3 + usize::from(window == 3) * (MAPS % 3);
        let mut scores = Vec::with_capacity(count);
        let mut masks = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * np * dim);
        for _ in 0..count {
            let gap = rng.random_range(MIN_GAP..1.0);
            let mut s: Vec<f64> = (0..np).map(|n| n as f64 * gap - 0.5 * np as f64 * gap).collect();
            s.shuffle(&mut rng);
            let keep = rng.random_range(0.2..1.0);
            let mut mask: Vec<bool> = (0..np).map(|_| rng.random::<f64>() < keep).collect();
            mask[rng.random_range(0..np)] = true;
            let other = normals(&mut rng, np * (dim - 1), 1.0);
            for n in 0..np {
                values.push(s[n]);
                values.extend_from_slice(&other[n * (dim - 1)..(n + 1) * (dim - 1)]);
            }
            scores.push(s);
            masks.push(mask);
        }
        let patches: Tensor = tensor(values, &[count, np, dim])?;
        let kp = detect_keypoint(&ctx, &params, &patches, &masks, &grid, TEMPERATURE)?;
        for (k, local) in to_f64_rows(&kp.local)?.iter().enumerate() {
            let best = masked_argmax(&scores[k], &masks[k]).expect("at least one valid cell");
            let (gx, gy) = ((best % window) as f64, (best / window) as f64);
            worst = worst.max((local[0] - gx).abs().max((local[1] - gy).abs()));
            maps += 1;
        }
    }
    Ok(vec![Check::at_most(format!("max distance to the arg-max cell over {maps} maps (cells)"), worst, TOLERANCE)])
}
