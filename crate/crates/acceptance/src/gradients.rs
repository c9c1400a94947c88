//! Central differences against autodiff in float64.

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicmatch::fine_refiner::{detect_keypoint, match_in_patch, FineConfig, FineRefinerParams, GridMap};
use topicmatch::losses::{coarse_feature_loss, fine_epipolar_loss, topic_matching_loss, total_loss_tensor, LossWeights, SupervisionBundle};
use topicmatch::nn::{softmax_last, to_f64_vec, AttentionBlock, ForwardCtx};
use topicmatch::synth_data::{generate_scene_pair, SceneParams};
use topicmatch::topic_matcher::{context_pool, dual_softmax, infer_topic_distribution, merge_context, MergeLayer, TopicBank};

use crate::util::{f64_store, jitter_store, normals, tensor, var};
use crate::Check;

pub const SLICE: usize = 10;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const SCALE_FLOOR: f64 = 1e-5;

/// Largest relative error between autodiff and central differences on
/// `SLICE` scalar coordinates drawn uniformly from `vars`.
pub fn check(vars: &[Var], rng: &mut ChaCha8Rng, loss: impl Fn() -> anyhow::Result<Tensor>) -> anyhow::Result<f64> {
    let grads = loss()?.backward()?;
    let sizes: Vec<usize> = vars.iter().map(|v| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    for _ in 0..SLICE {
        let mut flat = rng.random_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let v = &vars[k];
        let analytic = match grads.get(v.as_tensor()) {
            Some(g) => to_f64_vec(g)?[flat],
            None => 0.0,
        };
        let base = to_f64_vec(v.as_tensor())?;
        let eval_at = |x: f64| -> anyhow::Result<f64> {
            let mut vals = base.clone();
            vals[flat] = x;
            v.set(&tensor(vals, v.dims())?)?;
            Ok(loss()?.to_scalar::<f64>()?)
        };
        let plus = eval_at(base[flat] + STEP)?;
        let minus = eval_at(base[flat] - STEP)?;
        v.set(&tensor(base.clone(), v.dims())?)?;
        let numeric = (plus - minus) / (2.0 * STEP);
        let scale = analytic.abs().max(numeric.abs()).max(SCALE_FLOOR);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    Ok(worst)
}

fn random_gt(rng: &mut ChaCha8Rng, n_a: usize, n_b: usize, count: usize) -> Vec<(usize, usize)> {
    let mut gt: Vec<(usize, usize)> = (0..count).map(|_| (rng.random_range(0..n_a), rng.random_range(0..n_b))).collect();
    gt.sort_unstable();
    gt.dedup();
    gt
}

pub fn run(seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let pair = generate_scene_pair(seed, &SceneParams::default())?;
    let f = pair.fundamental;
    let mut checks = Vec::new();

    let (n_a, n_b, k) = (7, 6, 5);
    let la = var(normals(&mut rng, n_a * k, 1.0), &[n_a, k])?;
    let lb = var(normals(&mut rng, n_b * k, 1.0), &[n_b, k])?;
    let sup = SupervisionBundle { n_negatives: 2, ..SupervisionBundle::new(random_gt(&mut rng, n_a, n_b, 5), f) };
    let topic = check(&[la.clone(), lb.clone()], &mut rng, || {
        let mut neg_rng = ChaCha8Rng::seed_from_u64(11);
        Ok(topic_matching_loss(&softmax_last(la.as_tensor())?, &softmax_last(lb.as_tensor())?, &sup, &mut neg_rng)?)
    })?;
    checks.push(Check::at_most("topic_matching_loss: max relative error", topic, TOLERANCE));

    let d = 6;
    let fa = var(normals(&mut rng, n_a * d, 0.5), &[n_a, d])?;
    let fb = var(normals(&mut rng, n_b * d, 0.5), &[n_b, d])?;
    let gt = random_gt(&mut rng, n_a, n_b, 4);
    let ctx = ForwardCtx::eval();
    let feat = check(&[fa.clone(), fb.clone()], &mut rng, || {
        Ok(coarse_feature_loss(&dual_softmax(&ctx, fa.as_tensor(), fb.as_tensor(), 0.5)?, &gt, 1e-6)?)
    })?;
    checks.push(Check::at_most("coarse_feature_loss: max relative error", feat, TOLERANCE));

    let m = 6;
    let (pa, pb) = crate::geometry_suite::gt_points(&pair, m, &mut rng)?;
    let jitter = |pts: &[[f64; 2]], rng: &mut ChaCha8Rng| -> Vec<f64> {
        pts.iter().flat_map(|p| [p[0] + rng.random_range(-2.0..2.0), p[1] + rng.random_range(-2.0..2.0)]).collect()
    };
    let xa = var(jitter(&pa, &mut rng), &[m, 2])?;
    let xb = var(jitter(&pb, &mut rng), &[m, 2])?;
    let fine = check(&[xa.clone(), xb.clone()], &mut rng, || Ok(fine_epipolar_loss(xa.as_tensor(), xb.as_tensor(), &f)?))?;
    checks.push(Check::at_most("fine_epipolar_loss: max relative error", fine, TOLERANCE));

    let composite = composite(seed, &mut rng, &pair.fundamental, &pa)?;
    checks.push(Check::at_most("composite total_loss: max relative error", composite, TOLERANCE));
    Ok(checks)
}

/// Topic pooling, merging, dual-softmax, keypoint detection and in-patch
/// matching feeding all three loss terms.
fn composite(seed: u64, rng: &mut ChaCha8Rng, f: &topicmatch::geometry::FundamentalMatrix, anchors: &[[f64; 2]]) -> anyhow::Result<f64> {
    let (k, d, heads, df) = (4, 8, 2, 4);
    let (n_a, n_b, m, window) = (6, 5, 3, 3);
    let np = window * window;
    let mut store = f64_store(seed + 44);
    let bank = TopicBank::new(&mut store, k, d, 0.0)?;
    let pool = AttentionBlock::new(&mut store, "pool", d, heads, 2 * d)?;
    let merge = MergeLayer::new(&mut store, d, 2 * d)?;
    let fine_cfg = FineConfig { window, token_hidden: 4, channel_hidden: 6, ..FineConfig::default() };
    let fine = FineRefinerParams::new(&mut store, &fine_cfg, df)?;
    jitter_store(&store, rng, 0.2)?;

    let fa = var(normals(rng, n_a * d, 1.0), &[n_a, d])?;
    let fb = var(normals(rng, n_b * d, 1.0), &[n_b, d])?;
    let patches_a = var(normals(rng, m * np * df, 1.0), &[m, np, df])?;
    let patches_b = var(normals(rng, m * np * df, 1.0), &[m, np, df])?;
    let mask: Vec<Vec<bool>> = (0..m).map(|i| (0..np).map(|n| n != i).collect()).collect();
    let grid = GridMap::new(window);
    let gt = random_gt(rng, n_a, n_b, 4);
    let sup = SupervisionBundle { n_negatives: 2, ..SupervisionBundle::new(gt.clone(), *f) };
    // Patch origins sit next to true correspondences of the scene.
    let offs: Vec<f64> = anchors.iter().take(m).flat_map(|p| [p[0] - 2.0, p[1] - 2.0]).collect();
    let offs_a = tensor(offs.clone(), &[m, 2])?;
    let offs_b = tensor(offs.iter().map(|v| v + 1.5).collect(), &[m, 2])?;

    let mut vars: Vec<Var> = store.params().values().cloned().collect();
    vars.extend([fa.clone(), fb.clone(), patches_a.clone(), patches_b.clone()]);
    let ctx = ForwardCtx::eval();
    check(&vars, rng, || {
        let pooled_a = context_pool(&ctx, &bank, &pool, fa.as_tensor(), 0)?;
        let pooled_b = context_pool(&ctx, &bank, &pool, fb.as_tensor(), 1)?;
        let dist_a = infer_topic_distribution(&ctx, &pooled_a, fa.as_tensor())?;
        let dist_b = infer_topic_distribution(&ctx, &pooled_b, fb.as_tensor())?;
        let merged_a = merge_context(&ctx, &merge, fa.as_tensor(), &pooled_a, &dist_a)?;
        let merged_b = merge_context(&ctx, &merge, fb.as_tensor(), &pooled_b, &dist_b)?;
        let p = dual_softmax(&ctx, &merged_a.features, &merged_b.features, 1.0)?;
        let feat = coarse_feature_loss(&p, &gt, 1e-6)?;
        let mut neg_rng = ChaCha8Rng::seed_from_u64(5);
        let topic = topic_matching_loss(&dist_a.theta, &dist_b.theta, &sup, &mut neg_rng)?;
        let kp = detect_keypoint(&ctx, &fine, patches_a.as_tensor(), &mask, &grid, 0.5)?;
        let corr = match_in_patch(&ctx, &kp.descriptors, patches_b.as_tensor(), &mask, &grid)?;
        let xa = ((kp.local * 2.0)? + &offs_a)?;
        let xb = ((corr.local * 2.0)? + &offs_b)?;
        let l_fine = fine_epipolar_loss(&xa, &xb, f)?;
        Ok(total_loss_tensor(&feat, &topic, Some(&l_fine), LossWeights::default())?)
    })
}
