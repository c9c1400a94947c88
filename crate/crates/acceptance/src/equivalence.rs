//! Library outputs against the plain-loop oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicmatch::nn::{softmax_last, to_f64_rows, AttentionBlock, ForwardCtx};
use topicmatch::topic_matcher::{
    context_pool, covisible_topics, dual_softmax, extract_coarse_matches, merge_context, MergeLayer,
    PooledTopics, TopicBank, TopicDistribution,
};

use crate::oracles::{covisible_by_selection, dual_softmax as dual_softmax_oracle, expected_context, mutual_nearest, BlockOracle};
use crate::util::{f64_store, jitter_store, max_abs_diff, normals, rows, tensor};
use crate::Check;

const TOLERANCE: f64 = 1e-6;

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn dual_softmax_cases(rng: &mut ChaCha8Rng) -> anyhow::Result<f64> {
    let ctx = ForwardCtx::eval();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (na, nb, d) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let temperature = rng.random_range(0.05..1.0);
        let fa = normals(rng, na * d, 1.0);
        let fb = normals(rng, nb * d, 1.0);
        let p = dual_softmax(&ctx, &tensor(fa.clone(), &[na, d])?, &tensor(fb.clone(), &[nb, d])?, temperature)?;
        let expected = dual_softmax_oracle(&rows(&fa, d), &rows(&fb, d), temperature);
        worst = worst.max(max_abs_diff(&flat(&to_f64_rows(&p)?), &flat(&expected)));
    }
    Ok(worst)
}

/// Returns the number of disagreeing cases.
fn mutual_nn_cases(rng: &mut ChaCha8Rng) -> usize {
    let mut mismatches = 0;
    for case in 0..50 {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        // Coarse quantization produces frequent ties.
        let levels = if case % 2 == 0 { 5.0 } else { 1000.0 };
        let p: Vec<f64> = (0..r * c).map(|_| (rng.random::<f64>() * levels).floor() / levels).collect();
        let tau = [0.0, 0.1, 0.2, 0.5][rng.random_range(0..4)];
        let got: Vec<(usize, usize, f64)> =
            extract_coarse_matches(&p, r, c, tau).pairs.iter().map(|m| (m.i, m.j, m.confidence)).collect();
        if got != mutual_nearest(&rows(&p, c), tau) {
            mismatches += 1;
        }
    }
    mismatches
}

fn merge_cases(rng: &mut ChaCha8Rng, seed: u64) -> anyhow::Result<f64> {
    let ctx = ForwardCtx::eval();
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let (n, k, d) = (rng.random_range(1..=16), rng.random_range(1..=8), 4 * rng.random_range(1..=4));
        let mut store = f64_store(seed + case);
        let layer = MergeLayer::new(&mut store, d, 2 * d)?;
        let f = tensor(normals(rng, n * d, 1.0), &[n, d])?;
        let topics = normals(rng, k * d, 1.0);
        let theta = softmax_last(&tensor(normals(rng, n * k, 2.0), &[n, k])?)?;
        let image_level = (theta.sum(0)? / n as f64)?;
        let pooled = PooledTopics { local: tensor(topics.clone(), &[k, d])?, source_image_id: 0 };
        let dist = TopicDistribution { theta: theta.clone(), image_level };
        let merged = merge_context(&ctx, &layer, &f, &pooled, &dist)?;
        let expected = expected_context(&to_f64_rows(&theta)?, &rows(&topics, d));
        worst = worst.max(max_abs_diff(&flat(&to_f64_rows(&merged.context)?), &flat(&expected)));
    }
    Ok(worst)
}

fn covisible_cases(rng: &mut ChaCha8Rng) -> usize {
    let mut mismatches = 0;
    for case in 0..20 {
        let k = rng.random_range(1..=32);
        let levels = if case % 2 == 0 { 4.0 } else { 1e6 };
        let mut draw = || -> Vec<f64> { (0..k).map(|_| (rng.random::<f64>() * levels).floor() / levels).collect() };
        let (a, b) = (draw(), draw());
        let kc = rng.random_range(1..=k);
        if covisible_topics(&a, &b, kc) != covisible_by_selection(&a, &b, kc) {
            mismatches += 1;
        }
    }
    mismatches
}

fn pool_cases(rng: &mut ChaCha8Rng, seed: u64) -> anyhow::Result<f64> {
    let ctx = ForwardCtx::eval();
    let mut worst: f64 = 0.0;
    for case in 0..10 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=4);
        let (k, n) = (rng.random_range(1..=8), rng.random_range(1..=24));
        let mut store = f64_store(seed + 100 + case);
        let bank = TopicBank::new(&mut store, k, d, 0.0)?;
        let block = AttentionBlock::new(&mut store, "pool", d, heads, 3 * d)?;
        jitter_store(&store, rng, 0.3)?;
        let f = normals(rng, n * d, 1.0);
        let pooled = context_pool(&ctx, &bank, &block, &tensor(f.clone(), &[n, d])?, 0)?;
        let bank_rows = to_f64_rows(bank.global.as_tensor())?;
        let expected = BlockOracle::of(&block)?.forward(&bank_rows, &rows(&f, d));
        worst = worst.max(max_abs_diff(&flat(&to_f64_rows(&pooled.local)?), &flat(&expected)));
    }
    Ok(worst)
}

pub fn run(seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let ds = dual_softmax_cases(&mut rng)?;
    let nn = mutual_nn_cases(&mut rng);
    let merge = merge_cases(&mut rng, seed)?;
    let covis = covisible_cases(&mut rng);
    let pool = pool_cases(&mut rng, seed)?;
    Ok(vec![
        Check::at_most("dual_softmax, 20 cases: max abs deviation", ds, TOLERANCE),
        Check::new("extract_coarse_matches, 50 cases: disagreements", nn.to_string(), nn == 0),
        Check::at_most("merge_context context term, 20 cases: max abs deviation", merge, TOLERANCE),
        Check::new("covisible_topics, 20 cases: disagreements", covis.to_string(), covis == 0),
        Check::at_most("context_pool, 10 cases: max abs deviation", pool, TOLERANCE),
    ])
}
