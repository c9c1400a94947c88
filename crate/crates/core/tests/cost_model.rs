use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicmatch::evaluator::{count_ops, CostInputs};
use topicmatch::model::ModelConfig;
use topicmatch::topic_matcher::Variant;

/// Populations summing to `n` with `dominant` features in topic `hot`.
fn populations(rng: &mut ChaCha8Rng, n: usize, k: usize, hot: usize, dominant: usize) -> Vec<usize> {
    let mut pops = vec![0; k];
    pops[hot] = dominant;
    for _ in dominant..n {
        pops[rng.random_range(0..k)] += 1;
    }
    pops
}

/// The eight topics with the largest population product, ties to the lower index.
fn top_products(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by_key(|&t| (std::cmp::Reverse(a[t] * b[t]), t));
    idx.truncate(8);
    idx
}

/// Plus-variant augmentation exceeds fast merging once the dominant topic
/// holds more than sqrt(N·(K + D + 2·H)/4) features in both images.
#[test]
fn fast_is_cheaper_than_plus_when_one_topic_dominates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = ModelConfig::default();
    let (h, w, k) = (512, 512, base.matcher.num_topics);
    let n = (h / 8) * (w / 8);
    let c = (k + base.coarse_dim() + 2 * base.ffn_width()) as f64 / 4.0;
    let threshold = (n as f64 * c).sqrt().ceil() as usize;
    for _ in 0..20 {
        let dominant = rng.random_range(threshold..=n);
        let hot = rng.random_range(0..k);
        let populations_a = populations(&mut rng, n, k, hot, dominant);
        let populations_b = populations(&mut rng, n, k, hot, dominant);
        let inputs = CostInputs {
            height_a: h,
            width_a: w,
            height_b: h,
            width_b: w,
            covisible: top_products(&populations_a, &populations_b),
            populations_a,
            populations_b,
            num_matches: 0,
        };
        let cost = |variant| {
            let mut cfg = base.clone();
            cfg.matcher.variant = variant;
            count_ops(&cfg, &inputs).unwrap().coarse_total()
        };
        let (fast, plus) = (cost(Variant::Fast), cost(Variant::Plus));
        assert!(fast < plus, "dominant {dominant}: fast {fast} plus {plus}");
    }
}

#[test]
fn empty_covisible_set_costs_no_augmentation() {
    let inputs = CostInputs::single_topic(64, 64, 4, 0);
    let mut cfg = ModelConfig::tiny(Variant::Plus);
    cfg.matcher.num_topics = 4;
    let with_topic = count_ops(&cfg, &inputs).unwrap().coarse_total();
    let none = count_ops(&cfg, &CostInputs { covisible: Vec::new(), ..inputs }).unwrap().coarse_total();
    assert!(none < with_topic);
}
