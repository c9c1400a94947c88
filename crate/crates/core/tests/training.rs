use topicmatch::model::ModelConfig;
use topicmatch::nn::to_f64_vec;
use topicmatch::synth_data::{generate_scene_pair, SceneParams, ScenePair};
use topicmatch::topic_matcher::Variant;
use topicmatch::trainer::{TrainConfig, TrainOn, Trainer};

fn pairs(n: u64) -> Vec<(usize, ScenePair)> {
    let params = SceneParams { height: 64, width: 64, ..SceneParams::default() };
    (0..n).map(|s| (s as usize, generate_scene_pair(100 + s, &params).unwrap())).collect()
}

fn cfg(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig { model: ModelConfig::tiny(variant), epochs, train_on: TrainOn::All, validate_every: 0, ..TrainConfig::default() }
}

fn param_bits(t: &Trainer) -> Vec<Vec<u64>> {
    t.model.store.params().values().map(|v| to_f64_vec(v.as_tensor()).unwrap().iter().map(|x| x.to_bits()).collect()).collect()
}

#[test]
fn single_pair_overfit_lowers_the_loss() {
    let data = pairs(1);
    let mut t = Trainer::new(cfg(Variant::Fast, 40)).unwrap();
    let report = t.run(&data, &[], None).unwrap();
    let first = report.epochs.first().unwrap().mean_total;
    let last = report.epochs.last().unwrap().mean_total;
    assert!(last < 0.7 * first, "{first} -> {last}");
    assert!(report.steps.iter().all(|s| s.total.is_finite() && s.grad_norm.is_finite()));
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let data = pairs(2);
    let mut t = Trainer::new(TrainConfig { lr: 0.0, ..cfg(Variant::Plus, 2) }).unwrap();
    let before = param_bits(&t);
    t.run(&data, &[], None).unwrap();
    assert_eq!(t.step, 4);
    assert_eq!(param_bits(&t), before);
}

#[test]
fn same_seed_gives_identical_loss_traces() {
    let data = pairs(5);
    let trace = || {
        let mut t = Trainer::new(cfg(Variant::Plus, 1)).unwrap();
        let r = t.run(&data, &[], None).unwrap();
        (r.steps.iter().map(|s| (s.pair_id, s.total.to_bits())).collect::<Vec<_>>(), param_bits(&t))
    };
    let (a, pa) = trace();
    let (b, pb) = trace();
    assert_eq!(a.len(), 5);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}
