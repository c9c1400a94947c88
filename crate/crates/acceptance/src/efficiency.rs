//! Analytic operation counts against the instrumented forward pass, and the
//! fast/plus scaling claim.

use topicmatch::backbone::ImageTensor;
use topicmatch::evaluator::{count_ops, populations, topic_index_map, CostInputs, CostModel};
use topicmatch::model::{Model, ModelConfig};
use topicmatch::nn::{ForwardCtx, Stage};
use topicmatch::synth_data::{generate_scene_pair, SceneParams};
use topicmatch::topic_matcher::Variant;

use crate::Check;

#[derive(Debug, Clone)]
pub struct Shape {
    pub variant: Variant,
    pub size_a: (usize, usize),
    pub size_b: (usize, usize),
    pub tiny: bool,
    pub topics: usize,
    pub k_covis: usize,
    pub tau: f64,
    pub fixed_center: bool,
}

impl Shape {
    fn config(&self) -> ModelConfig {
        let mut cfg = if self.tiny { ModelConfig::tiny(self.variant) } else { ModelConfig::default() };
        cfg.matcher.variant = self.variant;
        cfg.matcher.num_topics = self.topics;
        cfg.matcher.k_covis = self.k_covis;
        cfg.matcher.tau = self.tau;
        cfg.fine.fixed_center = self.fixed_center;
        cfg
    }

    fn label(&self) -> String {
        format!(
            "{} {}×{} / {}×{} K={} k={}{}{}",
            self.variant,
            self.size_a.0,
            self.size_a.1,
            self.size_b.0,
            self.size_b.1,
            self.topics,
            self.k_covis,
            if self.tiny { " tiny" } else { "" },
            if self.fixed_center { " fixed-center" } else { "" }
        )
    }
}

/// Ten shapes covering both variants, unequal image sizes, the fixed-center
/// ablation and the default model at N = 1024, K = 100.
pub fn shapes() -> Vec<Shape> {
    let s = |variant, size_a, size_b, tiny, topics, k_covis, tau, fixed_center| Shape {
        variant,
        size_a,
        size_b,
        tiny,
        topics,
        k_covis,
        tau,
        fixed_center,
    };
    use Variant::{Fast, Plus};
    vec![
        s(Fast, (64, 64), (64, 64), true, 16, 8, 0.01, false),
        s(Plus, (64, 64), (64, 64), true, 16, 8, 0.01, false),
        s(Fast, (96, 64), (64, 96), true, 16, 8, 0.01, false),
        s(Plus, (128, 128), (128, 128), true, 8, 4, 0.01, false),
        s(Fast, (32, 48), (32, 48), true, 4, 2, 0.2, false),
        s(Plus, (48, 32), (64, 64), true, 4, 2, 0.01, false),
        s(Fast, (64, 64), (64, 64), true, 16, 8, 0.01, true),
        s(Plus, (128, 96), (128, 96), true, 16, 16, 0.01, false),
        s(Fast, (256, 256), (256, 256), false, 100, 8, 0.01, false),
        s(Plus, (256, 256), (256, 256), false, 100, 8, 0.01, false),
    ]
}

fn image(h: usize, w: usize, seed: u64, second: bool) -> anyhow::Result<ImageTensor> {
    let pair = generate_scene_pair(seed, &SceneParams { height: h, width: w, ..SceneParams::default() })?;
    Ok(if second { pair.image_b } else { pair.image_a })
}

/// Counted and analytic MACs for one shape, plus the number of matches.
pub fn compare(shape: &Shape, seed: u64) -> anyhow::Result<(CostModel, CostModel, usize)> {
    let cfg = shape.config();
    let model = Model::new(cfg.clone(), seed)?;
    let a = image(shape.size_a.0, shape.size_a.1, seed, false)?;
    let b = image(shape.size_b.0, shape.size_b.1, seed, true)?;
    let ctx = ForwardCtx::eval();
    let out = model.match_pair(&ctx, &a, &b)?;
    let k = cfg.matcher.num_topics;
    let pops = |labels: &Option<Vec<usize>>, theta: &[Vec<f64>]| match labels {
        Some(l) => populations(l, k),
        None => populations(&topic_index_map(theta), k),
    };
    let inputs = CostInputs {
        height_a: a.height,
        width_a: a.width,
        height_b: b.height,
        width_b: b.width,
        populations_a: pops(&out.labels_a, &out.theta_a),
        populations_b: pops(&out.labels_b, &out.theta_b),
        covisible: out.covisible.clone().unwrap_or_default(),
        num_matches: out.fine.len(),
    };
    Ok((CostModel::from_tally(&ctx.tally()), count_ops(&cfg, &inputs)?, out.fine.len()))
}

/// Coarse-stage MACs of both variants of the default model with every
/// feature in one topic.
pub fn dominant_topic_costs(height: usize, width: usize, topics: usize) -> anyhow::Result<(u64, u64)> {
    let inputs = CostInputs::single_topic(height, width, topics, 0);
    let cost = |variant| -> anyhow::Result<u64> {
        let mut cfg = ModelConfig::default();
        cfg.matcher.variant = variant;
        cfg.matcher.num_topics = topics;
        Ok(count_ops(&cfg, &inputs)?.coarse_total())
    };
    Ok((cost(Variant::Fast)?, cost(Variant::Plus)?))
}

pub fn run(seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut mismatched = Vec::new();
    let mut with_matches = 0;
    for (i, shape) in shapes().iter().enumerate() {
        let (counted, analytic, matches) = compare(shape, seed + i as u64)?;
        let bad: Vec<String> = Stage::ALL
            .iter()
            .filter(|s| counted.get(**s) != analytic.get(**s))
            .map(|s| format!("{} counted {} analytic {}", s.name(), counted.get(*s), analytic.get(*s)))
            .collect();
        if matches > 0 {
            with_matches += 1;
        }
        checks.push(Check::info(format!("shape {}: {}", i + 1, shape.label()), format!("{} MACs, {matches} matches", analytic.total())));
        if !bad.is_empty() {
            mismatched.push(format!("shape {}: {}", i + 1, bad.join("; ")));
        }
    }
    checks.push(Check::new(
        "shapes whose analytic count differs from the counter",
        if mismatched.is_empty() { "none".to_string() } else { mismatched.join(" | ") },
        mismatched.is_empty(),
    ));
    checks.push(Check::info("shapes exercising the fine stage", with_matches.to_string()));

    let mut ratios = Vec::new();
    for (h, w) in [(256, 256), (256, 512), (512, 512)] {
        let n = (h / 8) * (w / 8);
        let (fast, plus) = dominant_topic_costs(h, w, 100)?;
        let ratio = plus as f64 / fast as f64;
        checks.push(Check::info(format!("coarse MACs at N={n}, K=100, one dominant topic"), format!("fast {fast}, plus {plus}, plus/fast {ratio:.3}")));
        if n == 4096 {
            checks.push(Check::new("fast < plus at N=4096", format!("{fast} < {plus}"), fast < plus));
        }
        ratios.push(ratio);
    }
    let increasing = ratios.windows(2).all(|w| w[1] > w[0]);
    checks.push(Check::new(
        "plus/fast ratio increases over N = 1024, 2048, 4096",
        format!("{:.3?}", ratios),
        increasing,
    ));
    Ok(checks)
}
