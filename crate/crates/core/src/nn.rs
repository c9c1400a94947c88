//! Small neural-network toolkit on top of `candle_core` tensors: a named
//! parameter store, the forward context (mode, sampling RNG, multiply-
//! accumulate tally) and the layers shared by the backbone, the topic
//! matcher and the fine refiner.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Device, Result, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Training or inference behavior (batch statistics, dropout, sampling).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Pipeline stage a multiply-accumulate is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Backbone,
    ContextPooling,
    TopicInference,
    ContextMerging,
    TopicAugmentation,
    DualSoftmax,
    FineRefinement,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Backbone,
        Stage::ContextPooling,
        Stage::TopicInference,
        Stage::ContextMerging,
        Stage::TopicAugmentation,
        Stage::DualSoftmax,
        Stage::FineRefinement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::ContextPooling => "context_pooling",
            Stage::TopicInference => "topic_inference",
            Stage::ContextMerging => "context_merging",
            Stage::TopicAugmentation => "topic_augmentation",
            Stage::DualSoftmax => "dual_softmax",
            Stage::FineRefinement => "fine_refinement",
        }
    }

    fn index(self) -> usize {
        Stage::ALL.iter().position(|s| *s == self).unwrap()
    }
}

/// Multiply-accumulate counts per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacTally {
    counts: [u64; 7],
}

impl MacTally {
    pub fn get(&self, stage: Stage) -> u64 {
        self.counts[stage.index()]
    }

    pub fn add(&mut self, stage: Stage, macs: u64) {
        self.counts[stage.index()] += macs;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Stage, u64)> + '_ {
        Stage::ALL.iter().map(|s| (*s, self.get(*s)))
    }
}

/// Per-call state threaded through every forward pass.
///
/// Every matrix product executed by the layers in this module reports its
/// multiply-accumulate count here, attributed to the current stage.
pub struct ForwardCtx {
    pub mode: Mode,
    rng: RefCell<ChaCha8Rng>,
    stage: Cell<Stage>,
    tally: RefCell<MacTally>,
    entered: Cell<Instant>,
    seconds: RefCell<[f64; 7]>,
}

impl ForwardCtx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            stage: Cell::new(Stage::Backbone),
            tally: RefCell::new(MacTally::default()),
            entered: Cell::new(Instant::now()),
            seconds: RefCell::new([0.0; 7]),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Switches the stage that subsequent work is attributed to.
    pub fn set_stage(&self, stage: Stage) {
        self.flush_time();
        self.stage.set(stage);
    }

    fn flush_time(&self) {
        let now = Instant::now();
        self.seconds.borrow_mut()[self.stage.get().index()] += (now - self.entered.get()).as_secs_f64();
        self.entered.set(now);
    }

    /// Wall-clock seconds spent in each stage so far.
    pub fn stage_seconds(&self) -> BTreeMap<Stage, f64> {
        self.flush_time();
        let s = self.seconds.borrow();
        Stage::ALL.iter().map(|st| (*st, s[st.index()])).collect()
    }

    pub fn stage(&self) -> Stage {
        self.stage.get()
    }

    pub fn add_macs(&self, macs: u64) {
        self.tally.borrow_mut().add(self.stage.get(), macs);
    }

    pub fn tally(&self) -> MacTally {
        *self.tally.borrow()
    }

    pub fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }
}

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

/// Deterministic seed for a named parameter, independent of creation order.
fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the store seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Named trainable parameters and non-trainable buffers.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            seed,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn init_values(&self, name: &str, n: usize, init: Init) -> Vec<f64> {
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect()
            }
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let n = shape.iter().product();
        let values = self.init_values(name, n, init);
        let var = Var::from_tensor(&self.tensor(&values, shape)?)?;
        if self.params.insert(name.to_string(), var.clone()).is_some() {
            candle_core::bail!("duplicate parameter name {name}");
        }
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let n = shape.iter().product();
        let values = self.init_values(name, n, init);
        let var = Var::from_tensor(&self.tensor(&values, shape)?)?;
        if self.buffers.insert(name.to_string(), var.clone()).is_some() {
            candle_core::bail!("duplicate buffer name {name}");
        }
        Ok(var)
    }

    /// Tensor in the store's dtype built from `f64` values.
    pub fn tensor(&self, values: &[f64], shape: &[usize]) -> Result<Tensor> {
        Tensor::from_slice(values, shape, &self.device)?.to_dtype(self.dtype)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }
}

/// Softmax along the last dimension. The max shift is detached; softmax is
/// invariant to it.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    e.broadcast_div(&s)
}

/// `a @ b` for 2D operands with MAC accounting.
pub fn matmul(ctx: &ForwardCtx, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let n = b.dim(1)?;
    ctx.add_macs((m * k * n) as u64);
    a.matmul(b)
}

/// Batched `a @ b` over a leading batch dimension with MAC accounting.
pub fn batched_matmul(ctx: &ForwardCtx, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bsz, m, k) = a.dims3()?;
    let n = b.dim(2)?;
    ctx.add_macs((bsz * m * k * n) as u64);
    a.contiguous()?.matmul(&b.contiguous()?)
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_std(store, name, d_in, d_out, bias, 1.0 / (d_in as f64).sqrt())
    }

    pub fn with_std(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, std: f64) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[d_out, d_in], Init::Normal(std))?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies the layer to the last dimension of `x`.
    pub fn forward(&self, ctx: &ForwardCtx, x: &Tensor) -> Result<Tensor> {
        let rows = x.elem_count() / self.d_in();
        ctx.add_macs((rows * self.d_in() * self.d_out()) as u64);
        let y = x.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor()),
            None => Ok(y),
        }
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: store.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())
    }
}

/// 2D convolution without bias (every conv is followed by a normalization
/// or is a 1×1 projection).
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = store.param(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Normal((2.0 / fan_in).sqrt()),
        )?;
        Ok(Self { weight, stride, padding: kernel / 2 })
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let (_, c_in, k, _) = self.weight.dims4()?;
        ctx.add_macs((y.elem_count() * c_in * k * k) as u64);
        Ok(y)
    }
}

/// Batch normalization over `(N, H, W)` with running statistics for eval.
#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: store.param(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if ctx.is_train() {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let new_var =
                ((self.running_var.as_tensor() * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)
    }
}

/// Two-layer perceptron with a tanh-approximated GELU in between.
#[derive(Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::with_std(store, &format!("{name}.fc2"), hidden, dim, true, 0.5 / (hidden as f64).sqrt())?,
        })
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(ctx, &self.fc1.forward(ctx, x)?.gelu()?)
    }
}

/// Multi-head scaled dot-product attention over 2D token matrices.
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            candle_core::bail!("{dim} channels cannot be split into {heads} heads");
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false)?,
            o: Linear::with_std(store, &format!("{name}.o"), dim, dim, false, 0.5 / (dim as f64).sqrt())?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        x.reshape((n, self.heads, d / self.heads))?.transpose(0, 1)?.contiguous()
    }

    /// `softmax(QKᵀ/√d_head) V` followed by the output projection.
    pub fn forward(&self, ctx: &ForwardCtx, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (nq, d) = query.dims2()?;
        let dh = d / self.heads;
        let q = self.split_heads(&self.q.forward(ctx, query)?)?;
        let k = self.split_heads(&self.k.forward(ctx, context)?)?;
        let v = self.split_heads(&self.v.forward(ctx, context)?)?;
        let scores = (batched_matmul(ctx, &q, &k.transpose(1, 2)?)? / (dh as f64).sqrt())?;
        let weights = softmax_last(&scores)?;
        let mixed = batched_matmul(ctx, &weights, &v)?;
        let merged = mixed.transpose(0, 1)?.contiguous()?.reshape((nq, d))?;
        self.o.forward(ctx, &merged)
    }
}

/// Structural switches of an [`AttentionBlock`]; all on in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOptions {
    pub pre_norm: bool,
    pub residual: bool,
    pub feed_forward: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self { pre_norm: true, residual: true, feed_forward: true }
    }
}

/// Pre-norm residual attention block: `x + MHA(LN(x), LN(ctx))`, then
/// `x + FFN(LN(x))`.
#[derive(Clone)]
pub struct AttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ffn: FeedForward,
    pub options: BlockOptions,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim)?,
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_hidden)?,
            options: BlockOptions::default(),
        })
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (q_in, kv_in) = if self.options.pre_norm {
            (self.norm_q.forward(x)?, self.norm_kv.forward(context)?)
        } else {
            (x.clone(), context.clone())
        };
        let attended = self.attn.forward(ctx, &q_in, &kv_in)?;
        let mut out = if self.options.residual { (x + attended)? } else { attended };
        if self.options.feed_forward {
            let ff_in = if self.options.pre_norm { self.norm_ff.forward(&out)? } else { out.clone() };
            out = (&out + self.ffn.forward(ctx, &ff_in)?)?;
        }
        Ok(out)
    }
}

/// Flattens a tensor to `f64` values regardless of dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

/// Row-major 2D copy of a tensor as `f64`.
pub fn to_f64_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    t.to_dtype(DType::F64)?.to_vec2::<f64>()
}

/// `u32` index tensor on the CPU.
pub fn index_tensor(ids: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
    Tensor::from_vec(v, ids.len(), &Device::Cpu)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_order_independent() {
        let mut a = ParamStore::new(DType::F64, 7);
        let x1 = a.param("x", &[3, 4], Init::Normal(1.0)).unwrap();
        let y1 = a.param("y", &[2], Init::Normal(1.0)).unwrap();
        let mut b = ParamStore::new(DType::F64, 7);
        let y2 = b.param("y", &[2], Init::Normal(1.0)).unwrap();
        let x2 = b.param("x", &[3, 4], Init::Normal(1.0)).unwrap();
        assert_eq!(to_f64_vec(&x1).unwrap(), to_f64_vec(&x2).unwrap());
        assert_eq!(to_f64_vec(&y1).unwrap(), to_f64_vec(&y2).unwrap());
        assert!(a.param("x", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -1000.0]], &Device::Cpu).unwrap();
        let s = to_f64_rows(&softmax_last(&t).unwrap()).unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_counts_macs() {
        let mut store = ParamStore::new(DType::F64, 0);
        let lin = Linear::new(&mut store, "l", 4, 3, true).unwrap();
        let ctx = ForwardCtx::eval();
        ctx.set_stage(Stage::DualSoftmax);
        let x = store.tensor(&[0.5; 20], &[5, 4]).unwrap();
        let y = lin.forward(&ctx, &x).unwrap();
        assert_eq!(y.dims(), &[5, 3]);
        assert_eq!(ctx.tally().get(Stage::DualSoftmax), 60);
        assert_eq!(ctx.tally().total(), 60);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut store = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let x = store.tensor(&(0..16).map(|v| v as f64).collect::<Vec<_>>(), &[1, 2, 2, 4]).unwrap();
        let y = bn.forward(&ForwardCtx::eval(), &x).unwrap();
        let expected: Vec<f64> = (0..16).map(|v| v as f64 / (1.0f64 + 1e-5).sqrt()).collect();
        for (a, b) in to_f64_vec(&y).unwrap().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let train = ForwardCtx::new(Mode::Train, 0);
        bn.forward(&train, &x).unwrap();
        assert_ne!(to_f64_vec(bn.running_mean.as_tensor()).unwrap(), vec![0.0, 0.0]);
    }
}
