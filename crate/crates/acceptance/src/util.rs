use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use topicmatch::nn::{to_f64_vec, ParamStore};

pub fn normals(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn tensor(values: Vec<f64>, shape: &[usize]) -> candle_core::Result<Tensor> {
    Tensor::from_vec(values, shape, &Device::Cpu)
}

pub fn var(values: Vec<f64>, shape: &[usize]) -> candle_core::Result<Var> {
    Var::from_tensor(&tensor(values, shape)?)
}

/// Row-major rows of a 2D value list.
pub fn rows(values: &[f64], cols: usize) -> Vec<Vec<f64>> {
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Perturbs every parameter of `store` so that biases, LayerNorm affines and
/// zero-initialized weights all carry non-trivial values.
pub fn jitter_store(store: &ParamStore, rng: &mut ChaCha8Rng, std: f64) -> candle_core::Result<()> {
    for v in store.params().values() {
        let base = to_f64_vec(v.as_tensor())?;
        let noise = normals(rng, base.len(), std);
        let next: Vec<f64> = base.iter().zip(noise).map(|(b, n)| b + n).collect();
        v.set(&tensor(next, v.dims())?.to_dtype(v.dtype())?)?;
    }
    Ok(())
}

pub fn f64_store(seed: u64) -> ParamStore {
    ParamStore::new(DType::F64, seed)
}

/// `|a − b|` maximized over two equally long slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
