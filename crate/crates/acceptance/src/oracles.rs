//! Reference implementations in plain `f64` loops. None of these call into
//! the library's tensor code.

use topicmatch::nn::{to_f64_vec, AttentionBlock, LayerNorm, Linear};

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row softmax times column softmax of `f_a f_bᵀ / temperature`.
pub fn dual_softmax(f_a: &[Vec<f64>], f_b: &[Vec<f64>], temperature: f64) -> Vec<Vec<f64>> {
    let s: Vec<Vec<f64>> = f_a.iter().map(|a| f_b.iter().map(|b| dot(a, b) / temperature).collect()).collect();
    let row_sm: Vec<Vec<f64>> = s.iter().map(|r| softmax(r)).collect();
    let cols = f_b.len();
    let mut col_sm = vec![vec![0.0; cols]; f_a.len()];
    for j in 0..cols {
        let col: Vec<f64> = s.iter().map(|r| r[j]).collect();
        for (i, v) in softmax(&col).into_iter().enumerate() {
            col_sm[i][j] = v;
        }
    }
    row_sm
        .iter()
        .zip(&col_sm)
        .map(|(r, c)| r.iter().zip(c).map(|(x, y)| x * y).collect())
        .collect()
}

/// `(i, j)` is kept when `p[i][j]` beats every earlier entry of its row and
/// column strictly, is not beaten by any later one, and reaches `tau`.
pub fn mutual_nearest(p: &[Vec<f64>], tau: f64) -> Vec<(usize, usize, f64)> {
    let rows = p.len();
    let cols = p.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let v = p[i][j];
            let row_ok = (0..cols).all(|jj| if jj < j { p[i][jj] < v } else { p[i][jj] <= v });
            let col_ok = (0..rows).all(|ii| if ii < i { p[ii][j] < v } else { p[ii][j] <= v });
            if row_ok && col_ok && v >= tau {
                out.push((i, j, v));
            }
        }
    }
    out
}

/// `Σ_k θ_{i,k} T̂_k` for every feature.
pub fn expected_context(theta: &[Vec<f64>], topics: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = topics.first().map_or(0, Vec::len);
    theta
        .iter()
        .map(|row| {
            let mut acc = vec![0.0; d];
            for (w, t) in row.iter().zip(topics) {
                for (a, x) in acc.iter_mut().zip(t) {
                    *a += w * x;
                }
            }
            acc
        })
        .collect()
}

/// Repeated selection of the best remaining product, lower index first.
pub fn covisible_by_selection(a: &[f64], b: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; a.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(a.len()) {
        let mut best: Option<usize> = None;
        for t in 0..a.len() {
            if taken[t] {
                continue;
            }
            if best.is_none_or(|bt| a[t] * b[t] > a[bt] * b[bt]) {
                best = Some(t);
            }
        }
        let t = best.expect("a topic remains");
        taken[t] = true;
        out.push(t);
    }
    out
}

/// First index of the largest valid score.
pub fn masked_argmax(scores: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (n, (&s, &valid)) in scores.iter().zip(mask).enumerate() {
        if valid && best.is_none_or(|b| s > scores[b]) {
            best = Some(n);
        }
    }
    best
}

/// Squared distance of `x` to the line `l` plus that of `y` to `l'`, with
/// `l = F y` in image A and `l' = Fᵀ x` in image B.
pub fn point_line_epipolar(f: &[[f64; 3]; 3], x: [f64; 2], y: [f64; 2]) -> f64 {
    let xh = [x[0], x[1], 1.0];
    let yh = [y[0], y[1], 1.0];
    let la: Vec<f64> = (0..3).map(|r| (0..3).map(|c| f[r][c] * yh[c]).sum()).collect();
    let lb: Vec<f64> = (0..3).map(|c| (0..3).map(|r| f[r][c] * xh[r]).sum()).collect();
    let da = dot(&la, &xh) / (la[0] * la[0] + la[1] * la[1]).sqrt();
    let db = dot(&lb, &yh) / (lb[0] * lb[0] + lb[1] * lb[1]).sqrt();
    da * da + db * db
}

pub fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

struct Affine {
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
    d_in: usize,
}

impl Affine {
    fn of(l: &Linear) -> candle_core::Result<Self> {
        Ok(Self {
            weight: to_f64_vec(l.weight.as_tensor())?,
            bias: l.bias.as_ref().map(|b| to_f64_vec(b.as_tensor())).transpose()?,
            d_in: l.d_in(),
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks(self.d_in)
            .enumerate()
            .map(|(o, w)| dot(w, x) + self.bias.as_ref().map_or(0.0, |b| b[o]))
            .collect()
    }
}

struct Norm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl Norm {
    fn of(l: &LayerNorm) -> candle_core::Result<Self> {
        Ok(Self { gamma: to_f64_vec(l.gamma.as_tensor())?, beta: to_f64_vec(l.beta.as_tensor())? })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let s = (var + 1e-5).sqrt();
        x.iter().enumerate().map(|(i, v)| (v - mean) / s * self.gamma[i] + self.beta[i]).collect()
    }
}

/// Values of a pre-norm residual attention block, applied token by token.
pub struct BlockOracle {
    norm_q: Norm,
    norm_kv: Norm,
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    norm_ff: Norm,
    fc1: Affine,
    fc2: Affine,
    heads: usize,
}

impl BlockOracle {
    pub fn of(block: &AttentionBlock) -> candle_core::Result<Self> {
        Ok(Self {
            norm_q: Norm::of(&block.norm_q)?,
            norm_kv: Norm::of(&block.norm_kv)?,
            q: Affine::of(&block.attn.q)?,
            k: Affine::of(&block.attn.k)?,
            v: Affine::of(&block.attn.v)?,
            o: Affine::of(&block.attn.o)?,
            norm_ff: Norm::of(&block.norm_ff)?,
            fc1: Affine::of(&block.ffn.fc1)?,
            fc2: Affine::of(&block.ffn.fc2)?,
            heads: block.attn.heads,
        })
    }

    pub fn forward(&self, x: &[Vec<f64>], context: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = x[0].len();
        let dh = d / self.heads;
        let keys: Vec<Vec<f64>> = context.iter().map(|c| self.k.apply(&self.norm_kv.apply(c))).collect();
        let values: Vec<Vec<f64>> = context.iter().map(|c| self.v.apply(&self.norm_kv.apply(c))).collect();
        x.iter()
            .map(|token| {
                let q = self.q.apply(&self.norm_q.apply(token));
                let mut merged = vec![0.0; d];
                for h in 0..self.heads {
                    let r = h * dh..(h + 1) * dh;
                    let scores: Vec<f64> =
                        keys.iter().map(|k| dot(&q[r.clone()], &k[r.clone()]) / (dh as f64).sqrt()).collect();
                    let w = softmax(&scores);
                    for (wj, vj) in w.iter().zip(&values) {
                        for c in r.clone() {
                            merged[c] += wj * vj[c];
                        }
                    }
                }
                let attended = self.o.apply(&merged);
                let out: Vec<f64> = token.iter().zip(&attended).map(|(a, b)| a + b).collect();
                let hidden: Vec<f64> = self.fc1.apply(&self.norm_ff.apply(&out)).into_iter().map(gelu_tanh).collect();
                let ff = self.fc2.apply(&hidden);
                out.iter().zip(&ff).map(|(a, b)| a + b).collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutual_nearest_prefers_lower_index_on_ties() {
        let p = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(mutual_nearest(&p, 0.1), vec![(0, 0, 0.5)]);
    }

    #[test]
    fn dual_softmax_of_single_cell_is_one() {
        let p = dual_softmax(&[vec![1.0, 2.0]], &[vec![3.0, -1.0]], 0.1);
        assert!((p[0][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rectified_pair_has_zero_distance() {
        let f = [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]];
        assert_eq!(point_line_epipolar(&f, [3.0, 2.0], [7.0, 2.0]), 0.0);
        assert!((point_line_epipolar(&f, [0.0, 0.0], [0.0, 1.0]) - 2.0).abs() < 1e-15);
    }
}
