//! Multi-head scaled dot-product attention over a fused `qkv` projection.
//!
//! Queries come from one token stream and keys/values from another, so the
//! same layer serves self-attention (`q_in == kv_in`) and the cross-attention
//! used when pooling into or recovering from sparse tokens.

use ndarray::{s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::linear::{affine, affine_backward, Linear};
use crate::error::{shape_err, Error, Result};
use crate::params::{join, Params};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    y
}

/// How attention probabilities are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttnMode {
    #[default]
    Softmax,
    /// Every query attends equally to every key, as if all logits were equal.
    Uniform,
}

/// Attention parameters: fused `qkv` (`3C × C`), output projection `proj`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttnCache {
    q_in: Array2<f64>,
    kv_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    ctx: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    mode: AttnMode,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(width, heads)?;
        // DiT initializes the fused projection as a single xavier matrix.
        Ok(Self {
            qkv: Linear::xavier(width, 3 * width, true, rng),
            proj: Linear::xavier(width, width, true, rng),
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.proj.out_dim()
    }

    fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    fn part(&self, i: usize) -> (ArrayView2<'_, f64>, Option<ndarray::ArrayView1<'_, f64>>) {
        let c = self.width();
        let w = self.qkv.weight.slice(s![i * c..(i + 1) * c, ..]);
        let b = self.qkv.bias.as_ref().map(|b| b.slice(s![i * c..(i + 1) * c]));
        (w, b)
    }

    /// Query/key/value projections as `(weight, bias)` views (`C × C`, `out × in`).
    pub fn query(&self) -> (ArrayView2<'_, f64>, Option<ndarray::ArrayView1<'_, f64>>) {
        self.part(0)
    }

    pub fn key(&self) -> (ArrayView2<'_, f64>, Option<ndarray::ArrayView1<'_, f64>>) {
        self.part(1)
    }

    pub fn value(&self) -> (ArrayView2<'_, f64>, Option<ndarray::ArrayView1<'_, f64>>) {
        self.part(2)
    }

    pub fn forward(&self, q_in: ArrayView2<f64>, kv_in: ArrayView2<f64>, mode: AttnMode) -> (Array2<f64>, AttnCache) {
        let (wq, bq) = self.query();
        let (wk, bk) = self.key();
        let (wv, bv) = self.value();
        let q = affine(q_in, wq, bq);
        let k = affine(kv_in, wk, bk);
        let v = affine(kv_in, wv, bv);
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let (a, b) = (q_in.nrows(), kv_in.nrows());
        let mut ctx = Array2::zeros((a, self.width()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let p = match mode {
                AttnMode::Softmax => {
                    let logits = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                    softmax_rows(logits.view())
                }
                AttnMode::Uniform => Array2::from_elem((a, b), 1.0 / b as f64),
            };
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let out = self.proj.forward(ctx.view());
        let cache = AttnCache {
            q_in: q_in.to_owned(),
            kv_in: kv_in.to_owned(),
            q,
            k,
            v,
            ctx,
            probs,
            mode,
        };
        (out, cache)
    }

    /// Returns `(dL/dq_in, dL/dkv_in)`; for self-attention the caller sums them.
    pub fn backward(&self, cache: &AttnCache, dout: ArrayView2<f64>, grad: &mut Attention) -> (Array2<f64>, Array2<f64>) {
        let c = self.width();
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let dctx = self.proj.backward(cache.ctx.view(), dout, &mut grad.proj);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let p = &cache.probs[h];
            let dctx_h = dctx.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            if cache.mode == AttnMode::Uniform {
                continue;
            }
            let dp = dctx_h.dot(&cache.v.slice(cols).t());
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = p * &(&dp - &row_dot) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let (wq, _) = self.query();
        let (wk, _) = self.key();
        let (wv, _) = self.value();
        let dq_in = affine_backward(cache.q_in.view(), dq.view(), wq, &mut grad.qkv, 0..c);
        let mut dkv_in = affine_backward(cache.kv_in.view(), dk.view(), wk, &mut grad.qkv, c..2 * c);
        dkv_in += &affine_backward(cache.kv_in.view(), dv.view(), wv, &mut grad.qkv, 2 * c..3 * c);
        (dq_in, dkv_in)
    }
}

impl Params for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

pub(crate) fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::HeadDivisibility { width, heads });
    }
    Ok(())
}

/// Multi-head attention with queries from `q_in` and keys/values from `kv_in`.
pub fn mha(q_in: ArrayView2<f64>, kv_in: ArrayView2<f64>, p: &Attention) -> Result<Array2<f64>> {
    check_heads(p.width(), p.heads)?;
    if q_in.ncols() != p.width() || kv_in.ncols() != p.width() {
        return Err(shape_err("mha", q_in.shape(), kv_in.shape()));
    }
    Ok(p.forward(q_in, kv_in, AttnMode::Softmax).0)
}

/// Mean over heads and query rows of the variance of each attention row
/// across the key dimension.
pub fn mean_row_variance(maps: &[Array2<f64>]) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for m in maps {
        let b = m.ncols() as f64;
        for row in m.rows() {
            let mean = row.sum() / b;
            total += row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b;
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
    }

    fn random_attn(rng: &mut ChaCha8Rng, c: usize, heads: usize) -> Attention {
        let mut a = Attention::new(c, heads, rng).unwrap();
        a.qkv.bias = Some(Array1::from_shape_simple_fn(3 * c, || rng.sample::<f64, _>(StandardNormal) * 0.1));
        a.proj.bias = Some(Array1::from_shape_simple_fn(c, || rng.sample::<f64, _>(StandardNormal) * 0.1));
        a
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(array![[0.0, 0.0, 0.0, 0.0], [1000.0, 1000.0, 0.0, 0.0]].view());
        assert_eq!(y.row(0).to_vec(), vec![0.25; 4]);
        assert!((y[[1, 0]] - 0.5).abs() < 1e-15 && (y[[1, 1]] - 0.5).abs() < 1e-15);
        let y = softmax_rows(array![[0.0, 3f64.ln()]].view());
        assert!((y[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((y[[0, 1]] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_attn(&mut rng, 4, 2);
        let x = randn(&mut rng, (1, 4));
        let out = mha(x.view(), x.view(), &p).unwrap();
        let (wv, bv) = p.value();
        let v = affine(x.view(), wv, bv);
        let want = p.proj.forward(v.view());
        assert!((&out - &want).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn zero_projection_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = random_attn(&mut rng, 8, 2);
        p.proj = Linear::zeros(8, 8, true);
        let out = mha(randn(&mut rng, (3, 8)).view(), randn(&mut rng, (5, 8)).view(), &p).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_divisibility_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Attention::new(6, 4, &mut rng), Err(Error::HeadDivisibility { .. })));
    }

    /// Straight per-head loops with scalar arithmetic.
    fn naive_mha(q_in: &Array2<f64>, kv_in: &Array2<f64>, p: &Attention) -> Array2<f64> {
        let c = p.width();
        let d = c / p.heads;
        let w = &p.qkv.weight;
        let b = p.qkv.bias.as_ref().unwrap();
        let proj = |x: &Array2<f64>, part: usize| {
            let mut out = Array2::zeros((x.nrows(), c));
            for r in 0..x.nrows() {
                for o in 0..c {
                    let mut acc = b[part * c + o];
                    for i in 0..c {
                        acc += x[[r, i]] * w[[part * c + o, i]];
                    }
                    out[[r, o]] = acc;
                }
            }
            out
        };
        let (q, k, v) = (proj(q_in, 0), proj(kv_in, 1), proj(kv_in, 2));
        let mut ctx = Array2::<f64>::zeros((q_in.nrows(), c));
        for h in 0..p.heads {
            for i in 0..q_in.nrows() {
                let mut logits = vec![0.0; kv_in.nrows()];
                for j in 0..kv_in.nrows() {
                    for e in 0..d {
                        logits[j] += q[[i, h * d + e]] * k[[j, h * d + e]];
                    }
                    logits[j] /= (d as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..kv_in.nrows() {
                    let a = (logits[j] - m).exp() / z;
                    for e in 0..d {
                        ctx[[i, h * d + e]] += a * v[[j, h * d + e]];
                    }
                }
            }
        }
        let pb = p.proj.bias.as_ref().unwrap();
        let mut out = Array2::zeros((q_in.nrows(), c));
        for r in 0..q_in.nrows() {
            for o in 0..c {
                out[[r, o]] = pb[o] + (0..c).map(|i| ctx[[r, i]] * p.proj.weight[[o, i]]).sum::<f64>();
            }
        }
        out
    }

    #[test]
    fn matches_naive_per_head_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_attn(&mut rng, 4, 2);
        let q = randn(&mut rng, (3, 4));
        let kv = randn(&mut rng, (5, 4));
        let got = mha(q.view(), kv.view(), &p).unwrap();
        let want = naive_mha(&q, &kv, &p);
        assert!((&got - &want).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn uniform_logits_equal_mean_pooled_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, (6, 8));
        let base = random_attn(&mut rng, 8, 2);
        let (wv, bv) = base.value();
        let v = affine(x.view(), wv, bv);
        let mean = v.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let want = base.proj.forward(mean.view());

        let mut zero_q = base.clone();
        zero_q.qkv.weight.slice_mut(s![0..8, ..]).fill(0.0);
        zero_q.qkv.bias.as_mut().unwrap().slice_mut(s![0..8]).fill(0.0);
        let mut zero_k = base.clone();
        zero_k.qkv.weight.slice_mut(s![8..16, ..]).fill(0.0);
        for p in [&zero_q, &zero_k] {
            let out = mha(x.view(), x.view(), p).unwrap();
            for row in out.rows() {
                assert!((&row - &want.row(0)).iter().all(|d| d.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn one_hot_row_variance() {
        let m = array![[1.0, 0.0, 0.0, 0.0]];
        assert!((mean_row_variance(&[m]) - 0.1875).abs() < 1e-15);
        let u = Array2::from_elem((4, 4), 0.25);
        assert_eq!(mean_row_variance(&[u]), 0.0);
    }
}
