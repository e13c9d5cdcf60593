//! Affine-free layer norm, adaLN modulation and gated residuals.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

use super::activation::{silu, silu_backward};
use super::linear::Linear;
use crate::error::{shape_err, Result};
use crate::params::Params;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub fn layer_norm(x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
    let c = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / c;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / c;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    (xhat.clone(), LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(cache: &LayerNormCache, dxhat: ArrayView2<f64>) -> Array2<f64> {
    let c = dxhat.ncols() as f64;
    let mut dx = Array2::zeros(dxhat.raw_dim());
    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / c;
        let mean_gx = g.dot(&xh) / c;
        let r = cache.rstd[i];
        Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &g, &x| *o = r * (g - mean_g - x * mean_gx));
    }
    dx
}

/// `layernorm(x) ⊙ (1 + scale) + shift`, with cache for the backward pass.
pub fn modulated_norm(
    x: ArrayView2<f64>,
    shift: ArrayView1<f64>,
    scale: ArrayView1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let (mut y, cache) = layer_norm(x);
    let gain = scale.mapv(|s| 1.0 + s);
    y *= &gain;
    y += &shift;
    (y, cache)
}

/// Returns `(dx, dshift, dscale)`.
pub fn modulated_norm_backward(
    cache: &LayerNormCache,
    scale: ArrayView1<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dshift = dy.sum_axis(Axis(0));
    let dscale = (&dy * &cache.xhat).sum_axis(Axis(0));
    let gain = scale.mapv(|s| 1.0 + s);
    let dxhat = &dy * &gain;
    (layer_norm_backward(cache, dxhat.view()), dshift, dscale)
}

/// `x + gate ⊙ branch`.
pub fn gated_residual(x: ArrayView2<f64>, gate: ArrayView1<f64>, branch: ArrayView2<f64>) -> Array2<f64> {
    let mut y = branch.to_owned();
    y *= &gate;
    y += &x;
    y
}

/// Returns `(dbranch, dgate)`; `dx` is `dy` itself.
pub fn gated_residual_backward(
    gate: ArrayView1<f64>,
    branch: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let dgate = (&dy * &branch).sum_axis(Axis(0));
    let dbranch = &dy * &gate;
    (dbranch, dgate)
}

/// Which residual branch a modulation applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Attention,
    Mlp,
}

/// Per-branch (shift, scale, gate) triples, in DiT chunk order.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    raw: Array1<f64>,
    width: usize,
}

impl Modulation {
    fn chunk(&self, i: usize) -> ArrayView1<'_, f64> {
        self.raw.slice(s![i * self.width..(i + 1) * self.width])
    }

    pub fn shift(&self, b: Branch) -> ArrayView1<'_, f64> {
        self.chunk(if b == Branch::Attention { 0 } else { 3 })
    }

    pub fn scale(&self, b: Branch) -> ArrayView1<'_, f64> {
        self.chunk(if b == Branch::Attention { 1 } else { 4 })
    }

    pub fn gate(&self, b: Branch) -> ArrayView1<'_, f64> {
        self.chunk(if b == Branch::Attention { 2 } else { 5 })
    }

    pub fn raw(&self) -> ArrayView1<'_, f64> {
        self.raw.view()
    }
}

/// Accumulator for gradients of a [`Modulation`].
#[derive(Clone, Debug)]
pub struct ModulationGrad {
    raw: Array1<f64>,
    width: usize,
}

impl ModulationGrad {
    pub fn zeros(chunks: usize, width: usize) -> Self {
        Self {
            raw: Array1::zeros(chunks * width),
            width,
        }
    }

    fn add(&mut self, i: usize, g: &Array1<f64>) {
        let mut dst = self.raw.slice_mut(s![i * self.width..(i + 1) * self.width]);
        dst += g;
    }

    pub fn add_shift(&mut self, b: Branch, g: &Array1<f64>) {
        self.add(if b == Branch::Attention { 0 } else { 3 }, g);
    }

    pub fn add_scale(&mut self, b: Branch, g: &Array1<f64>) {
        self.add(if b == Branch::Attention { 1 } else { 4 }, g);
    }

    pub fn add_gate(&mut self, b: Branch, g: &Array1<f64>) {
        self.add(if b == Branch::Attention { 2 } else { 5 }, g);
    }

    /// Final-layer layout: (shift, scale) only.
    pub fn add_chunk(&mut self, i: usize, g: &Array1<f64>) {
        self.add(i, g);
    }
}

/// adaLN modulation head: `SiLU(c) → Linear(C, chunks·C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaLn {
    pub linear: Linear,
    pub chunks: usize,
}

impl AdaLn {
    /// adaLN-Zero initialization: every shift, scale and gate starts at zero.
    pub fn zero(width: usize, chunks: usize) -> Self {
        Self {
            linear: Linear::zeros(width, chunks * width, true),
            chunks,
        }
    }

    pub fn random<R: Rng + ?Sized>(width: usize, chunks: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::xavier(width, chunks * width, true, rng),
            chunks,
        }
    }

    pub fn width(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn forward(&self, c: ArrayView1<f64>) -> Modulation {
        Modulation {
            raw: self.linear.forward_vec(silu(c).view()),
            width: self.width(),
        }
    }

    /// Returns `dL/dc`.
    pub fn backward(&self, c: ArrayView1<f64>, dm: &ModulationGrad, grad: &mut AdaLn) -> Array1<f64> {
        let s = silu(c);
        let ds = self.linear.backward_vec(s.view(), dm.raw.view(), &mut grad.linear);
        silu_backward(c, ds.view())
    }
}

impl Params for AdaLn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.linear.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.linear.visit_mut(prefix, f)
    }
}

/// Applies one adaLN branch: returns the modulated normalized input and the
/// gate to use on that branch's residual, `x_out = x + gate ⊙ branch(modulated)`.
pub fn adaln_modulate(
    x: ArrayView2<f64>,
    c: ArrayView1<f64>,
    p: &AdaLn,
    branch: Branch,
) -> Result<(Array2<f64>, Array1<f64>)> {
    if p.chunks != 6 {
        return Err(crate::error::Error::InvalidArgument {
            op: "adaln_modulate",
            reason: format!("expected a 6-chunk block modulation, got {}", p.chunks),
        });
    }
    if x.ncols() != p.width() || c.len() != p.width() {
        return Err(shape_err("adaln_modulate", x.shape(), c.shape()));
    }
    let m = p.forward(c);
    let (y, _) = modulated_norm(x, m.shift(branch), m.scale(branch));
    Ok((y, m.gate(branch).to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
    }

    #[test]
    fn zero_init_gate_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AdaLn::zero(8, 6);
        let x = randn(&mut rng, (5, 8));
        let c = randn(&mut rng, (1, 8)).row(0).to_owned();
        for b in [Branch::Attention, Branch::Mlp] {
            let (y, gate) = adaln_modulate(x.view(), c.view(), &p, b).unwrap();
            assert!(gate.iter().all(|&g| g == 0.0));
            // scale = shift = 0 leaves the plain layer norm
            assert_eq!(y, layer_norm(x.view()).0);
            let out = gated_residual(x.view(), gate.view(), y.view());
            assert_eq!(out, x);
        }
    }

    #[test]
    fn matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = AdaLn::random(8, 6, &mut rng);
        let x = randn(&mut rng, (4, 8));
        let c = randn(&mut rng, (1, 8)).row(0).to_owned();
        for (b, off) in [(Branch::Attention, 0), (Branch::Mlp, 3)] {
            let (y, gate) = adaln_modulate(x.view(), c.view(), &p, b).unwrap();
            // scalar oracle
            let sc: Vec<f64> = c.iter().map(|v| v / (1.0 + (-v).exp())).collect();
            let m: Vec<f64> = (0..48)
                .map(|o| p.linear.bias.as_ref().unwrap()[o] + (0..8).map(|i| p.linear.weight[[o, i]] * sc[i]).sum::<f64>())
                .collect();
            for r in 0..4 {
                let row: Vec<f64> = x.row(r).to_vec();
                let mean = row.iter().sum::<f64>() / 8.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                for j in 0..8 {
                    let ln = (row[j] - mean) / (var + LN_EPS).sqrt();
                    let want = ln * (1.0 + m[(off + 1) * 8 + j]) + m[off * 8 + j];
                    assert!((y[[r, j]] - want).abs() < 1e-12);
                }
            }
            for j in 0..8 {
                assert!((gate[j] - m[(off + 2) * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, (6, 16)) * 5.0 + 2.0;
        let (y, _) = layer_norm(x.view());
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
