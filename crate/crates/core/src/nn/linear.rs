use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{shape_err, Result};
use crate::params::{join, Params};

/// `y = x·w + b` with `w` laid out `Cin × Cout` and `b` broadcast over rows.
pub fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array2<f64>> {
    if x.ncols() != w.nrows() {
        return Err(shape_err("linear", x.shape(), w.shape()));
    }
    if b.len() != w.ncols() {
        return Err(shape_err("linear", w.shape(), b.shape()));
    }
    let mut y = x.dot(&w);
    y += &b;
    Ok(y)
}

/// Affine map stored in output-major layout (`weight` is `out × in`), the
/// layout used by DiT state dicts.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: bias.then(|| Array1::zeros(out_dim)),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: None,
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || dist.sample(rng));
        Self {
            weight,
            bias: bias.then(|| Array1::zeros(out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        affine(x, self.weight.view(), self.bias.as_ref().map(|b| b.view()))
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut y = self.weight.dot(&x);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        affine_backward(x, dy, self.weight.view(), grad, 0..self.out_dim())
    }

    pub fn backward_vec(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (i, &g) in dy.iter().enumerate() {
            grad.weight.row_mut(i).scaled_add(g, &x);
        }
        if let Some(gb) = grad.bias.as_mut() {
            *gb += &dy;
        }
        self.weight.t().dot(&dy)
    }
}

/// `x·wᵀ + b` for an `out × in` weight view.
pub(crate) fn affine(x: ArrayView2<f64>, w: ArrayView2<f64>, b: Option<ArrayView1<f64>>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Backward of [`affine`] for the output rows `rows` of `grad`'s weight.
pub(crate) fn affine_backward(
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    w: ArrayView2<f64>,
    grad: &mut Linear,
    rows: std::ops::Range<usize>,
) -> Array2<f64> {
    let dw = dy.t().dot(&x);
    let mut gw = grad.weight.slice_mut(s![rows.clone(), ..]);
    gw += &dw;
    if let Some(gb) = grad.bias.as_mut() {
        let mut gb = gb.slice_mut(s![rows]);
        gb += &dy.sum_axis(Axis(0));
    }
    dy.dot(&w)
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b.view_mut().into_dyn());
        }
    }
}
