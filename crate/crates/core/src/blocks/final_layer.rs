use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD};

use crate::nn::linear::Linear;
use crate::nn::norm::{modulated_norm, modulated_norm_backward, AdaLn, Branch, LayerNormCache, Modulation, ModulationGrad};
use crate::params::{join, Params};

/// Output head: adaLN (shift, scale), layer norm, linear to patch pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalLayer {
    pub adaln: AdaLn,
    pub linear: Linear,
}

#[derive(Clone, Debug)]
pub struct FinalCache {
    c: Array1<f64>,
    m: Modulation,
    ln: LayerNormCache,
    h: Array2<f64>,
}

impl FinalLayer {
    /// Zero-initialized, so a fresh model predicts zero.
    pub fn zero(width: usize, out_dim: usize) -> Self {
        Self {
            adaln: AdaLn::zero(width, 2),
            linear: Linear::zeros(width, out_dim, true),
        }
    }

    pub fn width(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>, c: ArrayView1<f64>) -> (Array2<f64>, FinalCache) {
        let m = self.adaln.forward(c);
        let (h, ln) = modulated_norm(x, m.shift(Branch::Attention), m.scale(Branch::Attention));
        let y = self.linear.forward(h.view());
        (
            y,
            FinalCache {
                c: c.to_owned(),
                m,
                ln,
                h,
            },
        )
    }

    pub fn backward(&self, cache: &FinalCache, dy: ArrayView2<f64>, grad: &mut FinalLayer) -> (Array2<f64>, Array1<f64>) {
        let dh = self.linear.backward(cache.h.view(), dy, &mut grad.linear);
        let (dx, dshift, dscale) = modulated_norm_backward(&cache.ln, cache.m.scale(Branch::Attention), dh.view());
        let mut dm = ModulationGrad::zeros(2, self.width());
        dm.add_chunk(0, &dshift);
        dm.add_chunk(1, &dscale);
        let dc = self.adaln.backward(cache.c.view(), &dm, &mut grad.adaln);
        (dx, dc)
    }
}

impl Params for FinalLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.linear.visit(&join(prefix, "linear"), f);
        self.adaln.visit(&join(prefix, "adaLN_modulation.1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
        self.adaln.visit_mut(&join(prefix, "adaLN_modulation.1"), f);
    }
}
