use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::{mlp_branch, mlp_branch_backward, MlpBranchCache};
use crate::error::Result;
use crate::nn::attention::{AttnCache, AttnMode, Attention};
use crate::nn::mlp::Mlp;
use crate::nn::norm::{
    gated_residual, gated_residual_backward, modulated_norm, modulated_norm_backward, AdaLn, Branch, LayerNormCache,
    Modulation, ModulationGrad,
};
use crate::params::{join, Params};

/// Pre-norm adaLN-Zero transformer block with self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct DitBlock {
    pub adaln: AdaLn,
    pub attn: Attention,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct DitCache {
    c: Array1<f64>,
    m: Modulation,
    ln: LayerNormCache,
    pub attn: AttnCache,
    a: Array2<f64>,
    mlp: MlpBranchCache,
}

impl DitBlock {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            adaln: AdaLn::zero(width, 6),
            attn: Attention::new(width, heads, rng)?,
            mlp: Mlp::new(width, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.attn.width()
    }

    pub fn forward(&self, x: ArrayView2<f64>, c: ArrayView1<f64>, mode: AttnMode) -> (Array2<f64>, DitCache) {
        let m = self.adaln.forward(c);
        let (h, ln) = modulated_norm(x, m.shift(Branch::Attention), m.scale(Branch::Attention));
        let (a, attn) = self.attn.forward(h.view(), h.view(), mode);
        let x1 = gated_residual(x, m.gate(Branch::Attention), a.view());
        let (out, mlp) = mlp_branch(&self.mlp, x1.view(), &m);
        let cache = DitCache {
            c: c.to_owned(),
            m,
            ln,
            attn,
            a,
            mlp,
        };
        (out, cache)
    }

    /// Returns `(dL/dx, dL/dc)`.
    pub fn backward(&self, cache: &DitCache, dout: ArrayView2<f64>, grad: &mut DitBlock) -> (Array2<f64>, Array1<f64>) {
        let m = &cache.m;
        let mut dm = ModulationGrad::zeros(6, self.width());
        let dx1 = mlp_branch_backward(&self.mlp, &cache.mlp, m, dout, &mut grad.mlp, &mut dm);
        let (da, dgate) = gated_residual_backward(m.gate(Branch::Attention), cache.a.view(), dx1.view());
        dm.add_gate(Branch::Attention, &dgate);
        let (dq, dkv) = self.attn.backward(&cache.attn, da.view(), &mut grad.attn);
        let dh = dq + dkv;
        let (dx_ln, dshift, dscale) = modulated_norm_backward(&cache.ln, m.scale(Branch::Attention), dh.view());
        dm.add_shift(Branch::Attention, &dshift);
        dm.add_scale(Branch::Attention, &dscale);
        let dc = self.adaln.backward(cache.c.view(), &dm, &mut grad.adaln);
        (dx1 + dx_ln, dc)
    }
}

impl Params for DitBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.adaln.visit(&join(prefix, "adaLN_modulation.1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.adaln.visit_mut(&join(prefix, "adaLN_modulation.1"), f);
    }
}
