use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::{mlp_branch, mlp_branch_backward, DitBlock, MlpBranchCache};
use crate::error::Result;
use crate::grid::{pool_to_grid, pool_to_grid_backward, TokenGrid};
use crate::nn::attention::{AttnCache, AttnMode, Attention};
use crate::nn::mlp::Mlp;
use crate::nn::norm::{
    gated_residual, gated_residual_backward, modulated_norm, modulated_norm_backward, AdaLn, Branch, LayerNormCache,
    Modulation, ModulationGrad,
};
use crate::params::{join, Params};

/// Builds sparse tokens: pool the dense grid, then let the pooled tokens
/// attend to all dense tokens.
///
/// `xs = pool(x); xs += gate ⊙ MHA(modLN(xs), modLN(x), modLN(x)); xs += MLP branch`
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateBlock {
    pub adaln: AdaLn,
    pub attn: Attention,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct GenerateCache {
    c: Array1<f64>,
    m: Modulation,
    from: TokenGrid,
    to: TokenGrid,
    ln_q: LayerNormCache,
    ln_kv: LayerNormCache,
    pub attn: AttnCache,
    a: Array2<f64>,
    mlp: MlpBranchCache,
}

impl GenerateBlock {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self::from_dense(&DitBlock::new(width, heads, rng)?))
    }

    pub fn from_dense(block: &DitBlock) -> Self {
        Self {
            adaln: block.adaln.clone(),
            attn: block.attn.clone(),
            mlp: block.mlp.clone(),
        }
    }

    pub fn width(&self) -> usize {
        self.attn.width()
    }

    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        c: ArrayView1<f64>,
        from: TokenGrid,
        to: TokenGrid,
        mode: AttnMode,
    ) -> Result<(Array2<f64>, GenerateCache)> {
        let xs0 = pool_to_grid(x, from, to)?;
        let m = self.adaln.forward(c);
        let (shift, scale) = (m.shift(Branch::Attention), m.scale(Branch::Attention));
        let (hq, ln_q) = modulated_norm(xs0.view(), shift, scale);
        let (hkv, ln_kv) = modulated_norm(x, shift, scale);
        let (a, attn) = self.attn.forward(hq.view(), hkv.view(), mode);
        let xs1 = gated_residual(xs0.view(), m.gate(Branch::Attention), a.view());
        let (out, mlp) = mlp_branch(&self.mlp, xs1.view(), &m);
        let cache = GenerateCache {
            c: c.to_owned(),
            m,
            from,
            to,
            ln_q,
            ln_kv,
            attn,
            a,
            mlp,
        };
        Ok((out, cache))
    }

    /// Returns `(dL/dx, dL/dc)` for the dense input.
    pub fn backward(&self, cache: &GenerateCache, dout: ArrayView2<f64>, grad: &mut GenerateBlock) -> (Array2<f64>, Array1<f64>) {
        let m = &cache.m;
        let scale = m.scale(Branch::Attention);
        let mut dm = ModulationGrad::zeros(6, self.width());
        let dxs1 = mlp_branch_backward(&self.mlp, &cache.mlp, m, dout, &mut grad.mlp, &mut dm);
        let (da, dgate) = gated_residual_backward(m.gate(Branch::Attention), cache.a.view(), dxs1.view());
        dm.add_gate(Branch::Attention, &dgate);
        let (dhq, dhkv) = self.attn.backward(&cache.attn, da.view(), &mut grad.attn);
        let (dxs_ln, dshift_q, dscale_q) = modulated_norm_backward(&cache.ln_q, scale, dhq.view());
        let (dx_ln, dshift_kv, dscale_kv) = modulated_norm_backward(&cache.ln_kv, scale, dhkv.view());
        dm.add_shift(Branch::Attention, &(dshift_q + dshift_kv));
        dm.add_scale(Branch::Attention, &(dscale_q + dscale_kv));
        let dxs0 = dxs1 + dxs_ln;
        let dx = pool_to_grid_backward(dxs0.view(), cache.from, cache.to) + dx_ln;
        let dc = self.adaln.backward(cache.c.view(), &dm, &mut grad.adaln);
        (dx, dc)
    }
}

impl Params for GenerateBlock {
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
