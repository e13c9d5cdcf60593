use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::{mlp_branch, mlp_branch_backward, DitBlock, MlpBranchCache};
use crate::error::{shape_err, Result};
use crate::grid::{upsample_from_grid, upsample_from_grid_backward, TokenGrid};
use crate::nn::attention::{AttnCache, AttnMode, Attention};
use crate::nn::linear::Linear;
use crate::nn::mlp::Mlp;
use crate::nn::norm::{
    gated_residual, gated_residual_backward, modulated_norm, modulated_norm_backward, AdaLn, Branch, LayerNormCache,
    Modulation, ModulationGrad,
};
use crate::params::{join, Params};

/// Restores dense tokens from sparse ones.
///
/// `x_m = up(xs)·W1 + x·W2; x = x_m + gate ⊙ MHA(modLN(x_m), modLN(xs), modLN(xs))`,
/// then the MLP branch and, optionally, the dense-grid position table.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoverBlock {
    pub adaln: AdaLn,
    pub attn: Attention,
    pub mlp: Mlp,
    /// Applied to the upsampled sparse tokens; starts at zero.
    pub w1: Linear,
    /// Applied to the incoming dense tokens; starts at identity.
    pub w2: Linear,
}

#[derive(Clone, Debug)]
pub struct RecoverCache {
    c: Array1<f64>,
    m: Modulation,
    sparse: TokenGrid,
    dense: TokenGrid,
    x: Array2<f64>,
    up: Array2<f64>,
    ln_q: LayerNormCache,
    ln_kv: LayerNormCache,
    pub attn: AttnCache,
    a: Array2<f64>,
    mlp: MlpBranchCache,
}

/// `up(xs)·W1 + x·W2`.
pub fn merge_tokens(
    w1: &Linear,
    w2: &Linear,
    xs: ArrayView2<f64>,
    x: ArrayView2<f64>,
    sparse: TokenGrid,
    dense: TokenGrid,
) -> Result<Array2<f64>> {
    if xs.ncols() != w1.in_dim() || x.ncols() != w2.in_dim() {
        return Err(shape_err("merge", xs.shape(), x.shape()));
    }
    let up = upsample_from_grid(xs, sparse, dense)?;
    Ok(w1.forward(up.view()) + w2.forward(x))
}

impl RecoverBlock {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self::from_dense(&DitBlock::new(width, heads, rng)?))
    }

    /// Copies the transformer weights and sets `W1 = 0`, `W2 = I`.
    pub fn from_dense(block: &DitBlock) -> Self {
        let c = block.width();
        Self {
            adaln: block.adaln.clone(),
            attn: block.attn.clone(),
            mlp: block.mlp.clone(),
            w1: Linear::zeros(c, c, false),
            w2: Linear::identity(c),
        }
    }

    pub fn width(&self) -> usize {
        self.attn.width()
    }

    pub fn merge(&self, xs: ArrayView2<f64>, x: ArrayView2<f64>, sparse: TokenGrid, dense: TokenGrid) -> Result<Array2<f64>> {
        merge_tokens(&self.w1, &self.w2, xs, x, sparse, dense)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        xs: ArrayView2<f64>,
        c: ArrayView1<f64>,
        sparse: TokenGrid,
        dense: TokenGrid,
        posembed: Option<ArrayView2<f64>>,
        mode: AttnMode,
    ) -> Result<(Array2<f64>, RecoverCache)> {
        if x.nrows() != dense.len() {
            return Err(shape_err("recover", x.shape(), &[dense.h, dense.w]));
        }
        let up = upsample_from_grid(xs, sparse, dense)?;
        let xm = self.w1.forward(up.view()) + self.w2.forward(x);
        let m = self.adaln.forward(c);
        let (shift, scale) = (m.shift(Branch::Attention), m.scale(Branch::Attention));
        let (hq, ln_q) = modulated_norm(xm.view(), shift, scale);
        let (hkv, ln_kv) = modulated_norm(xs, shift, scale);
        let (a, attn) = self.attn.forward(hq.view(), hkv.view(), mode);
        let x1 = gated_residual(xm.view(), m.gate(Branch::Attention), a.view());
        let (mut out, mlp) = mlp_branch(&self.mlp, x1.view(), &m);
        if let Some(pos) = posembed {
            if pos.dim() != out.dim() {
                return Err(shape_err("recover posembed", pos.shape(), out.shape()));
            }
            out += &pos;
        }
        let cache = RecoverCache {
            c: c.to_owned(),
            m,
            sparse,
            dense,
            x: x.to_owned(),
            up,
            ln_q,
            ln_kv,
            attn,
            a,
            mlp,
        };
        Ok((out, cache))
    }

    /// Returns `(dL/dx, dL/dxs, dL/dc)`.
    pub fn backward(
        &self,
        cache: &RecoverCache,
        dout: ArrayView2<f64>,
        grad: &mut RecoverBlock,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let m = &cache.m;
        let scale = m.scale(Branch::Attention);
        let mut dm = ModulationGrad::zeros(6, self.width());
        let dx1 = mlp_branch_backward(&self.mlp, &cache.mlp, m, dout, &mut grad.mlp, &mut dm);
        let (da, dgate) = gated_residual_backward(m.gate(Branch::Attention), cache.a.view(), dx1.view());
        dm.add_gate(Branch::Attention, &dgate);
        let (dhq, dhkv) = self.attn.backward(&cache.attn, da.view(), &mut grad.attn);
        let (dxm_ln, dshift_q, dscale_q) = modulated_norm_backward(&cache.ln_q, scale, dhq.view());
        let (mut dxs, dshift_kv, dscale_kv) = modulated_norm_backward(&cache.ln_kv, scale, dhkv.view());
        dm.add_shift(Branch::Attention, &(dshift_q + dshift_kv));
        dm.add_scale(Branch::Attention, &(dscale_q + dscale_kv));
        let dxm = dx1 + dxm_ln;
        let dup = self.w1.backward(cache.up.view(), dxm.view(), &mut grad.w1);
        let dx = self.w2.backward(cache.x.view(), dxm.view(), &mut grad.w2);
        dxs += &upsample_from_grid_backward(dup.view(), cache.sparse, cache.dense);
        let dc = self.adaln.backward(cache.c.view(), &dm, &mut grad.adaln);
        (dx, dxs, dc)
    }
}

impl Params for RecoverBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.adaln.visit(&join(prefix, "adaLN_modulation.1"), f);
        self.w1.visit(&join(prefix, "merge.w1"), f);
        self.w2.visit(&join(prefix, "merge.w2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.adaln.visit_mut(&join(prefix, "adaLN_modulation.1"), f);
        self.w1.visit_mut(&join(prefix, "merge.w1"), f);
        self.w2.visit_mut(&join(prefix, "merge.w2"), f);
    }
}
