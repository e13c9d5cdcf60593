use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{mlp_branch, mlp_branch_backward, DitBlock, MlpBranchCache};
use crate::error::Result;
use crate::nn::attention::check_heads;
use crate::nn::linear::Linear;
use crate::nn::mlp::Mlp;
use crate::nn::norm::{modulated_norm, modulated_norm_backward, AdaLn, Branch, LayerNormCache, Modulation, ModulationGrad};
use crate::params::{join, Params};

/// Transformer block whose attention is replaced by global average pooling
/// of the value projection: `x += gate ⊙ (mean_rows(modLN(x)·W_v) · W_o)`.
///
/// This is exactly a DiT block whose attention logits are all equal, so it
/// carries no query or key projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingBlock {
    pub adaln: AdaLn,
    pub value: Linear,
    pub proj: Linear,
    pub mlp: Mlp,
    /// Only used to report the implied attention maps per head.
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct PoolingCache {
    c: Array1<f64>,
    m: Modulation,
    ln: LayerNormCache,
    h: Array2<f64>,
    vbar: Array2<f64>,
    a: Array2<f64>,
    mlp: MlpBranchCache,
    pub tokens: usize,
}

impl PoolingBlock {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(width, heads)?;
        Ok(Self::from_dense(&DitBlock::new(width, heads, rng)?))
    }

    /// Keeps the value slice of the fused projection; query and key weights
    /// are discarded.
    pub fn from_dense(block: &DitBlock) -> Self {
        let (wv, bv) = block.attn.value();
        Self {
            adaln: block.adaln.clone(),
            value: Linear {
                weight: wv.to_owned(),
                bias: bv.map(|b| b.to_owned()),
            },
            proj: block.attn.proj.clone(),
            mlp: block.mlp.clone(),
            heads: block.attn.heads,
        }
    }

    pub fn width(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>, c: ArrayView1<f64>) -> (Array2<f64>, PoolingCache) {
        let m = self.adaln.forward(c);
        let (h, ln) = modulated_norm(x, m.shift(Branch::Attention), m.scale(Branch::Attention));
        let v = self.value.forward(h.view());
        let vbar = v.mean_axis(Axis(0)).expect("at least one token").insert_axis(Axis(0));
        let a = self.proj.forward(vbar.view());
        let mut gated = a.row(0).to_owned();
        gated *= &m.gate(Branch::Attention);
        let x1 = &x + &gated;
        let (out, mlp) = mlp_branch(&self.mlp, x1.view(), &m);
        let cache = PoolingCache {
            c: c.to_owned(),
            m,
            ln,
            h,
            vbar,
            a,
            mlp,
            tokens: x.nrows(),
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &PoolingCache, dout: ArrayView2<f64>, grad: &mut PoolingBlock) -> (Array2<f64>, Array1<f64>) {
        let m = &cache.m;
        let mut dm = ModulationGrad::zeros(6, self.width());
        let dx1 = mlp_branch_backward(&self.mlp, &cache.mlp, m, dout, &mut grad.mlp, &mut dm);
        let col = dx1.sum_axis(Axis(0));
        dm.add_gate(Branch::Attention, &(&col * &cache.a.row(0)));
        let da = (&col * &m.gate(Branch::Attention)).insert_axis(Axis(0));
        let dvbar = self.proj.backward(cache.vbar.view(), da.view(), &mut grad.proj);
        let n = cache.tokens;
        let dv = Array2::from_shape_fn((n, self.width()), |(_, j)| dvbar[[0, j]] / n as f64);
        let dh = self.value.backward(cache.h.view(), dv.view(), &mut grad.value);
        let (dx_ln, dshift, dscale) = modulated_norm_backward(&cache.ln, m.scale(Branch::Attention), dh.view());
        dm.add_shift(Branch::Attention, &dshift);
        dm.add_scale(Branch::Attention, &dscale);
        let dc = self.adaln.backward(cache.c.view(), &dm, &mut grad.adaln);
        (dx1 + dx_ln, dc)
    }

    /// Uniform attention maps implied by the pooling, one per head.
    pub fn implied_maps(&self, tokens: usize) -> Vec<Array2<f64>> {
        vec![Array2::from_elem((tokens, tokens), 1.0 / tokens as f64); self.heads]
    }
}

impl Params for PoolingBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.value.visit(&join(prefix, "attn.v"), f);
        self.proj.visit(&join(prefix, "attn.proj"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.adaln.visit(&join(prefix, "adaLN_modulation.1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.value.visit_mut(&join(prefix, "attn.v"), f);
        self.proj.visit_mut(&join(prefix, "attn.proj"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.adaln.visit_mut(&join(prefix, "adaLN_modulation.1"), f);
    }
}
