//! Transformer blocks: the standard DiT block (used on dense and on sparse
//! tokens), the poolingformer, the sparse-token generation block and the
//! dense-token recovery block, plus the final output layer.

mod dit;
mod final_layer;
mod generate;
mod pooling;
mod recover;

pub use dit::{DitBlock, DitCache};
pub use final_layer::{FinalCache, FinalLayer};
pub use generate::{GenerateBlock, GenerateCache};
pub use pooling::{PoolingBlock, PoolingCache};
pub use recover::{merge_tokens, RecoverBlock, RecoverCache};

use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::nn::mlp::{Mlp, MlpCache};
use crate::nn::norm::{
    gated_residual, gated_residual_backward, modulated_norm, modulated_norm_backward, Branch, LayerNormCache,
    Modulation, ModulationGrad,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Dense,
    Pooling,
    Sparse,
    Generate,
    Recover,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BlockKind::Dense => "dense",
            BlockKind::Pooling => "pooling",
            BlockKind::Sparse => "sparse",
            BlockKind::Generate => "generate",
            BlockKind::Recover => "recover",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MlpBranchCache {
    ln: LayerNormCache,
    mlp: MlpCache,
    f: Array2<f64>,
}

/// `x + gate_mlp ⊙ MLP(modLN(x))`.
pub(crate) fn mlp_branch(mlp: &Mlp, x: ArrayView2<f64>, m: &Modulation) -> (Array2<f64>, MlpBranchCache) {
    let (h, ln) = modulated_norm(x, m.shift(Branch::Mlp), m.scale(Branch::Mlp));
    let (f, mc) = mlp.forward(h.view());
    let out = gated_residual(x, m.gate(Branch::Mlp), f.view());
    (out, MlpBranchCache { ln, mlp: mc, f })
}

pub(crate) fn mlp_branch_backward(
    mlp: &Mlp,
    cache: &MlpBranchCache,
    m: &Modulation,
    dout: ArrayView2<f64>,
    grad: &mut Mlp,
    dm: &mut ModulationGrad,
) -> Array2<f64> {
    let (df, dgate) = gated_residual_backward(m.gate(Branch::Mlp), cache.f.view(), dout);
    dm.add_gate(Branch::Mlp, &dgate);
    let dh = mlp.backward(&cache.mlp, df.view(), grad);
    let (dx_ln, dshift, dscale) = modulated_norm_backward(&cache.ln, m.scale(Branch::Mlp), dh.view());
    dm.add_shift(Branch::Mlp, &dshift);
    dm.add_scale(Branch::Mlp, &dscale);
    &dout + &dx_ln
}
