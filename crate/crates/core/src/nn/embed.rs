//! Position, timestep and label embeddings, and image ↔ token reshaping.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::activation::{silu, silu_backward};
use super::linear::Linear;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::params::{join, Params};

/// `[sin(pos·ω), cos(pos·ω)]` with `ω_i = 10000^{-i/(dim/2)}`.
fn sincos_1d(dim: usize, pos: f64, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin();
        out[half + i] = (pos * omega).cos();
    }
}

/// Fixed 2-D sine-cosine position table, one row per token in row-major grid
/// order. The first `C/2` columns encode the column index and the rest the
/// row index, as in DiT's `get_2d_sincos_pos_embed`.
pub fn sincos_posembed_2d(grid: TokenGrid, width: usize) -> Result<Array2<f64>> {
    if width == 0 || !width.is_multiple_of(4) {
        return Err(Error::InvalidArgument {
            op: "sincos_posembed_2d",
            reason: format!("embedding width {width} is not divisible by 4"),
        });
    }
    let half = width / 2;
    let mut out = Array2::zeros((grid.len(), width));
    for i in 0..grid.h {
        for j in 0..grid.w {
            let mut row = out.row_mut(i * grid.w + j);
            let row = row.as_slice_mut().expect("row-major");
            sincos_1d(half, j as f64, &mut row[..half]);
            sincos_1d(half, i as f64, &mut row[half..]);
        }
    }
    Ok(out)
}

/// Splits an `H × W × Cin` image into `(H/p)·(W/p)` tokens of width
/// `p·p·Cin`, patches in row-major order and features ordered `(py, px, c)`.
pub fn patchify(img: ArrayView3<f64>, patch: usize) -> Result<Array2<f64>> {
    let (h, w, ch) = img.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidArgument {
            op: "patchify",
            reason: format!("image {h}x{w} is not divisible by patch {patch}"),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, patch * patch * ch));
    for gi in 0..gh {
        for gj in 0..gw {
            let mut row = out.row_mut(gi * gw + gj);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..ch {
                        row[k] = img[[gi * patch + py, gj * patch + px, c]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(tokens: ArrayView2<f64>, h: usize, w: usize, patch: usize, ch: usize) -> Result<Array3<f64>> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::InvalidArgument {
            op: "unpatchify",
            reason: format!("image {h}x{w} is not divisible by patch {patch}"),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    if tokens.dim() != (gh * gw, patch * patch * ch) {
        return Err(crate::error::shape_err("unpatchify", tokens.shape(), &[gh * gw, patch * patch * ch]));
    }
    let mut img = Array3::zeros((h, w, ch));
    for gi in 0..gh {
        for gj in 0..gw {
            let row = tokens.row(gi * gw + gj);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..ch {
                        img[[gi * patch + py, gj * patch + px, c]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Sinusoidal timestep features `[cos(t·f), sin(t·f)]`, DiT ordering.
pub fn timestep_frequencies(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * f).cos();
        out[half + i] = (t * f).sin();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimestepEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct TimestepCache {
    freq: Array1<f64>,
    pre: Array1<f64>,
}

impl TimestepEmbedder {
    pub fn new<R: Rng + ?Sized>(freq_dim: usize, width: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut fc1 = Linear::zeros(freq_dim, width, true);
        let mut fc2 = Linear::zeros(width, width, true);
        fc1.weight.mapv_inplace(|_| normal.sample(rng));
        fc2.weight.mapv_inplace(|_| normal.sample(rng));
        Self { fc1, fc2 }
    }

    pub fn freq_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn forward(&self, t: f64) -> (Array1<f64>, TimestepCache) {
        let freq = timestep_frequencies(t, self.freq_dim());
        let pre = self.fc1.forward_vec(freq.view());
        let y = self.fc2.forward_vec(silu(pre.view()).view());
        (y, TimestepCache { freq, pre })
    }

    pub fn backward(&self, cache: &TimestepCache, dy: ArrayView1<f64>, grad: &mut TimestepEmbedder) {
        let act = silu(cache.pre.view());
        let dact = self.fc2.backward_vec(act.view(), dy, &mut grad.fc2);
        let dpre = silu_backward(cache.pre.view(), dact.view());
        self.fc1.backward_vec(cache.freq.view(), dpre.view(), &mut grad.fc1);
    }
}

impl Params for TimestepEmbedder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.fc1.visit(&join(prefix, "mlp.0"), f);
        self.fc2.visit(&join(prefix, "mlp.2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.fc1.visit_mut(&join(prefix, "mlp.0"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.2"), f);
    }
}

/// Class embedding table with one extra trailing row for the null
/// (unconditional) label used by classifier-free guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbedder {
    pub table: Array2<f64>,
}

impl LabelEmbedder {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, width: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        Self {
            table: Array2::from_shape_simple_fn((num_classes + 1, width), || normal.sample(rng)),
        }
    }

    pub fn null_label(&self) -> usize {
        self.table.nrows() - 1
    }

    pub fn forward(&self, y: usize) -> Result<Array1<f64>> {
        if y >= self.table.nrows() {
            return Err(Error::InvalidArgument {
                op: "label_embedding",
                reason: format!("label {y} out of range (null label is {})", self.null_label()),
            });
        }
        Ok(self.table.row(y).to_owned())
    }

    pub fn backward(&self, y: usize, dy: ArrayView1<f64>, grad: &mut LabelEmbedder) {
        let mut row = grad.table.row_mut(y);
        row += &dy;
    }
}

impl Params for LabelEmbedder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "embedding_table.weight"), self.table.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "embedding_table.weight"), self.table.view_mut().into_dyn());
    }
}

/// Patch embedding: a linear map over patchified pixels.
pub fn embed_patches(layer: &Linear, img: ArrayView3<f64>, patch: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let tokens = patchify(img, patch)?;
    if tokens.ncols() != layer.in_dim() {
        return Err(crate::error::shape_err("patch_embed", tokens.shape(), layer.weight.shape()));
    }
    let x = layer.forward(tokens.view());
    Ok((x, tokens))
}
