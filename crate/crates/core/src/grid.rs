//! Spatial token layouts and the pooling/upsampling that moves tokens
//! between a dense grid and a coarser sparse grid.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-major `h × w` arrangement of tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Grid(format!("grid {h}x{w} must have positive extents")));
        }
        Ok(Self { h, w })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fits_in(&self, other: &TokenGrid) -> bool {
        self.h <= other.h && self.w <= other.w
    }

    pub fn transposed(&self) -> Self {
        Self { h: self.w, w: self.h }
    }
}

impl fmt::Display for TokenGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// Input rows covered by output bin `i` when pooling `len` cells into `bins`.
fn bin_range(i: usize, len: usize, bins: usize) -> std::ops::Range<usize> {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    start..end
}

fn check_tokens(op: &'static str, x: ArrayView2<f64>, grid: TokenGrid) -> Result<()> {
    if x.nrows() != grid.len() {
        return Err(shape_err(op, x.shape(), &[grid.h, grid.w]));
    }
    Ok(())
}

/// Adaptive average pooling of a token grid onto a coarser grid.
pub fn pool_to_grid(x: ArrayView2<f64>, from: TokenGrid, to: TokenGrid) -> Result<Array2<f64>> {
    check_tokens("pool_to_grid", x, from)?;
    if !to.fits_in(&from) {
        return Err(Error::Grid(format!("cannot pool {from} up to {to}")));
    }
    let mut out = Array2::zeros((to.len(), x.ncols()));
    for bi in 0..to.h {
        let rows = bin_range(bi, from.h, to.h);
        for bj in 0..to.w {
            let cols = bin_range(bj, from.w, to.w);
            let count = (rows.len() * cols.len()) as f64;
            let mut acc = out.row_mut(bi * to.w + bj);
            for i in rows.clone() {
                for j in cols.clone() {
                    acc += &x.row(i * from.w + j);
                }
            }
            acc /= count;
        }
    }
    Ok(out)
}

pub(crate) fn pool_to_grid_backward(dout: ArrayView2<f64>, from: TokenGrid, to: TokenGrid) -> Array2<f64> {
    let mut dx = Array2::zeros((from.len(), dout.ncols()));
    for bi in 0..to.h {
        let rows = bin_range(bi, from.h, to.h);
        for bj in 0..to.w {
            let cols = bin_range(bj, from.w, to.w);
            let g = &dout.row(bi * to.w + bj) / (rows.len() * cols.len()) as f64;
            for i in rows.clone() {
                for j in cols.clone() {
                    let mut r = dx.row_mut(i * from.w + j);
                    r += &g;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour source index for output cell `i` of an axis.
fn nearest(i: usize, from: usize, to: usize) -> usize {
    i * from / to
}

/// Nearest-neighbour upsampling from a coarse grid back to a dense grid.
pub fn upsample_from_grid(xs: ArrayView2<f64>, from: TokenGrid, to: TokenGrid) -> Result<Array2<f64>> {
    check_tokens("upsample_from_grid", xs, from)?;
    if !from.fits_in(&to) {
        return Err(Error::Grid(format!("cannot upsample {from} down to {to}")));
    }
    let mut out = Array2::zeros((to.len(), xs.ncols()));
    for i in 0..to.h {
        let si = nearest(i, from.h, to.h);
        for j in 0..to.w {
            let sj = nearest(j, from.w, to.w);
            out.row_mut(i * to.w + j).assign(&xs.row(si * from.w + sj));
        }
    }
    Ok(out)
}

pub(crate) fn upsample_from_grid_backward(dout: ArrayView2<f64>, from: TokenGrid, to: TokenGrid) -> Array2<f64> {
    let mut dxs = Array2::zeros((from.len(), dout.ncols()));
    for i in 0..to.h {
        let si = nearest(i, from.h, to.h);
        for j in 0..to.w {
            let sj = nearest(j, from.w, to.w);
            let mut r = dxs.row_mut(si * from.w + sj);
            r += &dout.row(i * to.w + j);
        }
    }
    dxs
}

/// Re-indexes tokens of `grid` as if the grid were transposed.
pub fn transpose_tokens(x: ArrayView2<f64>, grid: TokenGrid) -> Array2<f64> {
    let t = grid.transposed();
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..grid.h {
        for j in 0..grid.w {
            out.row_mut(j * t.w + i).assign(&x.row(i * grid.w + j));
        }
    }
    out
}
