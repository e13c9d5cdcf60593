//! Attention statistics per layer and the uniform-attention ablation.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::model::{ForwardOptions, SparseDit};
use crate::nn::attention::mean_row_variance;

/// One noised input to probe the model with.
#[derive(Clone, Debug)]
pub struct Probe {
    pub x: Array3<f64>,
    pub t: usize,
    pub y: usize,
    pub grid: TokenGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceProfile {
    pub layers: Vec<String>,
    pub timesteps: Vec<usize>,
    /// `raw[i][l]`: timestep `timesteps[i]`, layer `l`.
    pub raw: Vec<Vec<f64>>,
    /// `raw` divided by its per-timestep maximum.
    pub normalized: Vec<Vec<f64>>,
}

impl VarianceProfile {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,t,raw,normalized")?;
        for (i, t) in self.timesteps.iter().enumerate() {
            for (l, name) in self.layers.iter().enumerate() {
                writeln!(w, "{name},{t},{:.12e},{:.12e}", self.raw[i][l], self.normalized[i][l])?;
            }
        }
        Ok(())
    }
}

/// Mean over probes, heads and query rows of the key-wise variance of each
/// layer's attention map. `probes[i]` holds the inputs for `timesteps[i]`.
pub fn attn_variance_profile(model: &SparseDit, probes: &[Vec<Probe>]) -> Result<VarianceProfile> {
    if model.blocks.is_empty() {
        return Err(Error::InvalidArgument {
            op: "attn_variance_profile",
            reason: "no attention layers to instrument".into(),
        });
    }
    let opts = ForwardOptions {
        trace_maps: true,
        ..Default::default()
    };
    let mut raw = Vec::with_capacity(probes.len());
    let mut timesteps = Vec::with_capacity(probes.len());
    for group in probes {
        let first = group.first().ok_or_else(|| Error::InvalidArgument {
            op: "attn_variance_profile",
            reason: "empty probe group".into(),
        })?;
        timesteps.push(first.t);
        let mut acc = vec![0.0; model.blocks.len()];
        for p in group {
            let (_, traces) = model.forward_traced(p.x.view(), p.t as f64, p.y, p.grid, opts)?;
            for tr in traces {
                acc[tr.index] += mean_row_variance(&tr.attn_maps);
            }
        }
        raw.push(acc.into_iter().map(|v| v / group.len() as f64).collect::<Vec<_>>());
    }
    let normalized = raw
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(0.0, f64::max);
            row.iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect()
        })
        .collect();
    Ok(VarianceProfile {
        layers: model.layer_names(),
        timesteps,
        raw,
        normalized,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub k: usize,
    pub layers: Vec<String>,
    /// Mean over probes of each block's output MSE against the baseline.
    pub per_layer_mse: Vec<f64>,
    pub output_mse: f64,
}

impl AblationReport {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,layer,mse")?;
        for (name, mse) in self.layers.iter().zip(&self.per_layer_mse) {
            writeln!(w, "{},{name},{mse:.12e}", self.k)?;
        }
        writeln!(w, "{},output,{:.12e}", self.k, self.output_mse)
    }
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Compares the model against itself with the first `k` attention maps
/// replaced by uniform weights. Overriding a poolingformer changes nothing,
/// which is asserted.
pub fn ablate_uniform_attention(model: &SparseDit, k: usize, probes: &[Probe]) -> Result<AblationReport> {
    let layers = model.layer_names();
    if k > layers.len() {
        return Err(Error::InvalidArgument {
            op: "ablate_uniform_attention",
            reason: format!("k={k} exceeds the {} attention layers", layers.len()),
        });
    }
    let base_opts = ForwardOptions {
        trace_outputs: true,
        ..Default::default()
    };
    let ablated_opts = ForwardOptions {
        uniform_first: k,
        ..base_opts
    };
    let only_pooling = model.blocks[..k]
        .iter()
        .all(|b| b.kind() == crate::blocks::BlockKind::Pooling);
    let mut per_layer = vec![0.0; layers.len()];
    let mut output = 0.0;
    for p in probes {
        let (y0, t0) = model.forward_traced(p.x.view(), p.t as f64, p.y, p.grid, base_opts)?;
        let (y1, t1) = model.forward_traced(p.x.view(), p.t as f64, p.y, p.grid, ablated_opts)?;
        if only_pooling && y0 != y1 {
            return Err(Error::InvalidArgument {
                op: "ablate_uniform_attention",
                reason: "overriding poolingformers changed the output".into(),
            });
        }
        for (acc, (a, b)) in per_layer.iter_mut().zip(t0.iter().zip(&t1)) {
            *acc += mse(&a.output, &b.output);
        }
        output += y0.iter().zip(&y1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y0.len() as f64;
    }
    let n = probes.len().max(1) as f64;
    Ok(AblationReport {
        k,
        layers,
        per_layer_mse: per_layer.into_iter().map(|v| v / n).collect(),
        output_mse: output / n,
    })
}
