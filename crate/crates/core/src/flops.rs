//! Analytic FLOPs counter.
//!
//! Convention: a multiply-accumulate is 2 FLOPs, biases are free. Layer
//! norm (including its modulation), softmax, GELU and SiLU cost 5 FLOPs per
//! element, a gated residual 2 and a plain add or average 1. Gathers
//! (patchify, upsampling, label lookup) are free.

use std::collections::BTreeMap;
use std::io::Write;

use crate::blocks::BlockKind;
use crate::grid::TokenGrid;
use crate::model::ModelConfig;
use crate::schedule::PruneSchedule;

pub const CONVENTION: &str = "2·MAC";
pub const ELEMENTWISE: u64 = 5;

/// One named part of a block's cost. Overheads are the terms a dense block
/// does not have: pooling, upsampling, merging and the second key/value norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cost {
    pub component: &'static str,
    pub flops: u64,
    pub overhead: bool,
}

const fn core(component: &'static str, flops: u64) -> Cost {
    Cost {
        component,
        flops,
        overhead: false,
    }
}

const fn extra(component: &'static str, flops: u64) -> Cost {
    Cost {
        component,
        flops,
        overhead: true,
    }
}

pub fn linear_flops(rows: u64, c_in: u64, c_out: u64) -> u64 {
    2 * rows * c_in * c_out
}

fn adaln(c: u64, chunks: u64) -> u64 {
    ELEMENTWISE * c + linear_flops(1, c, chunks * c)
}

/// Attention of `a` queries over `b` keys, starting from normed inputs.
fn attention(a: u64, b: u64, c: u64, heads: u64) -> u64 {
    linear_flops(a, c, c) + 2 * linear_flops(b, c, c) + 2 * a * b * c + ELEMENTWISE * heads * a * b + 2 * a * b * c + linear_flops(a, c, c)
}

/// Norm, two linears with GELU between, gated residual.
fn mlp_branch(n: u64, c: u64) -> u64 {
    ELEMENTWISE * n * c + linear_flops(n, c, 4 * c) + ELEMENTWISE * n * 4 * c + linear_flops(n, 4 * c, c) + 2 * n * c
}

/// Cost breakdown of one block with `n` dense and `m` sparse tokens.
pub fn block_costs(kind: BlockKind, n: usize, m: usize, c: usize, heads: usize) -> Vec<Cost> {
    assert!(m <= n, "sparse tokens ({m}) exceed dense tokens ({n})");
    let (n, m, c, h) = (n as u64, m as u64, c as u64, heads as u64);
    let dense = |n: u64| {
        vec![
            core("adaln", adaln(c, 6)),
            core("attn", ELEMENTWISE * n * c + attention(n, n, c, h) + 2 * n * c),
            core("mlp", mlp_branch(n, c)),
        ]
    };
    match kind {
        BlockKind::Dense => dense(n),
        BlockKind::Sparse => dense(m),
        // mean of values over tokens, projected once and broadcast
        BlockKind::Pooling => vec![
            core("adaln", adaln(c, 6)),
            core(
                "attn",
                ELEMENTWISE * n * c + linear_flops(n, c, c) + n * c + linear_flops(1, c, c) + 2 * n * c,
            ),
            core("mlp", mlp_branch(n, c)),
        ],
        BlockKind::Generate => vec![
            extra("pool", n * c),
            core("adaln", adaln(c, 6)),
            core("attn", ELEMENTWISE * m * c + attention(m, n, c, h) + 2 * m * c),
            extra("kv_norm", ELEMENTWISE * n * c),
            core("mlp", mlp_branch(m, c)),
        ],
        BlockKind::Recover => vec![
            extra("upsample", 0),
            extra("merge", 2 * linear_flops(n, c, c) + n * c),
            core("adaln", adaln(c, 6)),
            core("attn", ELEMENTWISE * n * c + attention(n, m, c, h) + 2 * n * c),
            extra("kv_norm", ELEMENTWISE * m * c),
            core("mlp", mlp_branch(n, c)),
        ],
    }
}

pub fn count_block(kind: BlockKind, n: usize, m: usize, c: usize, heads: usize) -> u64 {
    block_costs(kind, n, m, c, heads).iter().map(|k| k.flops).sum()
}

/// Patch embedding plus position add.
pub fn embed_flops(cfg: &ModelConfig) -> u64 {
    let n = cfg.tokens() as u64;
    let c = cfg.width as u64;
    linear_flops(n, cfg.patch_dim() as u64, c) + n * c
}

/// Timestep MLP and the sum with the label embedding.
pub fn conditioning_flops(cfg: &ModelConfig) -> u64 {
    let c = cfg.width as u64;
    linear_flops(1, cfg.freq_dim as u64, c) + ELEMENTWISE * c + linear_flops(1, c, c) + c
}

pub fn head_flops(cfg: &ModelConfig) -> u64 {
    let n = cfg.tokens() as u64;
    let c = cfg.width as u64;
    let out = (cfg.patch * cfg.patch * cfg.out_channels()) as u64;
    adaln(c, 2) + ELEMENTWISE * n * c + linear_flops(n, c, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFlops {
    pub t: usize,
    pub layer: String,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub per_timestep: BTreeMap<usize, u64>,
    pub schedule_average: f64,
    pub convention: &'static str,
    /// Two forwards per timestep (conditional and unconditional).
    pub cfg_doubled: bool,
}

impl FlopsReport {
    /// Schedule average in GFLOPs.
    pub fn gflops(&self) -> f64 {
        self.schedule_average / 1e9
    }

    /// Schedule average in billions of multiply-accumulates, the unit the
    /// DiT literature labels "GFLOPs".
    pub fn gmacs(&self) -> f64 {
        self.schedule_average / 2e9
    }

    /// Sum of the overhead rows at timestep `t`.
    pub fn overhead_at(&self, t: usize) -> u64 {
        self.per_layer
            .iter()
            .filter(|r| r.t == t && r.layer.contains('/'))
            .map(|r| r.flops)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,t,flops")?;
        for r in &self.per_layer {
            writeln!(w, "{},{},{}", r.layer, r.t, r.flops)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "schedule_average_flops={:.0} gflops={:.3} gmacs={:.3} convention={} cfg_doubled={} timesteps={}",
            self.schedule_average,
            self.gflops(),
            self.gmacs(),
            self.convention,
            self.cfg_doubled,
            self.per_timestep.len()
        )
    }
}

/// Per-layer rows for one forward at sparse grid `grid`. Each block gets a
/// row for its dense-equivalent work and one `name/component` row per
/// overhead term.
pub fn forward_rows(cfg: &ModelConfig, grid: TokenGrid) -> Vec<(String, u64)> {
    let n = cfg.tokens();
    let m = if cfg.has_sparse_tokens() { grid.len().min(n) } else { n };
    let mut rows = vec![
        ("embed".to_string(), embed_flops(cfg)),
        ("conditioning".to_string(), conditioning_flops(cfg)),
    ];
    for (i, kind) in cfg.layer_kinds().into_iter().enumerate() {
        let name = format!("blocks.{i}.{kind}");
        let costs = block_costs(kind, n, m, cfg.width, cfg.heads);
        let body: u64 = costs.iter().filter(|k| !k.overhead).map(|k| k.flops).sum();
        rows.push((name.clone(), body));
        for k in costs.iter().filter(|k| k.overhead) {
            rows.push((format!("{name}/{}", k.component), k.flops));
        }
        if kind == BlockKind::Recover && cfg.reintroduce_posembed {
            rows.push((format!("{name}/posembed"), (n * cfg.width) as u64));
        }
    }
    rows.push(("final_layer".to_string(), head_flops(cfg)));
    rows
}

/// Sums the layer sequence at every timestep in `[0, steps)` and averages.
pub fn count_model(cfg: &ModelConfig, steps: usize, grid_at: impl Fn(usize) -> TokenGrid, cfg_doubling: bool) -> FlopsReport {
    let factor = if cfg_doubling { 2 } else { 1 };
    let mut per_layer = Vec::new();
    let mut per_timestep = BTreeMap::new();
    let mut memo: BTreeMap<(usize, usize), Vec<(String, u64)>> = BTreeMap::new();
    for t in 0..steps {
        let g = grid_at(t);
        let rows = memo.entry((g.h, g.w)).or_insert_with(|| forward_rows(cfg, g));
        let mut total = 0;
        for (layer, f) in rows.iter() {
            per_layer.push(LayerFlops {
                t,
                layer: layer.clone(),
                flops: f * factor,
            });
            total += f * factor;
        }
        per_timestep.insert(t, total);
    }
    let schedule_average = if steps == 0 {
        0.0
    } else {
        per_timestep.values().map(|&v| v as f64).sum::<f64>() / steps as f64
    };
    FlopsReport {
        per_layer,
        per_timestep,
        schedule_average,
        convention: CONVENTION,
        cfg_doubled: cfg_doubling,
    }
}

pub fn count_with_schedule(cfg: &ModelConfig, schedule: &PruneSchedule, cfg_doubling: bool) -> FlopsReport {
    let pieces = schedule.build_pieces();
    let grid_at = |t: usize| pieces.iter().find(|p| p.contains(t)).map_or(schedule.dense(), |p| p.grid);
    count_model(cfg, schedule.steps(), grid_at, cfg_doubling)
}

/// Dense models ignore the grid; this counts them over `steps` timesteps.
pub fn count_dense(cfg: &ModelConfig, steps: usize) -> FlopsReport {
    let g = cfg.dense_grid();
    count_model(cfg, steps, |_| g, false)
}
