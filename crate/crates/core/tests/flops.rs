//! FLOPs counter against a brute-force op-graph walk and the published
//! DiT-XL totals.

use proptest::prelude::*;
use sparsedit_core::blocks::BlockKind;
use sparsedit_core::flops::{count_block, count_dense, count_with_schedule, forward_rows};
use sparsedit_core::model::{ImageShape, ModelConfig, SdtmLayout};
use sparsedit_core::schedule::{default_ladder, PruneSchedule};
use sparsedit_core::TokenGrid;

/// The ops a forward pass executes, with their operand sizes.
#[derive(Clone, Copy, Debug)]
enum Op {
    /// `rows × cin` times `cin × cout`.
    MatMul { rows: u64, inner: u64, cols: u64 },
    /// Elementwise op costing `per` FLOPs on each of `elems` values.
    Map { elems: u64, per: u64 },
}

impl Op {
    fn flops(self) -> u64 {
        match self {
            Op::MatMul { rows, inner, cols } => {
                // one multiply and one add per product term
                let mut n = 0;
                for _ in 0..2 {
                    n += rows * inner * cols;
                }
                n
            }
            Op::Map { elems, per } => elems * per,
        }
    }
}

fn mm(rows: usize, inner: usize, cols: usize) -> Op {
    Op::MatMul {
        rows: rows as u64,
        inner: inner as u64,
        cols: cols as u64,
    }
}

fn map(elems: usize, per: u64) -> Op {
    Op::Map { elems: elems as u64, per }
}

fn adaln_ops(c: usize, chunks: usize) -> Vec<Op> {
    vec![map(c, 5), mm(1, c, chunks * c)]
}

/// Multi-head attention from `a` normed queries to `b` normed keys, head by
/// head.
fn attn_ops(a: usize, b: usize, c: usize, heads: usize) -> Vec<Op> {
    let d = c / heads;
    let mut ops = vec![mm(a, c, c), mm(b, c, c), mm(b, c, c)];
    for _ in 0..heads {
        ops.push(mm(a, d, b));
        ops.push(map(a * b, 5));
        ops.push(mm(a, b, d));
    }
    ops.push(mm(a, c, c));
    ops
}

fn mlp_ops(n: usize, c: usize) -> Vec<Op> {
    vec![map(n * c, 5), mm(n, c, 4 * c), map(n * 4 * c, 5), mm(n, 4 * c, c), map(n * c, 2)]
}

fn block_ops(kind: BlockKind, n: usize, m: usize, c: usize, heads: usize) -> Vec<Op> {
    let mut ops = adaln_ops(c, 6);
    let self_attn = |ops: &mut Vec<Op>, t: usize| {
        ops.push(map(t * c, 5));
        ops.extend(attn_ops(t, t, c, heads));
        ops.push(map(t * c, 2));
        ops.extend(mlp_ops(t, c));
    };
    match kind {
        BlockKind::Dense => self_attn(&mut ops, n),
        BlockKind::Sparse => self_attn(&mut ops, m),
        BlockKind::Pooling => {
            ops.push(map(n * c, 5));
            ops.push(mm(n, c, c));
            ops.push(map(n * c, 1));
            ops.push(mm(1, c, c));
            ops.push(map(n * c, 2));
            ops.extend(mlp_ops(n, c));
        }
        BlockKind::Generate => {
            ops.push(map(n * c, 1));
            ops.push(map(m * c, 5));
            ops.push(map(n * c, 5));
            ops.extend(attn_ops(m, n, c, heads));
            ops.push(map(m * c, 2));
            ops.extend(mlp_ops(m, c));
        }
        BlockKind::Recover => {
            ops.push(mm(n, c, c));
            ops.push(mm(n, c, c));
            ops.push(map(n * c, 1));
            ops.push(map(n * c, 5));
            ops.push(map(m * c, 5));
            ops.extend(attn_ops(n, m, c, heads));
            ops.push(map(n * c, 2));
            ops.extend(mlp_ops(n, c));
        }
    }
    ops
}

fn model_ops(cfg: &ModelConfig, grid: TokenGrid) -> Vec<Op> {
    let n = cfg.tokens();
    let m = if cfg.sdtm.is_empty() { n } else { grid.len() };
    let c = cfg.width;
    let mut ops = vec![mm(n, cfg.patch_dim(), c), map(n * c, 1)];
    ops.extend([mm(1, cfg.freq_dim, c), map(c, 5), mm(1, c, c), map(c, 1)]);
    for kind in cfg.layer_kinds() {
        ops.extend(block_ops(kind, n, m, c, cfg.heads));
        if kind == BlockKind::Recover && cfg.reintroduce_posembed {
            ops.push(map(n * c, 1));
        }
    }
    ops.extend(adaln_ops(c, 2));
    ops.push(map(n * c, 5));
    ops.push(mm(n, c, cfg.patch * cfg.patch * cfg.out_channels()));
    ops
}

fn total(ops: &[Op]) -> u64 {
    ops.iter().map(|o| o.flops()).sum()
}

fn toy_configs() -> Vec<ModelConfig> {
    let mut a = ModelConfig::toy();
    a.learn_sigma = true;
    let b = ModelConfig {
        img: ImageShape { h: 8, w: 12, channels: 3 },
        patch: 2,
        width: 24,
        heads: 3,
        n_bottom: 2,
        n_top: 1,
        sdtm: vec![SdtmLayout { n_sparse: 2, n_dense: 0 }, SdtmLayout { n_sparse: 0, n_dense: 2 }],
        num_classes: 5,
        timesteps: 10,
        learn_sigma: false,
        reintroduce_posembed: false,
        freq_dim: 32,
    };
    let dense = ModelConfig::dense(ImageShape { h: 8, w: 8, channels: 2 }, 4, 16, 4, 3, 2);
    vec![ModelConfig::toy(), a, b, dense]
}

#[test]
fn blocks_match_op_graph_walk() {
    for &(n, m, c, h) in &[(1, 1, 8, 2), (16, 4, 8, 2), (64, 9, 64, 4), (256, 256, 1152, 16), (256, 100, 1152, 16)] {
        for kind in [BlockKind::Dense, BlockKind::Pooling, BlockKind::Sparse, BlockKind::Generate, BlockKind::Recover] {
            assert_eq!(count_block(kind, n, m, c, h), total(&block_ops(kind, n, m, c, h)), "{kind} n={n} m={m}");
        }
    }
}

#[test]
fn models_match_op_graph_walk() {
    for cfg in toy_configs() {
        let dense = cfg.dense_grid();
        for grid in [TokenGrid::new(1, 1).unwrap(), TokenGrid::new(2, 3).unwrap(), dense] {
            let rows: u64 = forward_rows(&cfg, grid).iter().map(|(_, f)| f).sum();
            assert_eq!(rows, total(&model_ops(&cfg, grid)), "{cfg:?} at {grid}");
        }
    }
}

#[test]
fn dense_xl_totals() {
    let g256 = count_dense(&ModelConfig::dit_xl(32), 1).gmacs();
    let g512 = count_dense(&ModelConfig::dit_xl(64), 1).gmacs();
    assert!((g256 / 118.64 - 1.0).abs() < 0.08, "{g256}");
    assert!((g512 / 525.0 - 1.0).abs() < 0.08, "{g512}");
}

#[test]
fn sparse_xl_schedule_totals() {
    let cfg = ModelConfig::sparse_xl(32);
    let dense = cfg.dense_grid();
    for (lo, hi, want) in [(0.61, 0.86, 68.05), (0.44, 0.61, 88.91)] {
        let s = PruneSchedule::new(lo, hi, 250, dense, default_ladder(dense, lo, hi).unwrap()).unwrap();
        let g = count_with_schedule(&cfg, &s, false).gmacs();
        assert!((g / want - 1.0).abs() < 0.10, "[{lo}, {hi}] -> {g}");
    }
}

#[test]
fn full_grid_costs_dense_plus_overhead() {
    let sparse = ModelConfig::sparse_xl(32);
    let dense = ModelConfig::dit_xl(32);
    let g = sparse.dense_grid();
    let s = count_with_schedule(
        &sparse,
        &PruneSchedule::new(0.0, 0.5, 1, g, vec![g]).unwrap(),
        false,
    );
    let d = count_dense(&dense, 1);
    // poolingformers are cheaper than the dense blocks they replace
    let pool_saving: u64 = (0..sparse.n_bottom)
        .map(|_| count_block(BlockKind::Dense, 256, 256, 1152, 16) - count_block(BlockKind::Pooling, 256, 256, 1152, 16))
        .sum();
    assert_eq!(s.per_timestep[&0] - s.overhead_at(0) + pool_saving, d.per_timestep[&0]);
}

proptest! {
    #[test]
    fn more_pruning_never_costs_more(a in 1usize..=16, b in 1usize..=16) {
        let cfg = ModelConfig::sparse_b(32);
        let (small, large) = (a.min(b), a.max(b));
        let f = |side: usize| forward_rows(&cfg, TokenGrid::square(side).unwrap()).iter().map(|(_, f)| f).sum::<u64>();
        prop_assert!(f(small) <= f(large));
    }
}
