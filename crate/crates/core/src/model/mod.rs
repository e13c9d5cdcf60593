//! The full network: patch embedding, conditioning, the block stack and the
//! output head, plus checkpoint I/O and dense-weight import.

pub mod checkpoint;
pub mod config;
pub mod import;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::blocks::{
    BlockKind, DitBlock, DitCache, FinalCache, FinalLayer, GenerateBlock, GenerateCache, PoolingBlock, PoolingCache,
    RecoverBlock, RecoverCache,
};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::nn::attention::AttnMode;
use crate::nn::embed::{patchify, sincos_posembed_2d, unpatchify, LabelEmbedder, TimestepCache, TimestepEmbedder};
use crate::nn::linear::Linear;
use crate::params::{join, Params};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointManifest, Dtype, ManifestEntry, TensorFile};
pub use config::{ImageShape, ModelConfig, SdtmLayout};
pub use import::{import_dense, ImportReport};

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Dense(DitBlock),
    Sparse(DitBlock),
    Pooling(PoolingBlock),
    Generate(GenerateBlock),
    Recover(RecoverBlock),
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Dense(_) => BlockKind::Dense,
            Block::Sparse(_) => BlockKind::Sparse,
            Block::Pooling(_) => BlockKind::Pooling,
            Block::Generate(_) => BlockKind::Generate,
            Block::Recover(_) => BlockKind::Recover,
        }
    }

    fn from_dense(kind: BlockKind, b: DitBlock) -> Self {
        match kind {
            BlockKind::Dense => Block::Dense(b),
            BlockKind::Sparse => Block::Sparse(b),
            BlockKind::Pooling => Block::Pooling(PoolingBlock::from_dense(&b)),
            BlockKind::Generate => Block::Generate(GenerateBlock::from_dense(&b)),
            BlockKind::Recover => Block::Recover(RecoverBlock::from_dense(&b)),
        }
    }
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        match self {
            Block::Dense(b) | Block::Sparse(b) => b.visit(prefix, f),
            Block::Pooling(b) => b.visit(prefix, f),
            Block::Generate(b) => b.visit(prefix, f),
            Block::Recover(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        match self {
            Block::Dense(b) | Block::Sparse(b) => b.visit_mut(prefix, f),
            Block::Pooling(b) => b.visit_mut(prefix, f),
            Block::Generate(b) => b.visit_mut(prefix, f),
            Block::Recover(b) => b.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug)]
enum BlockCache {
    Dense(DitCache),
    Sparse(DitCache),
    Pooling(PoolingCache),
    Generate(GenerateCache),
    Recover(RecoverCache),
}

/// Everything needed to run the backward pass of one sample.
#[derive(Clone, Debug)]
pub struct ModelCache {
    y: usize,
    patches: Array2<f64>,
    t: TimestepCache,
    blocks: Vec<BlockCache>,
    head: FinalCache,
    /// `(layer name, Frobenius norm of its output)` in execution order.
    pub activation_norms: Vec<(String, f64)>,
}

/// Per-block output captured during a traced forward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub index: usize,
    pub kind: BlockKind,
    /// Tokens leaving the block (sparse tokens for generate and sparse
    /// blocks).
    pub output: Array2<f64>,
    /// Post-softmax attention maps, one per head, when requested.
    pub attn_maps: Vec<Array2<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace the attention of the first `k` blocks with uniform weights.
    pub uniform_first: usize,
    pub trace_outputs: bool,
    pub trace_maps: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseDit {
    config: ModelConfig,
    pub x_embedder: Linear,
    pub t_embedder: TimestepEmbedder,
    pub y_embedder: LabelEmbedder,
    pub blocks: Vec<Block>,
    pub final_layer: FinalLayer,
    pos: Array2<f64>,
}

impl SparseDit {
    /// Random initialization following DiT: xavier linears with zero bias,
    /// N(0, 0.02) embedders, zeroed adaLN and output head.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let x_embedder = Linear::xavier(config.patch_dim(), c, true, rng);
        let t_embedder = TimestepEmbedder::new(config.freq_dim, c, rng);
        let y_embedder = LabelEmbedder::new(config.num_classes, c, rng);
        let mut blocks = Vec::with_capacity(config.depth());
        for kind in config.layer_kinds() {
            blocks.push(Block::from_dense(kind, DitBlock::new(c, config.heads, rng)?));
        }
        let final_layer = FinalLayer::zero(c, config.patch * config.patch * config.out_channels());
        let pos = sincos_posembed_2d(config.dense_grid(), c)?;
        Ok(Self {
            config,
            x_embedder,
            t_embedder,
            y_embedder,
            blocks,
            final_layer,
            pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn posembed(&self) -> ArrayView2<'_, f64> {
        self.pos.view()
    }

    pub fn dense_grid(&self) -> TokenGrid {
        self.config.dense_grid()
    }

    pub fn null_label(&self) -> usize {
        self.y_embedder.null_label()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| format!("blocks.{i}.{}", b.kind()))
            .collect()
    }

    /// Conditioning vector `t_emb + y_emb`.
    pub fn condition(&self, t: f64, y: usize) -> Result<Array1<f64>> {
        let (te, _) = self.t_embedder.forward(t);
        Ok(te + self.y_embedder.forward(y)?)
    }

    fn check_input(&self, x: &ArrayView3<f64>, grid: TokenGrid) -> Result<()> {
        let img = self.config.img;
        if x.dim() != (img.h, img.w, img.channels) {
            return Err(crate::error::shape_err("model input", x.shape(), &[img.h, img.w, img.channels]));
        }
        if self.config.has_sparse_tokens() && !grid.fits_in(&self.dense_grid()) {
            return Err(Error::Grid(format!(
                "sparse grid {grid} does not fit in dense grid {}",
                self.dense_grid()
            )));
        }
        Ok(())
    }

    /// Predicts the output image (noise, plus variance channels when
    /// learned) for a single `H × W × C` input.
    pub fn forward(&self, x: ArrayView3<f64>, t: f64, y: usize, grid: TokenGrid) -> Result<Array3<f64>> {
        Ok(self.forward_full(x, t, y, grid, ForwardOptions::default())?.0)
    }

    pub fn forward_traced(
        &self,
        x: ArrayView3<f64>,
        t: f64,
        y: usize,
        grid: TokenGrid,
        opts: ForwardOptions,
    ) -> Result<(Array3<f64>, Vec<BlockTrace>)> {
        let (out, _, traces) = self.forward_full(x, t, y, grid, opts)?;
        Ok((out, traces))
    }

    pub fn forward_train(&self, x: ArrayView3<f64>, t: f64, y: usize, grid: TokenGrid) -> Result<(Array3<f64>, ModelCache)> {
        let (out, cache, _) = self.forward_full(x, t, y, grid, ForwardOptions::default())?;
        Ok((out, cache))
    }

    fn forward_full(
        &self,
        x: ArrayView3<f64>,
        t: f64,
        y: usize,
        grid: TokenGrid,
        opts: ForwardOptions,
    ) -> Result<(Array3<f64>, ModelCache, Vec<BlockTrace>)> {
        self.check_input(&x, grid)?;
        let dense = self.dense_grid();
        let patches = patchify(x, self.config.patch)?;
        let mut h = self.x_embedder.forward(patches.view()) + &self.pos;
        let (te, t_cache) = self.t_embedder.forward(t);
        let c = te + self.y_embedder.forward(y)?;

        let mut xs: Option<Array2<f64>> = None;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut traces = Vec::new();
        let mut norms = Vec::with_capacity(self.blocks.len() + 1);
        for (i, block) in self.blocks.iter().enumerate() {
            let mode = if i < opts.uniform_first {
                AttnMode::Uniform
            } else {
                AttnMode::Softmax
            };
            let (cache, maps) = match block {
                Block::Dense(b) => {
                    let (out, cache) = b.forward(h.view(), c.view(), mode);
                    h = out;
                    let maps = cache.attn.probs.clone();
                    (BlockCache::Dense(cache), maps)
                }
                Block::Pooling(b) => {
                    let (out, cache) = b.forward(h.view(), c.view());
                    h = out;
                    (BlockCache::Pooling(cache), b.implied_maps(dense.len()))
                }
                Block::Generate(b) => {
                    let (out, cache) = b.forward(h.view(), c.view(), dense, grid, mode)?;
                    xs = Some(out);
                    let maps = cache.attn.probs.clone();
                    (BlockCache::Generate(cache), maps)
                }
                Block::Sparse(b) => {
                    let cur = xs.as_ref().ok_or_else(|| Error::Grid("sparse block before generation".into()))?;
                    let (out, cache) = b.forward(cur.view(), c.view(), mode);
                    xs = Some(out);
                    let maps = cache.attn.probs.clone();
                    (BlockCache::Sparse(cache), maps)
                }
                Block::Recover(b) => {
                    let cur = xs.take().ok_or_else(|| Error::Grid("recovery block before generation".into()))?;
                    let pos = self.config.reintroduce_posembed.then(|| self.pos.view());
                    let (out, cache) = b.forward(h.view(), cur.view(), c.view(), grid, dense, pos, mode)?;
                    h = out;
                    let maps = cache.attn.probs.clone();
                    (BlockCache::Recover(cache), maps)
                }
            };
            let current = match block {
                Block::Generate(_) | Block::Sparse(_) => xs.as_ref().expect("sparse tokens set"),
                _ => &h,
            };
            let name = format!("blocks.{i}.{}", block.kind());
            norms.push((name, frobenius(current)));
            if opts.trace_outputs || opts.trace_maps {
                traces.push(BlockTrace {
                    index: i,
                    kind: block.kind(),
                    output: if opts.trace_outputs { current.clone() } else { Array2::zeros((0, 0)) },
                    attn_maps: if opts.trace_maps { maps } else { Vec::new() },
                });
            }
            caches.push(cache);
        }

        let (tokens, head) = self.final_layer.forward(h.view(), c.view());
        norms.push(("final_layer".into(), frobenius(&tokens)));
        let img = self.config.img;
        let out = unpatchify(tokens.view(), img.h, img.w, self.config.patch, self.config.out_channels())?;
        let cache = ModelCache {
            y,
            patches,
            t: t_cache,
            blocks: caches,
            head,
            activation_norms: norms,
        };
        Ok((out, cache, traces))
    }

    /// Accumulates parameter gradients of `<dout, output>` into `grad`.
    pub fn backward(&self, cache: &ModelCache, dout: ArrayView3<f64>, grad: &mut SparseDit) -> Result<()> {
        let dtokens = patchify(dout, self.config.patch)?;
        let (mut dh, mut dc) = self.final_layer.backward(&cache.head, dtokens.view(), &mut grad.final_layer);
        let mut dxs: Option<Array2<f64>> = None;
        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gblock = &mut grad.blocks[i];
            let dci = match (block, bc, gblock) {
                (Block::Dense(b), BlockCache::Dense(k), Block::Dense(g)) => {
                    let (dx, dci) = b.backward(k, dh.view(), g);
                    dh = dx;
                    dci
                }
                (Block::Pooling(b), BlockCache::Pooling(k), Block::Pooling(g)) => {
                    let (dx, dci) = b.backward(k, dh.view(), g);
                    dh = dx;
                    dci
                }
                (Block::Recover(b), BlockCache::Recover(k), Block::Recover(g)) => {
                    let (dx, ds, dci) = b.backward(k, dh.view(), g);
                    dh = dx;
                    dxs = Some(ds);
                    dci
                }
                (Block::Sparse(b), BlockCache::Sparse(k), Block::Sparse(g)) => {
                    let d = dxs.take().expect("recovery precedes sparse blocks in reverse");
                    let (dx, dci) = b.backward(k, d.view(), g);
                    dxs = Some(dx);
                    dci
                }
                (Block::Generate(b), BlockCache::Generate(k), Block::Generate(g)) => {
                    let d = dxs.take().expect("sparse gradient present at generation");
                    let (dx, dci) = b.backward(k, d.view(), g);
                    dh += &dx;
                    dci
                }
                _ => {
                    return Err(Error::InvalidArgument {
                        op: "backward",
                        reason: format!("block {i} does not match its cache or gradient"),
                    })
                }
            };
            dc += &dci;
        }
        self.x_embedder.backward(cache.patches.view(), dh.view(), &mut grad.x_embedder);
        self.t_embedder.backward(&cache.t, dc.view(), &mut grad.t_embedder);
        self.y_embedder.backward(cache.y, dc.view(), &mut grad.y_embedder);
        Ok(())
    }

    /// Parameter names with shapes in checkpoint order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, a| out.push((name.to_string(), a.shape().to_vec())));
        out
    }
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl Params for SparseDit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.x_embedder.visit(&join(prefix, "x_embedder.proj"), f);
        self.t_embedder.visit(&join(prefix, "t_embedder"), f);
        self.y_embedder.visit(&join(prefix, "y_embedder"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_layer.visit(&join(prefix, "final_layer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.x_embedder.visit_mut(&join(prefix, "x_embedder.proj"), f);
        self.t_embedder.visit_mut(&join(prefix, "t_embedder"), f);
        self.y_embedder.visit_mut(&join(prefix, "y_embedder"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_layer.visit_mut(&join(prefix, "final_layer"), f);
    }
}
