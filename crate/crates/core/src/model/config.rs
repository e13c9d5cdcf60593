use serde::{Deserialize, Serialize};

use crate::blocks::BlockKind;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

/// One sparse-dense token module: a generation block, `n_sparse` blocks on
/// sparse tokens, a recovery block, then `n_dense` blocks on dense tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdtmLayout {
    pub n_sparse: usize,
    pub n_dense: usize,
}

impl SdtmLayout {
    pub fn depth(&self) -> usize {
        2 + self.n_sparse + self.n_dense
    }
}

fn default_true() -> bool {
    true
}

fn default_freq_dim() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub img: ImageShape,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    /// Poolingformers at the bottom.
    pub n_bottom: usize,
    /// Dense transformers at the top.
    pub n_top: usize,
    #[serde(default)]
    pub sdtm: Vec<SdtmLayout>,
    pub num_classes: usize,
    /// Diffusion timesteps the model is conditioned on.
    pub timesteps: usize,
    /// Extra output channels for a learned variance (DiT layout).
    #[serde(default)]
    pub learn_sigma: bool,
    /// Re-add the fixed dense position table after each recovery block.
    #[serde(default = "default_true")]
    pub reintroduce_posembed: bool,
    #[serde(default = "default_freq_dim")]
    pub freq_dim: usize,
}

impl ModelConfig {
    /// Plain DiT: every block is a dense transformer.
    pub fn dense(img: ImageShape, patch: usize, width: usize, heads: usize, depth: usize, num_classes: usize) -> Self {
        Self {
            img,
            patch,
            width,
            heads,
            n_bottom: 0,
            n_top: depth,
            sdtm: Vec::new(),
            num_classes,
            timesteps: 1000,
            learn_sigma: true,
            reintroduce_posembed: true,
            freq_dim: 256,
        }
    }

    /// DiT-XL/2 on a 32×32×4 latent (256² images) or 64×64×4 (512²).
    pub fn dit_xl(latent: usize) -> Self {
        let img = ImageShape { h: latent, w: latent, channels: 4 };
        Self::dense(img, 2, 1152, 16, 28, 1000)
    }

    pub fn dit_b(latent: usize) -> Self {
        let img = ImageShape { h: latent, w: latent, channels: 4 };
        Self::dense(img, 2, 768, 12, 12, 1000)
    }

    /// 2 poolingformers, 4 × (generate, 3 sparse, recover, 1 dense), 2 dense.
    pub fn sparse_xl(latent: usize) -> Self {
        Self {
            n_bottom: 2,
            n_top: 2,
            sdtm: vec![SdtmLayout { n_sparse: 3, n_dense: 1 }; 4],
            ..Self::dit_xl(latent)
        }
    }

    /// 1 poolingformer, 2 × (generate, 2 sparse, recover, 1 dense), 1 dense.
    pub fn sparse_b(latent: usize) -> Self {
        Self {
            n_bottom: 1,
            n_top: 1,
            sdtm: vec![SdtmLayout { n_sparse: 2, n_dense: 1 }; 2],
            ..Self::dit_b(latent)
        }
    }

    /// Desk-scale model: 16×16×1 images, patch 2, C=64, 4 heads,
    /// 1 poolingformer, one (1, 1) SDTM, 1 dense top block.
    pub fn toy() -> Self {
        Self {
            img: ImageShape { h: 16, w: 16, channels: 1 },
            patch: 2,
            width: 64,
            heads: 4,
            n_bottom: 1,
            n_top: 1,
            sdtm: vec![SdtmLayout { n_sparse: 1, n_dense: 1 }],
            num_classes: 4,
            timesteps: 100,
            learn_sigma: false,
            reintroduce_posembed: true,
            freq_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::Config { field: field.into(), reason });
        if self.patch == 0 {
            return bad("patch", "must be positive".into());
        }
        if self.img.h == 0 || self.img.w == 0 || self.img.channels == 0 {
            return bad("img", "extents must be positive".into());
        }
        if !self.img.h.is_multiple_of(self.patch) || !self.img.w.is_multiple_of(self.patch) {
            return bad("patch", format!("{}x{} image is not divisible by patch {}", self.img.h, self.img.w, self.patch));
        }
        if self.width == 0 || !self.width.is_multiple_of(4) {
            return bad("width", format!("{} must be a positive multiple of 4", self.width));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad("heads", format!("{} heads do not divide width {}", self.heads, self.width));
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive".into());
        }
        if self.timesteps == 0 {
            return bad("timesteps", "must be positive".into());
        }
        if self.freq_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return bad("freq_dim", "must be a positive even number".into());
        }
        if self.depth() == 0 {
            return bad("n_top", "model has no blocks".into());
        }
        Ok(())
    }

    pub fn dense_grid(&self) -> TokenGrid {
        TokenGrid {
            h: self.img.h / self.patch,
            w: self.img.w / self.patch,
        }
    }

    pub fn tokens(&self) -> usize {
        self.dense_grid().len()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.img.channels
    }

    pub fn out_channels(&self) -> usize {
        if self.learn_sigma {
            2 * self.img.channels
        } else {
            self.img.channels
        }
    }

    pub fn depth(&self) -> usize {
        self.n_bottom + self.n_top + self.sdtm.iter().map(SdtmLayout::depth).sum::<usize>()
    }

    /// Block kinds in execution order.
    pub fn layer_kinds(&self) -> Vec<BlockKind> {
        let mut kinds = vec![BlockKind::Pooling; self.n_bottom];
        for s in &self.sdtm {
            kinds.push(BlockKind::Generate);
            kinds.extend(std::iter::repeat_n(BlockKind::Sparse, s.n_sparse));
            kinds.push(BlockKind::Recover);
            kinds.extend(std::iter::repeat_n(BlockKind::Dense, s.n_dense));
        }
        kinds.extend(std::iter::repeat_n(BlockKind::Dense, self.n_top));
        kinds
    }

    pub fn has_sparse_tokens(&self) -> bool {
        !self.sdtm.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_match_dit_depths() {
        assert_eq!(ModelConfig::sparse_xl(32).depth(), 28);
        assert_eq!(ModelConfig::dit_xl(32).depth(), 28);
        assert_eq!(ModelConfig::sparse_b(32).depth(), 12);
        assert_eq!(ModelConfig::dit_b(32).depth(), 12);
        assert_eq!(ModelConfig::toy().depth(), 6);
        let kinds = ModelConfig::toy().layer_kinds();
        use BlockKind::*;
        assert_eq!(kinds, vec![Pooling, Generate, Sparse, Recover, Dense, Dense]);
    }

    #[test]
    fn validation_names_fields() {
        let mut c = ModelConfig::toy();
        c.heads = 5;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("{other:?}"),
        }
        let mut c = ModelConfig::toy();
        c.patch = 3;
        assert!(c.validate().is_err());
    }
}
