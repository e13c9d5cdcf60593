//! Neural-network primitives with hand-written backward passes.

pub mod activation;
pub mod attention;
pub mod embed;
pub mod gradcheck;
pub mod linear;
pub mod mlp;
pub mod norm;

pub use attention::{mha, softmax_rows, AttnMode, Attention};
pub use embed::{patchify, sincos_posembed_2d, unpatchify, LabelEmbedder, TimestepEmbedder};
pub use gradcheck::{grad_check, GradCheckReport};
pub use linear::{linear, Linear};
pub use mlp::Mlp;
pub use norm::{adaln_modulate, AdaLn, Branch, Modulation};
