//! Relational attention for multi-subject conditioning.
//!
//! A layout describes a video latent grid plus condition entities
//! (backgrounds, objects, and subject groups made of a face and its
//! attributes). From it this crate derives rotary positions for every token,
//! a branch-restricted self-attention mask, a three-level text correlation
//! mask, and the attention kernels and toy transformer block that consume
//! them.

pub mod attn;
pub mod block;
pub mod checks;
pub mod corpus;
pub mod error;
pub mod export;
pub mod flow;
pub mod grad;
pub mod layout;
pub mod masks;
pub mod r2pe;
pub mod synth;
pub mod tensor;

pub use attn::{
    compute_scaling_s, masked_self_attention_blockwise, masked_self_attention_naive,
    relational_cross_attention, standard_attention, AttnConfig,
};
pub use block::{block_forward, BlockDims, BlockOptions, BlockWeights, RelationalContext};
pub use error::{Error, Result};
pub use flow::{flow_interpolate, fm_loss, FlowSample};
pub use layout::{parse_spec, Branch, Entity, EntityKind, LayoutSpec, TokenAddress};
pub use masks::{build_csam, build_mcam, decompose_blocks, Block, CsamMask, McamMask};
pub use r2pe::{apply_rotary, assign_positions, Position3, RotaryConfig};
pub use tensor::Tensor2;
