//! Tensor algebra, reverse-mode autodiff, layers, losses and the optimizer.

mod autodiff;
pub mod checkpoint;
pub mod loss;
pub mod nn;
pub mod optim;
mod params;
mod tensor;

pub use autodiff::{Graph, Var};
pub use nn::{
    linear_forward, scaled_dot_product_attention, softmax, AttentionMask, Ctx, Embedding,
    FeedForward, GatedFusion, Init, LayerNorm, Linear, MultiHeadAttention,
};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, LrSchedule};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
