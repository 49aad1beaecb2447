//! Transformer sequence classifier over frame features.
//!
//! ```text
//! z_t  = W_p x_t + b_p                       (project)
//! z'_t = z_t + PE(t)                         (positional_encoding)
//! H    = Encoder(Z', mask)                   (encoder_forward, post-norm blocks)
//! h    = mean of H_t over real frames        (masked_mean_pool)
//! y    = W_c h + b_c                         (classify)
//! ```
//!
//! Gradients are derived by hand in [`network`] and checked against central
//! finite differences in the tests. Everything is generic over [`Scalar`] so
//! training can run in `f32` while gradient checks run in `f64`.

mod batch;
mod config;
mod network;
mod ops;
mod params;

pub use batch::PaddedBatch;
pub use config::ModelConfig;
pub use network::{
    attention_weights, backward, encoder_forward, forward, loss_and_grad, predict_logits, predict_proba, project,
    relu_signature, Dropout,
};
pub use ops::{classify, cross_entropy, log_softmax, masked_mean_pool, positional_encoding, softmax};
pub use params::{LayerParams, ModelParams};

/// Floating-point element type of the model.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
