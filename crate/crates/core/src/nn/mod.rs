//! Minimal dense-tensor and reverse-mode differentiation core.
//!
//! Only the layers the fusion network needs: same-padded convolution,
//! ReLU, 2×2 max pooling, 2×2 transposed convolution, channel
//! concatenation, batch normalization, the batch-mean squared-error loss,
//! and ADAM.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{BnStats, Mode};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor4;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Kaiming (fan-in) normal initialization from a seeded generator.
pub fn kaiming_normal<T: crate::Scalar>(shape: [usize; 4], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor4<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor4::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// Deterministic generator for a `(seed, stream)` pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
