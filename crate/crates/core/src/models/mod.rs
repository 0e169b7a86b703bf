//! Toy-scale encoder, projector and U-Net-like segmenter, their training
//! objective, the Adam optimizer, the cyclic learning-rate schedule, and
//! checkpoint persistence.

mod checkpoint;
mod encoder;
mod loss;
mod optim;
mod projector;
mod segmenter;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use encoder::{encode, ConvLayer, Encoder, EncoderConfig, EncoderTrace};
pub use loss::{ce_dice_loss, ce_dice_on, DICE_SMOOTH, IGNORE_LABEL, NUM_CLASSES};
pub use optim::{adam_step, AdamConfig, AdamState, CyclicLrSchedule};
pub use projector::{project, Projector, ProjectorConfig};
pub use segmenter::{segment_forward, Segmenter, SegmenterConfig, SkipMode};

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

/// Registers a weight drawn from `N(0, gain²/fan_in)`.
pub(crate) fn fan_in_param<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Result<ParamId> {
    let std = gain / (fan_in as f64).sqrt();
    store.add(name, Tensor::randn(shape.to_vec(), std, rng))
}
