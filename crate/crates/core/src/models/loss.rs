use crate::autodiff::{SegTarget, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Background, tumor, non-tumor.
pub const NUM_CLASSES: usize = 3;
/// Label of pixels excluded from the loss and from metrics.
pub const IGNORE_LABEL: u8 = 255;
pub const DICE_SMOOTH: f64 = 1e-6;

/// Records cross-entropy + soft Dice (equal weights) on the tape. `target`
/// holds one label per pixel in `B×H×W` order.
pub fn ce_dice_on(tape: &mut Tape, logits: Var, target: &[u8]) -> Result<Var> {
    let num_classes = tape.value(logits).shape().get(1).copied().unwrap_or(0);
    tape.ce_dice(
        logits,
        SegTarget {
            labels: target.to_vec(),
            num_classes,
            ignore_label: IGNORE_LABEL,
            smooth: DICE_SMOOTH,
        },
    )
}

pub fn ce_dice_loss(logits: &Tensor, target: &[u8]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.input(logits.clone())?;
    let loss = ce_dice_on(&mut tape, l, target)?;
    tape.value(loss).item()
}
