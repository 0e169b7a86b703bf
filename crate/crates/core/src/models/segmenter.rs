use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::models::encoder::{ConvLayer, Encoder, EncoderConfig, EncoderTrace};
use crate::models::loss::NUM_CLASSES;
use crate::tensor::Tensor;

/// Encoder plus a mirrored decoder. Each decoder level upsamples by 2,
/// concatenates the encoder activation of matching resolution (the input
/// image at the top level), and applies conv 3×3 + ReLU. A 1×1 head maps to
/// per-pixel class logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
}

impl SegmenterConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            num_classes: NUM_CLASSES,
        }
    }

    /// Output channels of decoder level `i` (0 = full resolution).
    fn decoder_channels(&self, level: usize) -> usize {
        self.encoder.block_channels[level]
    }
}

/// Whether skip connections carry encoder activations or zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    Wired,
    Zeroed,
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    config: SegmenterConfig,
    encoder: Encoder,
    /// Decoder convs, coarsest level first.
    decoder: Vec<ConvLayer>,
    head: ConvLayer,
}

impl Segmenter {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: &SegmenterConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::init(store, &config.encoder, rng)?;
        let chans = &config.encoder.block_channels;
        let n = chans.len();
        let mut decoder = Vec::with_capacity(n);
        let mut cin = chans[n - 1];
        for level in (0..n).rev() {
            let skip = if level == 0 {
                config.encoder.in_channels
            } else {
                chans[level - 1]
            };
            let cout = config.decoder_channels(level);
            decoder.push(ConvLayer::init(
                store,
                &format!("decoder.level{level}"),
                cin + skip,
                cout,
                3,
                1,
                2f64.sqrt(),
                rng,
            )?);
            cin = cout;
        }
        let head = ConvLayer::init(store, "head", cin, config.num_classes, 1, 1, 1.0, rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Logits `B×K×H×W` plus the encoder trace (for bottleneck monitoring).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, skips: SkipMode) -> Result<(Var, EncoderTrace)> {
        let trace = self.encoder.forward(tape, store, x)?;
        let acts = &trace.activations;
        let n = acts.len();
        let mut h = acts[n - 1];
        for (step, layer) in self.decoder.iter().enumerate() {
            let level = n - 1 - step;
            let skip = if level == 0 { x } else { acts[level - 1] };
            let skip = match skips {
                SkipMode::Wired => skip,
                SkipMode::Zeroed => tape.input(Tensor::zeros(tape.value(skip).shape().to_vec()))?,
            };
            let up = tape.upsample_nearest(h, 2)?;
            let cat = tape.concat_channels(up, skip)?;
            let y = layer.forward(tape, store, cat)?;
            h = tape.relu(y)?;
        }
        let logits = self.head.forward(tape, store, h)?;
        Ok((logits, trace))
    }
}

/// Per-pixel class logits for a batch.
pub fn segment_forward(segmenter: &Segmenter, store: &ParamStore, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(batch.clone())?;
    let (logits, _) = segmenter.forward(&mut tape, store, x, SkipMode::Wired)?;
    Ok(tape.value(logits).clone())
}
