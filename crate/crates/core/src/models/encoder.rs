use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::models::fan_in_param;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of each stride-2 block.
    pub block_channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            block_channels: vec![8, 16, 32, 64],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() < 2 {
            return Err(Error::Config("encoder needs at least two blocks".into()));
        }
        if self.repr_dim() < 4 {
            return Err(Error::Config(format!(
                "representation dimension {} below 4",
                self.repr_dim()
            )));
        }
        if self.in_channels == 0 || self.block_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Width of the pooled representation.
    pub fn repr_dim(&self) -> usize {
        *self.block_channels.last().unwrap_or(&0)
    }

    /// Total spatial reduction of the encoder.
    pub fn downsample_factor(&self) -> usize {
        1 << self.block_channels.len()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::dim(format!("expected B×C×H×W input, got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(Error::dim(format!(
                "expected {} input channels, got {c}",
                self.in_channels
            )));
        }
        let f = self.downsample_factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!("spatial size {h}×{w} not divisible by {f}")));
        }
        Ok(())
    }
}

/// 3×3 convolution with per-channel bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub(crate) fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let kernel = fan_in_param(
            store,
            format!("{name}.kernel"),
            &[cout, cin, k, k],
            cin * k * k,
            gain,
            rng,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]))?;
        Ok(Self {
            kernel,
            bias,
            stride,
            pad: k / 2,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.conv2d(x, k, self.stride, self.pad)?;
        tape.bias_add(y, b)
    }
}

/// Stack of stride-2 conv + ReLU blocks followed by global average pooling.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    blocks: Vec<ConvLayer>,
}

/// Intermediate nodes of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// Block outputs, finest first; the last entry is the bottleneck map.
    pub activations: Vec<Var>,
    /// Pooled `B×R` representation.
    pub representation: Var,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut cin = config.in_channels;
        let mut blocks = Vec::with_capacity(config.block_channels.len());
        for (i, &cout) in config.block_channels.iter().enumerate() {
            blocks.push(ConvLayer::init(
                store,
                &format!("encoder.block{i}"),
                cin,
                cout,
                3,
                2,
                2f64.sqrt(),
                rng,
            )?);
            cin = cout;
        }
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ConvLayer] {
        &self.blocks
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<EncoderTrace> {
        self.config.check_input(tape.value(x).shape())?;
        let mut h = x;
        let mut activations = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let y = block.forward(tape, store, h)?;
            h = tape.relu(y)?;
            activations.push(h);
        }
        let representation = tape.global_avg_pool(h)?;
        Ok(EncoderTrace {
            activations,
            representation,
        })
    }
}

/// Pooled bottleneck representations `B×R` of a batch.
pub fn encode(encoder: &Encoder, store: &ParamStore, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(batch.clone())?;
    let trace = encoder.forward(&mut tape, store, x)?;
    Ok(tape.value(trace.representation).clone())
}
