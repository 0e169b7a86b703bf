//! Reverse-mode differentiation over a closed operator catalog.
//!
//! A [`Tape`] records every operation of one forward sweep as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a valid reverse topological order because a node can only
//! refer to nodes created before it. A tape can be swept exactly once.

mod gradcheck;
pub(crate) mod kernels;
mod params;

use std::collections::BTreeMap;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};
use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target labels and options for the fused softmax cross-entropy + soft Dice op.
#[derive(Clone, Debug)]
pub struct SegTarget {
    /// One label per pixel, laid out `B×H×W`.
    pub labels: Vec<u8>,
    pub num_classes: usize,
    /// Pixels carrying this label contribute to neither term.
    pub ignore_label: u8,
    /// Added to the Dice numerator and denominator.
    pub smooth: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Upsample {
        input: Var,
        factor: usize,
    },
    ConcatChannels(Var, Var),
    Add(Var, Var),
    BiasAdd(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    MeanAll(Var),
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        /// Per-column `1 / sqrt(σ² + ε²)`.
        inv_std: Vec<f64>,
    },
    BarlowTwins {
        input: Var,
        lambda: f64,
    },
    CeDice {
        logits: Var,
        target: SegTarget,
        probs: Vec<f64>,
        valid: usize,
        /// Per-class (intersection, denominator, present).
        dice_terms: Vec<(f64, f64, bool)>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
    swept: bool,
    kink_hash: u64,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, if the node requires one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients in parameter-id order. Parameters that the loss
    /// does not depend on report a zero tensor.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grads[v.0].as_ref())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self {
            kink_hash: FNV_OFFSET,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every ReLU activation pattern recorded so far. Two sweeps with
    /// equal signatures evaluate the same smooth branch of the graph.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "input")
    }

    /// Input leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_tracked(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same id
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let v = self.push(store.value(id).clone(), Op::Param, true, "param")?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {m}×{k} · {k2}×{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Cross-correlation convolution without bias. Output size follows the
    /// usual floor rule `(H + 2·pad − k) / stride + 1`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, cin, h, w) = self.value(input).dims4()?;
        let (cout, kcin, k, k2) = self.value(kernel).dims4()?;
        if kcin != cin || k != k2 {
            return Err(Error::dim(format!(
                "kernel {:?} does not fit input with {cin} channels",
                self.value(kernel).shape()
            )));
        }
        if k % 2 == 0 {
            return Err(Error::dim(format!("kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::dim("stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(format!(
                "kernel {k} larger than padded input {h}×{w} (pad {pad})"
            )));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let rg = self.rg(input) || self.rg(kernel);
        self.push(
            Tensor::new([batch, cout, geom.ho, geom.wo], out)?,
            Op::Conv2d { input, kernel, geom },
            rg,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut hash = self.kink_hash;
        let data: Vec<f64> = src
            .data()
            .iter()
            .map(|&v| {
                let on = v > 0.0;
                hash = (hash ^ on as u64).wrapping_mul(FNV_PRIME);
                if on {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.kink_hash = hash;
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::dim("upsample factor must be positive"));
        }
        let (b, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    d[y * wo + xx] = s[(y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new([b, c, ho, wo], out)?,
            Op::Upsample { input: x, factor },
            rg,
            "upsample_nearest",
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::dim(format!(
                "cannot concatenate {:?} and {:?} along channels",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for n in 0..ba {
            out.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new([ba, ca + cb, ha, wa], out)?,
            Op::ConcatChannels(a, b),
            rg,
            "concat_channels",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "add of mismatched shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    /// Adds a per-column bias to a `B×N` matrix or a per-channel bias to a
    /// `B×C×H×W` map.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let tb = self.value(bias);
        let (channels, inner) = bias_layout(tx.shape())?;
        if tb.shape() != [channels] {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not match input {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % channels];
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::BiasAdd(x, bias), rg, "bias_add")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg, "scale")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let data = (0..r * c).map(|i| src[(i % r) * c + i / r]).collect();
        let rg = self.rg(x);
        self.push(Tensor::new([c, r], data)?, Op::Transpose(x), rg, "transpose")
    }

    /// Mean of all elements as a one-element tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let m = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg, "mean_all")
    }

    /// `B×C×H×W → B×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let src = self.value(x).data();
        let data = (0..b * c)
            .map(|i| src[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new([b, c], data)?, Op::GlobalAvgPool(x), rg, "global_avg_pool")
    }

    /// Per-column standardization of a `B×D` batch with population variance:
    /// `(z − μ) / sqrt(σ² + ε²)`. No learned affine transform.
    pub fn batchnorm_feature(&mut self, z: Var, epsilon: f64) -> Result<Var> {
        let (b, d) = self.value(z).dims2()?;
        if b < 2 {
            return Err(Error::BatchSize { required: 2, actual: b });
        }
        let src = self.value(z).data();
        let mut out = vec![0.0; b * d];
        let mut inv_std = vec![0.0; d];
        for j in 0..d {
            let mean = (0..b).map(|i| src[i * d + j]).sum::<f64>() / b as f64;
            let var = (0..b).map(|i| (src[i * d + j] - mean).powi(2)).sum::<f64>() / b as f64;
            let inv = 1.0 / (var + epsilon * epsilon).sqrt();
            inv_std[j] = inv;
            for i in 0..b {
                out[i * d + j] = (src[i * d + j] - mean) * inv;
            }
        }
        let rg = self.rg(z);
        self.push(
            Tensor::new([b, d], out)?,
            Op::BatchNorm { input: z, inv_std },
            rg,
            "batchnorm_feature",
        )
    }

    /// `Σ_i (1 − C_ii)² + λ·Σ_{i≠j} C_ij²` for a square matrix `C`.
    pub fn barlow_twins(&mut self, c: Var, lambda: f64) -> Result<Var> {
        let (r, k) = self.value(c).dims2()?;
        if r != k {
            return Err(Error::dim(format!("expected a square matrix, got {r}×{k}")));
        }
        let m = self.value(c).data();
        let mut on = 0.0;
        let mut off = 0.0;
        for i in 0..r {
            for j in 0..r {
                let v = m[i * r + j];
                if i == j {
                    on += (1.0 - v).powi(2);
                } else {
                    off += v * v;
                }
            }
        }
        let rg = self.rg(c);
        self.push(
            Tensor::scalar(on + lambda * off),
            Op::BarlowTwins { input: c, lambda },
            rg,
            "barlow_twins",
        )
    }

    /// Mean pixel cross-entropy plus mean soft Dice loss over the classes
    /// present in the target, both over non-ignored pixels of the batch.
    pub fn ce_dice(&mut self, logits: Var, target: SegTarget) -> Result<Var> {
        let (b, c, h, w) = self.value(logits).dims4()?;
        if c != target.num_classes {
            return Err(Error::dim(format!(
                "logits carry {c} classes, target expects {}",
                target.num_classes
            )));
        }
        if target.labels.len() != b * h * w {
            return Err(Error::dim(format!(
                "target has {} labels for {b}×{h}×{w} pixels",
                target.labels.len()
            )));
        }
        if let Some(bad) = target
            .labels
            .iter()
            .find(|&&l| l != target.ignore_label && l as usize >= c)
        {
            return Err(Error::Label(format!("class {bad} out of range 0..{c}")));
        }
        let plane = h * w;
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut ce = 0.0;
        let mut valid = 0usize;
        let mut inter = vec![0.0; c];
        let mut psum = vec![0.0; c];
        let mut tsum = vec![0.0; c];
        for n in 0..b {
            for p in 0..plane {
                let at = |k: usize| (n * c + k) * plane + p;
                let max = (0..c).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|k| (src[at(k)] - max).exp()).sum();
                for k in 0..c {
                    probs[at(k)] = (src[at(k)] - max).exp() / z;
                }
                let label = target.labels[n * plane + p];
                if label == target.ignore_label {
                    continue;
                }
                let y = label as usize;
                valid += 1;
                ce -= src[at(y)] - max - z.ln();
                for k in 0..c {
                    psum[k] += probs[at(k)];
                }
                inter[y] += probs[at(y)];
                tsum[y] += 1.0;
            }
        }
        if valid == 0 {
            return Err(Error::Contract("every target pixel is ignored".into()));
        }
        ce /= valid as f64;
        let eps = target.smooth;
        let dice_terms: Vec<(f64, f64, bool)> = (0..c).map(|k| (inter[k], psum[k] + tsum[k], tsum[k] > 0.0)).collect();
        let present = dice_terms.iter().filter(|t| t.2).count();
        let dice_loss = dice_terms
            .iter()
            .filter(|t| t.2)
            .map(|&(i, s, _)| 1.0 - (2.0 * i + eps) / (s + eps))
            .sum::<f64>()
            / present as f64;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(ce + dice_loss),
            Op::CeDice {
                logits,
                target,
                probs,
                valid,
                dice_terms,
            },
            rg,
            "ce_dice",
        )
    }

    /// Reverse sweep from a scalar node. A tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.swept {
            return Err(Error::Contract("tape has already been swept backward".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.swept = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .map(|(id, v)| {
                if grads[v.0].is_none() {
                    grads[v.0] = Some(Tensor::zeros(self.value(*v).shape().to_vec()));
                }
                (*id, *v)
            })
            .collect();
        // Untracked nodes never receive a gradient.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = out.shape()[1];
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, self.value(*b).data(), true, 0.0, &mut da);
                    accumulate(grads, *a, Tensor::new([m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.value(*a).data(), true, g.data(), false, 0.0, &mut db);
                    accumulate(grads, *b, Tensor::new([k, n], db)?);
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let (dx, dk) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    self.rg(*input),
                    self.rg(*kernel),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, Tensor::new(self.value(*input).shape().to_vec(), dx)?);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, Tensor::new(self.value(*kernel).shape().to_vec(), dk)?);
                }
            }
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, ov)| if *ov > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::Upsample { input, factor } => {
                let (b, c, h, w) = self.value(*input).dims4()?;
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![0.0; b * c * h * w];
                for plane in 0..b * c {
                    let s = &g.data()[plane * ho * wo..(plane + 1) * ho * wo];
                    let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..ho {
                        for xx in 0..wo {
                            d[(y / factor) * w + xx / factor] += s[y * wo + xx];
                        }
                    }
                }
                accumulate(grads, *input, Tensor::new([b, c, h, w], dx)?);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    ga.extend_from_slice(&g.data()[base..base + ca * plane]);
                    gb.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::new([n, ca, h, w], ga)?);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, Tensor::new([n, cb, h, w], gb)?);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::BiasAdd(x, bias) => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.rg(*bias) {
                    let (channels, inner) = bias_layout(out.shape())?;
                    let mut db = vec![0.0; channels];
                    for (i, v) in g.data().iter().enumerate() {
                        db[(i / inner) % channels] += v;
                    }
                    accumulate(grads, *bias, Tensor::new([channels], db)?);
                }
            }
            Op::Scale(x, s) => {
                let data = g.data().iter().map(|v| v * s).collect();
                accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::Transpose(x) => {
                let (r, c) = out.dims2()?;
                let data = (0..r * c).map(|i| g.data()[(i % r) * c + i / r]).collect();
                accumulate(grads, *x, Tensor::new([c, r], data)?);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let gv = g.data()[0] / n as f64;
                accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), gv));
            }
            Op::GlobalAvgPool(x) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let mut dx = vec![0.0; b * c * plane];
                for (i, gv) in g.data().iter().enumerate() {
                    dx[i * plane..(i + 1) * plane].fill(gv / plane as f64);
                }
                accumulate(grads, *x, Tensor::new([b, c, h, w], dx)?);
            }
            Op::BatchNorm { input, inv_std } => {
                let (b, d) = out.dims2()?;
                let xhat = out.data();
                let gd = g.data();
                let mut dx = vec![0.0; b * d];
                for j in 0..d {
                    let mg = (0..b).map(|i| gd[i * d + j]).sum::<f64>() / b as f64;
                    let mgx = (0..b).map(|i| gd[i * d + j] * xhat[i * d + j]).sum::<f64>() / b as f64;
                    for i in 0..b {
                        dx[i * d + j] = inv_std[j] * (gd[i * d + j] - mg - xhat[i * d + j] * mgx);
                    }
                }
                accumulate(grads, *input, Tensor::new([b, d], dx)?);
            }
            Op::BarlowTwins { input, lambda } => {
                let m = self.value(*input);
                let r = m.shape()[0];
                let gv = g.data()[0];
                let data = m
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, v)| {
                        if idx / r == idx % r {
                            -2.0 * (1.0 - v) * gv
                        } else {
                            2.0 * lambda * v * gv
                        }
                    })
                    .collect();
                accumulate(grads, *input, Tensor::new([r, r], data)?);
            }
            Op::CeDice {
                logits,
                target,
                probs,
                valid,
                dice_terms,
            } => {
                let (b, c, h, w) = self.value(*logits).dims4()?;
                let plane = h * w;
                let gv = g.data()[0];
                let n = *valid as f64;
                let eps = target.smooth;
                let present = dice_terms.iter().filter(|t| t.2).count() as f64;
                let mut dz = vec![0.0; probs.len()];
                let mut dp = vec![0.0; c];
                for s in 0..b {
                    for p in 0..plane {
                        let label = target.labels[s * plane + p];
                        if label == target.ignore_label {
                            continue;
                        }
                        let y = label as usize;
                        let at = |k: usize| (s * c + k) * plane + p;
                        // Dice: ∂/∂p_k of −(1/|present|)·(2I_k + ε)/(S_k + ε).
                        for (k, &(inter, denom, here)) in dice_terms.iter().enumerate() {
                            dp[k] = if here {
                                let t = if k == y { 1.0 } else { 0.0 };
                                -(2.0 * t * (denom + eps) - (2.0 * inter + eps)) / ((denom + eps).powi(2) * present)
                            } else {
                                0.0
                            };
                        }
                        let pd: f64 = (0..c).map(|k| probs[at(k)] * dp[k]).sum();
                        for k in 0..c {
                            let pk = probs[at(k)];
                            let t = if k == y { 1.0 } else { 0.0 };
                            dz[at(k)] = gv * ((pk - t) / n + pk * (dp[k] - pd));
                        }
                    }
                }
                accumulate(grads, *logits, Tensor::new([b, c, h, w], dz)?);
            }
        }
        Ok(())
    }
}

fn bias_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [_, n] => Ok((n, 1)),
        [_, c, h, w] => Ok((c, h * w)),
        _ => Err(Error::dim(format!("bias_add expects rank 2 or 4, got {shape:?}"))),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
