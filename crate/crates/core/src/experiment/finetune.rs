use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tape};
use crate::data::{derive_seed, PatchLocation};
use crate::error::{Error, Result};
use crate::experiment::pretrain::{alignment_row, audit_domains};
use crate::experiment::workspace::{stream, Workspace};
use crate::experiment::{ExperimentConfig, Mode};
use crate::metrics::{accumulate_confusion, miou, AlignmentTrace, ConfusionMatrix, MetricRow};
use crate::models::{
    adam_step, ce_dice_on, segment_forward, AdamConfig, AdamState, Checkpoint, CyclicLrSchedule, Segmenter,
    SegmenterConfig, SkipMode, IGNORE_LABEL,
};
use crate::tiling::argmax_mask;

const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub seed: u64,
    pub mode: Mode,
    /// Validation mIoU before training (index 0) and after every epoch.
    pub val_miou: Vec<f64>,
    pub train_loss: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub selected_epoch: usize,
    /// Bottleneck cosine distances on the validation patches, per epoch.
    pub trace: AlignmentTrace,
    /// SHA-256 over the ordered training patch locations of every epoch.
    pub patch_order_hash: String,
    pub trained_domains: BTreeSet<usize>,
}

impl FinetuneOutcome {
    pub fn metric_rows(&self, domain_names: &[String]) -> Vec<MetricRow> {
        let mut rows = self.trace.to_rows("cosine_distance", self.seed, domain_names);
        for (e, v) in self.val_miou.iter().enumerate() {
            rows.push(MetricRow {
                epoch: e,
                domain: "validation".into(),
                metric: "val_miou".into(),
                value: *v,
                seed: self.seed,
            });
        }
        for (e, v) in self.train_loss.iter().enumerate() {
            rows.push(MetricRow {
                epoch: e + 1,
                domain: "train".into(),
                metric: "ce_dice".into(),
                value: *v,
                seed: self.seed,
            });
        }
        rows
    }
}

/// Fine-tuning domains of a mode: the reference alone, or every training
/// domain.
pub fn mode_domains(ws: &Workspace, mode: Mode) -> Vec<usize> {
    let split = ws.dataset.split();
    if mode.multi() {
        split.train_domains.clone()
    } else {
        vec![split.reference_domain]
    }
}

/// Validation mIoU over `locs` rendered in each of `domains`, accumulated
/// into one confusion matrix.
pub fn validation_miou(
    seg: &Segmenter,
    store: &ParamStore,
    ws: &Workspace,
    locs: &[PatchLocation],
    domains: &[usize],
) -> Result<f64> {
    let k = seg.config().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    for &d in domains {
        for chunk in locs.chunks(EVAL_CHUNK) {
            let (x, labels) = ws.batch_in(chunk, d)?;
            let logits = segment_forward(seg, store, &x)?;
            let pred = batch_argmax(&logits)?;
            accumulate_confusion(&mut cm, &pred, &labels, Some(IGNORE_LABEL))?;
        }
    }
    miou(&cm)
}

/// Argmax labels of `B×K×H×W` logits in `B×H×W` order.
fn batch_argmax(logits: &crate::tensor::Tensor) -> Result<Vec<u8>> {
    let (b, k, h, w) = logits.dims4()?;
    let per = k * h * w;
    let mut out = Vec::with_capacity(b * h * w);
    for i in 0..b {
        let one = crate::tensor::Tensor::new([k, h, w], logits.data()[i * per..(i + 1) * per].to_vec())?;
        out.extend(argmax_mask(&one)?.labels);
    }
    Ok(out)
}

/// Fresh segmenter of one seed; every mode draws the same initial weights.
pub fn init_segmenter(config: &SegmenterConfig, seed: u64) -> Result<(Segmenter, ParamStore)> {
    let mut store = ParamStore::new();
    let seg = Segmenter::init(&mut store, config, &mut stream(seed, "segmenter-init", 0))?;
    Ok((seg, store))
}

/// Rebuilds a segmenter from a checkpoint written by [`run_finetune`].
pub fn load_segmenter(checkpoint: &Checkpoint) -> Result<(Segmenter, ParamStore)> {
    if checkpoint.kind != "segmenter" {
        return Err(Error::Format(format!(
            "expected a segmenter checkpoint, got {:?}",
            checkpoint.kind
        )));
    }
    let config: SegmenterConfig =
        serde_json::from_str(&checkpoint.config).map_err(|e| Error::Format(format!("segmenter config: {e}")))?;
    let (seg, mut store) = init_segmenter(&config, 0)?;
    if checkpoint.load_into(&mut store)? != store.len() {
        return Err(Error::Format("segmenter checkpoint is missing parameters".into()));
    }
    Ok((seg, store))
}

/// Stage 2: supervised training with CE + Dice on the mode's domains.
///
/// Patch locations and their order depend only on the seed, never on the
/// mode. Multi-domain modes pick each patch's rendering from a separate
/// random stream. The parameters with the best validation mIoU (earliest on
/// ties) are returned.
pub fn run_finetune(
    ws: &Workspace,
    config: &ExperimentConfig,
    seed: u64,
    mode: Mode,
    encoder_init: Option<&Checkpoint>,
) -> Result<(Checkpoint, FinetuneOutcome)> {
    config.validate()?;
    let split = ws.dataset.split().clone();
    let domains = mode_domains(ws, mode);
    audit_domains(&split, &domains)?;
    let seg_cfg = config.segmenter_config();
    let (seg, mut store) = init_segmenter(&seg_cfg, seed)?;
    match (mode.pretrained(), encoder_init) {
        (true, Some(ckpt)) => {
            if ckpt.kind != "encoder" {
                return Err(Error::Format(format!(
                    "expected an encoder checkpoint, got {:?}",
                    ckpt.kind
                )));
            }
            ckpt.load_into(&mut store)?;
        }
        (true, None) => return Err(Error::Contract(format!("mode {mode} needs a pretrained encoder"))),
        (false, Some(_)) => return Err(Error::Contract(format!("mode {mode} starts from a fresh encoder"))),
        (false, None) => {}
    }

    let ft = &config.finetune;
    let val_locs = ws.validation_locations(config, seed)?;
    let mut trace = AlignmentTrace::new(split.reference_domain, (0..ws.dataset.num_domains()).collect());
    trace.push(alignment_row(seg.encoder(), &store, ws, &val_locs)?)?;
    let mut val_miou = vec![validation_miou(&seg, &store, ws, &val_locs, &domains)?];
    let mut best = (val_miou[0], 0usize, store.clone());

    let per_epoch = split.train.len() * ft.per_slide;
    let steps_per_epoch = per_epoch.div_ceil(ft.batch_size);
    let schedule = CyclicLrSchedule::with_max(ft.max_lr, steps_per_epoch as u64);
    schedule.validate()?;
    let mut adam = AdamState::new(&store, AdamConfig::default());
    let mut hasher = Sha256::new();
    let mut train_loss = Vec::with_capacity(ft.epochs);
    let mut trained = BTreeSet::new();

    for epoch in 0..ft.epochs {
        let e = epoch as u64;
        let mut locs = ws.locations(
            &split.train,
            ft.per_slide,
            ft.bg_frac,
            derive_seed(seed, "finetune-epoch", e),
        )?;
        locs.shuffle(&mut stream(seed, "finetune-shuffle", e));
        for l in &locs {
            hasher.update((l.slide_id as u64).to_le_bytes());
            hasher.update((l.x as u64).to_le_bytes());
            hasher.update((l.y as u64).to_le_bytes());
        }
        let mut domain_rng = stream(seed, "finetune-domains", e);
        let assigned: Vec<usize> = locs
            .iter()
            .map(|_| domains[domain_rng.random_range(0..domains.len())])
            .collect();
        trained.extend(assigned.iter().copied());

        let mut sum = 0.0;
        for (chunk, doms) in locs.chunks(ft.batch_size).zip(assigned.chunks(ft.batch_size)) {
            let (x, labels) = ws.batch(chunk, doms)?;
            let mut tape = Tape::new();
            let xv = tape.input(x)?;
            let (logits, _) = seg.forward(&mut tape, &store, xv, SkipMode::Wired)?;
            let loss = ce_dice_on(&mut tape, logits, &labels)?;
            sum += tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            store.zero_grad();
            store.accumulate(&grads);
            let lr = schedule.lr(adam.step());
            adam_step(&mut adam, &mut store, lr)?;
        }
        train_loss.push(sum / steps_per_epoch as f64);
        let v = validation_miou(&seg, &store, ws, &val_locs, &domains)?;
        val_miou.push(v);
        trace.push(alignment_row(seg.encoder(), &store, ws, &val_locs)?)?;
        if v > best.0 {
            best = (v, epoch + 1, store.clone());
        }
    }

    let digest = hasher.finalize();
    let checkpoint = Checkpoint::from_store(
        "segmenter",
        serde_json::to_string(&seg_cfg).map_err(|e| Error::Format(e.to_string()))?,
        &best.2,
        &[],
    );
    Ok((
        checkpoint,
        FinetuneOutcome {
            seed,
            mode,
            val_miou,
            train_loss,
            selected_epoch: best.1,
            trace,
            patch_order_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
            trained_domains: trained,
        },
    ))
}
