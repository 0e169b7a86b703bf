use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::data::{derive_seed, PatchLocation, SplitSpec};
use crate::error::{Error, Result};
use crate::experiment::workspace::{stream, Workspace};
use crate::experiment::ExperimentConfig;
use crate::metrics::{mean_pairwise_cosine_distance, AlignmentTrace, MetricRow};
use crate::models::{
    adam_step, encode, AdamConfig, AdamState, Checkpoint, CyclicLrSchedule, Encoder, Projector, ProjectorConfig,
};
use crate::ssl_loss::{barlow_tuple_loss_on, TupleLossConfig};
use crate::tensor::Tensor;

/// Rejects any training domain set that touches a held-out domain.
pub fn audit_domains(split: &SplitSpec, domains: &[usize]) -> Result<()> {
    if let Some(d) = domains.iter().find(|d| split.heldout_domains.contains(d)) {
        return Err(Error::Contract(format!("held-out domain {d} scheduled for training")));
    }
    Ok(())
}

const ENCODE_CHUNK: usize = 64;

/// Pooled bottleneck representations of `locs` rendered in `domain`.
pub fn representations(
    encoder: &Encoder,
    store: &ParamStore,
    ws: &Workspace,
    locs: &[PatchLocation],
    domain: usize,
) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut r = 0;
    for chunk in locs.chunks(ENCODE_CHUNK) {
        let (x, _) = ws.batch_in(chunk, domain)?;
        let reps = encode(encoder, store, &x)?;
        r = reps.shape()[1];
        rows.extend_from_slice(reps.data());
    }
    Tensor::new([locs.len(), r], rows)
}

/// Mean cosine distance from the reference domain to every domain (the
/// reference itself included, at 0), on corresponding patches.
pub fn alignment_row(
    encoder: &Encoder,
    store: &ParamStore,
    ws: &Workspace,
    locs: &[PatchLocation],
) -> Result<Vec<f64>> {
    let reference = ws.dataset.split().reference_domain;
    let base = representations(encoder, store, ws, locs, reference)?;
    (0..ws.dataset.num_domains())
        .map(|d| {
            if d == reference {
                mean_pairwise_cosine_distance(&base, &base)
            } else {
                mean_pairwise_cosine_distance(&base, &representations(encoder, store, ws, locs, d)?)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub seed: u64,
    /// Row 0 is measured before the first update.
    pub trace: AlignmentTrace,
    /// Mean tuple loss per epoch.
    pub losses: Vec<f64>,
    pub trained_domains: BTreeSet<usize>,
}

impl PretrainOutcome {
    pub fn metric_rows(&self, domain_names: &[String]) -> Vec<MetricRow> {
        let mut rows = self.trace.to_rows("cosine_distance", self.seed, domain_names);
        for (e, l) in self.losses.iter().enumerate() {
            rows.push(MetricRow {
                epoch: e + 1,
                domain: "train".into(),
                metric: "tuple_loss".into(),
                value: *l,
                seed: self.seed,
            });
        }
        rows
    }
}

/// Stage 1: trains the encoder with the Barlow Tuple loss on corresponding
/// patches from every training domain.
///
/// The encoder starts from the same random stream the segmenter uses, so a
/// pretrained and a fresh segmenter of one seed share their initial encoder
/// before stage 1.
pub fn run_pretrain(ws: &Workspace, config: &ExperimentConfig, seed: u64) -> Result<(Checkpoint, PretrainOutcome)> {
    config.validate()?;
    let split = ws.dataset.split().clone();
    let domains = split.train_domains.clone();
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "pretraining needs at least 2 training domains, manifest has {}",
            domains.len()
        )));
    }
    audit_domains(&split, &domains)?;
    let pc = &config.pretrain;
    let enc_cfg = config.encoder_config();
    let mut store = ParamStore::new();
    let encoder = Encoder::init(&mut store, &enc_cfg, &mut stream(seed, "segmenter-init", 0))?;
    let proj_cfg = ProjectorConfig::for_representation(enc_cfg.repr_dim());
    let projector = Projector::init(&mut store, &proj_cfg, &mut stream(seed, "projector-init", 0))?;
    let loss_cfg = TupleLossConfig {
        lambda: pc.lambda,
        ..TupleLossConfig::new(proj_cfg.output_dim())
    };

    let val_locs = ws.validation_locations(config, seed)?;
    let mut trace = AlignmentTrace::new(split.reference_domain, (0..ws.dataset.num_domains()).collect());
    trace.push(alignment_row(&encoder, &store, ws, &val_locs)?)?;

    let steps_per_epoch = (split.train.len() * pc.per_slide) / pc.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config("pretraining batch larger than an epoch".into()));
    }
    let schedule = CyclicLrSchedule::with_max(pc.max_lr, steps_per_epoch as u64);
    schedule.validate()?;
    let mut adam = AdamState::new(&store, AdamConfig::default());
    let mut losses = Vec::with_capacity(pc.epochs);
    let mut trained = BTreeSet::new();

    for epoch in 0..pc.epochs {
        let mut locs = ws.locations(
            &split.train,
            pc.per_slide,
            config.finetune.bg_frac,
            derive_seed(seed, "pretrain-epoch", epoch as u64),
        )?;
        locs.shuffle(&mut stream(seed, "pretrain-shuffle", epoch as u64));
        let mut sum = 0.0;
        for chunk in locs.chunks_exact(pc.batch_size) {
            let mut tape = Tape::new();
            let mut views = Vec::with_capacity(domains.len());
            for &d in &domains {
                let (x, _) = ws.batch_in(chunk, d)?;
                let xv = tape.input(x)?;
                let rep = encoder.forward(&mut tape, &store, xv)?.representation;
                views.push(projector.forward(&mut tape, &store, rep)?);
                trained.insert(d);
            }
            let loss = barlow_tuple_loss_on(&mut tape, &views, &loss_cfg)?;
            sum += tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            store.zero_grad();
            store.accumulate(&grads);
            let lr = schedule.lr(adam.step());
            adam_step(&mut adam, &mut store, lr)?;
        }
        losses.push(sum / steps_per_epoch as f64);
        trace.push(alignment_row(&encoder, &store, ws, &val_locs)?)?;
    }

    let checkpoint = Checkpoint::from_store(
        "encoder",
        serde_json::to_string(&enc_cfg).map_err(|e| Error::Format(e.to_string()))?,
        &store,
        &["encoder."],
    );
    Ok((
        checkpoint,
        PretrainOutcome {
            seed,
            trace,
            losses,
            trained_domains: trained,
        },
    ))
}
