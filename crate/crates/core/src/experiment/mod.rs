//! Two-stage pipeline: multi-domain self-supervised pretraining, supervised
//! fine-tuning in four modes, moving-window evaluation and reporting.
//!
//! All outputs of one configuration live under `run-<config hash>/`:
//!
//! ```text
//! config.toml  manifest.toml
//! seed-<s>/pretrain/{encoder.ckpt, metrics.csv, outcome.json}
//! seed-<s>/<mode>/{segmenter.ckpt, metrics.csv, patch_order.txt, record.json,
//!                  eval.csv, masks/*.pgm}
//! report/{miou_table.csv, concordance_table.csv, alignment_stage1.csv,
//!         alignment_stage2.csv, records.json}
//! ```

mod config;
mod eval;
mod finetune;
mod pretrain;
mod report;
mod workspace;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{DataConfig, EvalConfig, ExperimentConfig, FinetuneConfig, Mode, PretrainConfig};
pub use eval::{predict_slide, predict_test_split, run_eval, score_predictions, EvalOutcome};
pub use finetune::{init_segmenter, load_segmenter, mode_domains, run_finetune, validation_miou, FinetuneOutcome};
pub use pretrain::{alignment_row, audit_domains, representations, run_pretrain, PretrainOutcome};
pub use report::{emit_report, mean_std, ReportFiles};
pub use workspace::{stream, Workspace};

use crate::data::write_pgm;
use crate::error::{Error, Result};
use crate::metrics::{write_metric_csv, AlignmentTrace, MetricRow};
use crate::models::{load_checkpoint, save_checkpoint};

/// Outcome of one (seed, mode) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub selected_epoch: usize,
    pub patch_order_hash: String,
    pub val_miou: Vec<f64>,
    pub stage2_trace: AlignmentTrace,
    pub trained_domains: BTreeSet<usize>,
    /// Per-domain test mIoU, filled in by evaluation.
    pub test_miou: Option<Vec<f64>>,
    pub concordance: Option<Vec<f64>>,
}

/// Paths inside a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(out_root: &Path, config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            root: out_root.join(format!("run-{}", config.hash()?)),
        })
    }

    pub fn pretrain_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}")).join("pretrain")
    }

    pub fn mode_dir(&self, seed: u64, mode: Mode) -> PathBuf {
        self.root.join(format!("seed-{seed}")).join(mode.name())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// Creates the run directory and writes the config and manifest.
    pub fn init(&self, config: &ExperimentConfig, ws: &Workspace) -> Result<()> {
        mkdir(&self.root)?;
        config.save(&self.root.join("config.toml"))?;
        ws.dataset.manifest.save(&self.root.join("manifest.toml"))
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn stage_pretrain(
    ws: &Workspace,
    config: &ExperimentConfig,
    layout: &RunLayout,
    seed: u64,
) -> Result<PretrainOutcome> {
    let (ckpt, outcome) = run_pretrain(ws, config, seed)?;
    let dir = layout.pretrain_dir(seed);
    mkdir(&dir)?;
    save_checkpoint(&dir.join("encoder.ckpt"), &ckpt)?;
    write_metric_csv(&dir.join("metrics.csv"), &outcome.metric_rows(&ws.domain_names()))?;
    write_json(&dir.join("outcome.json"), &outcome)?;
    Ok(outcome)
}

pub fn stage_finetune(
    ws: &Workspace,
    config: &ExperimentConfig,
    layout: &RunLayout,
    seed: u64,
    mode: Mode,
) -> Result<RunRecord> {
    let encoder = if mode.pretrained() {
        Some(load_checkpoint(&layout.pretrain_dir(seed).join("encoder.ckpt"))?)
    } else {
        None
    };
    let (ckpt, outcome) = run_finetune(ws, config, seed, mode, encoder.as_ref())?;
    let dir = layout.mode_dir(seed, mode);
    mkdir(&dir)?;
    save_checkpoint(&dir.join("segmenter.ckpt"), &ckpt)?;
    write_metric_csv(&dir.join("metrics.csv"), &outcome.metric_rows(&ws.domain_names()))?;
    fs::write(dir.join("patch_order.txt"), format!("{}\n", outcome.patch_order_hash))
        .map_err(|e| Error::io(dir.join("patch_order.txt"), e))?;
    let record = RunRecord {
        config_hash: config.hash()?,
        seed,
        mode,
        selected_epoch: outcome.selected_epoch,
        patch_order_hash: outcome.patch_order_hash,
        val_miou: outcome.val_miou,
        stage2_trace: outcome.trace,
        trained_domains: outcome.trained_domains,
        test_miou: None,
        concordance: None,
    };
    write_json(&dir.join("record.json"), &record)?;
    Ok(record)
}

pub fn stage_eval(
    ws: &Workspace,
    config: &ExperimentConfig,
    layout: &RunLayout,
    seed: u64,
    mode: Mode,
) -> Result<RunRecord> {
    let dir = layout.mode_dir(seed, mode);
    let (seg, store) = load_segmenter(&load_checkpoint(&dir.join("segmenter.ckpt"))?)?;
    let mut record: RunRecord = read_json(&dir.join("record.json"))?;
    let (outcome, predictions) = run_eval(ws, config, &seg, &store)?;
    let names = ws.domain_names();
    let mut rows = Vec::new();
    for (metric, values) in [("test_miou", &outcome.miou), ("concordance", &outcome.concordance)] {
        for (d, v) in values.iter().enumerate() {
            rows.push(MetricRow {
                epoch: record.selected_epoch,
                domain: names[d].clone(),
                metric: metric.into(),
                value: *v,
                seed,
            });
        }
    }
    write_metric_csv(&dir.join("eval.csv"), &rows)?;
    let mask_dir = dir.join("masks");
    mkdir(&mask_dir)?;
    for (id, masks) in &predictions {
        for (d, m) in masks.iter().enumerate() {
            write_pgm(&mask_dir.join(format!("slide{id:03}_{}.pgm", names[d])), m)?;
        }
    }
    record.test_miou = Some(outcome.miou);
    record.concordance = Some(outcome.concordance);
    write_json(&dir.join("record.json"), &record)?;
    Ok(record)
}

/// Collects every evaluated record and stage-1 outcome under `layout` and
/// writes the report bundle.
pub fn stage_report(config: &ExperimentConfig, layout: &RunLayout, domain_names: &[String]) -> Result<ReportFiles> {
    let mut records = Vec::new();
    let mut pretrain = Vec::new();
    for &seed in &config.seeds {
        for &mode in &config.modes {
            let path = layout.mode_dir(seed, mode).join("record.json");
            if path.exists() {
                records.push(read_json::<RunRecord>(&path)?);
            }
        }
        let path = layout.pretrain_dir(seed).join("outcome.json");
        if path.exists() {
            pretrain.push(read_json::<PretrainOutcome>(&path)?);
        }
    }
    emit_report(&records, &pretrain, domain_names, &layout.report_dir())
}

/// Everything produced by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub layout: RunLayout,
    pub domain_names: Vec<String>,
    pub pretrain: Vec<PretrainOutcome>,
    pub records: Vec<RunRecord>,
    pub report: ReportFiles,
}

/// Runs every stage for every seed and mode of `config`.
pub fn run_experiment(config: &ExperimentConfig, out_root: &Path) -> Result<ExperimentResult> {
    let ws = Workspace::build(config)?;
    run_experiment_on(&ws, config, out_root)
}

pub fn run_experiment_on(ws: &Workspace, config: &ExperimentConfig, out_root: &Path) -> Result<ExperimentResult> {
    config.validate()?;
    let layout = RunLayout::new(out_root, config)?;
    layout.init(config, ws)?;
    let mut pretrain = Vec::new();
    let mut records = Vec::new();
    for &seed in &config.seeds {
        if config.modes.iter().any(|m| m.pretrained()) {
            pretrain.push(stage_pretrain(ws, config, &layout, seed)?);
        }
        for &mode in &config.modes {
            stage_finetune(ws, config, &layout, seed, mode)?;
            records.push(stage_eval(ws, config, &layout, seed, mode)?);
        }
    }
    let domain_names = ws.domain_names();
    let report = stage_report(config, &layout, &domain_names)?;
    Ok(ExperimentResult {
        layout,
        domain_names,
        pretrain,
        records,
        report,
    })
}
