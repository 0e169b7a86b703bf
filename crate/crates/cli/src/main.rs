use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use scanalign::data::Dataset;
use scanalign::experiment::{
    run_experiment_on, stage_eval, stage_finetune, stage_pretrain, stage_report, ExperimentConfig, RunLayout, Workspace,
};
use scanalign::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "scanalign",
    version,
    about = "Multi-scanner pretraining and segmentation experiments"
)]
struct Cli {
    #[command(flatten)]
    opts: Options,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug)]
struct Options {
    /// Experiment config (TOML). Overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config: paper, desk or compact.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated modes.
    #[arg(long, global = true, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long, global = true)]
    pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    finetune_epochs: Option<usize>,
    /// Root under which `run-<config hash>/` is created.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Write the dataset manifest, renderings and masks.
    GenData {
        #[arg(long, default_value = "data")]
        dir: PathBuf,
    },
    /// Stage 1 for every seed.
    Pretrain,
    /// Stage 2 for every seed and mode.
    Finetune,
    /// Moving-window test evaluation for every seed and mode.
    Eval,
    /// Aggregate tables and series over the evaluated runs.
    Report,
    /// All stages in order.
    Run,
}

fn load_config(o: &Options) -> Result<ExperimentConfig> {
    let mut c = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(&o.preset)?,
    };
    if let Some(s) = &o.seeds {
        c.seeds = s.clone();
    }
    if let Some(m) = &o.modes {
        c.modes = m.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    }
    if let Some(e) = o.pretrain_epochs {
        c.pretrain.epochs = e;
    }
    if let Some(e) = o.finetune_epochs {
        c.finetune.epochs = e;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.opts)?;
    let start = Instant::now();
    let log = |msg: String| eprintln!("[{:>7.1}s] {msg}", start.elapsed().as_secs_f64());

    if let Verb::GenData { dir } = &cli.verb {
        let ds = Dataset::build(config.dataset_manifest()?)?;
        ds.export(dir)?;
        log(format!("wrote {} slides to {}", ds.slides().len(), dir.display()));
        return Ok(());
    }

    let ws = Workspace::build(&config)?;
    let layout = RunLayout::new(&cli.opts.out, &config)?;
    layout.init(&config, &ws)?;
    log(format!("run directory {}", layout.root.display()));
    match cli.verb {
        Verb::GenData { .. } => unreachable!(),
        Verb::Pretrain => {
            for &seed in &config.seeds {
                let o = stage_pretrain(&ws, &config, &layout, seed)?;
                let last = o.trace.epochs.len() - 1;
                log(format!(
                    "seed {seed}: pretrained, mean distance {:.4} -> {:.4}",
                    o.trace.mean_at(0).unwrap_or(f64::NAN),
                    o.trace.mean_at(last).unwrap_or(f64::NAN)
                ));
            }
        }
        Verb::Finetune => {
            for &seed in &config.seeds {
                for &mode in &config.modes {
                    let r = stage_finetune(&ws, &config, &layout, seed, mode)?;
                    let best = r.val_miou[r.selected_epoch];
                    log(format!(
                        "seed {seed} {mode}: best val mIoU {best:.4} at epoch {}",
                        r.selected_epoch
                    ));
                }
            }
        }
        Verb::Eval => {
            for &seed in &config.seeds {
                for &mode in &config.modes {
                    let r = stage_eval(&ws, &config, &layout, seed, mode)?;
                    log(format!(
                        "seed {seed} {mode}: test mIoU {:?}",
                        r.test_miou.unwrap_or_default()
                    ));
                }
            }
        }
        Verb::Report => {
            let files = stage_report(&config, &layout, &ws.domain_names())?;
            log(format!("report written to {}", files.dir.display()));
        }
        Verb::Run => {
            let res = run_experiment_on(&ws, &config, &cli.opts.out)?;
            for r in &res.records {
                log(format!(
                    "seed {} {}: test mIoU {:?}",
                    r.seed,
                    r.mode,
                    r.test_miou.clone().unwrap_or_default()
                ));
            }
            log(format!("report written to {}", res.report.dir.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
