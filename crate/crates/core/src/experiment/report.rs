use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{Mode, PretrainOutcome, RunRecord};

/// Files written by [`emit_report`], in writing order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Mean and sample standard deviation; the deviation needs two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

fn fmt_std(s: Option<f64>) -> String {
    s.map(|v| v.to_string()).unwrap_or_default()
}

struct Table {
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: Vec<String>) -> Self {
        Self { rows: vec![header] }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.write_record(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// One row per mode, `mean` and `std` columns per domain.
fn domain_table(records: &[&RunRecord], names: &[String], pick: fn(&RunRecord) -> Option<&Vec<f64>>) -> Result<Table> {
    let mut header = vec!["mode".to_string()];
    for n in names {
        header.push(format!("{n}_mean"));
        header.push(format!("{n}_std"));
    }
    header.push("n_seeds".into());
    let mut table = Table::new(header);
    for mode in Mode::ALL {
        let runs: Vec<&Vec<f64>> = records
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(|r| pick(r))
            .collect();
        if runs.is_empty() {
            continue;
        }
        let mut row = vec![mode.name().to_string()];
        for d in 0..names.len() {
            let vals: Vec<f64> = runs.iter().map(|v| v[d]).collect();
            let (m, s) = mean_std(&vals);
            row.push(m.to_string());
            row.push(fmt_std(s));
        }
        row.push(runs.len().to_string());
        table.push(row);
    }
    Ok(table)
}

/// Writes the report bundle: test mIoU and concordance tables (mean and
/// standard deviation over seeds), stage-1 and stage-2 alignment series, and
/// all records as JSON. Identical inputs give byte-identical files.
pub fn emit_report(
    records: &[RunRecord],
    pretrain: &[PretrainOutcome],
    domain_names: &[String],
    dir: &Path,
) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::Contract("no run records to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.mode, r.seed));
    let mut files = Vec::new();

    let miou = domain_table(&sorted, domain_names, |r| r.test_miou.as_ref())?;
    let p = dir.join("miou_table.csv");
    miou.write(&p)?;
    files.push(p);

    let conc = domain_table(&sorted, domain_names, |r| r.concordance.as_ref())?;
    let p = dir.join("concordance_table.csv");
    conc.write(&p)?;
    files.push(p);

    let mut stage1 = Table::new(["epoch", "domain", "mean", "std", "n_seeds"].map(String::from).to_vec());
    let mut by_seed: Vec<&PretrainOutcome> = pretrain.iter().collect();
    by_seed.sort_by_key(|o| o.seed);
    if let Some(first) = by_seed.first() {
        for e in 0..first.trace.epochs.len() {
            for &d in &first.trace.domains {
                let vals: Vec<f64> = by_seed.iter().filter_map(|o| o.trace.get(e, d)).collect();
                let (m, s) = mean_std(&vals);
                let name = domain_names.get(d).cloned().unwrap_or_else(|| d.to_string());
                stage1.push(vec![
                    e.to_string(),
                    name,
                    m.to_string(),
                    fmt_std(s),
                    vals.len().to_string(),
                ]);
            }
        }
    }
    let p = dir.join("alignment_stage1.csv");
    stage1.write(&p)?;
    files.push(p);

    // Mean distance to the non-reference domains, per setting and pooled
    // over single- and multi-domain fine-tuning.
    let mut series: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in &sorted {
        let pooled = if r.mode.pretrained() {
            "pooled_pretrained"
        } else {
            "pooled_baseline"
        };
        for e in 0..r.stage2_trace.epochs.len() {
            if let Some(v) = r.stage2_trace.mean_at(e) {
                for key in [r.mode.name(), pooled] {
                    series.entry(key.to_string()).or_default().entry(e).or_default().push(v);
                }
            }
        }
    }
    let mut stage2 = Table::new(["setting", "epoch", "mean", "std", "n"].map(String::from).to_vec());
    for (setting, epochs) in &series {
        for (e, vals) in epochs {
            let (m, s) = mean_std(vals);
            stage2.push(vec![
                setting.clone(),
                e.to_string(),
                m.to_string(),
                fmt_std(s),
                vals.len().to_string(),
            ]);
        }
    }
    let p = dir.join("alignment_stage2.csv");
    stage2.write(&p)?;
    files.push(p);

    let p = dir.join("records.json");
    let text = serde_json::to_string_pretty(&sorted).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    files.push(p);

    Ok(ReportFiles {
        dir: dir.to_path_buf(),
        files,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::metrics::AlignmentTrace;

    fn record(seed: u64, mode: Mode, miou: f64) -> RunRecord {
        let mut trace = AlignmentTrace::new(0, vec![0, 1]);
        trace.push(vec![0.0, 0.2]).unwrap();
        trace.push(vec![0.0, 0.1]).unwrap();
        RunRecord {
            config_hash: "abc".into(),
            seed,
            mode,
            selected_epoch: 1,
            patch_order_hash: "00".into(),
            val_miou: vec![0.1, 0.5],
            stage2_trace: trace,
            trained_domains: BTreeSet::from([0]),
            test_miou: Some(vec![miou, miou / 2.0]),
            concordance: Some(vec![1.0, 0.9]),
        }
    }

    fn names() -> Vec<String> {
        vec!["ref".into(), "other".into()]
    }

    #[test]
    fn empty_records_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&[], &[], &names(), dir.path()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn one_record_files_parse() {
        let dir = tempfile::tempdir().unwrap();
        let out = emit_report(&[record(0, Mode::BaselineSingle, 0.6)], &[], &names(), dir.path()).unwrap();
        assert_eq!(out.files.len(), 5);
        let table = fs::read_to_string(dir.path().join("miou_table.csv")).unwrap();
        let mut lines = table.lines();
        assert_eq!(
            lines.next().unwrap(),
            "mode,ref_mean,ref_std,other_mean,other_std,n_seeds"
        );
        assert_eq!(lines.next().unwrap(), "baseline_single,0.6,,0.3,,1");
        let json: Vec<RunRecord> = serde_json::from_str(&fs::read_to_string(&out.files[4]).unwrap()).unwrap();
        assert_eq!(json.len(), 1);
    }

    #[test]
    fn three_seeds_fill_std_and_rerun_is_identical() {
        let recs: Vec<RunRecord> = (0..3)
            .map(|s| record(s, Mode::PretrainedMulti, 0.5 + s as f64 * 0.1))
            .collect();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = emit_report(&recs, &[], &names(), a.path()).unwrap();
        let mut reversed = recs.clone();
        reversed.reverse();
        emit_report(&reversed, &[], &names(), b.path()).unwrap();
        for f in &fa.files {
            let name = f.file_name().unwrap();
            assert_eq!(fs::read(f).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let table = fs::read_to_string(a.path().join("miou_table.csv")).unwrap();
        let row: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], "pretrained_multi");
        let (m, s) = mean_std(&[0.5, 0.6, 0.7]);
        assert_eq!(row[1], m.to_string());
        assert_eq!(row[2], s.unwrap().to_string());
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, None));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }
}
