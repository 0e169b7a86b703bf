//! Alignment and segmentation metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `1 − a·b / (‖a‖‖b‖)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine distance of a zero vector".into()));
    }
    // One square root keeps identical inputs at exactly zero.
    Ok((1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0))
}

/// Mean of row-wise cosine distances between corresponding rows.
pub fn mean_pairwise_cosine_distance(reference: &Tensor, other: &Tensor) -> Result<f64> {
    let (n, r) = reference.dims2()?;
    let (m, q) = other.dims2()?;
    if (n, r) != (m, q) {
        return Err(Error::dim(format!("representations {n}×{r} and {m}×{q}")));
    }
    if n == 0 {
        return Err(Error::dim("no rows"));
    }
    let mut sum = 0.0;
    for i in 0..n {
        sum += cosine_distance(reference.row(i), other.row(i))?;
    }
    Ok(sum / n as f64)
}

/// `counts[g·C + p]`: pixels of ground-truth class `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim(format!(
                "merging {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Intersection over union per class; `None` where the union is empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Adds one image pair; pixels whose ground truth equals `ignore` are skipped.
pub fn accumulate_confusion(cm: &mut ConfusionMatrix, pred: &[u8], gt: &[u8], ignore: Option<u8>) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let c = cm.classes;
    let mut local = vec![0u64; c * c];
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore {
            continue;
        }
        if g as usize >= c || p as usize >= c {
            return Err(Error::Label(format!("class pair ({g}, {p}) outside 0..{c}")));
        }
        local[g as usize * c + p as usize] += 1;
    }
    for (a, b) in cm.counts.iter_mut().zip(local) {
        *a += b;
    }
    Ok(())
}

/// Treatment of classes that occur in neither prediction nor ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroUnion {
    #[default]
    Exclude,
    CountAsZero,
    CountAsOne,
}

/// Class-averaged IoU with zero-union classes excluded.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    miou_with(cm, ZeroUnion::Exclude)
}

pub fn miou_with(cm: &ConfusionMatrix, policy: ZeroUnion) -> Result<f64> {
    let ious = cm.iou();
    if ious.iter().all(Option::is_none) {
        return Err(Error::UndefinedMetric("every class has an empty union".into()));
    }
    let vals: Vec<f64> = ious
        .into_iter()
        .filter_map(|v| match (v, policy) {
            (Some(v), _) => Some(v),
            (None, ZeroUnion::Exclude) => None,
            (None, ZeroUnion::CountAsZero) => Some(0.0),
            (None, ZeroUnion::CountAsOne) => Some(1.0),
        })
        .collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// mIoU between two predictions, `a` playing ground truth.
pub fn concordance(a: &Mask, b: &Mask, classes: usize) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::dim(format!(
            "masks {}×{} and {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    accumulate_confusion(&mut cm, &b.labels, &a.labels, None)?;
    miou(&cm)
}

/// Per-epoch mean cosine distance from the reference domain to each domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrace {
    pub reference_domain: usize,
    pub domains: Vec<usize>,
    /// `epochs[e][i]` is the distance to `domains[i]` after epoch `e`;
    /// row 0 is measured before training.
    pub epochs: Vec<Vec<f64>>,
}

impl AlignmentTrace {
    pub fn new(reference_domain: usize, domains: Vec<usize>) -> Self {
        Self {
            reference_domain,
            domains,
            epochs: Vec::new(),
        }
    }

    pub fn push(&mut self, distances: Vec<f64>) -> Result<()> {
        if distances.len() != self.domains.len() {
            return Err(Error::dim(format!(
                "trace row has {} entries for {} domains",
                distances.len(),
                self.domains.len()
            )));
        }
        if distances.iter().any(|d| !(0.0..=2.0).contains(d)) {
            return Err(Error::Numeric(format!("cosine distance outside [0, 2]: {distances:?}")));
        }
        self.epochs.push(distances);
        Ok(())
    }

    pub fn get(&self, epoch: usize, domain: usize) -> Option<f64> {
        let i = self.domains.iter().position(|d| *d == domain)?;
        self.epochs.get(epoch).map(|row| row[i])
    }

    pub fn first(&self, domain: usize) -> Option<f64> {
        self.get(0, domain)
    }

    pub fn last(&self, domain: usize) -> Option<f64> {
        self.get(self.epochs.len().checked_sub(1)?, domain)
    }

    /// Mean over all non-reference domains at `epoch`.
    pub fn mean_at(&self, epoch: usize) -> Option<f64> {
        let row = self.epochs.get(epoch)?;
        let vals: Vec<f64> = self
            .domains
            .iter()
            .zip(row)
            .filter(|(d, _)| **d != self.reference_domain)
            .map(|(_, v)| *v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_rows(&self, metric: &str, seed: u64, domain_names: &[String]) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for (e, row) in self.epochs.iter().enumerate() {
            for (d, v) in self.domains.iter().zip(row) {
                rows.push(MetricRow {
                    epoch: e,
                    domain: domain_names.get(*d).cloned().unwrap_or_else(|| d.to_string()),
                    metric: metric.to_string(),
                    value: *v,
                    seed,
                });
            }
        }
        rows
    }
}

/// One line of a metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub domain: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub fn metric_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
}

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    fs::write(path, metric_csv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(text.as_slice())
        .deserialize()
        .collect::<Result<Vec<MetricRow>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let d = cosine_distance(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((d - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
        assert!((d - 0.29289).abs() < 1e-5);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(cosine_distance(&[1.0], &[1.0, 0.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn pairwise_mean_matches_rowwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn([5, 6], 1.0, &mut rng);
        let b = Tensor::randn([5, 6], 1.0, &mut rng);
        let oracle: f64 = (0..5)
            .map(|i| {
                let (x, y) = (a.row(i), b.row(i));
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                1.0 - dot / (nx * ny)
            })
            .sum::<f64>()
            / 5.0;
        assert!((mean_pairwise_cosine_distance(&a, &b).unwrap() - oracle).abs() < 1e-14);
        assert_eq!(mean_pairwise_cosine_distance(&a, &a).unwrap(), 0.0);
        let one_a = Tensor::new([1, 6], a.row(0).to_vec()).unwrap();
        let one_b = Tensor::new([1, 6], b.row(0).to_vec()).unwrap();
        assert_eq!(
            mean_pairwise_cosine_distance(&one_a, &one_b).unwrap(),
            cosine_distance(a.row(0), b.row(0)).unwrap()
        );
        assert!(mean_pairwise_cosine_distance(&a, &Tensor::zeros([4, 6])).is_err());
    }

    #[test]
    fn confusion_examples() {
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&mut cm, &[1; 4], &[1; 4], None).unwrap();
        assert_eq!(cm.get(1, 1), 4);
        let before = cm.clone();
        accumulate_confusion(&mut cm, &[0, 2], &[255, 255], Some(255)).unwrap();
        assert_eq!(cm, before);
        assert!(matches!(
            accumulate_confusion(&mut cm, &[3], &[0], None),
            Err(Error::Label(_))
        ));
        assert_eq!(cm, before);
    }

    #[test]
    fn census_total_excludes_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt: Vec<u8> = (0..64).map(|_| [0, 1, 2, 255][rng.random_range(0..4)]).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&mut cm, &pred, &gt, Some(255)).unwrap();
        assert_eq!(cm.total(), gt.iter().filter(|g| **g != 255).count() as u64);
    }

    #[test]
    fn miou_examples() {
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&mut cm, &[0, 1, 2, 2], &[0, 1, 2, 2], None).unwrap();
        assert_eq!(miou(&cm).unwrap(), 1.0);

        let mut cm = ConfusionMatrix::new(2);
        accumulate_confusion(&mut cm, &[0, 1, 1, 1], &[0, 0, 1, 1], None).unwrap();
        assert_eq!(cm.iou(), vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((miou(&cm).unwrap() - 7.0 / 12.0).abs() < 1e-15);

        assert!(matches!(miou(&ConfusionMatrix::new(3)), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn zero_union_policies() {
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&mut cm, &[0, 1], &[0, 0], None).unwrap();
        assert_eq!(miou_with(&cm, ZeroUnion::Exclude).unwrap(), 0.25);
        assert_eq!(miou_with(&cm, ZeroUnion::CountAsZero).unwrap(), 0.5 / 3.0);
        assert_eq!(miou_with(&cm, ZeroUnion::CountAsOne).unwrap(), 1.5 / 3.0);
    }

    #[test]
    fn concordance_examples() {
        let a = Mask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        assert_eq!(concordance(&a, &a, 3).unwrap(), 1.0);
        // Half the pixels of a two-class image differ.
        let x = Mask::new(2, 4, vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let y = Mask::new(2, 4, vec![0, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        // Each class: intersection 2, union 6.
        assert!((concordance(&x, &y, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(concordance(&x, &y, 2).unwrap(), concordance(&y, &x, 2).unwrap());
        assert!(concordance(&a, &x, 3).is_err());
    }

    #[test]
    fn trace_accessors_and_rows() {
        let mut t = AlignmentTrace::new(0, vec![1, 3]);
        t.push(vec![0.4, 0.6]).unwrap();
        t.push(vec![0.2, 0.5]).unwrap();
        assert_eq!(t.first(1), Some(0.4));
        assert_eq!(t.last(3), Some(0.5));
        assert_eq!(t.mean_at(1), Some(0.35));
        assert!(t.push(vec![2.5, 0.0]).is_err());
        let names: Vec<String> = ["ref", "a", "b", "c"].map(String::from).to_vec();
        let rows = t.to_rows("cosine", 7, &names);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].domain, "c");
    }

    #[test]
    fn metric_csv_round_trip() {
        let rows = vec![
            MetricRow {
                epoch: 0,
                domain: "ref".into(),
                metric: "miou".into(),
                value: 0.1 + 0.2,
                seed: 3,
            },
            MetricRow {
                epoch: 1,
                domain: "seen-1".into(),
                metric: "cosine".into(),
                value: 1e-17,
                seed: 3,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metric_csv(&p, &rows).unwrap();
        assert_eq!(read_metric_csv(&p).unwrap(), rows);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,domain,metric,value,seed\n"));
    }

    fn masks(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (prop::collection::vec(0u8..3, len), prop::collection::vec(0u8..3, len))
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(v in prop::collection::vec(-5.0f64..5.0, 1..8), c in 0.01f64..100.0) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let w: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!(cosine_distance(&v, &w).unwrap() < 1e-12);
        }

        #[test]
        fn miou_invariant_under_shared_permutation((p, g) in masks(24), seed in any::<u64>()) {
            let mut perm: Vec<usize> = (0..24).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..24).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pp: Vec<u8> = perm.iter().map(|&i| p[i]).collect();
            let gp: Vec<u8> = perm.iter().map(|&i| g[i]).collect();
            let mut a = ConfusionMatrix::new(3);
            let mut b = ConfusionMatrix::new(3);
            accumulate_confusion(&mut a, &p, &g, None).unwrap();
            accumulate_confusion(&mut b, &pp, &gp, None).unwrap();
            prop_assert_eq!(miou(&a).unwrap(), miou(&b).unwrap());
        }

        #[test]
        fn split_accumulation_equals_concatenation((p, g) in masks(30), cut in 0usize..=30) {
            let mut whole = ConfusionMatrix::new(3);
            accumulate_confusion(&mut whole, &p, &g, None).unwrap();
            let mut parts = ConfusionMatrix::new(3);
            accumulate_confusion(&mut parts, &p[..cut], &g[..cut], None).unwrap();
            accumulate_confusion(&mut parts, &p[cut..], &g[cut..], None).unwrap();
            prop_assert_eq!(whole, parts);
        }
    }
}
