use serde::{Deserialize, Serialize};

use crate::data::{class, Mask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Statistics over the tissue pixels (mask ≠ background) of the given images.
///
/// Callers pass the reference domain's training slides only; the result is
/// applied unchanged to every domain.
pub fn zscore_stats(images: &[&Tensor], masks: &[&Mask]) -> Result<ZScoreStats> {
    if images.len() != masks.len() {
        return Err(Error::Contract("images and masks differ in length".into()));
    }
    let mut n = 0usize;
    let mut sum = [0.0; 3];
    for (img, mask) in images.iter().zip(masks) {
        let plane = check(img, mask)?;
        for (p, &l) in mask.labels.iter().enumerate() {
            if l != class::BACKGROUND {
                n += 1;
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += img.data()[c * plane + p];
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("no tissue pixels for normalization statistics".into()));
    }
    let mean = sum.map(|s| s / n as f64);
    let mut sq = [0.0; 3];
    for (img, mask) in images.iter().zip(masks) {
        let plane = mask.height * mask.width;
        for (p, &l) in mask.labels.iter().enumerate() {
            if l != class::BACKGROUND {
                for c in 0..3 {
                    sq[c] += (img.data()[c * plane + p] - mean[c]).powi(2);
                }
            }
        }
    }
    let std = sq.map(|s| (s / n as f64).sqrt());
    if std.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        return Err(Error::Numeric(format!("degenerate channel std {std:?}")));
    }
    Ok(ZScoreStats { mean, std })
}

fn check(img: &Tensor, mask: &Mask) -> Result<usize> {
    match *img.shape() {
        [3, h, w] if (h, w) == (mask.height, mask.width) => Ok(h * w),
        ref s => Err(Error::dim(format!(
            "image {s:?} does not match mask {}×{}",
            mask.height, mask.width
        ))),
    }
}

/// `(x − mean) / std` per channel for a `3×H×W` or `B×3×H×W` tensor.
pub fn normalize(x: &Tensor, stats: &ZScoreStats) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 3 || s[s.len() - 3] != 3 {
        return Err(Error::dim(format!("expected (B×)3×H×W, got {s:?}")));
    }
    let plane = s[s.len() - 1] * s[s.len() - 2];
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = (i / plane) % 3;
            (v - stats.mean[c]) / stats.std[c]
        })
        .collect();
    Tensor::new(s.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_with(mask: &Mask, tissue: [f64; 3], bg: f64) -> Tensor {
        let plane = mask.height * mask.width;
        Tensor::from_fn([3, mask.height, mask.width], |i| {
            if mask.labels[i % plane] == class::BACKGROUND {
                bg
            } else {
                tissue[i / plane]
            }
        })
    }

    #[test]
    fn constant_tissue_has_zero_std() {
        let mask = Mask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let img = image_with(&mask, [0.5, 0.4, 0.3], 1.0);
        assert!(matches!(zscore_stats(&[&img], &[&mask]), Err(Error::Numeric(_))));
    }

    #[test]
    fn mean_and_std_of_two_values() {
        let mask = Mask::new(1, 3, vec![1, 2, 0]).unwrap();
        let img = Tensor::new([3, 1, 3], vec![0.2, 0.4, 1.0, 0.1, 0.3, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let st = zscore_stats(&[&img], &[&mask]).unwrap();
        for (c, (m, s)) in [(0.3, 0.1), (0.2, 0.1), (0.5, 0.5)].iter().enumerate() {
            assert!((st.mean[c] - m).abs() < 1e-15);
            assert!((st.std[c] - s).abs() < 1e-15);
        }
        let n = normalize(&img, &st).unwrap();
        assert!((n.data()[0] + 1.0).abs() < 1e-12);
        assert!((n.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn background_does_not_affect_stats() {
        let mask = Mask::new(2, 3, vec![0, 1, 2, 1, 2, 0]).unwrap();
        let mut a = Tensor::from_fn([3, 2, 3], |i| (i as f64 * 0.37).sin() * 0.5 + 0.5);
        let sa = zscore_stats(&[&a], &[&mask]).unwrap();
        for c in 0..3 {
            a.data_mut()[c * 6] = 1.0;
            a.data_mut()[c * 6 + 5] = 1.0;
        }
        assert_eq!(zscore_stats(&[&a], &[&mask]).unwrap(), sa);
    }

    #[test]
    fn normalize_maps_mean_to_zero_in_batches() {
        let st = ZScoreStats {
            mean: [0.5, 0.25, 0.0],
            std: [2.0, 1.0, 0.5],
        };
        let x = Tensor::from_fn([2, 3, 1, 1], |i| [0.5, 0.25, 0.0][i % 3]);
        assert!(normalize(&x, &st).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(normalize(&Tensor::zeros([2, 2, 2]), &st).is_err());
    }
}
