use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::class;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixels strictly brighter than this grayscale value are background.
pub const BACKGROUND_THRESHOLD: f64 = 235.0 / 255.0;

/// Per-pixel class labels in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}×{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per class id `0..n`.
    pub fn histogram(&self, n: usize) -> Vec<usize> {
        let mut h = vec![0; n];
        for &l in &self.labels {
            if (l as usize) < n {
                h[l as usize] += 1;
            }
        }
        h
    }

    /// Sub-mask with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, h: usize, w: usize) -> Mask {
        let mut labels = Vec::with_capacity(h * w);
        for row in y..y + h {
            labels.extend_from_slice(&self.labels[row * self.width + x..row * self.width + x + w]);
        }
        Mask {
            height: h,
            width: w,
            labels,
        }
    }
}

/// Synthetic stand-in for a digitized specimen.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualSlide {
    pub slide_id: usize,
    pub seed: u64,
    /// `3×H×W` RGB in `[0, 1]`.
    pub base_image: Tensor,
    pub mask: Mask,
}

impl VirtualSlide {
    pub fn size(&self) -> (usize, usize) {
        (self.mask.height, self.mask.width)
    }
}

/// How RGB is reduced to grayscale for the background rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grayscale {
    /// `(R + G + B) / 3`.
    #[default]
    ChannelMean,
    /// ITU-R BT.601 luma weights.
    Luminance,
}

impl Grayscale {
    fn apply(self, r: f64, g: f64, b: f64) -> f64 {
        match self {
            Grayscale::ChannelMean => (r + g + b) / 3.0,
            Grayscale::Luminance => 0.299 * r + 0.587 * g + 0.114 * b,
        }
    }
}

/// `true` where the grayscale value is strictly above 235/255.
pub fn label_background(image: &Tensor, gray: Grayscale) -> Result<Vec<bool>> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::dim(format!("expected 3×H×W image, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = image.data();
    Ok((0..plane)
        .map(|p| gray.apply(d[p], d[plane + p], d[2 * plane + p]) > BACKGROUND_THRESHOLD)
        .collect())
}

/// Smooth random field in `[0, 1]`: bilinear value noise with smoothstep
/// easing on a lattice of `cell`-pixel spacing.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let (ox, oy) = (rng.random::<f64>(), rng.random::<f64>());
    let ease = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell + oy;
        let (iy, ty) = (fy.floor() as usize, ease(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell + ox;
            let (ix, tx) = (fx.floor() as usize, ease(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn octaves(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let coarse = value_noise(rng, h, w, cell);
    let fine = value_noise(rng, h, w, cell / 2.5);
    coarse.iter().zip(&fine).map(|(a, b)| 0.7 * a + 0.3 * b).collect()
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    v[idx]
}

/// Stamps soft round nuclei into `density` wherever `region` holds.
fn stamp_nuclei(
    rng: &mut ChaCha8Rng,
    density: &mut [f64],
    region: &[bool],
    h: usize,
    w: usize,
    per_pixel: f64,
    radius: (f64, f64),
) {
    let count = (per_pixel * (h * w) as f64).round() as usize;
    for _ in 0..count {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let r = rng.random_range(radius.0..radius.1);
        let (ix, iy) = (cx as usize, cy as usize);
        if !region[iy.min(h - 1) * w + ix.min(w - 1)] {
            continue;
        }
        let reach = r.ceil() as isize + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (px, py) = (ix as isize + dx, iy as isize + dy);
                if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                    continue;
                }
                let d = ((px as f64 + 0.5 - cx).powi(2) + (py as f64 + 0.5 - cy).powi(2)).sqrt();
                let v = (1.0 - (d - r + 0.5).clamp(0.0, 1.0)).max(0.0);
                let slot = &mut density[py as usize * w + px as usize];
                *slot = slot.max(v);
            }
        }
    }
}

/// Builds a square virtual slide of `size`×`size` pixels.
///
/// Two smooth noise fields, thresholded at per-slide random quantiles,
/// split the slide into light background, tumor (dense, large, dark nuclei on
/// purple cytoplasm) and non-tumor tissue (sparse small nuclei on pink,
/// fibrous stroma). Quantile thresholds keep every class above 5% of the
/// area.
pub fn generate_slide(slide_id: usize, seed: u64, size: usize) -> Result<VirtualSlide> {
    if size < 16 {
        return Err(Error::Config(format!("slide size {size} too small")));
    }
    let (h, w) = (size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_frac = rng.random_range(0.15..0.30);
    let tumor_share = rng.random_range(0.35..0.60);
    let tissue_field = octaves(&mut rng, h, w, 44.0);
    let tumor_field = octaves(&mut rng, h, w, 30.0);
    let stain_field = value_noise(&mut rng, h, w, 60.0);

    let tissue_thr = quantile(&tissue_field, bg_frac);
    let tissue: Vec<bool> = tissue_field.iter().map(|v| *v > tissue_thr).collect();
    let tissue_tumor: Vec<f64> = tumor_field
        .iter()
        .zip(&tissue)
        .filter(|(_, t)| **t)
        .map(|(v, _)| *v)
        .collect();
    let tumor_thr = quantile(&tissue_tumor, 1.0 - tumor_share);
    let labels: Vec<u8> = tissue
        .iter()
        .zip(&tumor_field)
        .map(|(&t, &f)| match (t, f > tumor_thr) {
            (false, _) => class::BACKGROUND,
            (true, true) => class::TUMOR,
            (true, false) => class::NON_TUMOR,
        })
        .collect();

    let is = |c: u8| labels.iter().map(|l| *l == c).collect::<Vec<bool>>();
    let (tumor_region, stroma_region) = (is(class::TUMOR), is(class::NON_TUMOR));
    let mut tumor_nuclei = vec![0.0; h * w];
    stamp_nuclei(&mut rng, &mut tumor_nuclei, &tumor_region, h, w, 1.0 / 14.0, (1.3, 2.3));
    let mut stroma_nuclei = vec![0.0; h * w];
    stamp_nuclei(
        &mut rng,
        &mut stroma_nuclei,
        &stroma_region,
        h,
        w,
        1.0 / 90.0,
        (0.7, 1.2),
    );

    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(5.0..8.0);
    let (ct, st) = (theta.cos(), theta.sin());
    let warp = value_noise(&mut rng, h, w, 20.0);

    let plane = h * w;
    let mut img = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let stain = 1.0 + 0.08 * (stain_field[p] - 0.5);
            let rgb: [f64; 3] = match labels[p] {
                class::BACKGROUND => {
                    let n = rng.random_range(-0.008..0.008);
                    [0.965 + n, 0.963 + n, 0.958 + n]
                }
                class::TUMOR => {
                    let base = [0.78, 0.55, 0.76];
                    let nuc = [0.33, 0.17, 0.50];
                    let a = tumor_nuclei[p];
                    mix3(base, nuc, a).map(|v| v * stain)
                }
                _ => {
                    let phase = 2.0 * std::f64::consts::PI * ((x as f64 * ct + y as f64 * st) / period) + 4.0 * warp[p];
                    let fiber = 0.06 * phase.sin();
                    let base = [0.92 + fiber, 0.66 + fiber, 0.78 + 0.5 * fiber];
                    let nuc = [0.42, 0.26, 0.58];
                    mix3(base, nuc, stroma_nuclei[p]).map(|v| v * stain)
                }
            };
            for c in 0..3 {
                img[c * plane + p] = rgb[c].clamp(0.0, 1.0);
            }
        }
    }
    Ok(VirtualSlide {
        slide_id,
        seed,
        base_image: Tensor::new([3, h, w], img)?,
        mask: Mask::new(h, w, labels)?,
    })
}

fn mix3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] * (1.0 - t) + b[0] * t,
        a[1] * (1.0 - t) + b[1] * t,
        a[2] * (1.0 - t) + b[2] * t,
    ]
}
