use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, VirtualSlide};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deterministic image transform standing in for one scanner.
///
/// Applied in the fixed order scale → blur → color → gamma → brightness →
/// noise, then clipped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScannerProfile {
    pub name: String,
    pub domain_id: usize,
    pub color_matrix: [[f64; 3]; 3],
    pub gamma: f64,
    pub brightness: f64,
    pub blur_sigma: f64,
    /// Resolution factor: the image is resampled to `scale·H` and back.
    pub scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl ScannerProfile {
    pub fn identity(name: impl Into<String>, domain_id: usize) -> Self {
        Self {
            name: name.into(),
            domain_id,
            color_matrix: IDENTITY,
            gamma: 1.0,
            brightness: 0.0,
            blur_sigma: 0.0,
            scale: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    /// Reference, two seen and two held-out scanners, in domain-id order.
    pub fn desk_defaults() -> Vec<ScannerProfile> {
        let p = |name: &str, id: usize, m: [[f64; 3]; 3], gamma, brightness, blur, scale, noise| ScannerProfile {
            name: name.into(),
            domain_id: id,
            color_matrix: m,
            gamma,
            brightness,
            blur_sigma: blur,
            scale,
            noise_sigma: noise,
            seed: 1000 + id as u64,
        };
        vec![
            ScannerProfile::identity("ref", 0),
            p(
                "seen-1",
                1,
                [[0.90, 0.08, 0.02], [0.04, 0.88, 0.06], [0.00, 0.10, 0.92]],
                1.25,
                -0.03,
                0.9,
                0.88,
                0.015,
            ),
            p(
                "seen-2",
                2,
                [[0.96, 0.00, 0.06], [0.06, 0.94, 0.00], [0.05, 0.03, 0.88]],
                0.80,
                0.03,
                0.5,
                0.92,
                0.020,
            ),
            p(
                "heldout-1",
                3,
                [[0.93, 0.05, 0.02], [0.02, 0.92, 0.05], [0.03, 0.06, 0.90]],
                1.15,
                -0.02,
                1.1,
                1.0,
                0.012,
            ),
            p(
                "heldout-2",
                4,
                [[0.95, 0.02, 0.05], [0.05, 0.90, 0.03], [0.02, 0.02, 0.93]],
                0.88,
                0.02,
                0.7,
                1.04,
                0.018,
            ),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.color_matrix.iter().flatten().all(|v| v.is_finite())
            && self.gamma.is_finite()
            && self.brightness.is_finite()
            && self.blur_sigma.is_finite()
            && self.scale.is_finite()
            && self.noise_sigma.is_finite();
        if !finite {
            return Err(Error::Config(format!("profile {} has non-finite fields", self.name)));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config(format!("profile {}: gamma must be positive", self.name)));
        }
        if self.blur_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "profile {}: blur and noise sigma must be non-negative",
                self.name
            )));
        }
        if !(0.25..=4.0).contains(&self.scale) {
            return Err(Error::Config(format!(
                "profile {}: scale {} out of range",
                self.name, self.scale
            )));
        }
        Ok(())
    }
}

/// Renders a slide as seen by one scanner. Output has the slide's size; the
/// mask is untouched.
pub fn render_domain(slide: &VirtualSlide, profile: &ScannerProfile) -> Result<Tensor> {
    profile.validate()?;
    let (h, w) = slide.size();
    let plane = h * w;
    let mut img = slide.base_image.data().to_vec();

    if profile.scale != 1.0 {
        let sh = ((h as f64 * profile.scale).round() as usize).max(1);
        let sw = ((w as f64 * profile.scale).round() as usize).max(1);
        let mut out = Vec::with_capacity(3 * plane);
        for c in 0..3 {
            let small = resize_bilinear(&img[c * plane..(c + 1) * plane], h, w, sh, sw);
            out.extend(resize_bilinear(&small, sh, sw, h, w));
        }
        img = out;
    }
    if profile.blur_sigma > 0.0 {
        let kernel = gaussian_kernel(profile.blur_sigma);
        for c in 0..3 {
            blur_plane(&mut img[c * plane..(c + 1) * plane], h, w, &kernel);
        }
    }
    if profile.color_matrix != IDENTITY {
        let m = profile.color_matrix;
        for p in 0..plane {
            let v = [img[p], img[plane + p], img[2 * plane + p]];
            for (c, row) in m.iter().enumerate() {
                img[c * plane + p] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
        }
    }
    if profile.gamma != 1.0 {
        for v in &mut img {
            *v = v.max(0.0).powf(profile.gamma);
        }
    }
    if profile.brightness != 0.0 {
        for v in &mut img {
            *v += profile.brightness;
        }
    }
    if profile.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, "scanner-noise", slide.seed));
        let normal = Normal::new(0.0, profile.noise_sigma).expect("validated sigma");
        for v in &mut img {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new([3, h, w], img)
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, oh);
    let xs = axis(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with edge clamping.
fn blur_plane(plane: &mut [f64], h: usize, w: usize, k: &[f64]) {
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * w + clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
}
