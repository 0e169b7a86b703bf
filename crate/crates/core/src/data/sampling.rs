use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Mask, VirtualSlide};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub patch_size: usize,
    pub per_slide: usize,
    pub bg_frac: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            per_slide: 50,
            bg_frac: 0.10,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.per_slide == 0 {
            return Err(Error::Config(
                "patch size and patches per slide must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bg_frac) {
            return Err(Error::Config(format!("bg_frac {} outside [0, 1]", self.bg_frac)));
        }
        Ok(())
    }
}

/// A patch origin on a slide with the patch's majority class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchLocation {
    pub slide_id: usize,
    pub x: usize,
    pub y: usize,
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `3×P×P`.
    pub image: Tensor,
    pub mask: Mask,
    pub slide_id: usize,
    pub domain_id: usize,
    pub origin: (usize, usize),
}

/// Every valid patch origin of a slide, grouped by majority class.
///
/// The majority class is the argmax of the per-class pixel counts inside the
/// patch; ties go to the lower class id.
#[derive(Clone, Debug)]
pub struct SlideIndex {
    pub slide_id: usize,
    pub patch_size: usize,
    candidates: [Vec<(u32, u32)>; 3],
}

impl SlideIndex {
    pub fn new(slide_id: usize, mask: &Mask, patch_size: usize) -> Result<Self> {
        let (h, w) = (mask.height, mask.width);
        if patch_size == 0 || patch_size > h || patch_size > w {
            return Err(Error::dim(format!("patch {patch_size} does not fit slide {h}×{w}")));
        }
        // Integral images per class, (h+1)×(w+1).
        let stride = w + 1;
        let mut integral = vec![vec![0u32; (h + 1) * stride]; 3];
        for (c, table) in integral.iter_mut().enumerate() {
            for y in 0..h {
                let mut row = 0u32;
                for x in 0..w {
                    row += (mask.get(y, x) as usize == c) as u32;
                    table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
                }
            }
        }
        let p = patch_size;
        let mut candidates: [Vec<(u32, u32)>; 3] = Default::default();
        for y in 0..=h - p {
            for x in 0..=w - p {
                let count = |t: &[u32]| {
                    t[(y + p) * stride + x + p] + t[y * stride + x] - t[y * stride + x + p] - t[(y + p) * stride + x]
                };
                let counts = [count(&integral[0]), count(&integral[1]), count(&integral[2])];
                let mut best = 0;
                for c in 1..3 {
                    if counts[c] > counts[best] {
                        best = c;
                    }
                }
                candidates[best].push((x as u32, y as u32));
            }
        }
        Ok(Self {
            slide_id,
            patch_size,
            candidates,
        })
    }

    pub fn candidate_count(&self, class: u8) -> usize {
        self.candidates[class as usize].len()
    }

    pub fn present(&self) -> [bool; 3] {
        [0, 1, 2].map(|c| !self.candidates[c].is_empty())
    }
}

/// Per-class patch counts `[background, tumor, non_tumor]` for one slide.
///
/// Background gets `round(bg_frac·n)`; the rest is split evenly between
/// tumor and non-tumor with tumor taking the odd patch. A class without
/// candidates hands its quota to the tissue classes that are present, or to
/// background when no tissue class is.
pub fn patch_quotas(n: usize, bg_frac: f64, present: [bool; 3]) -> Result<[usize; 3]> {
    let [bg_ok, tu_ok, nt_ok] = present;
    if !(bg_ok || tu_ok || nt_ok) {
        return Err(Error::Data("slide has no patch candidates".into()));
    }
    let mut bg = if bg_ok {
        (bg_frac * n as f64).round() as usize
    } else {
        0
    };
    bg = bg.min(n);
    let rest = n - bg;
    let q = match (tu_ok, nt_ok) {
        (true, true) => [bg, rest.div_ceil(2), rest / 2],
        (true, false) => [bg, rest, 0],
        (false, true) => [bg, 0, rest],
        (false, false) => [n, 0, 0],
    };
    Ok(q)
}

/// Patch origins for every slide, deterministic in `epoch_seed`.
///
/// Within a slide, origins are drawn uniformly (with replacement) from each
/// class's candidate list; the output lists slides in input order and,
/// within a slide, background then tumor then non-tumor.
pub fn sample_locations(indices: &[SlideIndex], cfg: &SamplingConfig, epoch_seed: u64) -> Result<Vec<PatchLocation>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(indices.len() * cfg.per_slide);
    for idx in indices {
        if idx.patch_size != cfg.patch_size {
            return Err(Error::Contract(format!(
                "index built for patch {} but sampling patch {}",
                idx.patch_size, cfg.patch_size
            )));
        }
        let quotas = patch_quotas(cfg.per_slide, cfg.bg_frac, idx.present())?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, "patch-origins", idx.slide_id as u64));
        for (c, &q) in quotas.iter().enumerate() {
            let cands = &idx.candidates[c];
            for _ in 0..q {
                let (x, y) = cands[rng.random_range(0..cands.len())];
                out.push(PatchLocation {
                    slide_id: idx.slide_id,
                    x: x as usize,
                    y: y as usize,
                    class: c as u8,
                });
            }
        }
    }
    Ok(out)
}

/// Crops a `3×P×P` patch and its mask at `(x, y)`.
pub fn extract_patch(image: &Tensor, mask: &Mask, x: usize, y: usize, p: usize) -> Result<(Tensor, Mask)> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::dim(format!("expected C×H×W image, got {s:?}"))),
    };
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::dim(format!(
            "mask {}×{} does not match image {h}×{w}",
            mask.height, mask.width
        )));
    }
    if x + p > w || y + p > h {
        return Err(Error::dim(format!("patch at ({x}, {y}) size {p} exceeds {h}×{w}")));
    }
    let d = image.data();
    let mut out = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        for row in y..y + p {
            let start = ch * h * w + row * w + x;
            out.extend_from_slice(&d[start..start + p]);
        }
    }
    Ok((Tensor::new([c, p, p], out)?, mask.crop(x, y, p, p)))
}

/// Samples patches from `slides` rendered in one domain.
///
/// `rendered[i]` is the rendering of `slides[i]` and `indices[i]` its index.
pub fn sample_patches(
    slides: &[&VirtualSlide],
    rendered: &[&Tensor],
    indices: &[SlideIndex],
    domain_id: usize,
    cfg: &SamplingConfig,
    epoch_seed: u64,
) -> Result<Vec<PatchSample>> {
    if slides.len() != rendered.len() || slides.len() != indices.len() {
        return Err(Error::Contract(
            "slides, renderings and indices differ in length".into(),
        ));
    }
    let locations = sample_locations(indices, cfg, epoch_seed)?;
    let mut out = Vec::with_capacity(locations.len());
    for loc in locations {
        let i = slides
            .iter()
            .position(|s| s.slide_id == loc.slide_id)
            .ok_or_else(|| Error::Data(format!("slide {} missing", loc.slide_id)))?;
        let (image, mask) = extract_patch(rendered[i], &slides[i].mask, loc.x, loc.y, cfg.patch_size)?;
        out.push(PatchSample {
            image,
            mask,
            slide_id: loc.slide_id,
            domain_id,
            origin: (loc.x, loc.y),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_slide;

    #[test]
    fn fifty_patches_split_five_twentythree_twentytwo() {
        assert_eq!(patch_quotas(50, 0.10, [true; 3]).unwrap(), [5, 23, 22]);
        assert_eq!(patch_quotas(16, 0.10, [true; 3]).unwrap(), [2, 7, 7]);
        assert_eq!(patch_quotas(50, 0.10, [true, false, true]).unwrap(), [5, 0, 45]);
        assert_eq!(patch_quotas(50, 0.10, [false, true, true]).unwrap(), [0, 25, 25]);
        assert_eq!(patch_quotas(50, 0.10, [true, false, false]).unwrap(), [50, 0, 0]);
        assert!(patch_quotas(50, 0.10, [false; 3]).is_err());
    }

    fn brute_majority(mask: &Mask, x: usize, y: usize, p: usize) -> u8 {
        let h = mask.crop(x, y, p, p).histogram(3);
        let mut best = 0;
        for c in 1..3 {
            if h[c] > h[best] {
                best = c;
            }
        }
        best as u8
    }

    #[test]
    fn index_majority_matches_brute_force() {
        let s = generate_slide(3, 11, 48).unwrap();
        let idx = SlideIndex::new(3, &s.mask, 16).unwrap();
        let total: usize = (0..3).map(|c| idx.candidate_count(c)).sum();
        assert_eq!(total, 33 * 33);
        for c in 0..3u8 {
            for &(x, y) in &idx.candidates[c as usize] {
                assert_eq!(brute_majority(&s.mask, x as usize, y as usize, 16), c);
            }
        }
    }

    fn indices(n: usize, size: usize, p: usize) -> Vec<SlideIndex> {
        (0..n)
            .map(|i| {
                let s = generate_slide(i, 500 + i as u64, size).unwrap();
                SlideIndex::new(i, &s.mask, p).unwrap()
            })
            .collect()
    }

    #[test]
    fn same_epoch_seed_same_locations() {
        let idx = indices(3, 64, 16);
        let cfg = SamplingConfig {
            patch_size: 16,
            ..Default::default()
        };
        assert_eq!(
            sample_locations(&idx, &cfg, 9).unwrap(),
            sample_locations(&idx, &cfg, 9).unwrap()
        );
    }

    #[test]
    fn different_epochs_draw_different_origins() {
        let idx = indices(2, 64, 16);
        let cfg = SamplingConfig {
            patch_size: 16,
            ..Default::default()
        };
        let epochs: Vec<Vec<PatchLocation>> = (0..10).map(|e| sample_locations(&idx, &cfg, e).unwrap()).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(epochs[i], epochs[j], "epochs {i} and {j} collide");
            }
        }
    }

    #[test]
    fn class_balance_over_twenty_slides() {
        let idx = indices(20, 64, 16);
        let cfg = SamplingConfig {
            patch_size: 16,
            ..Default::default()
        };
        let locs = sample_locations(&idx, &cfg, 1).unwrap();
        for i in 0..20 {
            let count = |c: u8| locs.iter().filter(|l| l.slide_id == i && l.class == c).count();
            assert_eq!(count(0) + count(1) + count(2), 50);
            assert!(count(1).abs_diff(count(2)) <= 1);
            assert_eq!(count(0), 5);
        }
    }

    #[test]
    fn sampled_patches_have_their_class_and_origin_in_bounds() {
        let slides: Vec<VirtualSlide> = (0..2).map(|i| generate_slide(i, 40 + i as u64, 64).unwrap()).collect();
        let idx: Vec<SlideIndex> = slides
            .iter()
            .map(|s| SlideIndex::new(s.slide_id, &s.mask, 16).unwrap())
            .collect();
        let refs: Vec<&VirtualSlide> = slides.iter().collect();
        let imgs: Vec<&Tensor> = slides.iter().map(|s| &s.base_image).collect();
        let cfg = SamplingConfig {
            patch_size: 16,
            per_slide: 10,
            bg_frac: 0.1,
        };
        let patches = sample_patches(&refs, &imgs, &idx, 0, &cfg, 5).unwrap();
        assert_eq!(patches.len(), 20);
        for p in &patches {
            assert!(p.origin.0 + 16 <= 64 && p.origin.1 + 16 <= 64);
            assert_eq!(p.image.shape(), &[3, 16, 16]);
            let s = &slides[p.slide_id];
            assert_eq!(p.mask, s.mask.crop(p.origin.0, p.origin.1, 16, 16));
        }
    }

    #[test]
    fn extract_patch_copies_pixels() {
        let img = Tensor::from_fn([3, 4, 4], |i| i as f64);
        let mask = Mask::filled(4, 4, 1);
        let (p, m) = extract_patch(&img, &mask, 1, 2, 2).unwrap();
        assert_eq!(
            p.data(),
            &[9.0, 10.0, 13.0, 14.0, 25.0, 26.0, 29.0, 30.0, 41.0, 42.0, 45.0, 46.0]
        );
        assert_eq!(m.labels, vec![1; 4]);
        assert!(extract_patch(&img, &mask, 3, 0, 2).is_err());
    }
}
