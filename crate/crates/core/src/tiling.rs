//! Moving-window inference with center-crop stitching.

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    /// Region of the image this window writes, in image coordinates.
    pub kept: Rect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub overlap: usize,
    /// Row-major: `y` outer, `x` inner.
    pub windows: Vec<Window>,
}

/// Origins and kept intervals along one axis.
///
/// Interior boundaries sit `overlap/2` pixels before the end of each regular
/// window, so interior windows keep exactly `patch − overlap` pixels. The
/// last origin is clamped to `size − patch` and its kept interval starts at
/// the previous boundary and runs to the border.
pub fn axis_plan(size: usize, patch: usize, overlap: usize) -> Result<Vec<(usize, usize, usize)>> {
    if patch == 0 || patch > size {
        return Err(Error::dim(format!("patch {patch} does not fit size {size}")));
    }
    if overlap >= patch {
        return Err(Error::Contract(format!(
            "overlap {overlap} must be below patch {patch}"
        )));
    }
    let stride = patch - overlap;
    let margin = overlap / 2;
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        if o + patch >= size {
            origins.push(size - patch);
            break;
        }
        origins.push(o);
        o += stride;
    }
    let n = origins.len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for (i, &o) in origins.iter().enumerate() {
        let end = if i + 1 == n { size } else { o + patch - margin };
        out.push((o, start, end));
        start = end;
    }
    Ok(out)
}

pub fn plan_windows(height: usize, width: usize, patch: usize, overlap: usize) -> Result<WindowGrid> {
    let ys = axis_plan(height, patch, overlap)?;
    let xs = axis_plan(width, patch, overlap)?;
    let mut windows = Vec::with_capacity(ys.len() * xs.len());
    for &(y, y0, y1) in &ys {
        for &(x, x0, x1) in &xs {
            windows.push(Window {
                x,
                y,
                kept: Rect { x0, y0, x1, y1 },
            });
        }
    }
    Ok(WindowGrid {
        height,
        width,
        patch,
        overlap,
        windows,
    })
}

/// Crops the `C×P×P` input of one window from a `C×H×W` image.
pub fn crop_window(image: &Tensor, grid: &WindowGrid, window: &Window) -> Result<Tensor> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::dim(format!("expected C×H×W image, got {s:?}"))),
    };
    if (h, w) != (grid.height, grid.width) {
        return Err(Error::dim(format!(
            "image {h}×{w} does not match grid {}×{}",
            grid.height, grid.width
        )));
    }
    let p = grid.patch;
    let d = image.data();
    let mut out = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        for row in window.y..window.y + p {
            let s = ch * h * w + row * w + window.x;
            out.extend_from_slice(&d[s..s + p]);
        }
    }
    Tensor::new([c, p, p], out)
}

/// Per-pixel argmax over classes of `C×H×W` (or `1×C×H×W`) logits; ties go to
/// the lower class.
pub fn argmax_mask(logits: &Tensor) -> Result<Mask> {
    let (c, h, w) = chw(logits)?;
    let d = logits.data();
    let plane = h * w;
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Mask::new(h, w, labels)
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim(format!("expected C×H×W logits, got {s:?}"))),
    }
}

/// Assembles a full-image mask from one logits block per window, writing the
/// argmax of each window's kept region.
pub fn stitch(grid: &WindowGrid, logits: &[Tensor]) -> Result<Mask> {
    if logits.len() != grid.windows.len() {
        return Err(Error::Contract(format!(
            "{} windows but {} logits blocks",
            grid.windows.len(),
            logits.len()
        )));
    }
    let (h, w, p) = (grid.height, grid.width, grid.patch);
    let mut labels = vec![0u8; h * w];
    let mut written = vec![false; h * w];
    for (win, block) in grid.windows.iter().zip(logits) {
        let (_, bh, bw) = chw(block)?;
        if (bh, bw) != (p, p) {
            return Err(Error::dim(format!("window logits {bh}×{bw}, expected {p}×{p}")));
        }
        let local = argmax_mask(block)?;
        let k = win.kept;
        for y in k.y0..k.y1 {
            for x in k.x0..k.x1 {
                let i = y * w + x;
                if written[i] {
                    return Err(Error::Contract(format!("pixel ({x}, {y}) written twice")));
                }
                written[i] = true;
                labels[i] = local.get(y - win.y, x - win.x);
            }
        }
    }
    if let Some(i) = written.iter().position(|b| !b) {
        return Err(Error::Contract(format!("pixel ({}, {}) never written", i % w, i / w)));
    }
    Mask::new(h, w, labels)
}

/// Runs `forward` on every window (input `1×C×P×P`, output logits) and
/// stitches the results.
pub fn predict_tiled<F>(image: &Tensor, grid: &WindowGrid, mut forward: F) -> Result<Mask>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let p = grid.patch;
    let mut blocks = Vec::with_capacity(grid.windows.len());
    for win in &grid.windows {
        let crop = crop_window(image, grid, win)?;
        let c = crop.shape()[0];
        blocks.push(forward(&crop.reshape([1, c, p, p])?)?);
    }
    stitch(grid, &blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origins(size: usize, p: usize, v: usize) -> Vec<usize> {
        axis_plan(size, p, v).unwrap().iter().map(|t| t.0).collect()
    }

    #[test]
    fn documented_grids() {
        assert_eq!(origins(512, 256, 128), vec![0, 128, 256]);
        assert_eq!(plan_windows(512, 512, 256, 128).unwrap().windows.len(), 9);
        assert_eq!(origins(300, 256, 128), vec![0, 44]);
        assert_eq!(plan_windows(300, 300, 256, 128).unwrap().windows.len(), 4);
        let one = plan_windows(256, 256, 256, 128).unwrap();
        assert_eq!(one.windows.len(), 1);
        assert_eq!(
            one.windows[0].kept,
            Rect {
                x0: 0,
                y0: 0,
                x1: 256,
                y1: 256
            }
        );
    }

    #[test]
    fn interior_kept_region_is_central_square() {
        let g = plan_windows(768, 768, 256, 128).unwrap();
        let centre = g.windows.iter().find(|w| w.x == 256 && w.y == 256).unwrap();
        assert_eq!(
            centre.kept,
            Rect {
                x0: 320,
                y0: 320,
                x1: 448,
                y1: 448
            }
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(plan_windows(200, 300, 256, 128), Err(Error::Dimension(_))));
        assert!(matches!(plan_windows(300, 300, 64, 64), Err(Error::Contract(_))));
        let g = plan_windows(128, 128, 64, 32).unwrap();
        assert!(matches!(stitch(&g, &[]), Err(Error::Contract(_))));
    }

    /// Exhaustive per-axis check; the 2-D kept regions are products of the
    /// axis intervals.
    #[test]
    fn axis_plans_tile_exactly() {
        for size in 256..=1024 {
            for p in 64..=256 {
                for v in [0, p / 4, p / 2, p - 1] {
                    let plan = axis_plan(size, p, v).unwrap();
                    let stride = p - v;
                    assert_eq!(plan.len(), (size - p).div_ceil(stride) + 1, "size {size} p {p} v {v}");
                    let mut cursor = 0;
                    for &(o, s, e) in &plan {
                        assert_eq!(s, cursor);
                        assert!(e > s);
                        assert!(o <= s && e <= o + p && o + p <= size);
                        cursor = e;
                    }
                    assert_eq!(cursor, size);
                }
            }
        }
    }

    #[test]
    fn constant_logits_stitch_to_direct_argmax() {
        let g = plan_windows(300, 300, 256, 128).unwrap();
        let block = Tensor::from_fn([3, 256, 256], |i| if i / (256 * 256) == 2 { 1.0 } else { 0.0 });
        let m = stitch(&g, &vec![block; g.windows.len()]).unwrap();
        assert!(m.labels.iter().all(|l| *l == 2));
    }

    #[test]
    fn position_dependent_model_stitches_exactly() {
        // Logits depend only on absolute position, so every window agrees
        // with a single full-image pass.
        let (h, w) = (300, 260);
        let f = |c: usize, y: usize, x: usize| ((c * 31 + y * 7 + x * 13) % 17) as f64;
        let full = Tensor::from_fn([3, h, w], |i| f(i / (h * w), (i / w) % h, i % w));
        let g = plan_windows(h, w, 128, 64).unwrap();
        let blocks: Vec<Tensor> = g
            .windows
            .iter()
            .map(|win| {
                Tensor::from_fn([3, 128, 128], |i| {
                    f(i / (128 * 128), win.y + (i / 128) % 128, win.x + i % 128)
                })
            })
            .collect();
        assert_eq!(stitch(&g, &blocks).unwrap(), argmax_mask(&full).unwrap());
        let tiled = predict_tiled(&full, &g, |crop| Ok(crop.clone())).unwrap();
        assert_eq!(tiled, argmax_mask(&full).unwrap());
    }

    #[test]
    fn one_window_stitch_is_argmax() {
        let g = plan_windows(64, 64, 64, 32).unwrap();
        let block = Tensor::from_fn([3, 64, 64], |i| ((i * 2654435761) % 1000) as f64);
        assert_eq!(stitch(&g, &[block.clone()]).unwrap(), argmax_mask(&block).unwrap());
    }
}
