//! Forward/backward kernels on raw row-major buffers.

use crate::tensor::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample (`cin×h×w`) into a `(cin·k·k) × (ho·wo)` matrix.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let hw_out = g.out_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one sample's input gradient.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let hw_out = g.out_len();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (pl, ol) = (g.patch_len(), g.out_len());
    let mut out = vec![0.0; g.batch * g.cout * ol];
    let mut cols = vec![0.0; pl * ol];
    let in_len = g.cin * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        let dst = &mut out[b * g.cout * ol..(b + 1) * g.cout * ol];
        gemm(g.cout, pl, ol, 1.0, kernel, false, &cols, false, 0.0, dst);
    }
    out
}

/// Returns `(dx, dkernel)`; `dx` is skipped when the input needs no gradient.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (pl, ol) = (g.patch_len(), g.out_len());
    let in_len = g.cin * g.h * g.w;
    let mut dx = need_dx.then(|| vec![0.0; g.batch * in_len]);
    let mut dk = need_dk.then(|| vec![0.0; g.cout * pl]);
    let mut cols = vec![0.0; pl * ol];
    for b in 0..g.batch {
        let go = &dout[b * g.cout * ol..(b + 1) * g.cout * ol];
        if let Some(dk) = dk.as_mut() {
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
            // dK += dOut · colsᵀ
            gemm(g.cout, ol, pl, 1.0, go, false, &cols, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Kᵀ · dOut
            gemm(pl, g.cout, ol, 1.0, kernel, true, go, false, 0.0, &mut cols);
            col2im(g, &cols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x and c.
        let g = ConvGeom {
            batch: 1,
            cin: 2,
            h: 5,
            w: 4,
            cout: 1,
            k: 3,
            stride: 2,
            pad: 1,
            ho: 3,
            wo: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..18 * 6).map(|i| ((i * 5) % 13) as f64 * 0.1).collect();
        let mut cols = vec![0.0; 18 * 6];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; 40];
        col2im(&g, &c, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
