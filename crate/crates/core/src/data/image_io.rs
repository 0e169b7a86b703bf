use std::fs;
use std::path::Path;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes a `3×H×W` image in `[0, 1]` as binary 8-bit PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::dim(format!("expected 3×H×W image, got {s:?}"))),
    };
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes class ids as binary PGM with maxval 255.
pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM into a mask of raw byte values.
pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("{}: truncated PGM header", path.display())));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("{}: not a binary PGM", path.display())));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("{}: bad header field {s:?}", path.display())))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "{}: unsupported maxval {maxval}",
            path.display()
        )));
    }
    pos += 1;
    let body = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Format(format!("{}: expected {} pixel bytes", path.display(), w * h)))?;
    Mask::new(h, w, body.to_vec())
}
