//! Grayscale image helpers: resizing, normalization, PGM/PNG I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STD_FLOOR: f64 = 1e-6;

/// Bilinear resampling of a row-major `h×w` plane (half-pixel centers,
/// edge-clamped). Output values stay within the input's `[min, max]`.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    if out_h == 0 || out_w == 0 {
        return Vec::new();
    }
    assert!(h > 0 && w > 0, "cannot resample an empty plane");
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let axis = |len_in: usize, len_out: usize| -> Vec<(usize, usize, f64)> {
        (0..len_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5).clamp(0.0, (len_in - 1) as f64);
                let lo = s.floor() as usize;
                (lo, (lo + 1).min(len_in - 1), s - lo as f64)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    // `a + (b - a) t` reproduces constant regions exactly.
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bot, fy));
        }
    }
    out
}

/// `(x - mean) / max(std, 1e-6)` with the population standard deviation.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    // Shifting by the first value keeps a constant plane exactly constant.
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Decodes a PGM or PNG file to luma intensities in `[0, 1]`.
/// Returns `(height, width, values)`.
pub fn read_grayscale(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Decode { path: path.to_path_buf(), message: other.to_string() },
    })?;
    let luma = img.into_luma16();
    let (w, h) = luma.dimensions();
    let values = luma.into_raw().into_iter().map(|v| v as f64 / u16::MAX as f64).collect();
    Ok((h as usize, w as usize, values))
}

/// Quantizes a 2-D plane to 8 bits, min-max normalized. A constant plane
/// maps to all zeros.
pub fn to_u8_minmax(plane: &Tensor) -> Vec<u8> {
    let (lo, hi) = (plane.min(), plane.max());
    let span = hi - lo;
    plane
        .data()
        .iter()
        .map(|&v| if span > 0.0 { (((v - lo) / span) * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Encodes a binary (P5) 8-bit PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes a 2-D tensor (or `1×H×W`) as a min-max normalized P5 PGM.
pub fn write_pgm(path: &Path, plane: &Tensor) -> Result<()> {
    let s = plane.shape();
    let (h, w) = match s {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        _ => return Err(Error::dim(format!("cannot export shape {s:?} as PGM"))),
    };
    let bytes = encode_pgm(w, h, &to_u8_minmax(plane));
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
