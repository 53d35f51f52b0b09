//! Rendering reconstructions to 8-bit grayscale PNGs.
//!
//! The mapping is a plain linear window [lo, hi] -> [0, 255] with clipping
//! and round-half-up, so (lo + hi)/2 lands exactly on 128. Speed-of-sound
//! images use a fixed physical window; signed reflectivity images (SAFT,
//! L-MBIR) use a symmetric window at +-3 robust standard deviations so a
//! few hot pixels cannot wash out the display.

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid window: lo {0} must be below hi {1}")]
    Window(f64, f64),
    #[error("shape mismatch: {0} values for {1}x{2}")]
    Shape(usize, usize, usize),
    #[error("image encode error: {0}")]
    Encode(#[from] image::ImageError),
}

/// Default display window for speed-of-sound images, m/s.
pub const SPEED_WINDOW: (f64, f64) = (3000.0, 6000.0);

/// Linear window map with clipping and round-half-up.
pub fn to_gray(values: &[f64], lo: f64, hi: f64) -> Result<Vec<u8>, RenderError> {
    if !(lo < hi) {
        return Err(RenderError::Window(lo, hi));
    }
    Ok(values
        .iter()
        .map(|&v| {
            let u = (v - lo) / (hi - lo) * 255.0;
            (u + 0.5).floor().clamp(0.0, 255.0) as u8
        })
        .collect())
}

/// Symmetric window at +-3 robust standard deviations (1.4826 * median
/// absolute deviation). Falls back to the peak magnitude, then to [-1, 1],
/// when the spread degenerates.
pub fn robust_window(values: &[f64]) -> (f64, f64) {
    let med = median(values);
    let devs: Vec<f64> = values.iter().map(|&v| (v - med).abs()).collect();
    let mut s = 3.0 * 1.4826 * median(&devs);
    if !(s > 0.0) {
        s = values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    }
    if !(s > 0.0) {
        s = 1.0;
    }
    (-s, s)
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Render to an 8-bit grayscale PNG.
pub fn render_png(
    path: impl AsRef<Path>,
    values: &[f64],
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> Result<(), RenderError> {
    if values.len() != rows * cols {
        return Err(RenderError::Shape(values.len(), rows, cols));
    }
    let gray = to_gray(values, lo, hi)?;
    let img = image::GrayImage::from_raw(cols as u32, rows as u32, gray)
        .expect("buffer sized rows*cols");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Horizontal strip of equally sized panels separated by white gutters;
/// each panel brings its own window.
pub fn render_strip_png(
    path: impl AsRef<Path>,
    panels: &[(&[f64], f64, f64)],
    rows: usize,
    cols: usize,
) -> Result<(), RenderError> {
    const GUTTER: usize = 2;
    let n = panels.len();
    let width = n * cols + n.saturating_sub(1) * GUTTER;
    let mut out = vec![255u8; rows * width];
    for (p, &(values, lo, hi)) in panels.iter().enumerate() {
        if values.len() != rows * cols {
            return Err(RenderError::Shape(values.len(), rows, cols));
        }
        let gray = to_gray(values, lo, hi)?;
        let x0 = p * (cols + GUTTER);
        for r in 0..rows {
            out[r * width + x0..r * width + x0 + cols]
                .copy_from_slice(&gray[r * cols..(r + 1) * cols]);
        }
    }
    let img = image::GrayImage::from_raw(width as u32, rows as u32, out)
        .expect("buffer sized rows*width");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
