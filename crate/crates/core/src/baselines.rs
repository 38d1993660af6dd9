//! Conventional full-reference metrics used for comparison.

use crate::error::{Error, Result};
use crate::raster::Image;

/// Returned by [`psnr`] for identical images.
pub const PSNR_IDENTICAL: f64 = 1e9;

/// `(0.01 * L)^2` and `(0.03 * L)^2` for a unit dynamic range.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn same_size(x: &Image, y: &Image) -> Result<()> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::Dimension(format!(
            "images are {}x{} and {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`; higher is better.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    same_size(x, y)?;
    let n = x.data().len() as f64;
    let mse = x
        .data()
        .iter()
        .zip(y.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(-10.0 * mse.log10())
}

/// SSIM computed from whole-image statistics, averaged over RGB; higher is
/// better.
pub fn ssim_global(x: &Image, y: &Image) -> Result<f64> {
    same_size(x, y)?;
    let mut total = 0.0;
    for c in 0..3 {
        let a = x.data().index_axis(ndarray::Axis(0), c);
        let b = y.data().index_axis(ndarray::Axis(0), c);
        let n = a.len() as f64;
        let ma = a.sum() / n;
        let mb = b.sum() / n;
        let mut va = 0.0;
        let mut vb = 0.0;
        let mut cov = 0.0;
        for (p, q) in a.iter().zip(b.iter()) {
            va += (p - ma) * (p - ma);
            vb += (q - mb) * (q - mb);
            cov += (p - ma) * (q - mb);
        }
        let (va, vb, cov) = (va / n, vb / n, cov / n);
        let l = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        let s = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
        total += l * s;
    }
    Ok(total / 3.0)
}
