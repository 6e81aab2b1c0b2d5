//! Image fidelity metrics on single-channel images with values in [0,1].

use crate::error::{invalid, Error, Result};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            op: "metric",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`] when MSE < 1e-10.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    check_len(a, b)?;
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse < MSE_FLOOR { PSNR_CAP_DB } else { 10.0 * (1.0 / mse).log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic
/// range 1, averaged over all positions where the window fits.
pub fn ssim(a: &[f32], b: &[f32], height: usize, width: usize) -> Result<f64> {
    check_len(a, b)?;
    if a.len() != height * width {
        return Err(invalid(format!("{} pixels for a {height}x{width} image", a.len())));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let w = gaussian_window();
    let (c1, c2) = ((K1 * 1.0).powi(2), (K2 * 1.0).powi(2));
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, wy) in w.iter().enumerate() {
                let row = (y + dy) * width + x;
                for (dx, wx) in w.iter().enumerate() {
                    let k = wy * wx;
                    let (pa, pb) = (a[row + dx] as f64, b[row + dx] as f64);
                    ma += k * pa;
                    mb += k * pb;
                    saa += k * pa * pa;
                    sbb += k * pb * pb;
                    sab += k * pa * pb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Mean PSNR and SSIM over images stored back to back.
pub fn batch_fidelity(a: &[f32], b: &[f32], height: usize, width: usize) -> Result<(f64, f64)> {
    check_len(a, b)?;
    let n = height * width;
    if !a.len().is_multiple_of(n) {
        return Err(invalid("batch length is not a whole number of images"));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (x, y) in a.chunks_exact(n).zip(b.chunks_exact(n)) {
        p += psnr(x, y)?;
        s += ssim(x, y, height, width)?;
    }
    let count = (a.len() / n) as f64;
    Ok((p / count, s / count))
}
