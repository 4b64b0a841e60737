//! Reconstruction quality metrics.
//!
//! Both metrics operate on `[c,h,w]` tensors holding values in `[0, peak]`;
//! callers compare luminance planes for reporting.

use crate::{Error, Result, Tensor};

/// Decibel cap returned when the mean squared error is zero (or so small
/// the raw value would exceed it).
pub const PSNR_CAP: f64 = 100.0;

/// `10 * log10(peak^2 / mse)` over all elements, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "psnr: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if peak <= 0.0 {
        return Err(Error::contract("psnr: peak must be positive"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity with a 7x7 Gaussian window (sigma 1.5),
/// `C1 = (0.01 peak)^2`, `C2 = (0.03 peak)^2`. Only window positions fully
/// inside the image contribute (no padding), so extents must be >= 7.
/// Multi-channel inputs average the per-channel scores.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "ssim: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rank() != 3 {
        return Err(Error::shape(format!(
            "ssim: want [C,H,W], got {:?}",
            a.shape()
        )));
    }
    if peak <= 0.0 {
        return Err(Error::contract("ssim: peak must be positive"));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_window();
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);

    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let g = win[dy * SSIM_WINDOW + dx];
                        let xv = pa[(y0 + dy) * w + x0 + dx];
                        let yv = pb[(y0 + dy) * w + x0 + dx];
                        mx += g * xv;
                        my += g * yv;
                        mxx += g * xv * xv;
                        myy += g * yv * yv;
                        mxy += g * xv * yv;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += s;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / c as f64)
}
