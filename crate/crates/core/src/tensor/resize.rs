//! Separable bicubic resampling (Catmull-Rom, a = -0.5) with replicate
//! edges and pixel-center alignment: destination pixel `d` samples source
//! coordinate `(d + 0.5) / scale - 0.5` where `scale = out / in`.

use crate::{Error, Result, Tensor};

/// Catmull-Rom cubic kernel (a = -0.5), support (-2, 2), interpolating:
/// `k(0) = 1`, `k(n) = 0` for nonzero integers `n`.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        (((t - 5.0) * t + 8.0) * t - 4.0) * A
    } else {
        0.0
    }
}

/// Four taps and weights for output index `d` in a lane of length `n`
/// resized by `scale`. Taps are clamped to the lane (replicate edges).
fn taps(d: usize, n: usize, scale: f64) -> ([usize; 4], [f64; 4]) {
    let src = (d as f64 + 0.5) / scale - 0.5;
    let base = src.floor();
    let frac = src - base;
    let mut idx = [0usize; 4];
    let mut w = [0.0f64; 4];
    for j in 0..4 {
        let tap = base as isize + j as isize - 1;
        idx[j] = tap.clamp(0, n as isize - 1) as usize;
        w[j] = cubic(frac - (j as f64 - 1.0));
    }
    // Weights of an interpolating cubic already sum to 1 up to rounding;
    // normalize to keep constants exactly constant.
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    (idx, w)
}

/// Resizes the trailing two axes of a `[c,h,w]` tensor to `out_h x out_w`.
pub fn bicubic_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::shape(format!(
            "bicubic_resize: want [C,H,W], got {:?}",
            t.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bicubic_resize: empty output"));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);

    // Horizontal pass: [c,h,w] -> [c,h,out_w].
    let sx = out_w as f64 / w as f64;
    let xtaps: Vec<_> = (0..out_w).map(|d| taps(d, w, sx)).collect();
    let mut mid = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &t.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            let out_row = &mut mid[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (d, (idx, wts)) in xtaps.iter().enumerate() {
                out_row[d] = idx
                    .iter()
                    .zip(wts)
                    .map(|(&i, &wt)| row[i] * wt)
                    .sum();
            }
        }
    }

    // Vertical pass: [c,h,out_w] -> [c,out_h,out_w].
    let sy = out_h as f64 / h as f64;
    let ytaps: Vec<_> = (0..out_h).map(|d| taps(d, h, sy)).collect();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (d, (idx, wts)) in ytaps.iter().enumerate() {
            for x in 0..out_w {
                out[(ch * out_h + d) * out_w + x] = idx
                    .iter()
                    .zip(wts)
                    .map(|(&i, &wt)| mid[(ch * h + i) * out_w + x] * wt)
                    .sum();
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
