//! Dense row-major `f64` tensors and the neural primitives built on them.
//!
//! Everything in the crate — images, feature maps, flow fields, model
//! parameters — lives in [`Tensor`]. All operations are pure functions of
//! their inputs and safe to share read-only across threads.

mod gstn;
mod image;
mod metrics;
mod resize;

pub use gstn::{read_tensor, read_tensor_bytes, write_tensor, write_tensor_bytes};
pub use image::{luminance, read_ppm, read_ppm_bytes, write_ppm, write_ppm_bytes, ImageU8};
pub use metrics::{psnr, ssim};
pub use resize::bicubic_resize;

use crate::{Error, Result};

/// Dense N-dimensional `f64` array in row-major order.
///
/// Invariants: `product(shape) == data.len()` and every extent is at least 1.
/// Rank 0 is a scalar holding one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Flat row-major offset of a multi-index.
pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), idx.len());
    let mut flat = 0;
    for (d, (&i, &e)) in idx.iter().zip(shape).enumerate() {
        debug_assert!(i < e, "index {i} out of range {e} at axis {d}");
        flat = flat * e + i;
    }
    flat
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index.
    pub fn from_shape_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are >= 1, so a tensor always holds data
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let flat = flat_index(&self.shape, idx);
        self.data[flat] = value;
    }

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a tensor with {} elements", self.len());
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?} ({n} elems)",
                self.shape,
                self.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `y = x W^T (+ b)` over the last axis.
///
/// `x: [..., d_in]`, `weight: [d_out, d_in]`, `bias: [d_out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.rank() != 2 {
        return Err(Error::shape(format!(
            "linear: weight must be rank 2, got {:?}",
            weight.shape()
        )));
    }
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    if x.rank() == 0 || *x.shape().last().unwrap() != d_in {
        return Err(Error::shape(format!(
            "linear: input {:?} does not end in d_in={d_in}",
            x.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape(format!(
                "linear: bias {:?} vs d_out={d_out}",
                b.shape()
            )));
        }
    }
    let rows = x.len() / d_in;
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = d_out;
    let mut out = vec![0.0; rows * d_out];
    let w = weight.data();
    for r in 0..rows {
        let xr = &x.data()[r * d_in..(r + 1) * d_in];
        let yr = &mut out[r * d_out..(r + 1) * d_out];
        for (o, y) in yr.iter_mut().enumerate() {
            let wr = &w[o * d_in..(o + 1) * d_in];
            let mut acc = 0.0;
            for (xv, wv) in xr.iter().zip(wr) {
                acc += xv * wv;
            }
            *y = acc + bias.map_or(0.0, |b| b.data()[o]);
        }
    }
    Tensor::new(out_shape, out)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "softmax: axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let mut out = x.clone();
    for_each_lane(x.shape(), axis, |lane| {
        let max = lane
            .iter()
            .map(|&i| x.data[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &i in lane {
            let e = (x.data[i] - max).exp();
            out.data[i] = e;
            sum += e;
        }
        for &i in lane {
            out.data[i] /= sum;
        }
    });
    Ok(out)
}

/// Visits every 1-D lane along `axis`, passing the flat indices of the lane.
pub(crate) fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let strides = strides(shape);
    let axis_len = shape[axis];
    let axis_stride = strides[axis];
    let total: usize = shape.iter().product();
    let lanes = total / axis_len;
    let mut lane = vec![0usize; axis_len];
    for l in 0..lanes {
        // Decompose the lane id into the non-axis coordinates.
        let mut rem = l;
        let mut base = 0;
        for d in (0..shape.len()).rev() {
            if d == axis {
                continue;
            }
            let c = rem % shape[d];
            rem /= shape[d];
            base += c * strides[d];
        }
        for (j, slot) in lane.iter_mut().enumerate() {
            *slot = base + j * axis_stride;
        }
        f(&lane);
    }
}

/// Last-axis layer normalization: standardize with population variance,
/// then apply the affine pair `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::shape("layer_norm: scalar input"));
    }
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm: gamma {:?} / beta {:?} vs feature dim {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::contract("layer_norm: eps must be positive"));
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o = gamma.data()[j] * ((xr[j] - mean) * inv) + beta.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Rearranges `[c*s*s, h, w]` into `[c, s*h, s*w]`:
/// `out(c, s*h+dy, s*w+dx) = in(c*s^2 + dy*s + dx, h, w)`.
pub fn pixel_shuffle(t: &Tensor, s: usize) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::shape(format!(
            "pixel_shuffle: want [C,H,W], got {:?}",
            t.shape()
        )));
    }
    let (cin, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if s == 0 || cin % (s * s) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {cin} channels not divisible by s^2 = {}",
            s * s
        )));
    }
    let c = cin / (s * s);
    let mut out = Tensor::zeros(&[c, s * h, s * w]);
    for cc in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let cin_idx = cc * s * s + dy * s + dx;
                for y in 0..h {
                    for x in 0..w {
                        let v = t.data()[(cin_idx * h + y) * w + x];
                        let oy = s * y + dy;
                        let ox = s * x + dx;
                        out.data[(cc * (s * h) + oy) * (s * w) + ox] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(t: &Tensor, s: usize) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::shape(format!(
            "pixel_unshuffle: want [C,H,W], got {:?}",
            t.shape()
        )));
    }
    let (c, hs, ws) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if s == 0 || hs % s != 0 || ws % s != 0 {
        return Err(Error::shape(format!(
            "pixel_unshuffle: extents {hs}x{ws} not divisible by {s}"
        )));
    }
    let (h, w) = (hs / s, ws / s);
    let mut out = Tensor::zeros(&[c * s * s, h, w]);
    for cc in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let cout = cc * s * s + dy * s + dx;
                for y in 0..h {
                    for x in 0..w {
                        let v = t.data()[(cc * hs + s * y + dy) * ws + s * x + dx];
                        out.data[(cout * h + y) * w + x] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Zero-padded 2-D cross-correlation: `x: [c_in,h,w]`, `weight:
/// [c_out,c_in,kh,kw]`, `bias: [c_out]`, output `[c_out,h,w]` when
/// `pad = (k-1)/2`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
    if x.rank() != 3 || weight.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d: x {:?}, weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d: input channels {cin} vs kernel {wcin}"
        )));
    }
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for o in 0..cout {
        let b = bias.map_or(0.0, |b| b.data()[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for c in 0..cin {
                    for u in 0..kh {
                        let iy = oy + u;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for v in 0..kw {
                            let ix = ox + v;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            let ix = ix - pad;
                            acc += weight.data()[((o * cin + c) * kh + u) * kw + v]
                                * x.data()[(c * h + iy) * w + ix];
                        }
                    }
                }
                out.data[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(out)
}

/// `[c,h,w]` feature map to a `[h*w, c]` token matrix.
pub fn chw_to_tokens(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::shape(format!(
            "chw_to_tokens: want [C,H,W], got {:?}",
            t.shape()
        )));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = t.data()[ch * hw + p];
        }
    }
    Tensor::new(vec![hw, c], out)
}

/// Inverse of [`chw_to_tokens`].
pub fn tokens_to_chw(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if t.rank() != 2 || t.shape()[0] != h * w {
        return Err(Error::shape(format!(
            "tokens_to_chw: want [{}*{}, C], got {:?}",
            h,
            w,
            t.shape()
        )));
    }
    let c = t.shape()[1];
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = t.data()[p * c + ch];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rejects_zero_extents_and_bad_lengths() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![3.5]).is_ok());
    }

    #[test]
    fn flat_index_matches_stride_sum() {
        let shape = [3usize, 4, 5];
        let st = strides(&shape);
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    let manual = i * st[0] + j * st[1] + k * st[2];
                    assert_eq!(flat_index(&shape, &[i, j, k]), manual);
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_identity_when_s_is_one() {
        let t = Tensor::from_shape_fn(&[3, 2, 2], |i| (i[0] * 4 + i[1] * 2 + i[2]) as f64);
        assert_eq!(pixel_shuffle(&t, 1).unwrap(), t);
    }

    #[test]
    fn pixel_shuffle_2x2_layout() {
        // One output channel, 1x1 spatial, s=2: channels (a,b,c,d) become
        // the 2x2 block [[a,b],[c,d]].
        let t = Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = pixel_shuffle(&t, 2).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_rejects_bad_channel_count() {
        let t = Tensor::zeros(&[3, 2, 2]);
        assert!(pixel_shuffle(&t, 2).is_err());
    }

    #[test]
    fn pixel_shuffle_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::from_shape_fn(&[8, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let back = pixel_unshuffle(&pixel_shuffle(&t, 2).unwrap(), 2).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_shape_fn(&[3, 3], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        let zero_b = Tensor::zeros(&[3]);
        assert_eq!(linear(&x, &eye, Some(&zero_b)).unwrap(), x);

        let w0 = Tensor::zeros(&[3, 3]);
        let b = Tensor::new(vec![3], vec![7.0, 8.0, 9.0]).unwrap();
        let out = linear(&x, &w0, Some(&b)).unwrap();
        assert_eq!(out.data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn linear_matches_scalar_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_shape_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_shape_fn(&[5, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_shape_fn(&[5], |_| rng.gen_range(-1.0..1.0));
        let y = linear(&x, &w, Some(&b)).unwrap();
        for r in 0..3 {
            for o in 0..5 {
                let mut acc = b.data()[o];
                for k in 0..4 {
                    acc += x.at(&[r, k]) * w.at(&[o, k]);
                }
                assert!((y.at(&[r, o]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_mismatched_inner_extent() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[5, 4]);
        assert!(linear(&x, &w, None).is_err());
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let x = Tensor::zeros(&[4]);
        let y = softmax(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let x = Tensor::new(vec![2], vec![100.0, 0.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_middle_axis() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_shape_fn(&[2, 5, 3], |_| rng.gen_range(-4.0..4.0));
        let y = softmax(&x, 1).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                let s: f64 = (0..5).map(|j| y.at(&[i, j, k])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_all_beta() {
        let x = Tensor::full(&[2, 4], 3.0);
        let gamma = Tensor::ones(&[4]);
        let beta = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-12);
        }

        let beta5 = Tensor::full(&[4], 5.0);
        let g0 = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &g0, &beta5, 1e-5).unwrap();
        for &v in y.data() {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_random_rows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 64;
        let x = Tensor::from_shape_fn(&[d], |_| rng.gen_range(-2.0..2.0));
        let y = layer_norm(&x, &Tensor::ones(&[d]), &Tensor::zeros(&[d]), 1e-10).unwrap();
        let mean = y.sum() / d as f64;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_shape_fn(&[2, 5, 5], |_| rng.gen_range(-1.0..1.0));
        // 3x3 kernel that copies the center of channel c to output c.
        let w = Tensor::from_shape_fn(&[2, 2, 3, 3], |i| {
            if i[0] == i[1] && i[2] == 1 && i[3] == 1 {
                1.0
            } else {
                0.0
            }
        });
        let y = conv2d(&x, &w, None, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn tokens_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let t = Tensor::from_shape_fn(&[3, 4, 5], |_| rng.gen_range(-1.0..1.0));
        let back = tokens_to_chw(&chw_to_tokens(&t).unwrap(), 4, 5).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_shift_invariance(v in proptest::collection::vec(-10.0f64..10.0, 2..12), c in -5.0f64..5.0) {
            let n = v.len();
            let x = Tensor::new(vec![n], v.clone()).unwrap();
            let shifted = x.map(|t| t + c);
            let a = softmax(&x, 0).unwrap();
            let b = softmax(&shifted, 0).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
            prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pixel_shuffle_round_trip_random(
            c in 1usize..3, h in 1usize..5, w in 1usize..5, s in 1usize..4, seed in 0u64..1000
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_shape_fn(&[c * s * s, h, w], |_| rng.gen_range(-1.0..1.0));
            let rt = pixel_unshuffle(&pixel_shuffle(&t, s).unwrap(), s).unwrap();
            prop_assert_eq!(rt, t);
        }
    }
}
