//! Optical-flow containers and bilinear backward warping.
//!
//! A [`FlowField`] stores a per-pixel displacement in *source* pixel units:
//! warping feature map `f` by flow `o` produces `out(c, y, x) = f(c, y +
//! o.dy(y,x), x + o.dx(y,x))`, sampled bilinearly. With the flow from frame
//! `i` to frame `k` this pulls frame-`k` content into frame-`i` geometry.

use crate::tensor::{read_tensor, write_tensor};
use crate::{Error, Result, Tensor};
use std::path::Path;

/// Out-of-bounds policy for warp taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Clamp tap coordinates to the image rectangle.
    Replicate,
    /// Out-of-bounds taps read as zero.
    Zero,
}

/// Dense per-pixel displacement field.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    h: usize,
    w: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl FlowField {
    pub fn new(h: usize, w: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape(format!("empty flow field {h}x{w}")));
        }
        if dx.len() != h * w || dy.len() != h * w {
            return Err(Error::shape(format!(
                "flow {h}x{w} wants {} values per component, got {}/{}",
                h * w,
                dx.len(),
                dy.len()
            )));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite flow component"));
        }
        Ok(Self { h, w, dx, dy })
    }

    pub fn zero(h: usize, w: usize) -> Self {
        Self::new(h, w, vec![0.0; h * w], vec![0.0; h * w]).expect("valid by construction")
    }

    /// Uniform displacement: every pixel samples `(x + dx, y + dy)`.
    pub fn translation(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        Self::new(h, w, vec![dx; h * w], vec![dy; h * w]).expect("valid by construction")
    }

    /// Backward flow for content rotated by `angle` radians about
    /// `(cx, cy)`: each destination pixel samples the inversely rotated
    /// position, `o(p) = R(-angle) (p - c) - (p - c)`. For small angles
    /// `dx ~ angle * (y - cy)` and `dy ~ -angle * (x - cx)`.
    pub fn rotation(h: usize, w: usize, cx: f64, cy: f64, angle: f64) -> Self {
        let (sin, cos) = angle.sin_cos();
        let mut dx = vec![0.0; h * w];
        let mut dy = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let vx = x as f64 - cx;
                let vy = y as f64 - cy;
                dx[y * w + x] = cos * vx + sin * vy - vx;
                dy[y * w + x] = -sin * vx + cos * vy - vy;
            }
        }
        Self::new(h, w, dx, dy).expect("valid by construction")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dx_at(&self, y: usize, x: usize) -> f64 {
        self.dx[y * self.w + x]
    }

    pub fn dy_at(&self, y: usize, x: usize) -> f64 {
        self.dy[y * self.w + x]
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    /// Largest displacement magnitude over the field.
    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(x, y)| (x * x + y * y).sqrt())
            .fold(0.0, f64::max)
    }

    /// Packs as `[2,h,w]` with plane 0 = dx, plane 1 = dy.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.h * self.w);
        data.extend_from_slice(&self.dx);
        data.extend_from_slice(&self.dy);
        Tensor::new(vec![2, self.h, self.w], data).expect("valid by construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 || t.shape()[0] != 2 {
            return Err(Error::shape(format!(
                "flow tensor must be [2,H,W], got {:?}",
                t.shape()
            )));
        }
        let (h, w) = (t.shape()[1], t.shape()[2]);
        Self::new(
            h,
            w,
            t.data()[..h * w].to_vec(),
            t.data()[h * w..].to_vec(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor(path, &self.to_tensor())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor(&read_tensor(path)?)
    }
}

/// Per-pixel boolean mask the size of a flow field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Logical AND with another mask of the same extent.
    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::shape(format!(
                "mask {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(ValidityMask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn fraction_valid(&self) -> f64 {
        self.data.iter().filter(|&&b| b).count() as f64 / self.data.len() as f64
    }
}

/// Marks pixels whose sampling point lands inside the source rectangle
/// `[0, w-1] x [0, h-1]`, i.e. where all bilinear taps are real pixels.
pub fn validity_mask(flow: &FlowField) -> ValidityMask {
    let (h, w) = (flow.h, flow.w);
    let mut data = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + flow.dx_at(y, x);
            let sy = y as f64 + flow.dy_at(y, x);
            data[y * w + x] =
                sx >= 0.0 && sx <= (w - 1) as f64 && sy >= 0.0 && sy <= (h - 1) as f64;
        }
    }
    ValidityMask { h, w, data }
}

/// The four taps of one bilinear sample: indices (clamped for
/// [`Boundary::Replicate`], sentinel `usize::MAX` = read-as-zero for
/// [`Boundary::Zero`]) and weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub weight: [f64; 4],
    /// Fractional offsets inside the cell; needed for flow derivatives.
    pub fx: f64,
    pub fy: f64,
    /// Row-pair indices kept unclamped for the flow-derivative formula.
    pub cols: [usize; 2],
    pub rows: [usize; 2],
}

pub(crate) fn bilinear_taps(sx: f64, sy: f64, h: usize, w: usize, boundary: Boundary) -> Taps {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let clamp = |v: f64, n: usize| -> usize {
        match boundary {
            Boundary::Replicate => (v.max(0.0) as usize).min(n - 1),
            Boundary::Zero => {
                if v < 0.0 || v > (n - 1) as f64 {
                    usize::MAX
                } else {
                    v as usize
                }
            }
        }
    };
    let cols = [clamp(x0, w), clamp(x0 + 1.0, w)];
    let rows = [clamp(y0, h), clamp(y0 + 1.0, h)];
    let enc = |r: usize, c: usize| -> usize {
        if r == usize::MAX || c == usize::MAX {
            usize::MAX
        } else {
            r * w + c
        }
    };
    Taps {
        idx: [
            enc(rows[0], cols[0]),
            enc(rows[0], cols[1]),
            enc(rows[1], cols[0]),
            enc(rows[1], cols[1]),
        ],
        weight: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        fx,
        fy,
        cols,
        rows,
    }
}

/// Bilinear backward warp of a `[c,h,w]` feature map.
pub fn warp_backward(feat: &Tensor, flow: &FlowField, boundary: Boundary) -> Result<Tensor> {
    if feat.rank() != 3 {
        return Err(Error::shape(format!(
            "warp: want [C,H,W], got {:?}",
            feat.shape()
        )));
    }
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    if h != flow.h || w != flow.w {
        return Err(Error::shape(format!(
            "warp: feature {h}x{w} vs flow {}x{}",
            flow.h, flow.w
        )));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            let taps = bilinear_taps(
                x as f64 + flow.dx_at(y, x),
                y as f64 + flow.dy_at(y, x),
                h,
                w,
                boundary,
            );
            for ch in 0..c {
                let plane = &feat.data()[ch * h * w..(ch + 1) * h * w];
                let mut acc = 0.0;
                for t in 0..4 {
                    if taps.idx[t] != usize::MAX {
                        acc += taps.weight[t] * plane[taps.idx[t]];
                    }
                }
                out.data_mut()[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian products of [`warp_backward`]: given `d loss / d out`,
/// returns gradients with respect to the features and both flow
/// components. Flows are fixed inputs in the model, but the flow gradient
/// is exposed so the warp derivative can be verified numerically.
pub fn warp_vjp(
    feat: &Tensor,
    flow: &FlowField,
    boundary: Boundary,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if grad_out.shape() != feat.shape() {
        return Err(Error::shape(format!(
            "warp_vjp: grad {:?} vs features {:?}",
            grad_out.shape(),
            feat.shape()
        )));
    }
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    if h != flow.h || w != flow.w {
        return Err(Error::shape(format!(
            "warp_vjp: feature {h}x{w} vs flow {}x{}",
            flow.h, flow.w
        )));
    }
    let mut grad_feat = Tensor::zeros(&[c, h, w]);
    let mut grad_dx = vec![0.0; h * w];
    let mut grad_dy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let taps = bilinear_taps(
                x as f64 + flow.dx_at(y, x),
                y as f64 + flow.dy_at(y, x),
                h,
                w,
                boundary,
            );
            let read = |plane: &[f64], r: usize, cidx: usize| -> f64 {
                if r == usize::MAX || cidx == usize::MAX {
                    0.0
                } else {
                    plane[r * w + cidx]
                }
            };
            for ch in 0..c {
                let g = grad_out.data()[(ch * h + y) * w + x];
                if g == 0.0 {
                    continue;
                }
                for t in 0..4 {
                    if taps.idx[t] != usize::MAX {
                        grad_feat.data_mut()[ch * h * w + taps.idx[t]] += g * taps.weight[t];
                    }
                }
                let plane = &feat.data()[ch * h * w..(ch + 1) * h * w];
                let f00 = read(plane, taps.rows[0], taps.cols[0]);
                let f01 = read(plane, taps.rows[0], taps.cols[1]);
                let f10 = read(plane, taps.rows[1], taps.cols[0]);
                let f11 = read(plane, taps.rows[1], taps.cols[1]);
                // d out / d sx and d out / d sy of the bilinear form.
                let dsx = (1.0 - taps.fy) * (f01 - f00) + taps.fy * (f11 - f10);
                let dsy = (1.0 - taps.fx) * (f10 - f00) + taps.fx * (f11 - f01);
                grad_dx[y * w + x] += g * dsx;
                grad_dy[y * w + x] += g * dsy;
            }
        }
    }
    Ok((grad_feat, grad_dx, grad_dy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_feat(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_flow_is_bit_exact_identity() {
        let feat = random_feat(3, 6, 7, 43);
        let flow = FlowField::zero(6, 7);
        for b in [Boundary::Replicate, Boundary::Zero] {
            let out = warp_backward(&feat, &flow, b).unwrap();
            assert_eq!(out, feat);
        }
    }

    #[test]
    fn integer_flow_gathers_exactly_inside_mask() {
        let feat = random_feat(2, 8, 8, 47);
        let flow = FlowField::translation(8, 8, 2.0, -1.0);
        let mask = validity_mask(&flow);
        let out = warp_backward(&feat, &flow, Boundary::Replicate).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if mask.at(y, x) {
                    for c in 0..2 {
                        assert_eq!(out.at(&[c, y, x]), feat.at(&[c, y - 1, x + 2]));
                    }
                }
            }
        }
        // Translation (2,-1): invalid where x+2 > 7 or y-1 < 0.
        assert!(!mask.at(0, 0));
        assert!(!mask.at(3, 6));
        assert!(mask.at(1, 5));
        assert!((mask.fraction_valid() - (6.0 * 7.0) / 64.0).abs() < 1e-15);
    }

    #[test]
    fn zero_boundary_reads_zero_outside() {
        let feat = Tensor::ones(&[1, 4, 4]);
        let flow = FlowField::translation(4, 4, 10.0, 0.0);
        let out = warp_backward(&feat, &flow, Boundary::Zero).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let rep = warp_backward(&feat, &flow, Boundary::Replicate).unwrap();
        assert!(rep.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_pixel_shift_averages_neighbors() {
        let feat = Tensor::new(vec![1, 1, 4], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let flow = FlowField::translation(1, 4, 0.5, 0.0);
        let out = warp_backward(&feat, &flow, Boundary::Replicate).unwrap();
        assert_eq!(out.data()[0], 1.0);
        assert_eq!(out.data()[1], 3.0);
        assert_eq!(out.data()[2], 5.0);
        assert_eq!(out.data()[3], 6.0); // clamped right edge
    }

    #[test]
    fn warp_is_linear_in_features() {
        let a = random_feat(2, 5, 5, 53);
        let b = random_feat(2, 5, 5, 59);
        let flow = FlowField::rotation(5, 5, 2.0, 2.0, 0.3);
        let lhs = warp_backward(&a.scale(2.0).add(&b).unwrap(), &flow, Boundary::Replicate)
            .unwrap();
        let rhs = warp_backward(&a, &flow, Boundary::Replicate)
            .unwrap()
            .scale(2.0)
            .add(&warp_backward(&b, &flow, Boundary::Replicate).unwrap())
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn rotation_flow_small_angle_form() {
        let eps = 1e-4;
        let flow = FlowField::rotation(9, 9, 4.0, 4.0, eps);
        for y in 0..9 {
            for x in 0..9 {
                let want_dx = eps * (y as f64 - 4.0);
                let want_dy = -eps * (x as f64 - 4.0);
                assert!((flow.dx_at(y, x) - want_dx).abs() < 1e-7);
                assert!((flow.dy_at(y, x) - want_dy).abs() < 1e-7);
            }
        }
        // Center is a fixed point.
        assert_eq!(flow.dx_at(4, 4), 0.0);
        assert_eq!(flow.dy_at(4, 4), 0.0);
    }

    #[test]
    fn rotation_inverse_composes_to_near_zero() {
        // Warping by angle then -angle approximates identity away from
        // the boundary (bilinear interpolation blurs slightly).
        let h = 16;
        let feat = Tensor::from_shape_fn(&[1, h, h], |i| {
            let y = i[1] as f64 / h as f64;
            let x = i[2] as f64 / h as f64;
            (2.0 * x).sin() * (1.5 * y).cos()
        });
        let fwd = FlowField::rotation(h, h, 7.5, 7.5, 0.05);
        let bwd = FlowField::rotation(h, h, 7.5, 7.5, -0.05);
        let round = warp_backward(
            &warp_backward(&feat, &fwd, Boundary::Replicate).unwrap(),
            &bwd,
            Boundary::Replicate,
        )
        .unwrap();
        let mut worst = 0.0f64;
        for y in 4..h - 4 {
            for x in 4..h - 4 {
                worst = worst.max((round.at(&[0, y, x]) - feat.at(&[0, y, x])).abs());
            }
        }
        assert!(worst < 0.02, "interior round-trip error {worst}");
    }

    #[test]
    fn vjp_features_matches_finite_differences() {
        let feat = random_feat(1, 5, 5, 61);
        let flow = FlowField::translation(5, 5, 0.3, -0.7);
        let grad_out = random_feat(1, 5, 5, 67);
        for b in [Boundary::Replicate, Boundary::Zero] {
            let (gf, _, _) = warp_vjp(&feat, &flow, b, &grad_out).unwrap();
            let h = 1e-6;
            for i in 0..feat.len() {
                let mut fp = feat.clone();
                fp.data_mut()[i] += h;
                let mut fm = feat.clone();
                fm.data_mut()[i] -= h;
                let lp: f64 = warp_backward(&fp, &flow, b)
                    .unwrap()
                    .mul(&grad_out)
                    .unwrap()
                    .sum();
                let lm: f64 = warp_backward(&fm, &flow, b)
                    .unwrap()
                    .mul(&grad_out)
                    .unwrap()
                    .sum();
                let num = (lp - lm) / (2.0 * h);
                assert!(
                    (gf.data()[i] - num).abs() < 1e-6,
                    "tap {i}: {} vs {num}",
                    gf.data()[i]
                );
            }
        }
    }

    #[test]
    fn vjp_flow_matches_finite_differences() {
        let feat = random_feat(2, 6, 6, 71);
        // Keep sample points well inside cells so the derivative exists.
        let flow = FlowField::translation(6, 6, 0.4, 0.3);
        let grad_out = random_feat(2, 6, 6, 73);
        let (_, gdx, gdy) = warp_vjp(&feat, &flow, Boundary::Replicate, &grad_out).unwrap();
        let h = 1e-6;
        for p in 0..36 {
            for (comp, grad) in [(0usize, &gdx), (1usize, &gdy)] {
                let mut t = flow.to_tensor();
                t.data_mut()[comp * 36 + p] += h;
                let fp = FlowField::from_tensor(&t).unwrap();
                t.data_mut()[comp * 36 + p] -= 2.0 * h;
                let fm = FlowField::from_tensor(&t).unwrap();
                let lp: f64 = warp_backward(&feat, &fp, Boundary::Replicate)
                    .unwrap()
                    .mul(&grad_out)
                    .unwrap()
                    .sum();
                let lm: f64 = warp_backward(&feat, &fm, Boundary::Replicate)
                    .unwrap()
                    .mul(&grad_out)
                    .unwrap()
                    .sum();
                let num = (lp - lm) / (2.0 * h);
                assert!(
                    (grad[p] - num).abs() < 1e-5,
                    "component {comp} pixel {p}: {} vs {num}",
                    grad[p]
                );
            }
        }
    }

    #[test]
    fn flow_tensor_round_trip_and_io() {
        let flow = FlowField::rotation(4, 5, 2.0, 1.5, 0.2);
        let rt = FlowField::from_tensor(&flow.to_tensor()).unwrap();
        assert_eq!(rt, flow);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.gstn");
        flow.save(&path).unwrap();
        assert_eq!(FlowField::load(&path).unwrap(), flow);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn integer_translations_gather_exactly(
            tx in -3i32..=3, ty in -3i32..=3, seed in 0u64..500
        ) {
            let (h, w) = (9usize, 9usize);
            let feat = random_feat(1, h, w, seed);
            let flow = FlowField::translation(h, w, tx as f64, ty as f64);
            let mask = validity_mask(&flow);
            let out = warp_backward(&feat, &flow, Boundary::Replicate).unwrap();
            for y in 0..h {
                for x in 0..w {
                    if mask.at(y, x) {
                        let sy = (y as i32 + ty) as usize;
                        let sx = (x as i32 + tx) as usize;
                        prop_assert_eq!(out.at(&[0, y, x]), feat.at(&[0, sy, sx]));
                    }
                }
            }
        }

        #[test]
        fn masked_region_matches_rect_geometry(tx in -4.0f64..4.0, ty in -4.0f64..4.0) {
            let (h, w) = (8usize, 8usize);
            let flow = FlowField::translation(h, w, tx, ty);
            let mask = validity_mask(&flow);
            for y in 0..h {
                for x in 0..w {
                    let inside = x as f64 + tx >= 0.0
                        && x as f64 + tx <= (w - 1) as f64
                        && y as f64 + ty >= 0.0
                        && y as f64 + ty <= (h - 1) as f64;
                    prop_assert_eq!(mask.at(y, x), inside);
                }
            }
        }
    }
}
