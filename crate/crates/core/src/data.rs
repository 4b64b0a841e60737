//! Synthetic video clips with analytically exact motion and flows.
//!
//! A clip starts from a smooth closed-form scene defined on the whole
//! plane. Every high-resolution frame is rendered by evaluating that
//! function at motion-displaced coordinates, so there is no resampling
//! chain and no accumulation error: frame `t` of a translating clip *is*
//! the scene shifted by `t` steps, bit-for-bit. Low-resolution frames are
//! the bicubic downsample of the render, and the flow between any two
//! frames is the generating motion written out in low-resolution pixels —
//! exact by construction, with no estimator in the loop.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::FlowField;
use crate::gsm::FlowSet;
use crate::tensor::{
    bicubic_resize, read_tensor, write_ppm, write_tensor, ImageU8,
};
use crate::{Error, Result, Tensor};

/// All clips are RGB.
pub const CHANNELS: usize = 3;

/// Scene family for a synthetic clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pattern {
    /// Sum of `waves` random low-frequency plane waves: band-limited
    /// texture that survives downsampling faithfully.
    FourierTexture { waves: usize },
    /// Soft-edged checkerboard, `cell` pixels per square at high
    /// resolution, randomly rotated and offset.
    Checkerboard { cell: f64 },
    /// `count` Gaussian blobs with random centres, widths, and colours.
    GaussianBlobs { count: usize },
}

/// Rigid motion applied per frame. Units are high-resolution pixels (the
/// render grid); the stored flows are converted to low-resolution pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Zero,
    /// Uniform translation of `(dx, dy)` pixels per frame.
    Translation { dx: f64, dy: f64 },
    /// Rotation about the image centre, `rate` radians per frame.
    Rotation { rate: f64 },
}

/// Everything needed to generate one clip deterministically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSpec {
    pub pattern: Pattern,
    pub motion: Motion,
    pub t_len: usize,
    pub lr_h: usize,
    pub lr_w: usize,
    pub scale: usize,
    /// Largest frame gap `|i - j|` that gets a ground-truth flow. A
    /// propagation window of K frames needs radius K−1.
    pub flow_radius: usize,
    pub seed: u64,
}

impl ClipSpec {
    pub fn new(pattern: Pattern, motion: Motion, t_len: usize, lr_h: usize, lr_w: usize, scale: usize, seed: u64) -> Self {
        Self {
            pattern,
            motion,
            t_len,
            lr_h,
            lr_w,
            scale,
            flow_radius: 4,
            seed,
        }
    }

    pub fn with_flow_radius(mut self, r: usize) -> Self {
        self.flow_radius = r;
        self
    }

    pub fn hr_h(&self) -> usize {
        self.lr_h * self.scale
    }

    pub fn hr_w(&self) -> usize {
        self.lr_w * self.scale
    }

    /// Worst per-frame displacement in low-resolution pixels.
    fn lr_speed(&self) -> f64 {
        match self.motion {
            Motion::Zero => 0.0,
            Motion::Translation { dx, dy } => dx.hypot(dy) / self.scale as f64,
            Motion::Rotation { rate } => {
                // Fastest pixel is the corner farthest from the centre.
                let rx = (self.lr_w as f64 - 1.0) / 2.0;
                let ry = (self.lr_h as f64 - 1.0) / 2.0;
                rate.abs() * rx.hypot(ry)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_len == 0 {
            return Err(Error::config("t_len: clip needs at least one frame"));
        }
        if self.lr_h < 2 || self.lr_w < 2 {
            return Err(Error::config(format!(
                "lr extents: {}x{} too small, need at least 2x2",
                self.lr_h, self.lr_w
            )));
        }
        if self.scale == 0 {
            return Err(Error::config("scale: must be at least 1"));
        }
        match self.pattern {
            Pattern::FourierTexture { waves } if waves == 0 => {
                return Err(Error::config("pattern.waves: need at least one wave"));
            }
            Pattern::Checkerboard { cell } if !(cell > 0.0) => {
                return Err(Error::config(format!("pattern.cell: {cell} must be positive")));
            }
            Pattern::GaussianBlobs { count } if count == 0 => {
                return Err(Error::config("pattern.count: need at least one blob"));
            }
            _ => {}
        }
        let speed = self.lr_speed();
        let half = (self.lr_h.min(self.lr_w) as f64) / 2.0;
        if speed > half {
            return Err(Error::config(format!(
                "motion: per-frame displacement {speed:.3} LR px exceeds half the clip extent ({half:.1})"
            )));
        }
        Ok(())
    }
}

/// One generated clip: LR input `[T,3,H,W]`, HR target `[T,3,sH,sW]`, and
/// exact LR-grid flows for every frame pair up to the spec's flow radius.
#[derive(Debug, Clone)]
pub struct ClipSample {
    pub lr: Tensor,
    pub hr: Tensor,
    pub flows: FlowSet,
}

impl ClipSample {
    pub fn new(lr: Tensor, hr: Tensor, flows: FlowSet) -> Result<Self> {
        if lr.rank() != 4 || hr.rank() != 4 {
            return Err(Error::shape(format!(
                "clip wants [T,C,H,W] stacks, got {:?} / {:?}",
                lr.shape(),
                hr.shape()
            )));
        }
        let (t, c, h, w) = (lr.shape()[0], lr.shape()[1], lr.shape()[2], lr.shape()[3]);
        if hr.shape()[0] != t || hr.shape()[1] != c {
            return Err(Error::shape(format!(
                "LR {:?} and HR {:?} disagree on frames/channels",
                lr.shape(),
                hr.shape()
            )));
        }
        let (sh, sw) = (hr.shape()[2], hr.shape()[3]);
        if sh % h != 0 || sw % w != 0 || sh / h != sw / w || sh < h {
            return Err(Error::shape(format!(
                "HR extents {sh}x{sw} are not an integer multiple of LR {h}x{w}"
            )));
        }
        for (dst, src, flow) in flows.pairs() {
            if dst >= t || src >= t {
                return Err(Error::contract(format!(
                    "flow pair ({dst},{src}) outside clip of {t} frames"
                )));
            }
            if flow.height() != h || flow.width() != w {
                return Err(Error::shape(format!(
                    "flow ({dst},{src}) is {}x{}, LR grid is {h}x{w}",
                    flow.height(),
                    flow.width()
                )));
            }
        }
        Ok(Self { lr, hr, flows })
    }

    pub fn t_len(&self) -> usize {
        self.lr.shape()[0]
    }

    pub fn scale(&self) -> usize {
        self.hr.shape()[2] / self.lr.shape()[2]
    }

    pub fn lr_frame(&self, t: usize) -> Tensor {
        frame(&self.lr, t)
    }

    pub fn hr_frame(&self, t: usize) -> Tensor {
        frame(&self.hr, t)
    }
}

/// Slices frame `i` out of a `[T,C,H,W]` stack as `[C,H,W]`.
pub fn frame(stack: &Tensor, i: usize) -> Tensor {
    assert_eq!(stack.rank(), 4, "want [T,C,H,W], got {:?}", stack.shape());
    let n: usize = stack.shape()[1..].iter().product();
    let data = stack.data()[i * n..(i + 1) * n].to_vec();
    Tensor::new(stack.shape()[1..].to_vec(), data).expect("slice shape consistent")
}

/// Stacks `[C,H,W]` frames into `[T,C,H,W]`.
pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::contract("cannot stack zero frames"));
    }
    let shape = frames[0].shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("want [C,H,W] frames, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(frames.len() * frames[0].len());
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != shape {
            return Err(Error::shape(format!(
                "frame {i} shape {:?} differs from {shape:?}",
                f.shape()
            )));
        }
        data.extend_from_slice(f.data());
    }
    let mut full = vec![frames.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

/// A scene is a smooth RGB function of continuous HR coordinates.
enum Scene {
    Waves {
        kx: Vec<f64>,
        ky: Vec<f64>,
        phase: Vec<f64>,
        chroma: Vec<f64>,
        coeff: Vec<f64>,
    },
    Checker {
        cell: f64,
        cos_b: f64,
        sin_b: f64,
        ox: f64,
        oy: f64,
        gain: [f64; 3],
    },
    Blobs {
        cx: Vec<f64>,
        cy: Vec<f64>,
        inv_two_sigma2: Vec<f64>,
        amp: Vec<[f64; 3]>,
    },
}

impl Scene {
    fn build(spec: &ClipSpec, rng: &mut ChaCha8Rng) -> Scene {
        let s = spec.scale as f64;
        let (hh, hw) = (spec.hr_h() as f64, spec.hr_w() as f64);
        match spec.pattern {
            Pattern::FourierTexture { waves } => {
                let mut kx = Vec::with_capacity(waves);
                let mut ky = Vec::with_capacity(waves);
                let mut phase = Vec::with_capacity(waves);
                let mut chroma = Vec::with_capacity(waves);
                let mut amp = Vec::with_capacity(waves);
                for _ in 0..waves {
                    // Periods of 3–12 LR pixels: detailed but still
                    // representable after the ×1/s downsample.
                    let period = s * rng.gen_range(3.0..12.0);
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    let k = std::f64::consts::TAU / period;
                    kx.push(k * theta.cos());
                    ky.push(k * theta.sin());
                    phase.push(rng.gen_range(0.0..std::f64::consts::TAU));
                    chroma.push(rng.gen_range(0.2..0.9));
                    amp.push(rng.gen_range(0.4..1.0));
                }
                let total: f64 = amp.iter().sum();
                let coeff = amp.iter().map(|a| 0.45 * a / total).collect();
                Scene::Waves {
                    kx,
                    ky,
                    phase,
                    chroma,
                    coeff,
                }
            }
            Pattern::Checkerboard { cell } => {
                let beta = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
                Scene::Checker {
                    cell,
                    cos_b: beta.cos(),
                    sin_b: beta.sin(),
                    ox: rng.gen_range(0.0..2.0 * cell),
                    oy: rng.gen_range(0.0..2.0 * cell),
                    gain: [
                        rng.gen_range(0.7..1.0),
                        rng.gen_range(0.5..0.9),
                        rng.gen_range(0.3..0.8),
                    ],
                }
            }
            Pattern::GaussianBlobs { count } => {
                let min_ext = hh.min(hw);
                let mut cx = Vec::with_capacity(count);
                let mut cy = Vec::with_capacity(count);
                let mut inv = Vec::with_capacity(count);
                let mut amp = Vec::with_capacity(count);
                for _ in 0..count {
                    cx.push(rng.gen_range(-0.15..1.15) * hw);
                    cy.push(rng.gen_range(-0.15..1.15) * hh);
                    let sigma = rng.gen_range(0.10..0.22) * min_ext;
                    inv.push(1.0 / (2.0 * sigma * sigma));
                    amp.push([
                        rng.gen_range(0.15..0.55),
                        rng.gen_range(0.15..0.55),
                        rng.gen_range(0.15..0.55),
                    ]);
                }
                Scene::Blobs {
                    cx,
                    cy,
                    inv_two_sigma2: inv,
                    amp,
                }
            }
        }
    }

    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        match self {
            Scene::Waves {
                kx,
                ky,
                phase,
                chroma,
                coeff,
            } => {
                let mut rgb = [0.5; 3];
                for m in 0..kx.len() {
                    let arg = kx[m] * x + ky[m] * y + phase[m];
                    for (c, v) in rgb.iter_mut().enumerate() {
                        *v += coeff[m] * (arg + c as f64 * chroma[m]).cos();
                    }
                }
                rgb
            }
            Scene::Checker {
                cell,
                cos_b,
                sin_b,
                ox,
                oy,
                gain,
            } => {
                let (px, py) = (x - ox, y - oy);
                let u = cos_b * px + sin_b * py;
                let v = -sin_b * px + cos_b * py;
                let f = std::f64::consts::PI / cell;
                // tanh of a sine product: a checkerboard with soft edges,
                // so most of its energy survives the downsample.
                let board = (2.5 * (f * u).sin() * (f * v).sin()).tanh();
                [
                    0.5 + 0.42 * gain[0] * board,
                    0.5 + 0.42 * gain[1] * board,
                    0.5 + 0.42 * gain[2] * board,
                ]
            }
            Scene::Blobs {
                cx,
                cy,
                inv_two_sigma2,
                amp,
            } => {
                let mut rgb = [0.12; 3];
                for i in 0..cx.len() {
                    let d2 = (x - cx[i]).powi(2) + (y - cy[i]).powi(2);
                    let g = (-d2 * inv_two_sigma2[i]).exp();
                    for (c, v) in rgb.iter_mut().enumerate() {
                        *v += amp[i][c] * g;
                    }
                }
                for v in &mut rgb {
                    *v = v.min(1.0);
                }
                rgb
            }
        }
    }
}

/// Scene coordinate seen at pixel `(x, y)` of frame `t`.
fn inverse_map(motion: Motion, t: usize, x: f64, y: f64, hr_h: usize, hr_w: usize) -> (f64, f64) {
    match motion {
        Motion::Zero => (x, y),
        Motion::Translation { dx, dy } => (x - t as f64 * dx, y - t as f64 * dy),
        Motion::Rotation { rate } => {
            let cx = (hr_w as f64 - 1.0) / 2.0;
            let cy = (hr_h as f64 - 1.0) / 2.0;
            let (sin, cos) = (-(t as f64) * rate).sin_cos();
            let (vx, vy) = (x - cx, y - cy);
            (cx + cos * vx - sin * vy, cy + sin * vx + cos * vy)
        }
    }
}

fn render_frame(scene: &Scene, motion: Motion, t: usize, hr_h: usize, hr_w: usize) -> Tensor {
    let mut data = vec![0.0; CHANNELS * hr_h * hr_w];
    for y in 0..hr_h {
        for x in 0..hr_w {
            let (sx, sy) = inverse_map(motion, t, x as f64, y as f64, hr_h, hr_w);
            let rgb = scene.sample(sx, sy);
            for (c, v) in rgb.iter().enumerate() {
                data[(c * hr_h + y) * hr_w + x] = *v;
            }
        }
    }
    Tensor::new(vec![CHANNELS, hr_h, hr_w], data).expect("render shape consistent")
}

/// Ground-truth flow that pulls frame `src` onto frame `dst`'s grid, in
/// low-resolution pixels. Backward-warping `src` with this field
/// reproduces `dst` wherever the sample stays in bounds.
fn flow_between(spec: &ClipSpec, dst: usize, src: usize) -> FlowField {
    let (h, w) = (spec.lr_h, spec.lr_w);
    match spec.motion {
        Motion::Zero => FlowField::zero(h, w),
        Motion::Translation { dx, dy } => {
            let steps = src as f64 - dst as f64;
            let s = spec.scale as f64;
            FlowField::translation(h, w, steps * dx / s, steps * dy / s)
        }
        Motion::Rotation { rate } => {
            // Pixel-centre alignment maps the HR centre exactly onto the
            // LR centre, so the LR motion is the same rotation there.
            let cx = (w as f64 - 1.0) / 2.0;
            let cy = (h as f64 - 1.0) / 2.0;
            FlowField::rotation(h, w, cx, cy, (dst as f64 - src as f64) * rate)
        }
    }
}

/// Renders a full clip: analytic HR frames, bicubic LR frames, and exact
/// flows for every ordered pair within the flow radius.
pub fn gen_synthetic(spec: &ClipSpec) -> Result<ClipSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = Scene::build(spec, &mut rng);
    let (hh, hw) = (spec.hr_h(), spec.hr_w());

    let mut hr_frames = Vec::with_capacity(spec.t_len);
    let mut lr_frames = Vec::with_capacity(spec.t_len);
    for t in 0..spec.t_len {
        let hr = render_frame(&scene, spec.motion, t, hh, hw);
        lr_frames.push(bicubic_resize(&hr, spec.lr_h, spec.lr_w)?);
        hr_frames.push(hr);
    }

    let mut flows = FlowSet::new();
    let radius = spec.flow_radius.min(spec.t_len.saturating_sub(1));
    for dst in 0..spec.t_len {
        for gap in 1..=radius {
            if dst >= gap {
                flows.insert(dst, dst - gap, flow_between(spec, dst, dst - gap));
            }
            if dst + gap < spec.t_len {
                flows.insert(dst, dst + gap, flow_between(spec, dst, dst + gap));
            }
        }
    }

    ClipSample::new(stack_frames(&lr_frames)?, stack_frames(&hr_frames)?, flows)
}

/// The stock four-clip corpus: one of each pattern family plus a second
/// texture, alternating translation and rotation. `t_len` 6, 16×16 LR at
/// the given scale — the defaults the data generator CLI ships with.
pub fn default_clip_specs(count: usize, scale: usize, base_seed: u64) -> Vec<ClipSpec> {
    let s = scale as f64;
    (0..count)
        .map(|i| {
            let pattern = match i % 4 {
                0 => Pattern::FourierTexture { waves: 6 },
                1 => Pattern::Checkerboard { cell: 3.0 * s },
                2 => Pattern::GaussianBlobs { count: 6 },
                _ => Pattern::FourierTexture { waves: 10 },
            };
            let motion = match i % 3 {
                0 => Motion::Translation {
                    dx: 0.55 * s,
                    dy: -0.35 * s,
                },
                1 => Motion::Rotation { rate: 0.03 },
                _ => Motion::Translation {
                    dx: -0.45 * s,
                    dy: 0.6 * s,
                },
            };
            ClipSpec::new(pattern, motion, 6, 16, 16, scale, base_seed + i as u64)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset directory layout
//
//   <root>/manifest.txt           one line per clip: "<id> t=<T> lr=<H>x<W> scale=<s>"
//   <root>/<id>/lr.gstn           [T,3,H,W]
//   <root>/<id>/hr.gstn           [T,3,sH,sW]
//   <root>/<id>/flows.txt         one "dst src" line per stored flow
//   <root>/<id>/flows.gstn        [P,2,H,W], rows in flows.txt order
//   <root>/<id>/lr_NN.ppm, hr_NN.ppm   per-frame previews
// ---------------------------------------------------------------------------

/// Manifest row describing one stored clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRecord {
    pub id: String,
    pub t_len: usize,
    pub lr_h: usize,
    pub lr_w: usize,
    pub scale: usize,
}

impl ClipRecord {
    fn describe(id: &str, clip: &ClipSample) -> Self {
        Self {
            id: id.to_string(),
            t_len: clip.t_len(),
            lr_h: clip.lr.shape()[2],
            lr_w: clip.lr.shape()[3],
            scale: clip.scale(),
        }
    }
}

/// Writes one clip under `root/<id>/` with previews.
pub fn save_clip(root: &Path, id: &str, clip: &ClipSample) -> Result<()> {
    let dir = root.join(id);
    fs::create_dir_all(&dir)?;
    write_tensor(&dir.join("lr.gstn"), &clip.lr)?;
    write_tensor(&dir.join("hr.gstn"), &clip.hr)?;

    let mut pairs: Vec<(usize, usize)> = clip.flows.pairs().map(|(d, s, _)| (d, s)).collect();
    pairs.sort_unstable();
    let mut index = String::new();
    let mut packed = Vec::new();
    for &(dst, src) in &pairs {
        index.push_str(&format!("{dst} {src}\n"));
        packed.extend_from_slice(clip.flows.require(dst, src)?.to_tensor().data());
    }
    fs::write(dir.join("flows.txt"), index)?;
    if !pairs.is_empty() {
        let (h, w) = (clip.lr.shape()[2], clip.lr.shape()[3]);
        let t = Tensor::new(vec![pairs.len(), 2, h, w], packed)?;
        write_tensor(&dir.join("flows.gstn"), &t)?;
    }

    for t in 0..clip.t_len() {
        let lr = ImageU8::from_tensor(&clip.lr_frame(t))?;
        let hr = ImageU8::from_tensor(&clip.hr_frame(t))?;
        write_ppm(&dir.join(format!("lr_{t:02}.ppm")), &lr)?;
        write_ppm(&dir.join(format!("hr_{t:02}.ppm")), &hr)?;
    }
    Ok(())
}

/// Reads a clip written by [`save_clip`].
pub fn load_clip(root: &Path, id: &str) -> Result<ClipSample> {
    let dir = root.join(id);
    let lr = read_tensor(&dir.join("lr.gstn"))?;
    let hr = read_tensor(&dir.join("hr.gstn"))?;

    let index = fs::read_to_string(dir.join("flows.txt"))?;
    let mut pairs = Vec::new();
    for (n, line) in index.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::decode(n, format!("bad flow index line {:?}", line)))
        };
        pairs.push((parse(it.next())?, parse(it.next())?));
    }

    let mut flows = FlowSet::new();
    if !pairs.is_empty() {
        let packed = read_tensor(&dir.join("flows.gstn"))?;
        if packed.rank() != 4 || packed.shape()[0] != pairs.len() || packed.shape()[1] != 2 {
            return Err(Error::shape(format!(
                "flow pack {:?} does not match {} index entries",
                packed.shape(),
                pairs.len()
            )));
        }
        for (i, &(dst, src)) in pairs.iter().enumerate() {
            flows.insert(dst, src, FlowField::from_tensor(&frame(&packed, i))?);
        }
    }
    ClipSample::new(lr, hr, flows)
}

/// Writes the dataset manifest.
pub fn write_manifest(root: &Path, records: &[ClipRecord]) -> Result<()> {
    let mut text = String::from("# clip  frames  lr-extent  scale\n");
    for r in records {
        text.push_str(&format!(
            "{} t={} lr={}x{} scale={}\n",
            r.id, r.t_len, r.lr_h, r.lr_w, r.scale
        ));
    }
    fs::write(root.join("manifest.txt"), text)?;
    Ok(())
}

/// Reads the manifest back, in file order.
pub fn read_manifest(root: &Path) -> Result<Vec<ClipRecord>> {
    let text = fs::read_to_string(root.join("manifest.txt"))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let id = toks
            .next()
            .ok_or_else(|| Error::decode(n, "empty manifest line"))?
            .to_string();
        let mut rec = ClipRecord {
            id,
            t_len: 0,
            lr_h: 0,
            lr_w: 0,
            scale: 0,
        };
        for tok in toks {
            let bad = || Error::decode(n, format!("bad manifest token {tok:?}"));
            let (key, val) = tok.split_once('=').ok_or_else(bad)?;
            match key {
                "t" => rec.t_len = val.parse().map_err(|_| bad())?,
                "lr" => {
                    let (h, w) = val.split_once('x').ok_or_else(bad)?;
                    rec.lr_h = h.parse().map_err(|_| bad())?;
                    rec.lr_w = w.parse().map_err(|_| bad())?;
                }
                "scale" => rec.scale = val.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Generates and stores a whole dataset: one directory per clip plus the
/// manifest. Ids are `clip00`, `clip01`, … in spec order.
pub fn generate_dataset(root: &Path, specs: &[ClipSpec]) -> Result<Vec<ClipRecord>> {
    fs::create_dir_all(root)?;
    let mut records = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("clip{i:02}");
        let clip = gen_synthetic(spec)?;
        save_clip(root, &id, &clip)?;
        records.push(ClipRecord::describe(&id, &clip));
    }
    write_manifest(root, &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{validity_mask, warp_backward, Boundary};

    fn texture_spec(motion: Motion, t_len: usize, seed: u64) -> ClipSpec {
        ClipSpec::new(Pattern::FourierTexture { waves: 6 }, motion, t_len, 12, 16, 4, seed)
    }

    #[test]
    fn zero_motion_clips_repeat_one_frame() {
        let clip = gen_synthetic(&texture_spec(Motion::Zero, 4, 3).with_flow_radius(2)).unwrap();
        for t in 1..4 {
            assert_eq!(clip.hr_frame(t).max_abs_diff(&clip.hr_frame(0)), 0.0);
            assert_eq!(clip.lr_frame(t).max_abs_diff(&clip.lr_frame(0)), 0.0);
        }
        for (_, _, flow) in clip.flows.pairs() {
            assert_eq!(flow.max_magnitude(), 0.0);
        }
    }

    #[test]
    fn half_pixel_steps_accumulate_to_a_whole_pixel_shift() {
        let spec = texture_spec(Motion::Translation { dx: 0.5, dy: 0.0 }, 3, 9);
        let clip = gen_synthetic(&spec).unwrap();
        let (f0, f2) = (clip.hr_frame(0), clip.hr_frame(2));
        let (h, w) = (spec.hr_h(), spec.hr_w());
        let mut worst = 0.0f64;
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 1..w {
                    worst = worst.max((f2.at(&[c, y, x]) - f0.at(&[c, y, x - 1])).abs());
                }
            }
        }
        assert!(worst < 1e-10, "shifted render differs by {worst:e}");
    }

    #[test]
    fn same_seed_regenerates_bit_identical_clips() {
        let spec = ClipSpec::new(
            Pattern::GaussianBlobs { count: 5 },
            Motion::Rotation { rate: 0.02 },
            4,
            10,
            14,
            4,
            77,
        );
        let (a, b) = (gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        assert_eq!(a.lr, b.lr);
        assert_eq!(a.hr, b.hr);
        assert_eq!(a.flows.len(), b.flows.len());
        for (dst, src, flow) in a.flows.pairs() {
            assert_eq!(flow, b.flows.require(dst, src).unwrap());
        }
    }

    #[test]
    fn different_seeds_draw_different_scenes() {
        let a = gen_synthetic(&texture_spec(Motion::Zero, 1, 1)).unwrap();
        let b = gen_synthetic(&texture_spec(Motion::Zero, 1, 2)).unwrap();
        assert!(a.hr.max_abs_diff(&b.hr) > 1e-3);
    }

    #[test]
    fn integer_flows_warp_frames_onto_each_other_exactly() {
        // 4 HR px/frame at scale 4 = one whole LR pixel per frame, so the
        // downsample commutes with the shift and warping is pure copying.
        let spec = texture_spec(Motion::Translation { dx: 4.0, dy: 0.0 }, 4, 21).with_flow_radius(3);
        let clip = gen_synthetic(&spec).unwrap();
        for (dst, src, flow) in clip.flows.pairs() {
            let warped = warp_backward(&clip.lr_frame(src), flow, Boundary::Replicate).unwrap();
            let target = clip.lr_frame(dst);
            let mask = validity_mask(flow);
            assert!(mask.fraction_valid() > 0.5);
            let (h, w) = (spec.lr_h, spec.lr_w);
            for c in 0..CHANNELS {
                for y in 0..h {
                    for x in 0..w {
                        if mask.at(y, x) {
                            let d = (warped.at(&[c, y, x]) - target.at(&[c, y, x])).abs();
                            assert!(d < 1e-9, "pair ({dst},{src}) differs at ({y},{x}): {d:e}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_flows_undo_the_rotation() {
        // π/8 per frame makes frames 0 and 4 a quarter turn apart, and a
        // quarter turn about the centre of a square grid maps pixel
        // centres onto pixel centres — the warp degenerates to copying,
        // so the flow convention is checked without interpolation slack.
        let spec = ClipSpec::new(
            Pattern::GaussianBlobs { count: 4 },
            Motion::Rotation {
                rate: std::f64::consts::FRAC_PI_8,
            },
            5,
            26,
            26,
            1,
            5,
        );
        let clip = gen_synthetic(&spec).unwrap();
        for (dst, src) in [(0usize, 4usize), (4, 0)] {
            let flow = clip.flows.require(dst, src).unwrap();
            let warped = warp_backward(&clip.lr_frame(src), flow, Boundary::Replicate).unwrap();
            let target = clip.lr_frame(dst);
            let mask = validity_mask(flow);
            assert!(mask.fraction_valid() > 0.9);
            let (mut raw, mut aligned) = (0.0f64, 0.0f64);
            let unwarped = clip.lr_frame(src);
            for c in 0..CHANNELS {
                for y in 0..26 {
                    for x in 0..26 {
                        if mask.at(y, x) {
                            raw = raw.max((unwarped.at(&[c, y, x]) - target.at(&[c, y, x])).abs());
                            aligned =
                                aligned.max((warped.at(&[c, y, x]) - target.at(&[c, y, x])).abs());
                        }
                    }
                }
            }
            assert!(raw > 1e-2, "frames too similar for the test to bite: {raw:e}");
            assert!(aligned < 1e-9, "pair ({dst},{src}) alignment error {aligned:e}");
        }
    }

    #[test]
    fn lr_frames_are_the_bicubic_downsample_of_the_render() {
        let spec = texture_spec(Motion::Translation { dx: 1.0, dy: 2.0 }, 3, 13);
        let clip = gen_synthetic(&spec).unwrap();
        for t in 0..3 {
            let again = bicubic_resize(&clip.hr_frame(t), spec.lr_h, spec.lr_w).unwrap();
            assert_eq!(clip.lr_frame(t).max_abs_diff(&again), 0.0);
        }
    }

    #[test]
    fn flow_radius_bounds_the_stored_pairs() {
        let spec = texture_spec(Motion::Translation { dx: 1.0, dy: 0.0 }, 5, 8).with_flow_radius(2);
        let clip = gen_synthetic(&spec).unwrap();
        // Ordered pairs with 0 < |i-j| <= 2 over 5 frames: 2*(4 + 3).
        assert_eq!(clip.flows.len(), 14);
        for dst in 0..5usize {
            for src in 0..5usize {
                let gap = dst.abs_diff(src);
                let stored = clip.flows.get(dst, src).is_some();
                assert_eq!(stored, gap >= 1 && gap <= 2, "pair ({dst},{src})");
            }
        }
    }

    #[test]
    fn single_frame_clips_carry_no_flows() {
        let clip = gen_synthetic(&texture_spec(Motion::Zero, 1, 4)).unwrap();
        assert!(clip.flows.is_empty());
        assert_eq!(clip.lr.shape(), &[1, 3, 12, 16]);
        assert_eq!(clip.hr.shape(), &[1, 3, 48, 64]);
    }

    #[test]
    fn values_stay_in_image_range() {
        for seed in 0..3 {
            for spec in default_clip_specs(4, 4, 100 + seed) {
                let clip = gen_synthetic(&spec).unwrap();
                let (lo, hi) = clip
                    .hr
                    .data()
                    .iter()
                    .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                assert!(lo >= 0.0 && hi <= 1.0, "range [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn runaway_motion_is_rejected_by_field_name() {
        let fast = texture_spec(Motion::Translation { dx: 40.0, dy: 0.0 }, 3, 1);
        let err = gen_synthetic(&fast).unwrap_err().to_string();
        assert!(err.contains("motion"), "message was {err:?}");

        let spin = texture_spec(Motion::Rotation { rate: 1.5 }, 3, 1);
        let err = spin.validate().unwrap_err().to_string();
        assert!(err.contains("motion"), "message was {err:?}");
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut spec = texture_spec(Motion::Zero, 0, 1);
        assert!(spec.validate().is_err());
        spec.t_len = 3;
        spec.scale = 0;
        assert!(spec.validate().is_err());
        spec.scale = 4;
        spec.pattern = Pattern::Checkerboard { cell: 0.0 };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let specs = default_clip_specs(4, 4, 0);
        let records = generate_dataset(dir.path(), &specs).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(records[0].id, "clip00");
        assert_eq!((records[0].t_len, records[0].scale), (6, 4));

        let listed = read_manifest(dir.path()).unwrap();
        assert_eq!(listed, records);

        for (i, spec) in specs.iter().enumerate() {
            let clip = load_clip(dir.path(), &listed[i].id).unwrap();
            let fresh = gen_synthetic(spec).unwrap();
            assert_eq!(clip.lr, fresh.lr);
            assert_eq!(clip.hr, fresh.hr);
            assert_eq!(clip.flows.len(), fresh.flows.len());
            for (dst, src, flow) in fresh.flows.pairs() {
                assert_eq!(clip.flows.require(dst, src).unwrap(), flow);
            }
        }
    }

    #[test]
    fn previews_are_readable_images() {
        let dir = tempfile::tempdir().unwrap();
        let spec = texture_spec(Motion::Zero, 2, 6);
        let clip = gen_synthetic(&spec).unwrap();
        save_clip(dir.path(), "c", &clip).unwrap();
        let img = crate::tensor::read_ppm(&dir.path().join("c/hr_01.ppm")).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, spec.hr_h(), spec.hr_w()]);
        // Quantization error only.
        assert!(t.max_abs_diff(&clip.hr_frame(1)) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn regenerating_a_dataset_reproduces_identical_bytes() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let specs = default_clip_specs(2, 4, 11);
        generate_dataset(d1.path(), &specs).unwrap();
        generate_dataset(d2.path(), &specs).unwrap();
        for name in ["manifest.txt", "clip01/lr.gstn", "clip01/flows.gstn", "clip00/hr_00.ppm"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }
}
