//! End-to-end ×4 video upscaler and its training loop.
//!
//! The network is deliberately small and regular: a 3×3 convolution lifts
//! each frame to the embedding width, every stage runs shifted-window
//! attention over the whole clip and then a bidirectional pass of the
//! flow-aligned window propagation module, and a zero-initialized
//! reconstruction convolution feeds sub-pixel shuffling on top of a
//! bicubic skip. The zero init makes the skip a guarantee rather than a
//! hope: at step 0 the output *is* the bicubic upsample, so training can
//! only improve on the baseline.
//!
//! Training is plain Adam with cosine-annealed steps on a Charbonnier
//! objective; evaluation reports PSNR/SSIM on luminance against the
//! bicubic baseline; checkpoints are one self-describing file.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{SwsaNodes, SwsaParams, WindowSpec};
use crate::autodiff::{NodeId, Tape};
use crate::data::{frame, stack_frames, ClipSample};
use crate::gsm::{AnchorStrategy, FlattenOrder, FlowSet, GsmNodes, GsmParams, PassDirection, PropagateSpec};
use crate::ssm::{DirectionNodes, MdScanNodes, ScanDirection};
use crate::tensor::{bicubic_resize, luminance, psnr, ssim, write_tensor_bytes, read_tensor_bytes};
use crate::{Error, Result, Tensor};

/// Charbonnier floor; equal images score exactly this loss.
pub const CHARBONNIER_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Architecture hyper-parameters. The two presets are the supported
/// starting points; individual keys can then be overridden via
/// [`ModelConfig::set`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed: usize,
    pub stages: usize,
    pub swsa_per_stage: usize,
    pub gsm_per_stage: usize,
    pub heads: usize,
    /// Attention window extents (t, h, w).
    pub window: (usize, usize, usize),
    /// Frames per propagation window; odd.
    pub k: usize,
    pub d_state: usize,
    pub scale: usize,
    pub anchor: AnchorStrategy,
    pub scatter_on: bool,
    /// When false, propagation skips every warp (unaligned baseline).
    pub align: bool,
    pub order: FlattenOrder,
    pub directions: Vec<ScanDirection>,
}

impl ModelConfig {
    /// Desk-scale preset: trains in seconds, drives all the tests.
    pub fn toy() -> Self {
        Self {
            embed: 32,
            stages: 1,
            swsa_per_stage: 1,
            gsm_per_stage: 1,
            heads: 4,
            window: (2, 4, 4),
            k: 3,
            d_state: 8,
            scale: 4,
            anchor: AnchorStrategy::Center,
            scatter_on: true,
            align: true,
            order: FlattenOrder::TemporalFirst,
            directions: vec![ScanDirection::Forward, ScanDirection::Backward],
        }
    }

    /// Publication-scale preset; constructible, not trainable at desk scale.
    pub fn full() -> Self {
        Self {
            embed: 192,
            stages: 4,
            swsa_per_stage: 2,
            gsm_per_stage: 2,
            heads: 8,
            window: (2, 8, 8),
            k: 5,
            d_state: 16,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::config(format!(
                "unknown preset {other:?}, expected toy or full"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.heads == 0 || self.embed % self.heads != 0 {
            return Err(Error::config(format!(
                "embed {} must be a positive multiple of heads {}",
                self.embed, self.heads
            )));
        }
        if self.stages == 0 {
            return Err(Error::config("stages: need at least one"));
        }
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::config(format!("k: window of {} frames, must be odd", self.k)));
        }
        if self.scale == 0 {
            return Err(Error::config("scale: must be at least 1"));
        }
        if self.d_state == 0 {
            return Err(Error::config("d_state: must be at least 1"));
        }
        let (t, h, w) = self.window;
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("window: extents {t}x{h}x{w} must be positive")));
        }
        if self.directions.is_empty() {
            return Err(Error::config("directions: need at least one scan direction"));
        }
        Ok(())
    }

    /// Canonical `(key, value)` listing; [`Self::set`] accepts every key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let dirs: Vec<&str> = self.directions.iter().map(|d| direction_name(*d)).collect();
        vec![
            ("embed", self.embed.to_string()),
            ("stages", self.stages.to_string()),
            ("swsa_per_stage", self.swsa_per_stage.to_string()),
            ("gsm_per_stage", self.gsm_per_stage.to_string()),
            ("heads", self.heads.to_string()),
            ("window", format!("{}x{}x{}", self.window.0, self.window.1, self.window.2)),
            ("k", self.k.to_string()),
            ("d_state", self.d_state.to_string()),
            ("scale", self.scale.to_string()),
            (
                "anchor",
                match self.anchor {
                    AnchorStrategy::Center => "center".into(),
                    AnchorStrategy::Forward => "forward".into(),
                },
            ),
            ("scatter", self.scatter_on.to_string()),
            ("align", self.align.to_string()),
            (
                "order",
                match self.order {
                    FlattenOrder::TemporalFirst => "temporal_first".into(),
                    FlattenOrder::SpatialFirst => "spatial_first".into(),
                },
            ),
            ("directions", dirs.join(",")),
        ]
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(format!("{key}: cannot parse {value:?} as {what}"));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad("an integer"));
        let parse_bool = |v: &str| v.parse::<bool>().map_err(|_| bad("true/false"));
        match key {
            "embed" => self.embed = parse_usize(value)?,
            "stages" => self.stages = parse_usize(value)?,
            "swsa_per_stage" => self.swsa_per_stage = parse_usize(value)?,
            "gsm_per_stage" => self.gsm_per_stage = parse_usize(value)?,
            "heads" => self.heads = parse_usize(value)?,
            "window" => {
                let parts: Vec<&str> = value.split('x').collect();
                if parts.len() != 3 {
                    return Err(bad("TxHxW"));
                }
                self.window = (
                    parse_usize(parts[0])?,
                    parse_usize(parts[1])?,
                    parse_usize(parts[2])?,
                );
            }
            "k" => self.k = parse_usize(value)?,
            "d_state" => self.d_state = parse_usize(value)?,
            "scale" => self.scale = parse_usize(value)?,
            "anchor" => {
                self.anchor = match value {
                    "center" => AnchorStrategy::Center,
                    "forward" => AnchorStrategy::Forward,
                    _ => return Err(bad("center or forward")),
                }
            }
            "scatter" => self.scatter_on = parse_bool(value)?,
            "align" => self.align = parse_bool(value)?,
            "order" => {
                self.order = match value {
                    "temporal_first" => FlattenOrder::TemporalFirst,
                    "spatial_first" => FlattenOrder::SpatialFirst,
                    _ => return Err(bad("temporal_first or spatial_first")),
                }
            }
            "directions" => {
                let mut dirs = Vec::new();
                for name in value.split(',') {
                    dirs.push(direction_from_name(name.trim()).ok_or_else(|| bad("scan directions"))?);
                }
                self.directions = dirs;
            }
            other => return Err(Error::config(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }

    fn propagate_spec(&self, direction: PassDirection) -> PropagateSpec {
        PropagateSpec {
            k: self.k,
            strategy: self.anchor,
            direction,
            scatter_on: self.scatter_on,
            order: self.order,
            align: self.align,
        }
    }
}

fn direction_name(d: ScanDirection) -> &'static str {
    match d {
        ScanDirection::Forward => "forward",
        ScanDirection::Backward => "backward",
        ScanDirection::TransposedForward => "transposed_forward",
        ScanDirection::TransposedBackward => "transposed_backward",
    }
}

fn direction_from_name(name: &str) -> Option<ScanDirection> {
    Some(match name {
        "forward" => ScanDirection::Forward,
        "backward" => ScanDirection::Backward,
        "transposed_forward" => ScanDirection::TransposedForward,
        "transposed_backward" => ScanDirection::TransposedBackward,
        _ => return None,
    })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StageParams {
    pub swsa: Vec<SwsaParams>,
    pub gsm: Vec<GsmParams>,
}

/// The full parameter set. Field order is canonical: [`Model::fields`],
/// [`Model::fields_mut`], [`Model::bind`], and [`ModelNodes::leaves`] all
/// walk parameters in exactly this order.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub shallow_w: Tensor,
    pub shallow_b: Tensor,
    pub stages: Vec<StageParams>,
    pub recon_w: Tensor,
    pub recon_b: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed;
        let win = WindowSpec::new(cfg.window.0, cfg.window.1, cfg.window.2)?;
        let ws = 1.0 / (3.0 * 9.0f64).sqrt();
        let shallow_w = Tensor::from_shape_fn(&[c, 3, 3, 3], |_| rng.gen_range(-ws..ws));

        // Every residual branch starts silent (zero output projection), so
        // the whole trunk is the identity at init and each block grows in
        // from the bicubic baseline instead of injecting untrained noise.
        let silence = |t: &mut Tensor| *t = Tensor::zeros(t.shape());
        let mut stages = Vec::with_capacity(cfg.stages);
        for _ in 0..cfg.stages {
            let mut swsa = Vec::with_capacity(cfg.swsa_per_stage);
            for b in 0..cfg.swsa_per_stage {
                // Alternate plain and half-shifted windows.
                let mut blk = SwsaParams::new(c, cfg.heads, win, b % 2 == 1, false, rng)?;
                silence(&mut blk.attn.wo);
                silence(&mut blk.mlp_w2);
                swsa.push(blk);
            }
            let gsm = (0..cfg.gsm_per_stage)
                .map(|_| {
                    let mut blk = GsmParams::new(c, cfg.d_state, &cfg.directions, rng);
                    if let Some(w) = &mut blk.scan.out_w {
                        silence(w);
                    }
                    blk
                })
                .collect();
            stages.push(StageParams { swsa, gsm });
        }

        // Zero-initialized head: the network starts out as exact bicubic.
        let out_c = 3 * cfg.scale * cfg.scale;
        Ok(Self {
            cfg,
            shallow_w,
            shallow_b: Tensor::zeros(&[c]),
            stages,
            recon_w: Tensor::zeros(&[out_c, c, 3, 3]),
            recon_b: Tensor::zeros(&[out_c]),
        })
    }

    pub fn fields(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("shallow.w".into(), &self.shallow_w),
            ("shallow.b".into(), &self.shallow_b),
        ];
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, blk) in stage.swsa.iter().enumerate() {
                for (name, t) in blk.fields() {
                    out.push((format!("stage{si}.swsa{bi}.{name}"), t));
                }
            }
            for (bi, blk) in stage.gsm.iter().enumerate() {
                for (name, t) in blk.fields() {
                    out.push((format!("stage{si}.gsm{bi}.{name}"), t));
                }
            }
        }
        out.push(("recon.w".into(), &self.recon_w));
        out.push(("recon.b".into(), &self.recon_b));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("shallow.w".into(), &mut self.shallow_w),
            ("shallow.b".into(), &mut self.shallow_b),
        ];
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, blk) in stage.swsa.iter_mut().enumerate() {
                for (name, t) in blk.fields_mut() {
                    out.push((format!("stage{si}.swsa{bi}.{name}"), t));
                }
            }
            for (bi, blk) in stage.gsm.iter_mut().enumerate() {
                for (name, t) in blk.fields_mut() {
                    out.push((format!("stage{si}.gsm{bi}.{name}"), t));
                }
            }
        }
        out.push(("recon.w".into(), &mut self.recon_w));
        out.push(("recon.b".into(), &mut self.recon_b));
        out
    }

    /// Builds the node structure from pre-made leaves, one per
    /// [`Self::fields`] entry in the same order. Lets a finite-difference
    /// harness own the leaf tensors.
    pub fn nodes_with(&self, ids: &[NodeId]) -> Result<ModelNodes> {
        let mut cur = Cursor { ids, pos: 0 };
        let shallow_w = cur.take()?;
        let shallow_b = cur.take()?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut swsa = Vec::with_capacity(stage.swsa.len());
            for p in &stage.swsa {
                swsa.push(swsa_nodes(p, &mut cur)?);
            }
            let mut gsm = Vec::with_capacity(stage.gsm.len());
            for p in &stage.gsm {
                gsm.push(gsm_nodes(p, &mut cur)?);
            }
            stages.push(StageNodes { swsa, gsm });
        }
        let recon_w = cur.take()?;
        let recon_b = cur.take()?;
        if cur.pos != ids.len() {
            return Err(Error::contract(format!(
                "model wants {} leaves, got {}",
                cur.pos,
                ids.len()
            )));
        }
        Ok(ModelNodes {
            cfg: self.cfg.clone(),
            shallow_w,
            shallow_b,
            stages,
            recon_w,
            recon_b,
        })
    }

    /// Pushes every parameter onto the tape and returns the bound model.
    pub fn bind(&self, tape: &mut Tape) -> ModelNodes {
        let ids: Vec<NodeId> = self
            .fields()
            .into_iter()
            .map(|(_, t)| tape.input(t.clone()))
            .collect();
        self.nodes_with(&ids).expect("leaf count matches by construction")
    }
}

struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Result<NodeId> {
        let id = self
            .ids
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::contract("model wants more leaves than provided"))?;
        self.pos += 1;
        Ok(id)
    }

    fn take_if(&mut self, present: bool) -> Result<Option<NodeId>> {
        Ok(if present { Some(self.take()?) } else { None })
    }
}

fn swsa_nodes(p: &SwsaParams, cur: &mut Cursor) -> Result<SwsaNodes> {
    Ok(SwsaNodes {
        window: p.window,
        shifted: p.shifted,
        norm1_gamma: cur.take()?,
        norm1_beta: cur.take()?,
        attn: crate::attention::MhsaNodes {
            heads: p.attn.heads,
            wq: cur.take()?,
            bq: cur.take()?,
            wk: cur.take()?,
            bk: cur.take()?,
            wv: cur.take()?,
            bv: cur.take()?,
            wo: cur.take()?,
            bo: cur.take()?,
            rel_bias: cur.take_if(p.attn.rel_bias.is_some())?,
        },
        norm2_gamma: cur.take()?,
        norm2_beta: cur.take()?,
        mlp_w1: cur.take()?,
        mlp_b1: cur.take()?,
        mlp_w2: cur.take()?,
        mlp_b2: cur.take()?,
    })
}

fn gsm_nodes(p: &GsmParams, cur: &mut Cursor) -> Result<GsmNodes> {
    let norm_gamma = cur.take()?;
    let norm_beta = cur.take()?;
    let mut directions = Vec::with_capacity(p.scan.directions.len());
    for (dir, dp) in &p.scan.directions {
        directions.push((
            *dir,
            DirectionNodes {
                delta_w: cur.take()?,
                delta_bias: cur.take()?,
                b_w: cur.take()?,
                c_w: cur.take()?,
                a_log: cur.take()?,
                d_skip: cur.take_if(dp.d_skip.is_some())?,
            },
        ));
    }
    Ok(GsmNodes {
        norm_gamma,
        norm_beta,
        scan: MdScanNodes {
            directions,
            gate_w: cur.take_if(p.scan.gate_w.is_some())?,
            out_w: cur.take_if(p.scan.out_w.is_some())?,
        },
    })
}

#[derive(Debug, Clone)]
pub struct StageNodes {
    pub swsa: Vec<SwsaNodes>,
    pub gsm: Vec<GsmNodes>,
}

/// Tape-bound model.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub cfg: ModelConfig,
    pub shallow_w: NodeId,
    pub shallow_b: NodeId,
    pub stages: Vec<StageNodes>,
    pub recon_w: NodeId,
    pub recon_b: NodeId,
}

impl ModelNodes {
    /// `(name, node)` pairs in [`Model::fields`] order.
    pub fn leaves(&self) -> Vec<(String, NodeId)> {
        let mut out = vec![
            ("shallow.w".to_string(), self.shallow_w),
            ("shallow.b".to_string(), self.shallow_b),
        ];
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, blk) in stage.swsa.iter().enumerate() {
                out.extend(blk.leaves(&format!("stage{si}.swsa{bi}.")));
            }
            for (bi, blk) in stage.gsm.iter().enumerate() {
                for (name, id) in blk.leaves() {
                    out.push((format!("stage{si}.gsm{bi}.{name}"), id));
                }
            }
        }
        out.push(("recon.w".to_string(), self.recon_w));
        out.push(("recon.b".to_string(), self.recon_b));
        out
    }

    /// Runs the network over one clip of `[3,H,W]` frame nodes and returns
    /// one `[3,sH,sW]` node per frame.
    ///
    /// The bicubic skip enters as a constant computed from the current
    /// frame values, so gradients flow to the parameters but not through
    /// the upsample into the inputs (inputs are data, never trained).
    pub fn forward(
        &self,
        tape: &mut Tape,
        lr_frames: &[NodeId],
        flows: &FlowSet,
    ) -> Result<Vec<NodeId>> {
        if lr_frames.is_empty() {
            return Err(Error::contract("forward needs at least one frame"));
        }
        let t_len = lr_frames.len();
        let shape = tape.value(lr_frames[0]).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("want [3,H,W] frames, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        let s = self.cfg.scale;

        let mut feats = Vec::with_capacity(t_len);
        for &f in lr_frames {
            feats.push(tape.conv2d(f, self.shallow_w, Some(self.shallow_b), 1)?);
        }

        for stage in &self.stages {
            if !stage.swsa.is_empty() {
                let toks: Result<Vec<NodeId>> =
                    feats.iter().map(|&f| tape.chw_to_tokens(f)).collect();
                let mut x = tape.concat_rows(&toks?)?;
                for blk in &stage.swsa {
                    x = blk.apply(tape, x, (t_len, h, w))?;
                }
                let mut back = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let rows = tape.slice_rows(x, t * h * w, h * w)?;
                    back.push(tape.tokens_to_chw(rows, h, w)?);
                }
                feats = back;
            }
            for blk in &stage.gsm {
                let fwd = self.cfg.propagate_spec(PassDirection::Forward);
                feats = blk.propagate(tape, &feats, flows, &fwd)?;
                let bwd = self.cfg.propagate_spec(PassDirection::Backward);
                feats = blk.propagate(tape, &feats, flows, &bwd)?;
            }
        }

        let mut out = Vec::with_capacity(t_len);
        for (t, &feat) in feats.iter().enumerate() {
            let r = tape.conv2d(feat, self.recon_w, Some(self.recon_b), 1)?;
            let up = tape.pixel_shuffle(r, s)?;
            let base = bicubic_resize(tape.value(lr_frames[t]), h * s, w * s)?;
            let skip = tape.input(base);
            out.push(tape.add(up, skip)?);
        }
        Ok(out)
    }
}

/// Mean Charbonnier loss of a model applied to one clip.
pub fn clip_loss(tape: &mut Tape, nodes: &ModelNodes, clip: &ClipSample) -> Result<NodeId> {
    let t_len = clip.t_len();
    let lr_ids: Vec<NodeId> = (0..t_len).map(|t| tape.input(clip.lr_frame(t))).collect();
    let sr = nodes.forward(tape, &lr_ids, &clip.flows)?;
    let mut acc: Option<NodeId> = None;
    for (t, &sr_t) in sr.iter().enumerate() {
        let hrel = tape.input(clip.hr_frame(t));
        let l = tape.charbonnier(sr_t, hrel, CHARBONNIER_EPS)?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    Ok(tape.scale(acc.expect("at least one frame"), 1.0 / t_len as f64))
}

/// Bicubic ×scale upsample of every LR frame, stacked `[T,3,sH,sW]`.
pub fn bicubic_up(clip: &ClipSample) -> Result<Tensor> {
    let (sh, sw) = (clip.hr.shape()[2], clip.hr.shape()[3]);
    let frames: Result<Vec<Tensor>> = (0..clip.t_len())
        .map(|t| bicubic_resize(&clip.lr_frame(t), sh, sw))
        .collect();
    stack_frames(&frames?)
}

/// Inference: upscales one clip, returning `[T,3,sH,sW]`.
pub fn super_resolve(model: &Model, clip: &ClipSample) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = model.bind(&mut tape);
    let lr_ids: Vec<NodeId> = (0..clip.t_len())
        .map(|t| tape.input(clip.lr_frame(t)))
        .collect();
    let sr = nodes.forward(&mut tape, &lr_ids, &clip.flows)?;
    let frames: Vec<Tensor> = sr.into_iter().map(|id| tape.value(id).clone()).collect();
    stack_frames(&frames)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Optimizer and schedule settings. `beta` values follow the reference
/// training setup; the base rate defaults to the toy value.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainConfig {
    pub fn toy(steps: usize) -> Self {
        Self {
            steps,
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Cosine annealing from `base` at step 0 toward zero at `total - 1`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let x = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * x).cos())
}

/// First and second Adam moments, one slot per model field.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model
            .fields()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One optimization step over a batch of clips; returns the loss.
///
/// Gradients are averaged over the batch by construction (the loss is the
/// mean of per-clip means). A non-finite loss aborts with the name of the
/// first parameter whose gradient went bad.
pub fn train_step(
    model: &mut Model,
    batch: &[&ClipSample],
    opt: &mut AdamState,
    tc: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("training batch is empty"));
    }
    let mut tape = Tape::new();
    let nodes = model.bind(&mut tape);
    let mut acc: Option<NodeId> = None;
    for clip in batch {
        let l = clip_loss(&mut tape, &nodes, clip)?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    let loss = tape.scale(acc.expect("nonempty batch"), 1.0 / batch.len() as f64);
    let loss_val = tape.value(loss).item();

    let grads = tape.backward(loss)?;
    let leaves = nodes.leaves();
    let mut collected = Vec::with_capacity(leaves.len());
    for (name, id) in &leaves {
        let g = grads[id.index()].clone();
        if let Some(g) = &g {
            if !g.all_finite() {
                return Err(Error::contract(format!(
                    "non-finite gradient in {name} (loss {loss_val})"
                )));
            }
        }
        collected.push(g);
    }
    if !loss_val.is_finite() {
        // All gradients finite yet the loss is not: still abort, naming
        // the loss itself.
        return Err(Error::contract(format!("non-finite loss {loss_val}")));
    }

    opt.step += 1;
    let t = opt.step as f64;
    let bc1 = 1.0 - tc.beta1.powf(t);
    let bc2 = 1.0 - tc.beta2.powf(t);
    for (slot, (name, param)) in model.fields_mut().into_iter().enumerate() {
        debug_assert_eq!(name, leaves[slot].0, "field/leaf order diverged");
        let g = match &collected[slot] {
            Some(g) => g.clone(),
            None => continue,
        };
        let m = &mut opt.m[slot];
        let v = &mut opt.v[slot];
        for i in 0..g.len() {
            let gi = g.data()[i];
            m.data_mut()[i] = tc.beta1 * m.data()[i] + (1.0 - tc.beta1) * gi;
            v.data_mut()[i] = tc.beta2 * v.data()[i] + (1.0 - tc.beta2) * gi * gi;
            let mhat = m.data()[i] / bc1;
            let vhat = v.data()[i] / bc2;
            param.data_mut()[i] -= lr * mhat / (vhat.sqrt() + tc.eps);
        }
    }
    Ok(loss_val)
}

/// Per-step losses of a full run, CSV-ready.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:.10e}\n"));
        }
        s
    }
}

/// Runs the cosine-annealed loop over the clips (full-batch steps).
pub fn train(model: &mut Model, clips: &[ClipSample], tc: &TrainConfig) -> Result<TrainLog> {
    let batch: Vec<&ClipSample> = clips.iter().collect();
    let mut opt = AdamState::new(model);
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let lr = cosine_lr(tc.base_lr, step, tc.steps);
        losses.push(train_step(model, &batch, &mut opt, tc, lr)?);
    }
    Ok(TrainLog { losses })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-clip quality against ground truth and the bicubic baseline.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub clip_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_bicubic: f64,
    pub ssim_bicubic: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip_id,psnr,ssim,psnr_bicubic,ssim_bicubic\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                r.clip_id, r.psnr, r.ssim, r.psnr_bicubic, r.ssim_bicubic
            ));
        }
        s
    }

    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>9} {:>8} {:>9} {:>8} {:>8}\n",
            "clip", "psnr", "ssim", "bicubic", "ssim", "delta"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>9.3} {:>8.4} {:>9.3} {:>8.4} {:>+8.3}\n",
                r.clip_id,
                r.psnr,
                r.ssim,
                r.psnr_bicubic,
                r.ssim_bicubic,
                r.psnr - r.psnr_bicubic
            ));
        }
        s
    }

    /// Mean PSNR advantage over bicubic across clips.
    pub fn mean_psnr_delta(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows
            .iter()
            .map(|r| r.psnr - r.psnr_bicubic)
            .sum::<f64>()
            / self.rows.len() as f64
    }
}

/// Mean per-frame luminance PSNR/SSIM of `sr` against `hr` (`[T,3,…]`).
pub fn clip_metrics(sr: &Tensor, hr: &Tensor) -> Result<(f64, f64)> {
    let t_len = sr.shape()[0];
    let (mut p_acc, mut s_acc) = (0.0, 0.0);
    for t in 0..t_len {
        let a = luminance(&frame(sr, t))?;
        let b = luminance(&frame(hr, t))?;
        p_acc += psnr(&a, &b, 1.0)?;
        s_acc += ssim(&a, &b, 1.0)?;
    }
    Ok((p_acc / t_len as f64, s_acc / t_len as f64))
}

/// Scores the model and the bicubic baseline on every clip.
pub fn evaluate(model: &Model, clips: &[(String, ClipSample)]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(clips.len());
    for (id, clip) in clips {
        let sr = super_resolve(model, clip)?;
        let base = bicubic_up(clip)?;
        let (psnr, ssim) = clip_metrics(&sr, &clip.hr)?;
        let (psnr_bicubic, ssim_bicubic) = clip_metrics(&base, &clip.hr)?;
        rows.push(EvalRow {
            clip_id: id.clone(),
            psnr,
            ssim,
            psnr_bicubic,
            ssim_bicubic,
        });
    }
    Ok(EvalReport { rows })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// One self-describing file:
//
//   GSCP1
//   cfg <key> <value>        ... every ModelConfig entry
//   tensor <name> <offset> <d0>x<d1>x…   ... every parameter
//   end
//   <tensor blobs back to back, offsets relative to the byte after "end\n">

const CHECKPOINT_MAGIC: &str = "GSCP1";

fn shape_token(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

fn parse_shape_token(tok: &str) -> Result<Vec<usize>> {
    if tok == "-" {
        return Ok(Vec::new());
    }
    tok.split('x')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::config(format!("bad shape token {tok:?}")))
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut header = format!("{CHECKPOINT_MAGIC}\n");
    for (k, v) in model.cfg.entries() {
        header.push_str(&format!("cfg {k} {v}\n"));
    }
    let mut blobs: Vec<u8> = Vec::new();
    for (name, t) in model.fields() {
        header.push_str(&format!(
            "tensor {name} {} {}\n",
            blobs.len(),
            shape_token(t.shape())
        ));
        blobs.extend_from_slice(&write_tensor_bytes(t));
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&blobs);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let mut cfg = ModelConfig::toy();
    let mut manifest: Vec<(String, usize, Vec<usize>)> = Vec::new();
    let mut pos = 0usize;
    let mut first = true;
    let blob_base;
    loop {
        let rest = &bytes[pos..];
        let eol = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::decode(pos, "checkpoint header never ends"))?;
        let line = std::str::from_utf8(&rest[..eol])
            .map_err(|_| Error::decode(pos, "non-text checkpoint header"))?;
        pos += eol + 1;
        if first {
            if line != CHECKPOINT_MAGIC {
                return Err(Error::decode(0, format!("bad checkpoint magic {line:?}")));
            }
            first = false;
            continue;
        }
        if line == "end" {
            blob_base = pos;
            break;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("cfg") => {
                let key = toks
                    .next()
                    .ok_or_else(|| Error::decode(pos, "cfg line without key"))?;
                let val = toks
                    .next()
                    .ok_or_else(|| Error::decode(pos, "cfg line without value"))?;
                cfg.set(key, val)?;
            }
            Some("tensor") => {
                let name = toks
                    .next()
                    .ok_or_else(|| Error::decode(pos, "tensor line without name"))?;
                let off: usize = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::decode(pos, "tensor line without offset"))?;
                let shape = parse_shape_token(
                    toks.next()
                        .ok_or_else(|| Error::decode(pos, "tensor line without shape"))?,
                )?;
                manifest.push((name.to_string(), off, shape));
            }
            other => {
                return Err(Error::decode(
                    pos,
                    format!("unexpected checkpoint line {other:?}"),
                ))
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(cfg, &mut rng)?;
    let fields = model.fields_mut();
    if manifest.len() != fields.len() {
        return Err(Error::decode(
            blob_base,
            format!(
                "checkpoint stores {} tensors, model has {}",
                manifest.len(),
                fields.len()
            ),
        ));
    }
    for ((name, tensor), (m_name, off, m_shape)) in fields.into_iter().zip(&manifest) {
        if &name != m_name {
            return Err(Error::decode(
                blob_base,
                format!("checkpoint tensor {m_name:?} where model expects {name:?}"),
            ));
        }
        if tensor.shape() != m_shape.as_slice() {
            return Err(Error::shape(format!(
                "checkpoint tensor {name} is {m_shape:?}, model wants {:?}",
                tensor.shape()
            )));
        }
        let count: usize = m_shape.iter().product::<usize>().max(1);
        let len = 8 + m_shape.len() * 8 + count * 8;
        let start = blob_base + off;
        let blob = bytes
            .get(start..start + len)
            .ok_or_else(|| Error::decode(start.min(bytes.len()), "tensor blob out of range"))?;
        *tensor = read_tensor_bytes(blob)?;
    }
    Ok(model)
}
