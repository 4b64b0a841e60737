//! Token-level selective-scan layer.
//!
//! Runs the selective scan over one or more traversal orders of the same
//! token matrix, averages the per-direction outputs, and optionally gates
//! and projects the result. Per direction the layer owns its step-size,
//! input and output projections plus the diagonal state matrix, stored as
//! `a = -exp(a_log)` so training can never push a mode unstable.
//!
//! Forward and backward orders only need the sequence length. The
//! transposed orders re-raster the spatial sites column-major and need the
//! [`TokenGrid`] geometry of the flattened sequence.

use crate::autodiff::{NodeId, Tape};
use crate::math::softplus_inv;
use crate::{Error, Result, Tensor};
use rand::Rng;

/// Spatio-temporal factorization of a flattened `[L, D]` token sequence:
/// `frames` temporal samples on an `h × w` site grid, `L = frames·h·w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    /// True when the temporal index varies fastest (site-major layout),
    /// false when whole frames are consecutive.
    pub temporal_first: bool,
}

impl TokenGrid {
    pub fn new(frames: usize, h: usize, w: usize, temporal_first: bool) -> Result<Self> {
        if frames == 0 || h == 0 || w == 0 {
            return Err(Error::contract(format!(
                "token grid extents must be positive, got {frames}x{h}x{w}"
            )));
        }
        Ok(Self {
            frames,
            h,
            w,
            temporal_first,
        })
    }

    pub fn len(&self) -> usize {
        self.frames * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row of temporal sample `k` at site `(y, x)`.
    pub fn row(&self, k: usize, y: usize, x: usize) -> usize {
        let site = y * self.w + x;
        if self.temporal_first {
            site * self.frames + k
        } else {
            k * self.h * self.w + site
        }
    }
}

/// Traversal order of the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Backward,
    /// Sites visited column-major (x outer, y inner), temporal samples of
    /// a site kept adjacent.
    TransposedForward,
    /// [`Self::TransposedForward`] reversed.
    TransposedBackward,
}

impl ScanDirection {
    pub fn needs_grid(self) -> bool {
        matches!(
            self,
            ScanDirection::TransposedForward | ScanDirection::TransposedBackward
        )
    }

    /// Visit order over the grid's rows; a permutation of `0..grid.len()`.
    pub fn order_on(self, grid: &TokenGrid) -> Vec<usize> {
        match self {
            ScanDirection::Forward => (0..grid.len()).collect(),
            ScanDirection::Backward => (0..grid.len()).rev().collect(),
            ScanDirection::TransposedForward => {
                let mut order = Vec::with_capacity(grid.len());
                for x in 0..grid.w {
                    for y in 0..grid.h {
                        for k in 0..grid.frames {
                            order.push(grid.row(k, y, x));
                        }
                    }
                }
                order
            }
            ScanDirection::TransposedBackward => {
                let mut order = ScanDirection::TransposedForward.order_on(grid);
                order.reverse();
                order
            }
        }
    }
}

/// Inverse of a permutation: `out[perm[i]] = i`.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Per-direction parameters of the scan layer.
#[derive(Debug, Clone)]
pub struct DirectionParams {
    /// `[d, d]` projection feeding the step size.
    pub delta_w: Tensor,
    /// `[d]` step-size bias; `softplus` of it is the resting step.
    pub delta_bias: Tensor,
    /// `[n, d]` input-gate projection (`b` per token).
    pub b_w: Tensor,
    /// `[n, d]` readout projection (`c` per token).
    pub c_w: Tensor,
    /// `[d, n]`; the state matrix is `-exp(a_log)`.
    pub a_log: Tensor,
    /// `[d]` learned passthrough; `None` removes the skip term.
    pub d_skip: Option<Tensor>,
}

impl DirectionParams {
    fn init(d: usize, n: usize, with_skip: bool, rng: &mut impl Rng) -> Self {
        let ws = 1.0 / (d as f64).sqrt();
        // Resting step sizes log-uniform in [0.001, 0.1].
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        Self {
            delta_w: Tensor::from_shape_fn(&[d, d], |_| rng.gen_range(-ws..ws) * 0.1),
            delta_bias: Tensor::from_shape_fn(&[d], |_| {
                softplus_inv(rng.gen_range(lo..hi).exp())
            }),
            b_w: Tensor::from_shape_fn(&[n, d], |_| rng.gen_range(-ws..ws)),
            c_w: Tensor::from_shape_fn(&[n, d], |_| rng.gen_range(-ws..ws)),
            a_log: Tensor::from_shape_fn(&[d, n], |i| ((i[1] + 1) as f64).ln()),
            d_skip: with_skip.then(|| Tensor::ones(&[d])),
        }
    }

    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        let mut f = vec![
            ("delta_w", &self.delta_w),
            ("delta_bias", &self.delta_bias),
            ("b_w", &self.b_w),
            ("c_w", &self.c_w),
            ("a_log", &self.a_log),
        ];
        if let Some(ds) = &self.d_skip {
            f.push(("d_skip", ds));
        }
        f
    }

    fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut f = vec![
            ("delta_w", &mut self.delta_w),
            ("delta_bias", &mut self.delta_bias),
            ("b_w", &mut self.b_w),
            ("c_w", &mut self.c_w),
            ("a_log", &mut self.a_log),
        ];
        if let Some(ds) = &mut self.d_skip {
            f.push(("d_skip", ds));
        }
        f
    }
}

/// Multi-direction selective-scan layer over `[l, d]` tokens.
#[derive(Debug, Clone)]
pub struct MdScanParams {
    pub d_model: usize,
    pub d_state: usize,
    pub directions: Vec<(ScanDirection, DirectionParams)>,
    /// `[d, d]`; output is multiplied by `sigmoid(x gate_w^T)`.
    pub gate_w: Option<Tensor>,
    /// `[d, d]` final projection.
    pub out_w: Option<Tensor>,
}

impl MdScanParams {
    pub fn new(
        d_model: usize,
        d_state: usize,
        directions: &[ScanDirection],
        gated: bool,
        projected: bool,
        with_skip: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!directions.is_empty(), "scan layer needs a direction");
        let ws = 1.0 / (d_model as f64).sqrt();
        Self {
            d_model,
            d_state,
            directions: directions
                .iter()
                .map(|&dir| (dir, DirectionParams::init(d_model, d_state, with_skip, rng)))
                .collect(),
            gate_w: gated
                .then(|| Tensor::from_shape_fn(&[d_model, d_model], |_| rng.gen_range(-ws..ws))),
            out_w: projected
                .then(|| Tensor::from_shape_fn(&[d_model, d_model], |_| rng.gen_range(-ws..ws))),
        }
    }

    /// `(name, tensor)` pairs in the canonical order shared with
    /// [`Self::fields_mut`] and [`MdScanNodes`] binding.
    pub fn fields(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (_, p)) in self.directions.iter().enumerate() {
            for (name, t) in p.fields() {
                out.push((format!("dir{i}.{name}"), t));
            }
        }
        if let Some(g) = &self.gate_w {
            out.push(("gate_w".into(), g));
        }
        if let Some(o) = &self.out_w {
            out.push(("out_w".into(), o));
        }
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (_, p)) in self.directions.iter_mut().enumerate() {
            for (name, t) in p.fields_mut() {
                out.push((format!("dir{i}.{name}"), t));
            }
        }
        if let Some(g) = &mut self.gate_w {
            out.push(("gate_w".into(), g));
        }
        if let Some(o) = &mut self.out_w {
            out.push(("out_w".into(), o));
        }
        out
    }

    /// Pushes every parameter onto the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> MdScanNodes {
        MdScanNodes {
            directions: self
                .directions
                .iter()
                .map(|(dir, p)| {
                    (
                        *dir,
                        DirectionNodes {
                            delta_w: tape.input(p.delta_w.clone()),
                            delta_bias: tape.input(p.delta_bias.clone()),
                            b_w: tape.input(p.b_w.clone()),
                            c_w: tape.input(p.c_w.clone()),
                            a_log: tape.input(p.a_log.clone()),
                            d_skip: p.d_skip.as_ref().map(|t| tape.input(t.clone())),
                        },
                    )
                })
                .collect(),
            gate_w: self.gate_w.as_ref().map(|t| tape.input(t.clone())),
            out_w: self.out_w.as_ref().map(|t| tape.input(t.clone())),
        }
    }

    /// Convenience forward pass outside any training tape. Directions that
    /// need grid geometry reject a `None` grid.
    pub fn forward_on(&self, x: &Tensor, grid: Option<&TokenGrid>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        let nodes = self.bind(&mut tape);
        let y = nodes.apply(&mut tape, xid, grid)?;
        Ok(tape.value(y).clone())
    }

    /// [`Self::forward_on`] for plain sequences without grid structure.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_on(x, None)
    }
}

#[derive(Debug, Clone)]
pub struct DirectionNodes {
    pub delta_w: NodeId,
    pub delta_bias: NodeId,
    pub b_w: NodeId,
    pub c_w: NodeId,
    pub a_log: NodeId,
    pub d_skip: Option<NodeId>,
}

/// Tape-bound form of [`MdScanParams`].
#[derive(Debug, Clone)]
pub struct MdScanNodes {
    pub directions: Vec<(ScanDirection, DirectionNodes)>,
    pub gate_w: Option<NodeId>,
    pub out_w: Option<NodeId>,
}

impl MdScanNodes {
    /// `(name, node)` pairs matching [`MdScanParams::fields`] order.
    pub fn leaves(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for (i, (_, p)) in self.directions.iter().enumerate() {
            out.push((format!("dir{i}.delta_w"), p.delta_w));
            out.push((format!("dir{i}.delta_bias"), p.delta_bias));
            out.push((format!("dir{i}.b_w"), p.b_w));
            out.push((format!("dir{i}.c_w"), p.c_w));
            out.push((format!("dir{i}.a_log"), p.a_log));
            if let Some(ds) = p.d_skip {
                out.push((format!("dir{i}.d_skip"), ds));
            }
        }
        if let Some(g) = self.gate_w {
            out.push(("gate_w".into(), g));
        }
        if let Some(o) = self.out_w {
            out.push(("out_w".into(), o));
        }
        out
    }

    /// Applies the layer to `[l, d]` tokens: per-direction scans averaged,
    /// then gate and projection. `grid` describes the sequence layout and
    /// is required by the transposed directions.
    pub fn apply(&self, tape: &mut Tape, x: NodeId, grid: Option<&TokenGrid>) -> Result<NodeId> {
        if self.directions.is_empty() {
            return Err(Error::contract("scan layer has an empty direction set"));
        }
        let l = tape.value(x).shape()[0];
        if let Some(g) = grid {
            if g.len() != l {
                return Err(Error::shape(format!(
                    "token grid covers {} rows but sequence has {l}",
                    g.len()
                )));
            }
        }
        let mut summed: Option<NodeId> = None;
        for (dir, p) in &self.directions {
            let order: Option<Vec<usize>> = match dir {
                ScanDirection::Forward => None,
                ScanDirection::Backward => Some((0..l).rev().collect()),
                ScanDirection::TransposedForward | ScanDirection::TransposedBackward => {
                    let g = grid.ok_or_else(|| {
                        Error::contract("transposed scan direction needs token-grid geometry")
                    })?;
                    Some(dir.order_on(g))
                }
            };
            let xo = match &order {
                Some(ord) => tape.index_select(x, ord)?,
                None => x,
            };
            let delta_pre = tape.linear(xo, p.delta_w, Some(p.delta_bias))?;
            let delta = tape.softplus(delta_pre);
            let b = tape.linear(xo, p.b_w, None)?;
            let c = tape.linear(xo, p.c_w, None)?;
            let a_exp = tape.exp(p.a_log);
            let a = tape.scale(a_exp, -1.0);
            let yo = tape.selective_scan(xo, delta, a, b, c, p.d_skip)?;
            let y = match &order {
                Some(ord) => tape.index_select(yo, &invert_perm(ord))?,
                None => yo,
            };
            summed = Some(match summed {
                None => y,
                Some(s) => tape.add(s, y)?,
            });
        }
        let total = summed.expect("nonempty direction set");
        let mut y = tape.scale(total, 1.0 / self.directions.len() as f64);
        if let Some(gw) = self.gate_w {
            let pre = tape.linear(x, gw, None)?;
            let z = tape.sigmoid(pre);
            y = tape.mul(y, z)?;
        }
        if let Some(ow) = self.out_w {
            y = tape.linear(y, ow, None)?;
        }
        Ok(y)
    }
}
