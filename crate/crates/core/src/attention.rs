//! Shifted-window multi-head self-attention over video token grids.
//!
//! Tokens live in a `[l, c]` matrix whose rows enumerate a `(t, h, w)`
//! grid in row-major order (`row = (t h + y) w + x`). A window layer:
//!
//! 1. replicate-pads each axis up to a multiple of the window extent,
//! 2. optionally rolls the grid by half a window per axis
//!    (`rolled[p] = grid[(p + shift) mod padded]`),
//! 3. partitions into non-overlapping `(wt, wh, ww)` windows, and
//! 4. attends within each window independently.
//!
//! Steps 1–3 compose into a single row gather, so the whole layer is two
//! `index_select`s around per-window attention.

use crate::autodiff::{NodeId, Tape};
use crate::{Error, Result, Tensor};
use rand::Rng;

/// Window extents along (t, h, w).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl WindowSpec {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("window extents must be positive: {t}x{h}x{w}")));
        }
        Ok(Self { t, h, w })
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Cyclic shift used by the alternating (shifted) layer: half the
    /// window, floored, per axis.
    pub fn shifts(&self) -> (usize, usize, usize) {
        (self.t / 2, self.h / 2, self.w / 2)
    }
}

fn pad_to_multiple(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Row gathers implementing pad + roll + window partition (and back).
#[derive(Debug, Clone)]
pub struct PartitionMap {
    /// `gather[r]` = original row feeding partitioned row `r`
    /// (window-major order; padded rows repeat edge rows).
    pub gather: Vec<usize>,
    /// `scatter[o]` = partitioned row holding original row `o`.
    pub scatter: Vec<usize>,
    /// Number of windows.
    pub windows: usize,
    /// Tokens per window.
    pub window_len: usize,
}

/// Builds the row maps for a `(t, h, w)` grid. `shifted` applies the
/// half-window cyclic roll before partitioning.
pub fn partition_map(
    t: usize,
    h: usize,
    w: usize,
    win: &WindowSpec,
    shifted: bool,
) -> PartitionMap {
    let (tp, hp, wp) = (
        pad_to_multiple(t, win.t),
        pad_to_multiple(h, win.h),
        pad_to_multiple(w, win.w),
    );
    let (st, sh, sw) = if shifted { win.shifts() } else { (0, 0, 0) };
    let (nwt, nwh, nww) = (tp / win.t, hp / win.h, wp / win.w);
    let windows = nwt * nwh * nww;
    let window_len = win.volume();

    // Partitioned row -> padded-grid coordinate (after the roll).
    let part_to_rolled = |r: usize| -> (usize, usize, usize) {
        let wi = r / window_len;
        let ii = r % window_len;
        let (wt, rem) = (wi / (nwh * nww), wi % (nwh * nww));
        let (wy, wx) = (rem / nww, rem % nww);
        let (it, rem) = (ii / (win.h * win.w), ii % (win.h * win.w));
        let (iy, ix) = (rem / win.w, rem % win.w);
        (wt * win.t + it, wy * win.h + iy, wx * win.w + ix)
    };

    let mut gather = vec![0usize; windows * window_len];
    for (r, slot) in gather.iter_mut().enumerate() {
        let (pt, py, px) = part_to_rolled(r);
        // Undo the roll: rolled[p] = padded[(p + s) mod n].
        let (qt, qy, qx) = ((pt + st) % tp, (py + sh) % hp, (px + sw) % wp);
        // Undo replicate padding.
        let (ot, oy, ox) = (qt.min(t - 1), qy.min(h - 1), qx.min(w - 1));
        *slot = (ot * h + oy) * w + ox;
    }

    let mut scatter = vec![0usize; t * h * w];
    for ot in 0..t {
        for oy in 0..h {
            for ox in 0..w {
                // Original rows sit at their own padded coordinate; the
                // rolled position is (q - s) mod n per axis.
                let (pt, py, px) = (
                    (ot + tp - st) % tp,
                    (oy + hp - sh) % hp,
                    (ox + wp - sw) % wp,
                );
                let (wt, it) = (pt / win.t, pt % win.t);
                let (wy, iy) = (py / win.h, py % win.h);
                let (wx, ix) = (px / win.w, px % win.w);
                let wi = (wt * nwh + wy) * nww + wx;
                let ii = (it * win.h + iy) * win.w + ix;
                scatter[(ot * h + oy) * w + ox] = wi * window_len + ii;
            }
        }
    }

    PartitionMap {
        gather,
        scatter,
        windows,
        window_len,
    }
}

/// Multi-head attention over one window's rows.
#[derive(Debug, Clone)]
pub struct MhsaParams {
    pub heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    /// Optional learned relative-position bias table,
    /// `[(2wt-1)(2wh-1)(2ww-1), heads]`.
    pub rel_bias: Option<Tensor>,
}

impl MhsaParams {
    pub fn new(c: usize, heads: usize, win: Option<&WindowSpec>, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!(
                "channels {c} not divisible by heads {heads}"
            )));
        }
        let ws = 1.0 / (c as f64).sqrt();
        let mat = |rng: &mut dyn rand::RngCore| {
            Tensor::from_shape_fn(&[c, c], |_| {
                let u: f64 = rand::Rng::gen_range(rng, -1.0..1.0);
                u * ws
            })
        };
        Ok(Self {
            heads,
            wq: mat(rng),
            bq: Tensor::zeros(&[c]),
            wk: mat(rng),
            bk: Tensor::zeros(&[c]),
            wv: mat(rng),
            bv: Tensor::zeros(&[c]),
            wo: mat(rng),
            bo: Tensor::zeros(&[c]),
            rel_bias: win.map(|s| {
                Tensor::zeros(&[(2 * s.t - 1) * (2 * s.h - 1) * (2 * s.w - 1), heads])
            }),
        })
    }

    pub fn fields(&self) -> Vec<(String, &Tensor)> {
        let mut f: Vec<(String, &Tensor)> = vec![
            ("wq".into(), &self.wq),
            ("bq".into(), &self.bq),
            ("wk".into(), &self.wk),
            ("bk".into(), &self.bk),
            ("wv".into(), &self.wv),
            ("bv".into(), &self.bv),
            ("wo".into(), &self.wo),
            ("bo".into(), &self.bo),
        ];
        if let Some(rb) = &self.rel_bias {
            f.push(("rel_bias".into(), rb));
        }
        f
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut f: Vec<(String, &mut Tensor)> = vec![
            ("wq".into(), &mut self.wq),
            ("bq".into(), &mut self.bq),
            ("wk".into(), &mut self.wk),
            ("bk".into(), &mut self.bk),
            ("wv".into(), &mut self.wv),
            ("bv".into(), &mut self.bv),
            ("wo".into(), &mut self.wo),
            ("bo".into(), &mut self.bo),
        ];
        if let Some(rb) = &mut self.rel_bias {
            f.push(("rel_bias".into(), rb));
        }
        f
    }

    pub fn bind(&self, tape: &mut Tape) -> MhsaNodes {
        MhsaNodes {
            heads: self.heads,
            wq: tape.input(self.wq.clone()),
            bq: tape.input(self.bq.clone()),
            wk: tape.input(self.wk.clone()),
            bk: tape.input(self.bk.clone()),
            wv: tape.input(self.wv.clone()),
            bv: tape.input(self.bv.clone()),
            wo: tape.input(self.wo.clone()),
            bo: tape.input(self.bo.clone()),
            rel_bias: self.rel_bias.as_ref().map(|t| tape.input(t.clone())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhsaNodes {
    pub heads: usize,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub rel_bias: Option<NodeId>,
}

impl MhsaNodes {
    pub fn leaves(&self, prefix: &str) -> Vec<(String, NodeId)> {
        let mut f = vec![
            (format!("{prefix}wq"), self.wq),
            (format!("{prefix}bq"), self.bq),
            (format!("{prefix}wk"), self.wk),
            (format!("{prefix}bk"), self.bk),
            (format!("{prefix}wv"), self.wv),
            (format!("{prefix}bv"), self.bv),
            (format!("{prefix}wo"), self.wo),
            (format!("{prefix}bo"), self.bo),
        ];
        if let Some(rb) = self.rel_bias {
            f.push((format!("{prefix}rel_bias"), rb));
        }
        f
    }

    /// Attention over all rows of `x` jointly (one window).
    /// `rel_rows`, when present with a bound bias table, lists the table row
    /// for each (query, key) pair in row-major order.
    pub fn apply_window(
        &self,
        tape: &mut Tape,
        x: NodeId,
        rel_rows: Option<&[usize]>,
    ) -> Result<NodeId> {
        let (n, c) = {
            let v = tape.value(x);
            (v.shape()[0], v.shape()[1])
        };
        let dh = c / self.heads;
        let q = tape.linear(x, self.wq, Some(self.bq))?;
        let k = tape.linear(x, self.wk, Some(self.bk))?;
        let v = tape.linear(x, self.wv, Some(self.bv))?;
        let mut head_outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let raw = tape.matmul_nt(qh, kh)?;
            let mut scores = tape.scale(raw, 1.0 / (dh as f64).sqrt());
            if let (Some(table), Some(rows)) = (self.rel_bias, rel_rows) {
                debug_assert_eq!(rows.len(), n * n);
                let picked = tape.index_select(table, rows)?; // [n*n, heads]
                let col = tape.slice_cols(picked, hd, 1)?;
                let bias = tape.reshape(col, &[n, n])?;
                scores = tape.add(scores, bias)?;
            }
            let attn = tape.softmax(scores, 1)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        tape.linear(merged, self.wo, Some(self.bo))
    }
}

/// Relative-position table rows for every (query, key) pair inside a
/// window, row-major over pairs.
pub fn relative_index_table(win: &WindowSpec) -> Vec<usize> {
    let n = win.volume();
    let coord = |i: usize| -> (usize, usize, usize) {
        let t = i / (win.h * win.w);
        let r = i % (win.h * win.w);
        (t, r / win.w, r % win.w)
    };
    let (rt, rh, rw) = (2 * win.t - 1, 2 * win.h - 1, 2 * win.w - 1);
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ti, yi, xi) = coord(i);
        for j in 0..n {
            let (tj, yj, xj) = coord(j);
            let dt = ti + win.t - 1 - tj;
            let dy = yi + win.h - 1 - yj;
            let dx = xi + win.w - 1 - xj;
            debug_assert!(dt < rt && dy < rh && dx < rw);
            rows.push((dt * rh + dy) * rw + dx);
        }
    }
    rows
}

/// One pre-norm transformer block with windowed attention:
/// `x + attn(ln(x))` then `x + mlp(ln(x))`, MLP ratio 2 with GELU.
#[derive(Debug, Clone)]
pub struct SwsaParams {
    pub c: usize,
    pub window: WindowSpec,
    /// Apply the half-window cyclic roll before partitioning.
    pub shifted: bool,
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub attn: MhsaParams,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

impl SwsaParams {
    pub fn new(
        c: usize,
        heads: usize,
        window: WindowSpec,
        shifted: bool,
        rel_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = 2 * c;
        let ws1 = 1.0 / (c as f64).sqrt();
        let ws2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            c,
            window,
            shifted,
            norm1_gamma: Tensor::ones(&[c]),
            norm1_beta: Tensor::zeros(&[c]),
            attn: MhsaParams::new(c, heads, rel_bias.then_some(&window), rng)?,
            norm2_gamma: Tensor::ones(&[c]),
            norm2_beta: Tensor::zeros(&[c]),
            mlp_w1: Tensor::from_shape_fn(&[hidden, c], |_| rng.gen_range(-ws1..ws1)),
            mlp_b1: Tensor::zeros(&[hidden]),
            mlp_w2: Tensor::from_shape_fn(&[c, hidden], |_| rng.gen_range(-ws2..ws2)),
            mlp_b2: Tensor::zeros(&[c]),
        })
    }

    pub fn fields(&self) -> Vec<(String, &Tensor)> {
        let mut f: Vec<(String, &Tensor)> = vec![
            ("norm1_gamma".into(), &self.norm1_gamma),
            ("norm1_beta".into(), &self.norm1_beta),
        ];
        for (n, t) in self.attn.fields() {
            f.push((format!("attn.{n}"), t));
        }
        f.push(("norm2_gamma".into(), &self.norm2_gamma));
        f.push(("norm2_beta".into(), &self.norm2_beta));
        f.push(("mlp_w1".into(), &self.mlp_w1));
        f.push(("mlp_b1".into(), &self.mlp_b1));
        f.push(("mlp_w2".into(), &self.mlp_w2));
        f.push(("mlp_b2".into(), &self.mlp_b2));
        f
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut f: Vec<(String, &mut Tensor)> = vec![
            ("norm1_gamma".into(), &mut self.norm1_gamma),
            ("norm1_beta".into(), &mut self.norm1_beta),
        ];
        for (n, t) in self.attn.fields_mut() {
            f.push((format!("attn.{n}"), t));
        }
        f.push(("norm2_gamma".into(), &mut self.norm2_gamma));
        f.push(("norm2_beta".into(), &mut self.norm2_beta));
        f.push(("mlp_w1".into(), &mut self.mlp_w1));
        f.push(("mlp_b1".into(), &mut self.mlp_b1));
        f.push(("mlp_w2".into(), &mut self.mlp_w2));
        f.push(("mlp_b2".into(), &mut self.mlp_b2));
        f
    }

    pub fn bind(&self, tape: &mut Tape) -> SwsaNodes {
        SwsaNodes {
            window: self.window,
            shifted: self.shifted,
            norm1_gamma: tape.input(self.norm1_gamma.clone()),
            norm1_beta: tape.input(self.norm1_beta.clone()),
            attn: self.attn.bind(tape),
            norm2_gamma: tape.input(self.norm2_gamma.clone()),
            norm2_beta: tape.input(self.norm2_beta.clone()),
            mlp_w1: tape.input(self.mlp_w1.clone()),
            mlp_b1: tape.input(self.mlp_b1.clone()),
            mlp_w2: tape.input(self.mlp_w2.clone()),
            mlp_b2: tape.input(self.mlp_b2.clone()),
        }
    }

    /// Forward pass outside a training tape.
    pub fn forward(&self, x: &Tensor, grid: (usize, usize, usize)) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        let nodes = self.bind(&mut tape);
        let y = nodes.apply(&mut tape, xid, grid)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone)]
pub struct SwsaNodes {
    pub window: WindowSpec,
    pub shifted: bool,
    pub norm1_gamma: NodeId,
    pub norm1_beta: NodeId,
    pub attn: MhsaNodes,
    pub norm2_gamma: NodeId,
    pub norm2_beta: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

impl SwsaNodes {
    pub fn leaves(&self, prefix: &str) -> Vec<(String, NodeId)> {
        let mut f = vec![
            (format!("{prefix}norm1_gamma"), self.norm1_gamma),
            (format!("{prefix}norm1_beta"), self.norm1_beta),
        ];
        f.extend(self.attn.leaves(&format!("{prefix}attn.")));
        f.push((format!("{prefix}norm2_gamma"), self.norm2_gamma));
        f.push((format!("{prefix}norm2_beta"), self.norm2_beta));
        f.push((format!("{prefix}mlp_w1"), self.mlp_w1));
        f.push((format!("{prefix}mlp_b1"), self.mlp_b1));
        f.push((format!("{prefix}mlp_w2"), self.mlp_w2));
        f.push((format!("{prefix}mlp_b2"), self.mlp_b2));
        f
    }

    /// Applies the block to `[l, c]` tokens laid out over `grid`.
    pub fn apply(
        &self,
        tape: &mut Tape,
        x: NodeId,
        grid: (usize, usize, usize),
    ) -> Result<NodeId> {
        let (t, h, w) = grid;
        let l = tape.value(x).shape()[0];
        if l != t * h * w {
            return Err(Error::shape(format!(
                "attention: {l} tokens vs grid {t}x{h}x{w}"
            )));
        }
        let map = partition_map(t, h, w, &self.window, self.shifted);
        let rel_rows = self
            .attn
            .rel_bias
            .is_some()
            .then(|| relative_index_table(&self.window));

        // Attention branch on normalized tokens.
        let normed = tape.layer_norm(x, self.norm1_gamma, self.norm1_beta, LN_EPS)?;
        let part = tape.index_select(normed, &map.gather)?;
        let mut win_outs = Vec::with_capacity(map.windows);
        for wi in 0..map.windows {
            let rows = tape.slice_rows(part, wi * map.window_len, map.window_len)?;
            win_outs.push(self.attn.apply_window(tape, rows, rel_rows.as_deref())?);
        }
        let attended = tape.concat_rows(&win_outs)?;
        let restored = tape.index_select(attended, &map.scatter)?;
        let x = tape.add(x, restored)?;

        // MLP branch.
        let normed = tape.layer_norm(x, self.norm2_gamma, self.norm2_beta, LN_EPS)?;
        let hidden = tape.linear(normed, self.mlp_w1, Some(self.mlp_b1))?;
        let act = tape.gelu(hidden);
        let mlp = tape.linear(act, self.mlp_w2, Some(self.mlp_b2))?;
        tape.add(x, mlp)
    }
}
