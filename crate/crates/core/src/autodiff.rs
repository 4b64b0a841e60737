//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records operations in execution order; because every node's
//! inputs precede it, the recording order is already topological and the
//! backward pass is a single reverse sweep. Values are eagerly computed on
//! record, so the tape doubles as the forward evaluator.
//!
//! The operation set is deliberately small: elementwise arithmetic and
//! activations, linear/conv/norm layers, row/column splicing (which also
//! encodes every sequence permutation), bilinear warping, and the
//! selective state-space scan with its hand-derived adjoint.

use crate::align::{warp_backward, warp_vjp, Boundary, FlowField};
use crate::math::{gelu, gelu_deriv, sigmoid, sigmoid_deriv_from_value, softplus};
use crate::ssm::kernels::{selective_scan, selective_scan_vjp};
use crate::tensor::{
    chw_to_tokens, conv2d, for_each_lane, layer_norm, linear, pixel_shuffle, pixel_unshuffle,
    softmax, tokens_to_chw,
};
use crate::{Error, Result, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Leaf holding data supplied by the caller.
    Input,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddConst,
    Exp,
    Square,
    Sqrt,
    Sigmoid,
    Softplus,
    Gelu,
    /// `x W^T (+ b)`; inputs `[x, w]` or `[x, w, b]`.
    Linear,
    Softmax {
        axis: usize,
    },
    /// Inputs `[x, gamma, beta]`.
    LayerNorm {
        eps: f64,
    },
    /// Inputs `[x, w]` or `[x, w, b]`.
    Conv2d {
        pad: usize,
    },
    PixelShuffle {
        s: usize,
    },
    Warp {
        flow: FlowField,
        boundary: Boundary,
    },
    /// Row gather from a `[r, c]` matrix; rows may repeat.
    IndexSelect {
        indices: Vec<usize>,
    },
    /// N-ary row concatenation of `[r_i, c]` matrices.
    ConcatRows,
    SliceRows {
        start: usize,
        len: usize,
    },
    /// N-ary column concatenation of `[r, c_i]` matrices.
    ConcatCols,
    SliceCols {
        start: usize,
        len: usize,
    },
    /// `A B` with `A: [n,k]`, `B: [k,m]`.
    MatMul,
    /// `A B^T` with `A: [n,k]`, `B: [m,k]`.
    MatMulNT,
    Reshape,
    ChwToTokens,
    TokensToChw,
    SumAll,
    MeanAll,
    /// Inputs `[x, delta, a, b, c]` or `[..., d_skip]`; `h` is the saved
    /// state trajectory from the forward pass.
    SelectiveScan {
        h: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Reverse-mode tape; also the forward evaluator.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Evaluate selective scans with the parallel prefix formulation.
    pub parallel_scan: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a leaf carrying caller data (an input or a parameter).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, Vec::new(), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub, vec![a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst, vec![a], v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a], v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square, vec![a], v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt, vec![a], v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid, vec![a], v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus, vec![a], v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu, vec![a], v)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let v = linear(
            self.value(x),
            self.value(w),
            b.map(|id| self.value(id)),
        )?;
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        Ok(self.push(Op::Linear, inputs, v))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = softmax(self.value(x), axis)?;
        Ok(self.push(Op::Softmax { axis }, vec![x], v))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let v = layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], v))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, pad: usize) -> Result<NodeId> {
        let v = conv2d(self.value(x), self.value(w), b.map(|id| self.value(id)), pad)?;
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        Ok(self.push(Op::Conv2d { pad }, inputs, v))
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, s: usize) -> Result<NodeId> {
        let v = pixel_shuffle(self.value(x), s)?;
        Ok(self.push(Op::PixelShuffle { s }, vec![x], v))
    }

    pub fn warp(&mut self, x: NodeId, flow: &FlowField, boundary: Boundary) -> Result<NodeId> {
        let v = warp_backward(self.value(x), flow, boundary)?;
        Ok(self.push(
            Op::Warp {
                flow: flow.clone(),
                boundary,
            },
            vec![x],
            v,
        ))
    }

    /// Gathers rows of a `[r, c]` matrix in the given order.
    pub fn index_select(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape(format!(
                "index_select: want [R,C], got {:?}",
                xv.shape()
            )));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        if indices.is_empty() {
            return Err(Error::shape("index_select: empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!(
                "index_select: row {bad} out of range {r}"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let v = Tensor::new(vec![indices.len(), c], data)?;
        Ok(self.push(
            Op::IndexSelect {
                indices: indices.to_vec(),
            },
            vec![x],
            v,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows: no inputs"));
        }
        let c = {
            let first = self.value(parts[0]);
            if first.rank() != 2 {
                return Err(Error::shape(format!(
                    "concat_rows: want [R,C], got {:?}",
                    first.shape()
                )));
            }
            first.shape()[1]
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.shape()[1] != c {
                return Err(Error::shape(format!(
                    "concat_rows: part {:?} vs C={c}",
                    v.shape()
                )));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let v = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(Op::ConcatRows, parts.to_vec(), v))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape(format!(
                "slice_rows: want [R,C], got {:?}",
                xv.shape()
            )));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        if start + len > r || len == 0 {
            return Err(Error::shape(format!(
                "slice_rows: range {start}..{} out of {r}",
                start + len
            )));
        }
        let v = Tensor::new(
            vec![len, c],
            xv.data()[start * c..(start + len) * c].to_vec(),
        )?;
        Ok(self.push(Op::SliceRows { start, len }, vec![x], v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols: no inputs"));
        }
        let r = {
            let first = self.value(parts[0]);
            if first.rank() != 2 {
                return Err(Error::shape(format!(
                    "concat_cols: want [R,C], got {:?}",
                    first.shape()
                )));
            }
            first.shape()[0]
        };
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                debug_assert_eq!(v.rank(), 2);
                v.shape()[1]
            })
            .collect();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.shape()[0] != r {
                return Err(Error::shape(format!(
                    "concat_cols: part {:?} vs R={r}",
                    v.shape()
                )));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut col = 0;
        for (&p, &wi) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for row in 0..r {
                data[row * total + col..row * total + col + wi]
                    .copy_from_slice(&v.data()[row * wi..(row + 1) * wi]);
            }
            col += wi;
        }
        let v = Tensor::new(vec![r, total], data)?;
        Ok(self.push(Op::ConcatCols, parts.to_vec(), v))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape(format!(
                "slice_cols: want [R,C], got {:?}",
                xv.shape()
            )));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        if start + len > c || len == 0 {
            return Err(Error::shape(format!(
                "slice_cols: range {start}..{} out of {c}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&xv.data()[row * c + start..row * c + start + len]);
        }
        let v = Tensor::new(vec![r, len], data)?;
        Ok(self.push(Op::SliceCols { start, len }, vec![x], v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let v = matmul(av, bv, false);
        Ok(self.push(Op::MatMul, vec![a, b], v))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::shape(format!(
                "matmul_nt: {:?} x {:?}^T",
                av.shape(),
                bv.shape()
            )));
        }
        let v = matmul(av, bv, true);
        Ok(self.push(Op::MatMulNT, vec![a, b], v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], v))
    }

    pub fn chw_to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let v = chw_to_tokens(self.value(x))?;
        Ok(self.push(Op::ChwToTokens, vec![x], v))
    }

    pub fn tokens_to_chw(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let v = tokens_to_chw(self.value(x), h, w)?;
        Ok(self.push(Op::TokensToChw, vec![x], v))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll, vec![x], v)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push(Op::MeanAll, vec![x], v)
    }

    /// Records a selective scan; see [`selective_scan`] for the contract.
    pub fn selective_scan(
        &mut self,
        x: NodeId,
        delta: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        d_skip: Option<NodeId>,
    ) -> Result<NodeId> {
        let out = selective_scan(
            self.value(x),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            d_skip.map(|id| self.value(id)),
            self.parallel_scan,
        )?;
        let mut inputs = vec![x, delta, a, b, c];
        if let Some(d) = d_skip {
            inputs.push(d);
        }
        Ok(self.push(Op::SelectiveScan { h: out.h }, inputs, out.y))
    }

    /// Mean Charbonnier penalty `mean(sqrt((a - b)^2 + eps^2))`.
    pub fn charbonnier(&mut self, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        let diff = self.sub(a, b)?;
        let sq = self.square(diff);
        let shifted = self.add_const(sq, eps * eps);
        let root = self.sqrt(shifted);
        Ok(self.mean_all(root))
    }

    /// Reverse sweep from a scalar `loss` node. Returns one gradient slot
    /// per node; untouched slots are `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(slot) => {
                    debug_assert_eq!(slot.shape(), delta.shape());
                    for (s, d) in slot.data_mut().iter_mut().zip(delta.data()) {
                        *s += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            };
        };

        match &node.op {
            Op::Input => {}
            Op::Add => {
                acc(node.inputs[0], g.clone());
                acc(node.inputs[1], g.clone());
            }
            Op::Sub => {
                acc(node.inputs[0], g.clone());
                acc(node.inputs[1], g.scale(-1.0));
            }
            Op::Mul => {
                acc(node.inputs[0], g.mul(val(node.inputs[1]))?);
                acc(node.inputs[1], g.mul(val(node.inputs[0]))?);
            }
            Op::Scale(c) => acc(node.inputs[0], g.scale(*c)),
            Op::AddConst => acc(node.inputs[0], g.clone()),
            Op::Exp => acc(node.inputs[0], g.mul(&node.value)?),
            Op::Square => {
                let x = val(node.inputs[0]);
                acc(node.inputs[0], g.mul(&x.scale(2.0))?);
            }
            Op::Sqrt => {
                // d sqrt(x) = g / (2 sqrt(x)); forward guarantees x >= 0
                // wherever this op is used (squares plus a positive shift).
                let dy = node.value.map(|y| 0.5 / y);
                acc(node.inputs[0], g.mul(&dy)?);
            }
            Op::Sigmoid => {
                let dy = node.value.map(sigmoid_deriv_from_value);
                acc(node.inputs[0], g.mul(&dy)?);
            }
            Op::Softplus => {
                let dx = val(node.inputs[0]).map(sigmoid);
                acc(node.inputs[0], g.mul(&dx)?);
            }
            Op::Gelu => {
                let dx = val(node.inputs[0]).map(gelu_deriv);
                acc(node.inputs[0], g.mul(&dx)?);
            }
            Op::Linear => {
                let x = val(node.inputs[0]);
                let w = val(node.inputs[1]);
                let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
                let rows = x.len() / d_in;
                // dx = g W
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                for r in 0..rows {
                    let gr = &g.data()[r * d_out..(r + 1) * d_out];
                    let xr = &x.data()[r * d_in..(r + 1) * d_in];
                    for o in 0..d_out {
                        let go = gr[o];
                        if go == 0.0 {
                            continue;
                        }
                        let wr = &w.data()[o * d_in..(o + 1) * d_in];
                        let dwr = &mut dw[o * d_in..(o + 1) * d_in];
                        let dxr = &mut dx[r * d_in..(r + 1) * d_in];
                        for k in 0..d_in {
                            dxr[k] += go * wr[k];
                            dwr[k] += go * xr[k];
                        }
                    }
                }
                acc(node.inputs[0], Tensor::new(x.shape().to_vec(), dx)?);
                acc(node.inputs[1], Tensor::new(w.shape().to_vec(), dw)?);
                if node.inputs.len() == 3 {
                    let mut db = vec![0.0; d_out];
                    for r in 0..rows {
                        for o in 0..d_out {
                            db[o] += g.data()[r * d_out + o];
                        }
                    }
                    acc(node.inputs[2], Tensor::new(vec![d_out], db)?);
                }
            }
            Op::Softmax { axis } => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.shape());
                for_each_lane(y.shape(), *axis, |lane| {
                    let dot: f64 = lane.iter().map(|&i| g.data()[i] * y.data()[i]).sum();
                    for &i in lane {
                        dx.data_mut()[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                });
                acc(node.inputs[0], dx);
            }
            Op::LayerNorm { eps } => {
                let x = val(node.inputs[0]);
                let gamma = val(node.inputs[1]);
                let d = *x.shape().last().unwrap();
                let rows = x.len() / d;
                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let xr = &x.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
                    let ghat: Vec<f64> = (0..d).map(|j| gr[j] * gamma.data()[j]).collect();
                    let mean_ghat = ghat.iter().sum::<f64>() / d as f64;
                    let mean_gx = ghat
                        .iter()
                        .zip(&xhat)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dx[r * d + j] = inv * (ghat[j] - mean_ghat - xhat[j] * mean_gx);
                    }
                }
                acc(node.inputs[0], Tensor::new(x.shape().to_vec(), dx)?);
                acc(node.inputs[1], Tensor::new(vec![d], dgamma)?);
                acc(node.inputs[2], Tensor::new(vec![d], dbeta)?);
            }
            Op::Conv2d { pad } => {
                let x = val(node.inputs[0]);
                let w = val(node.inputs[1]);
                let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, _, kh, kw) = (
                    w.shape()[0],
                    w.shape()[1],
                    w.shape()[2],
                    w.shape()[3],
                );
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let p = *pad as isize;
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                for o in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[(o * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..cin {
                                for u in 0..kh {
                                    let iy = oy as isize + u as isize - p;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for v in 0..kw {
                                        let ix = ox as isize + v as isize - p;
                                        if ix < 0 || ix >= wid as isize {
                                            continue;
                                        }
                                        let xi = (c * h + iy as usize) * wid + ix as usize;
                                        let wi = ((o * cin + c) * kh + u) * kw + v;
                                        dx[xi] += go * w.data()[wi];
                                        dw[wi] += go * x.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(node.inputs[0], Tensor::new(x.shape().to_vec(), dx)?);
                acc(node.inputs[1], Tensor::new(w.shape().to_vec(), dw)?);
                if node.inputs.len() == 3 {
                    let mut db = vec![0.0; cout];
                    for o in 0..cout {
                        db[o] = g.data()[o * oh * ow..(o + 1) * oh * ow].iter().sum();
                    }
                    acc(node.inputs[2], Tensor::new(vec![cout], db)?);
                }
            }
            Op::PixelShuffle { s } => {
                acc(node.inputs[0], pixel_unshuffle(g, *s)?);
            }
            Op::Warp { flow, boundary } => {
                let (gf, _, _) = warp_vjp(val(node.inputs[0]), flow, *boundary, g)?;
                acc(node.inputs[0], gf);
            }
            Op::IndexSelect { indices } => {
                let x = val(node.inputs[0]);
                let c = x.shape()[1];
                let mut dx = vec![0.0; x.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for k in 0..c {
                        dx[i * c + k] += g.data()[r * c + k];
                    }
                }
                acc(node.inputs[0], Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::ConcatRows => {
                let mut start = 0;
                for &p in &node.inputs {
                    let rows = val(p).shape()[0];
                    let c = val(p).shape()[1];
                    let part = Tensor::new(
                        vec![rows, c],
                        g.data()[start * c..(start + rows) * c].to_vec(),
                    )?;
                    acc(p, part);
                    start += rows;
                }
            }
            Op::SliceRows { start, len } => {
                let x = val(node.inputs[0]);
                let c = x.shape()[1];
                let mut dx = vec![0.0; x.len()];
                dx[start * c..(start + len) * c].copy_from_slice(g.data());
                acc(node.inputs[0], Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::ConcatCols => {
                let r = val(node.inputs[0]).shape()[0];
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in &node.inputs {
                    let wi = val(p).shape()[1];
                    let mut part = vec![0.0; r * wi];
                    for row in 0..r {
                        part[row * wi..(row + 1) * wi]
                            .copy_from_slice(&g.data()[row * total + col..row * total + col + wi]);
                    }
                    acc(p, Tensor::new(vec![r, wi], part)?);
                    col += wi;
                }
            }
            Op::SliceCols { start, len } => {
                let x = val(node.inputs[0]);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; x.len()];
                for row in 0..r {
                    dx[row * c + start..row * c + start + len]
                        .copy_from_slice(&g.data()[row * len..(row + 1) * len]);
                }
                acc(node.inputs[0], Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::MatMul => {
                // y = A B: dA = g B^T, dB = A^T g.
                let a = val(node.inputs[0]);
                let b = val(node.inputs[1]);
                acc(node.inputs[0], matmul(g, b, true));
                acc(node.inputs[1], matmul_tn(a, g));
            }
            Op::MatMulNT => {
                // y = A B^T: dA = g B, dB = g^T A.
                let a = val(node.inputs[0]);
                let b = val(node.inputs[1]);
                acc(node.inputs[0], matmul(g, b, false));
                acc(node.inputs[1], matmul_tn(g, a));
            }
            Op::Reshape => {
                let x = val(node.inputs[0]);
                acc(node.inputs[0], g.reshape(x.shape())?);
            }
            Op::ChwToTokens => {
                let x = val(node.inputs[0]);
                acc(node.inputs[0], tokens_to_chw(g, x.shape()[1], x.shape()[2])?);
            }
            Op::TokensToChw => {
                acc(node.inputs[0], chw_to_tokens(g)?);
            }
            Op::SumAll => {
                let x = val(node.inputs[0]);
                acc(node.inputs[0], Tensor::full(x.shape(), g.item()));
            }
            Op::MeanAll => {
                let x = val(node.inputs[0]);
                acc(node.inputs[0], Tensor::full(x.shape(), g.item() / x.len() as f64));
            }
            Op::SelectiveScan { h } => {
                let d_skip = node.inputs.get(5).map(|&id| val(id));
                let grads_out = selective_scan_vjp(
                    val(node.inputs[0]),
                    val(node.inputs[1]),
                    val(node.inputs[2]),
                    val(node.inputs[3]),
                    val(node.inputs[4]),
                    d_skip,
                    h,
                    g,
                )?;
                acc(node.inputs[0], grads_out.x);
                acc(node.inputs[1], grads_out.delta);
                acc(node.inputs[2], grads_out.a);
                acc(node.inputs[3], grads_out.b);
                acc(node.inputs[4], grads_out.c);
                if let (Some(&id), Some(gd)) = (node.inputs.get(5), grads_out.d_skip) {
                    acc(id, gd);
                }
            }
        }
        Ok(())
    }
}

/// `A B` (or `A B^T` when `b_transposed`).
fn matmul(a: &Tensor, b: &Tensor, b_transposed: bool) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = if b_transposed { b.shape()[0] } else { b.shape()[1] };
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                let bv = if b_transposed {
                    b.data()[j * k + t]
                } else {
                    b.data()[t * m + j]
                };
                acc += a.data()[i * k + t] * bv;
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(vec![n, m], out).expect("shape consistent")
}

/// `A^T B` for `A: [k,n]`, `B: [k,m]`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0; n * m];
    for t in 0..k {
        for i in 0..n {
            let av = a.data()[t * n + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += av * b.data()[t * m + j];
            }
        }
    }
    Tensor::new(vec![n, m], out).expect("shape consistent")
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Max coordinates probed per input; larger inputs are subsampled.
    pub budget: usize,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            budget: 256,
            seed: 0,
        }
    }
}

/// Worst relative errors found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(input name, worst relative error)` per checked input.
    pub per_input: Vec<(String, f64)>,
    pub worst: f64,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, err) in &self.per_input {
            s.push_str(&format!("{name:<24} {err:.3e}\n"));
        }
        s.push_str(&format!("{:<24} {:.3e}\n", "worst", self.worst));
        s
    }
}

/// Compares the tape gradient of `build` against central differences.
///
/// `build` receives a fresh tape plus one leaf per entry of `inputs` and
/// must return a scalar loss node. The relative error metric is
/// `|g_a - g_n| / max(1, |g_a|, |g_n|)`.
pub fn grad_check(
    inputs: &[(&str, Tensor)],
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let eval = |tensors: &[Tensor]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.input(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok((tape, loss, ids))
    };

    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (tape, loss, ids) = eval(&base)?;
    let grads = tape.backward(loss)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_input = Vec::new();
    let mut worst = 0.0f64;
    for (slot, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = grads[ids[slot].index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let mut coords: Vec<usize> = (0..tensor.len()).collect();
        if coords.len() > cfg.budget {
            coords.shuffle(&mut rng);
            coords.truncate(cfg.budget);
        }
        let mut worst_here = 0.0f64;
        for &ci in &coords {
            let probe = |s: f64| -> Result<f64> {
                let mut t2 = base.clone();
                t2[slot].data_mut()[ci] += s;
                let (tape, loss, _) = eval(&t2)?;
                Ok(tape.value(loss).item())
            };
            let numeric = (probe(cfg.step)? - probe(-cfg.step)?) / (2.0 * cfg.step);
            let got = analytic.data()[ci];
            let rel = (got - numeric).abs() / 1.0f64.max(got.abs()).max(numeric.abs());
            worst_here = worst_here.max(rel);
        }
        worst = worst.max(worst_here);
        per_input.push((name.to_string(), worst_here));
    }
    Ok(GradCheckReport { per_input, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn randt(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn check(
        inputs: &[(&str, Tensor)],
        build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
        tol: f64,
    ) {
        let report = grad_check(inputs, build, &GradCheckConfig::default()).unwrap();
        assert!(report.worst < tol, "gradients off:\n{}", report.render());
    }

    #[test]
    fn elementwise_chain() {
        check(
            &[("a", randt(&[3, 4], 1)), ("b", randt(&[3, 4], 2))],
            |t, ids| {
                let m = t.mul(ids[0], ids[1])?;
                let s = t.sigmoid(m);
                let e = t.exp(s);
                let g = t.gelu(e);
                let sq = t.square(g);
                let sp = t.softplus(sq);
                let sc = t.scale(sp, 0.7);
                let ac = t.add_const(sc, 0.1);
                let r = t.sqrt(ac);
                Ok(t.mean_all(r))
            },
            1e-7,
        );
    }

    #[test]
    fn add_sub_sum() {
        check(
            &[("a", randt(&[5], 3)), ("b", randt(&[5], 4))],
            |t, ids| {
                let s = t.add(ids[0], ids[1])?;
                let d = t.sub(s, ids[1])?;
                let m = t.mul(d, s)?;
                Ok(t.sum_all(m))
            },
            1e-8,
        );
    }

    #[test]
    fn linear_layer_gradients() {
        check(
            &[
                ("x", randt(&[4, 3], 5)),
                ("w", randt(&[6, 3], 6)),
                ("b", randt(&[6], 7)),
            ],
            |t, ids| {
                let y = t.linear(ids[0], ids[1], Some(ids[2]))?;
                let g = t.gelu(y);
                Ok(t.mean_all(g))
            },
            1e-7,
        );
    }

    #[test]
    fn softmax_and_matmul_gradients() {
        check(
            &[("q", randt(&[4, 3], 8)), ("k", randt(&[5, 3], 9)), ("v", randt(&[5, 3], 10))],
            |t, ids| {
                let scores = t.matmul_nt(ids[0], ids[1])?;
                let scaled = t.scale(scores, 1.0 / (3.0f64).sqrt());
                let attn = t.softmax(scaled, 1)?;
                let out = t.matmul(attn, ids[2])?;
                let sq = t.square(out);
                Ok(t.mean_all(sq))
            },
            1e-7,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        check(
            &[
                ("x", randt(&[6, 8], 11)),
                ("gamma", randt(&[8], 12)),
                ("beta", randt(&[8], 13)),
            ],
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = t.square(y);
                Ok(t.mean_all(sq))
            },
            1e-6,
        );
    }

    #[test]
    fn conv_and_pixel_shuffle_gradients() {
        check(
            &[
                ("x", randt(&[2, 5, 5], 14)),
                ("w", randt(&[4, 2, 3, 3], 15)),
                ("b", randt(&[4], 16)),
            ],
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 1)?;
                let ps = t.pixel_shuffle(y, 2)?;
                let sq = t.square(ps);
                Ok(t.mean_all(sq))
            },
            1e-7,
        );
    }

    #[test]
    fn warp_gradients_away_from_cell_edges() {
        // Fractional flow keeps sample points off the bilinear lattice, so
        // the warp is differentiable at every probe.
        let flow = FlowField::translation(5, 5, 0.37, -0.41);
        check(
            &[("x", randt(&[2, 5, 5], 17))],
            move |t, ids| {
                let w = t.warp(ids[0], &flow, Boundary::Replicate)?;
                let sq = t.square(w);
                Ok(t.mean_all(sq))
            },
            1e-7,
        );
    }

    #[test]
    fn splicing_gradients() {
        check(
            &[("a", randt(&[4, 6], 18)), ("b", randt(&[3, 6], 19))],
            |t, ids| {
                let cat = t.concat_rows(&[ids[0], ids[1]])?;
                let perm: Vec<usize> = (0..7).rev().collect();
                let sel = t.index_select(cat, &perm)?;
                let sl = t.slice_rows(sel, 1, 5)?;
                let c1 = t.slice_cols(sl, 0, 3)?;
                let c2 = t.slice_cols(sl, 3, 3)?;
                let cc = t.concat_cols(&[c2, c1])?;
                let sq = t.square(cc);
                Ok(t.mean_all(sq))
            },
            1e-8,
        );
    }

    #[test]
    fn index_select_accumulates_repeated_rows() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let sel = tape.index_select(x, &[0, 0, 1]).unwrap();
        let loss = tape.sum_all(sel);
        let grads = tape.backward(loss).unwrap();
        let gx = grads[x.index()].as_ref().unwrap();
        assert_eq!(gx.data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn transpose_round_trip_gradients() {
        check(
            &[("x", randt(&[3, 4, 5], 20))],
            |t, ids| {
                let tok = t.chw_to_tokens(ids[0])?;
                let back = t.tokens_to_chw(tok, 4, 5)?;
                let r = t.reshape(back, &[60])?;
                let sq = t.square(r);
                Ok(t.mean_all(sq))
            },
            1e-8,
        );
    }

    #[test]
    fn selective_scan_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (l, d, n) = (8, 2, 3);
        let x = Tensor::from_shape_fn(&[l, d], |_| rng.gen_range(-1.0..1.0));
        let delta_pre = Tensor::from_shape_fn(&[l, d], |_| rng.gen_range(-2.0..0.5));
        let a = Tensor::from_shape_fn(&[d, n], |i| -((i[1] + 1) as f64));
        let b = Tensor::from_shape_fn(&[l, n], |_| rng.gen_range(-1.0..1.0));
        let c = Tensor::from_shape_fn(&[l, n], |_| rng.gen_range(-1.0..1.0));
        let ds = Tensor::from_shape_fn(&[d], |_| rng.gen_range(-0.5..0.5));
        check(
            &[
                ("x", x),
                ("delta_pre", delta_pre),
                ("a", a),
                ("b", b),
                ("c", c),
                ("d_skip", ds),
            ],
            |t, ids| {
                // softplus keeps delta positive, as the model does.
                let delta = t.softplus(ids[1]);
                let y = t.selective_scan(ids[0], delta, ids[2], ids[3], ids[4], Some(ids[5]))?;
                let sq = t.square(y);
                Ok(t.mean_all(sq))
            },
            1e-6,
        );
    }

    #[test]
    fn charbonnier_matches_manual_loss() {
        let a = randt(&[3, 3], 22);
        let b = randt(&[3, 3], 23);
        let mut tape = Tape::new();
        let ia = tape.input(a.clone());
        let ib = tape.input(b.clone());
        let loss = tape.charbonnier(ia, ib, 1e-6).unwrap();
        let want = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| ((x - y) * (x - y) + 1e-12).sqrt())
            .sum::<f64>()
            / 9.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-15);

        check(
            &[("a", a), ("b", b)],
            |t, ids| t.charbonnier(ids[0], ids[1], 1e-3),
            1e-7,
        );
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(randt(&[2, 2], 24));
        let y = tape.square(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // f(x) = sum(x * x) via two paths sharing x.
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        let gx = grads[x.index()].as_ref().unwrap();
        assert_eq!(gx.data(), &[6.0, -4.0]);
    }

    #[test]
    fn parallel_scan_tape_matches_sequential() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(25);
        let (l, d, n) = (33, 3, 4);
        let mk = |tape: &mut Tape| -> (NodeId, NodeId) {
            let x = tape.input(Tensor::from_shape_fn(&[l, d], |i| {
                ((i[0] * d + i[1]) as f64 * 0.618).sin()
            }));
            let delta = tape.input(Tensor::from_shape_fn(&[l, d], |i| {
                0.05 + 0.2 * (((i[0] + i[1]) % 7) as f64 / 7.0)
            }));
            let a = tape.input(Tensor::from_shape_fn(&[d, n], |i| -((i[1] + 1) as f64)));
            let b = tape.input(Tensor::from_shape_fn(&[l, n], |i| {
                ((i[0] + 2 * i[1]) as f64 * 0.377).cos()
            }));
            let c = tape.input(Tensor::from_shape_fn(&[l, n], |i| {
                ((3 * i[0] + i[1]) as f64 * 0.271).sin()
            }));
            let y = tape.selective_scan(x, delta, a, b, c, None).unwrap();
            (x, y)
        };
        let _ = &mut rng;
        let mut t1 = Tape::new();
        let (_, y1) = mk(&mut t1);
        let mut t2 = Tape::new();
        t2.parallel_scan = true;
        let (_, y2) = mk(&mut t2);
        assert!(t1.value(y1).max_abs_diff(t2.value(y2)) < 1e-10);
    }
}
