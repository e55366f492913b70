//! Reverse-mode differentiation on a flat operation tape.
//!
//! Every forward op appends a record; `backward` walks the records once in
//! reverse and accumulates gradients into every node. Leaves are inserted
//! with [`Tape::leaf`]; their buffers are shared with the caller's tensors
//! via `Arc`, so binding parameters to a tape is cheap.
//!
//! A tape is single-threaded. Independent tapes (one per sample) can run on
//! different threads concurrently.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// How the operands of an elementwise multiply line up.
#[derive(Clone, Copy, Debug)]
enum MulMode {
    /// Equal shapes.
    Same,
    /// `map` is `1 x h x w`, broadcast across the channels of `full`.
    Spatial { full: NodeId, map: NodeId },
    /// `scalar` has a single element, broadcast everywhere.
    Scalar { full: NodeId, scalar: NodeId },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
    },
    Linear {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul {
        a: NodeId,
        b: NodeId,
        mode: MulMode,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    AddConst {
        x: NodeId,
        offset: f64,
    },
    MeanAll(NodeId),
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf node, sharing its buffer.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` with respect to `id`, if computed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        id
    }

    fn chw(&self, what: &str, id: NodeId) -> Result<(usize, usize, usize)> {
        match *self.shape(id) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::ShapeMismatch(format!(
                "{what}: expected a c x h x w tensor, got {s:?}"
            ))),
        }
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// 2-D convolution with zero "same" padding; spatial dims are preserved.
    ///
    /// `kernel` is `c_out x c_in x kh x kw` with odd `kh`, `kw`; `bias`, when
    /// present, has one value per output channel.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (c_in, h, w) = self.chw("conv2d input", x)?;
        let kshape = self.shape(kernel);
        let [c_out, kc_in, kh, kw] = match *kshape {
            [a, b, c, d] => [a, b, c, d],
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d kernel: expected c_out x c_in x kh x kw, got {s:?}"
                )))
            }
        };
        if kc_in != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {c_in} channels but kernel expects {kc_in}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel dims must be odd, got {kh}x{kw}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d bias: expected [{c_out}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data().to_vec()),
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
        );
        let value = Tensor::from_buffer(vec![c_out, h, w], Arc::new(out));
        Ok(self.push(value, Op::Conv2d { x, kernel, bias }))
    }

    /// Fully connected layer: `y = weight . x + bias`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let p = self.value(x).numel();
        let [q, wp] = match *self.shape(weight) {
            [a, b] => [a, b],
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "linear weight: expected q x p, got {s:?}"
                )))
            }
        };
        if wp != p {
            return Err(Error::ShapeMismatch(format!(
                "linear: input length {p} but weight expects {wp}"
            )));
        }
        if self.shape(bias) != [q] {
            return Err(Error::ShapeMismatch(format!(
                "linear bias: expected [{q}], got {:?}",
                self.shape(bias)
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = bv.to_vec();
        for (row, o) in out.iter_mut().enumerate() {
            let wrow = &wv[row * p..(row + 1) * p];
            *o += dot(wrow, xv);
        }
        let value = Tensor::from_buffer(vec![q], Arc::new(out));
        Ok(self.push(value, Op::Linear { x, weight, bias }))
    }

    /// Stacks `b`'s channels after `a`'s; either side may have zero channels.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (c1, h, w) = self.chw("concat lhs", a)?;
        let (c2, h2, w2) = self.chw("concat rhs", b)?;
        if (h, w) != (h2, w2) {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels: spatial dims {h}x{w} vs {h2}x{w2}"
            )));
        }
        let mut out = Vec::with_capacity((c1 + c2) * h * w);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let value = Tensor::from_buffer(vec![c1 + c2, h, w], Arc::new(out));
        Ok(self.push(value, Op::ConcatChannels { a, b }))
    }

    /// Concatenates a non-empty list of `c x h x w` nodes along channels.
    pub fn concat_all(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = ids
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("concat_all: empty list".into()))?;
        let mut acc = first;
        for &id in rest {
            acc = self.concat_channels(acc, id)?;
        }
        Ok(acc)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_buffer(self.shape(x).to_vec(), Arc::new(out));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        let value = Tensor::from_buffer(self.shape(x).to_vec(), Arc::new(out));
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_buffer(self.shape(x).to_vec(), Arc::new(out));
        self.push(value, Op::Relu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_buffer(self.shape(a).to_vec(), Arc::new(out));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same_shape("sub", self.value(a), self.value(b))?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_buffer(self.shape(a).to_vec(), Arc::new(out));
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise multiply. Besides equal shapes this accepts a `1 x h x w`
    /// spatial map against a `c x h x w` tensor (attention reweighting) and a
    /// one-element scalar against anything (fusion weights).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mode = if sa == sb {
            MulMode::Same
        } else if self.value(b).numel() == 1 {
            MulMode::Scalar { full: a, scalar: b }
        } else if self.value(a).numel() == 1 {
            MulMode::Scalar { full: b, scalar: a }
        } else if let ([c, h, w], [1, mh, mw]) = (&sa[..], &sb[..]) {
            let _ = c;
            if (h, w) != (mh, mw) {
                return Err(Error::ShapeMismatch(format!(
                    "mul broadcast: {sa:?} vs {sb:?}"
                )));
            }
            MulMode::Spatial { full: a, map: b }
        } else if let ([1, mh, mw], [c, h, w]) = (&sa[..], &sb[..]) {
            let _ = c;
            if (h, w) != (mh, mw) {
                return Err(Error::ShapeMismatch(format!(
                    "mul broadcast: {sa:?} vs {sb:?}"
                )));
            }
            MulMode::Spatial { full: b, map: a }
        } else {
            return Err(Error::ShapeMismatch(format!(
                "mul: incompatible shapes {sa:?} vs {sb:?}"
            )));
        };

        let out = match mode {
            MulMode::Same => self
                .value(a)
                .iter()
                .zip(self.value(b).iter())
                .map(|(x, y)| x * y)
                .collect::<Vec<_>>(),
            MulMode::Scalar { full, scalar } => {
                let s = self.value(scalar).data()[0];
                self.value(full).iter().map(|x| x * s).collect()
            }
            MulMode::Spatial { full, map } => {
                let (_, h, w) = self.chw("mul full operand", full)?;
                let plane = h * w;
                let m = self.value(map).data();
                self.value(full)
                    .data()
                    .chunks_exact(plane)
                    .flat_map(|ch| ch.iter().zip(m.iter()).map(|(x, y)| x * y))
                    .collect()
            }
        };
        let shape = match mode {
            MulMode::Same => self.shape(a).to_vec(),
            MulMode::Scalar { full, .. } | MulMode::Spatial { full, .. } => {
                self.shape(full).to_vec()
            }
        };
        let value = Tensor::from_buffer(shape, Arc::new(out));
        Ok(self.push(value, Op::Mul { a, b, mode }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        let value = Tensor::from_buffer(self.shape(x).to_vec(), Arc::new(out));
        self.push(value, Op::Scale { x, factor })
    }

    pub fn add_const(&mut self, x: NodeId, offset: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| v + offset).collect();
        let value = Tensor::from_buffer(self.shape(x).to_vec(), Arc::new(out));
        self.push(value, Op::AddConst { x, offset })
    }

    /// `1 - x`, used for the complementary fusion weight.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let neg = self.scale(x, -1.0);
        self.add_const(neg, 1.0)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let sum: f64 = self.value(x).iter().sum();
        let value = Tensor::from_buffer(vec![1], Arc::new(vec![sum / n]));
        self.push(value, Op::MeanAll(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {:?} has {} elements, target {shape:?} has {numel}",
                self.shape(x),
                self.value(x).numel()
            )));
        }
        let value = Tensor::from_buffer(shape, Arc::clone(self.value(x).buffer()));
        Ok(self.push(value, Op::Reshape(x)))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulates `d loss / d node` into every node's grad slot.
    ///
    /// `loss` must be a scalar. Gradients of a node used in several places
    /// sum; leaves not reachable from `loss` keep an all-zero gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = Some(vec![0.0; node.value.numel()]);
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, kernel, bias } => {
                    let g = self.take_grad(i);
                    let [c_out, c_in, kh, kw] = match *self.shape(kernel) {
                        [a, b, c, d] => [a, b, c, d],
                        _ => unreachable!(),
                    };
                    let (_, h, w) = self.chw("conv2d", x).expect("checked in forward");
                    let (dx, dk, db) = conv2d_backward(
                        &g,
                        self.value(x).data(),
                        self.value(kernel).data(),
                        c_in,
                        h,
                        w,
                        c_out,
                        kh,
                        kw,
                    );
                    self.accumulate(x, &dx);
                    self.accumulate(kernel, &dk);
                    if let Some(b) = bias {
                        self.accumulate(b, &db);
                    }
                    self.put_grad(i, g);
                }
                Op::Linear { x, weight, bias } => {
                    let g = self.take_grad(i);
                    let p = self.value(x).numel();
                    let q = g.len();
                    let xv = self.value(x).data().to_vec();
                    let wv = self.value(weight).data();
                    let mut dx = vec![0.0; p];
                    let mut dw = vec![0.0; q * p];
                    for row in 0..q {
                        let gq = g[row];
                        let wrow = &wv[row * p..(row + 1) * p];
                        let dwrow = &mut dw[row * p..(row + 1) * p];
                        for j in 0..p {
                            dx[j] += gq * wrow[j];
                            dwrow[j] = gq * xv[j];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(weight, &dw);
                    self.accumulate(bias, &g);
                    self.put_grad(i, g);
                }
                Op::ConcatChannels { a, b } => {
                    let g = self.take_grad(i);
                    let na = self.value(a).numel();
                    self.accumulate(a, &g[..na]);
                    self.accumulate(b, &g[na..]);
                    self.put_grad(i, g);
                }
                Op::Sigmoid(x) => {
                    let g = self.take_grad(i);
                    let dg: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[i].value.iter())
                        .map(|(gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    self.accumulate(x, &dg);
                    self.put_grad(i, g);
                }
                Op::Tanh(x) => {
                    let g = self.take_grad(i);
                    let dg: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[i].value.iter())
                        .map(|(gv, &t)| gv * (1.0 - t * t))
                        .collect();
                    self.accumulate(x, &dg);
                    self.put_grad(i, g);
                }
                Op::Relu(x) => {
                    let g = self.take_grad(i);
                    let dg: Vec<f64> = g
                        .iter()
                        .zip(self.value(x).iter())
                        .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dg);
                    self.put_grad(i, g);
                }
                Op::Add(a, b) => {
                    let g = self.take_grad(i);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                    self.put_grad(i, g);
                }
                Op::Sub(a, b) => {
                    let g = self.take_grad(i);
                    self.accumulate(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                    self.put_grad(i, g);
                }
                Op::Mul { a, b, mode } => {
                    let g = self.take_grad(i);
                    match mode {
                        MulMode::Same => {
                            let da: Vec<f64> = g
                                .iter()
                                .zip(self.value(b).iter())
                                .map(|(gv, y)| gv * y)
                                .collect();
                            let db: Vec<f64> = g
                                .iter()
                                .zip(self.value(a).iter())
                                .map(|(gv, x)| gv * x)
                                .collect();
                            self.accumulate(a, &da);
                            self.accumulate(b, &db);
                        }
                        MulMode::Scalar { full, scalar } => {
                            let s = self.value(scalar).data()[0];
                            let dfull: Vec<f64> = g.iter().map(|gv| gv * s).collect();
                            let ds: f64 = g
                                .iter()
                                .zip(self.value(full).iter())
                                .map(|(gv, x)| gv * x)
                                .sum();
                            self.accumulate(full, &dfull);
                            self.accumulate(scalar, &[ds]);
                        }
                        MulMode::Spatial { full, map } => {
                            let (_, h, w) = self.chw("mul", full).expect("checked in forward");
                            let plane = h * w;
                            let m = self.value(map).data();
                            let fv = self.value(full).data();
                            let mut dfull = vec![0.0; fv.len()];
                            let mut dmap = vec![0.0; plane];
                            for (ci, gch) in g.chunks_exact(plane).enumerate() {
                                let fch = &fv[ci * plane..(ci + 1) * plane];
                                let dch = &mut dfull[ci * plane..(ci + 1) * plane];
                                for j in 0..plane {
                                    dch[j] = gch[j] * m[j];
                                    dmap[j] += gch[j] * fch[j];
                                }
                            }
                            self.accumulate(full, &dfull);
                            self.accumulate(map, &dmap);
                        }
                    }
                    self.put_grad(i, g);
                }
                Op::Scale { x, factor } => {
                    let g = self.take_grad(i);
                    let dg: Vec<f64> = g.iter().map(|gv| gv * factor).collect();
                    self.accumulate(x, &dg);
                    self.put_grad(i, g);
                }
                Op::AddConst { x, .. } => {
                    let g = self.take_grad(i);
                    self.accumulate(x, &g);
                    self.put_grad(i, g);
                }
                Op::MeanAll(x) => {
                    let g = self.take_grad(i);
                    let n = self.value(x).numel() as f64;
                    let per = g[0] / n;
                    let dg = vec![per; self.value(x).numel()];
                    self.accumulate(x, &dg);
                    self.put_grad(i, g);
                }
                Op::Reshape(x) => {
                    let g = self.take_grad(i);
                    self.accumulate(x, &g);
                    self.put_grad(i, g);
                }
            }
        }
        Ok(())
    }

    fn take_grad(&mut self, i: usize) -> Vec<f64> {
        self.nodes[i].grad.take().expect("grad allocated by backward")
    }

    fn put_grad(&mut self, i: usize, g: Vec<f64>) {
        self.nodes[i].grad = Some(g);
    }

    fn accumulate(&mut self, id: NodeId, add: &[f64]) {
        let g = self.nodes[id.0]
            .grad
            .as_mut()
            .expect("grad allocated by backward");
        debug_assert_eq!(g.len(), add.len());
        for (dst, src) in g.iter_mut().zip(add) {
            *dst += src;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct convolution, organized as shifted-row AXPY passes per kernel tap so
/// the inner loop stays contiguous.
#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    bias: Option<Vec<f64>>,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    let plane = h * w;
    let mut out = vec![0.0; c_out * plane];
    for o in 0..c_out {
        let out_o = &mut out[o * plane..(o + 1) * plane];
        if let Some(ref b) = bias {
            out_o.fill(b[o]);
        }
        for i in 0..c_in {
            let x_i = &x[i * plane..(i + 1) * plane];
            let k_oi = &k[(o * c_in + i) * kh * kw..(o * c_in + i + 1) * kh * kw];
            for dy in 0..kh {
                let y0 = ph.saturating_sub(dy);
                let y1 = (h + ph).saturating_sub(dy).min(h);
                for dx in 0..kw {
                    let wgt = k_oi[dy * kw + dx];
                    let x0 = pw.saturating_sub(dx);
                    let x1 = (w + pw).saturating_sub(dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = y + dy - ph;
                        let src = &x_i[sy * w + x0 + dx - pw..sy * w + x1 + dx - pw];
                        let dst = &mut out_o[y * w + x0..y * w + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    g: &[f64],
    x: &[f64],
    k: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    let plane = h * w;
    let mut dx = vec![0.0; c_in * plane];
    let mut dk = vec![0.0; c_out * c_in * kh * kw];
    let mut db = vec![0.0; c_out];
    for o in 0..c_out {
        let g_o = &g[o * plane..(o + 1) * plane];
        db[o] = g_o.iter().sum();
        for i in 0..c_in {
            let x_i = &x[i * plane..(i + 1) * plane];
            let dx_i = &mut dx[i * plane..(i + 1) * plane];
            let k_oi = &k[(o * c_in + i) * kh * kw..(o * c_in + i + 1) * kh * kw];
            let dk_oi = &mut dk[(o * c_in + i) * kh * kw..(o * c_in + i + 1) * kh * kw];
            for dy in 0..kh {
                let y0 = ph.saturating_sub(dy);
                let y1 = (h + ph).saturating_sub(dy).min(h);
                for dx_tap in 0..kw {
                    let wgt = k_oi[dy * kw + dx_tap];
                    let x0 = pw.saturating_sub(dx_tap);
                    let x1 = (w + pw).saturating_sub(dx_tap).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut tap_grad = 0.0;
                    for y in y0..y1 {
                        let sy = y + dy - ph;
                        let grow = &g_o[y * w + x0..y * w + x1];
                        let xrow = &x_i[sy * w + x0 + dx_tap - pw..sy * w + x1 + dx_tap - pw];
                        tap_grad += dot(grow, xrow);
                        let drow = &mut dx_i[sy * w + x0 + dx_tap - pw..sy * w + x1 + dx_tap - pw];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += wgt * gv;
                        }
                    }
                    dk_oi[dy * kw + dx_tap] += tap_grad;
                }
            }
        }
    }
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    /// Literal six-loop convolution used as an independent oracle.
    fn naive_conv(
        x: &Tensor,
        k: &Tensor,
        bias: &[f64],
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
    ) -> Vec<f64> {
        let ph = (kh as isize - 1) / 2;
        let pw = (kw as isize - 1) / 2;
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = bias[o];
                    for i in 0..c_in {
                        for dy in 0..kh as isize {
                            for dx in 0..kw as isize {
                                let sy = y + dy - ph;
                                let sx = xx + dx - pw;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[i * h * w + sy as usize * w + sx as usize];
                                let kv = k.data()
                                    [((o * c_in + i) * kh + dy as usize) * kw + dx as usize];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[o * h * w + y as usize * w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_1x1() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t3(1, 3, 3, (0..9).map(|v| v as f64).collect()));
        let k = tape.leaf(&Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, k, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t3(2, 4, 4, vec![1.5; 32]));
        let k = tape.leaf(&Tensor::zeros(vec![3, 2, 3, 3]));
        let b = tape.leaf(&Tensor::new(vec![3], vec![7.0, 7.0, 7.0]).unwrap());
        let y = tape.conv2d(x, k, Some(b)).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn conv_constant_ones_matches_six_loop_oracle() {
        let x = t3(1, 3, 3, vec![1.0; 9]);
        let k = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x);
        let kn = tape.leaf(&k);
        let bn = tape.leaf(&Tensor::zeros(vec![1]));
        let y = tape.conv2d(xn, kn, Some(bn)).unwrap();
        let expected = naive_conv(&x, &k, &[0.0], 1, 3, 3, 1, 3, 3);
        assert_eq!(tape.value(y).data(), &expected[..]);
        // center sees all 9 taps, corners see 4
        assert_eq!(tape.value(y).data()[4], 9.0);
        assert_eq!(tape.value(y).data()[0], 4.0);
        assert_eq!(tape.value(y).data()[8], 4.0);
    }

    #[test]
    fn conv_random_matches_six_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(c_in, c_out, h, w, kh, kw) in
            &[(2, 3, 4, 5, 3, 3), (1, 1, 1, 1, 3, 3), (3, 2, 5, 4, 1, 3)]
        {
            let x = t3(c_in, h, w, (0..c_in * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let k = Tensor::new(
                vec![c_out, c_in, kh, kw],
                (0..c_out * c_in * kh * kw)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap();
            let b: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let xn = tape.leaf(&x);
            let kn = tape.leaf(&k);
            let bn = tape.leaf(&Tensor::new(vec![c_out], b.clone()).unwrap());
            let y = tape.conv2d(xn, kn, Some(bn)).unwrap();
            let expected = naive_conv(&x, &k, &b, c_in, h, w, c_out, kh, kw);
            for (got, want) in tape.value(y).iter().zip(&expected) {
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 3, 3]));
        let k = tape.leaf(&Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(tape.conv2d(x, k, None).is_err());
    }

    #[test]
    fn linear_cases() {
        let mut tape = Tape::new();
        // identity weight, zero bias
        let x = tape.leaf(&Tensor::new(vec![2], vec![5.0, -3.0]).unwrap());
        let eye = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = tape.leaf(&Tensor::zeros(vec![2]));
        let y = tape.linear(x, eye, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -3.0]);
        // zero weight gives bias
        let zw = tape.leaf(&Tensor::zeros(vec![2, 2]));
        let b = tape.leaf(&Tensor::new(vec![2], vec![0.25, -4.0]).unwrap());
        let y = tape.linear(x, zw, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -4.0]);
        // [[1,2],[3,4]] . [1,1] = [3,7]
        let w = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = tape.leaf(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let y = tape.linear(ones, w, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
        // dimension mismatch
        let w3 = tape.leaf(&Tensor::zeros(vec![2, 3]));
        assert!(tape.linear(x, w3, zb).is_err());
    }

    #[test]
    fn concat_identity_and_slicing() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t3(2, 2, 2, (0..8).map(|v| v as f64).collect()));
        let empty = tape.leaf(&Tensor::zeros(vec![0, 2, 2]));
        let same = tape.concat_channels(a, empty).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(a).data());
        assert_eq!(tape.shape(same), &[2, 2, 2]);

        let b = tape.leaf(&t3(3, 2, 2, (100..112).map(|v| v as f64).collect()));
        let cat = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(cat), &[5, 2, 2]);
        // channel c1 of the result is b's channel 0
        assert_eq!(&tape.value(cat).data()[2 * 4..3 * 4], &tape.value(b).data()[..4]);

        let bad = tape.leaf(&Tensor::zeros(vec![1, 3, 2]));
        assert!(tape.concat_channels(a, bad).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![0.0, 0.0, -1.0]).unwrap());
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        let t = tape.tanh(x);
        assert_eq!(tape.value(t).data()[1], 0.0);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data()[2], 0.0);

        let a = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.value(sum).data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcast_mul_with_ones_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t3(3, 2, 2, (0..12).map(|v| v as f64 - 4.0).collect()));
        let ones = tape.leaf(&Tensor::full(vec![1, 2, 2], 1.0));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn broadcast_mul_spatial_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t3(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let m = tape.leaf(&t3(1, 1, 2, vec![10.0, 0.5]));
        let y = tape.mul(x, m).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 1.0, 30.0, 2.0]);
        let bad = tape.leaf(&Tensor::zeros(vec![2, 2, 3]));
        assert!(tape.mul(x, bad).is_err());
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let unused = tape.leaf(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_parameter_grads_accumulate() {
        // loss = x + x => dloss/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn reshape_passes_grad_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let r = tape.reshape(x, vec![2, 2]).unwrap();
        let loss = tape.mean_all(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
        assert!(tape.reshape(x, vec![3]).is_err());
    }
}
