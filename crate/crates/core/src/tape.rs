//! Reverse-mode automatic differentiation over 4-D tensors.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Each
//! operation appends a node holding the result data and a record of its
//! inputs; [`Tape::backward`] replays the records once, in reverse order,
//! accumulating gradients into every node that requires them. Handles are
//! plain indices ([`TensorId`]), so the graph is acyclic by construction
//! and inputs always precede their consumers.
//!
//! The op set is exactly what the network blocks need: convolution, ReLU,
//! sigmoid, broadcast add/sub/mul, channel concatenation, pixel
//! shuffle/unshuffle, nearest resize, global average pooling, per-pixel
//! channel statistics, and mean absolute error.
//!
//! A tape is single-threaded and single-shot: record, run `backward` at
//! most once, read gradients, drop. Independent tapes may live on
//! different threads.

use std::mem;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: TensorId, w: TensorId, b: TensorId, spec: ConvSpec },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    ConcatChannels { xs: Vec<TensorId> },
    PixelShuffle { x: TensorId },
    PixelUnshuffle { x: TensorId },
    NearestResize { x: TensorId },
    GlobalAvgPool { x: TensorId },
    /// `argmax` stores the winning channel per (n, y, x), lowest index on
    /// ties, recorded during the forward pass for gradient routing.
    ChannelStats { x: TensorId, argmax: Vec<u32> },
    L1Loss { a: TensorId, b: TensorId },
}

struct Node<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op,
}

/// How two operand shapes line up in a binary op.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Left operand is (N, C, 1, 1), right is full (N, C, H, W).
    LeftChannel,
    /// Right operand is (N, C, 1, 1).
    RightChannel,
    /// Left operand is (N, 1, H, W).
    LeftPixel,
    /// Right operand is (N, 1, H, W).
    RightPixel,
}

fn broadcast_kind(a: Shape, b: Shape) -> Result<(Broadcast, Shape)> {
    if a == b {
        return Ok((Broadcast::Same, a));
    }
    if a.n == b.n {
        if a.c == b.c && a.h == 1 && a.w == 1 {
            return Ok((Broadcast::LeftChannel, b));
        }
        if a.c == b.c && b.h == 1 && b.w == 1 {
            return Ok((Broadcast::RightChannel, a));
        }
        if a.c == 1 && a.h == b.h && a.w == b.w {
            return Ok((Broadcast::LeftPixel, b));
        }
        if b.c == 1 && a.h == b.h && a.w == b.w {
            return Ok((Broadcast::RightPixel, a));
        }
    }
    Err(Error::contract(format!(
        "shapes {a} and {b} are neither equal nor broadcastable as (N,C,1,1) or (N,1,H,W)"
    )))
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Shape, data: Vec<T>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.numel());
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record an input tensor. Gradients accumulate on it iff
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> TensorId {
        let shape = t.shape();
        self.push(shape, t.into_data(), requires_grad, Op::Leaf)
    }

    /// Record a constant (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> TensorId {
        self.leaf(t, false)
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> Tensor<T> {
        Tensor::from_vec(self.shape(id), self.data(id).to_vec()).expect("node data matches shape")
    }

    /// Value of a (1,1,1,1) tensor.
    pub fn scalar_value(&self, id: TensorId) -> T {
        assert!(self.shape(id).is_scalar(), "scalar_value on non-scalar tensor");
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ---- operations ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        let (cout, cin, k) = (ws.n, ws.c, ws.h);
        if ws.w != k {
            return Err(Error::contract(format!(
                "conv2d weight kernel must be square, got {}x{}",
                ws.h, ws.w
            )));
        }
        if k % 2 == 0 {
            return Err(Error::contract(format!("conv2d kernel size {k} must be odd")));
        }
        if xs.c != cin {
            return Err(Error::contract(format!(
                "conv2d input has {} channels but weight expects {cin}",
                xs.c
            )));
        }
        if bs != Shape::new(1, cout, 1, 1) {
            return Err(Error::contract(format!(
                "conv2d bias shape {bs} must be (1,{cout},1,1)"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        if xs.h + 2 * padding < k || xs.w + 2 * padding < k {
            return Err(Error::contract(format!(
                "conv2d kernel {k} exceeds padded input {}x{}",
                xs.h + 2 * padding,
                xs.w + 2 * padding
            )));
        }
        let spec = ConvSpec { cout, cin, k, stride, pad: padding };
        let (oh, ow) = spec.out_hw(xs.h, xs.w);
        let os = Shape::new(xs.n, cout, oh, ow);
        let mut out = vec![T::ZERO; os.numel()];
        kernels::conv2d_forward(
            &self.nodes[x.0].data,
            xs,
            &self.nodes[w.0].data,
            spec,
            &self.nodes[b.0].data,
            &mut out,
            os,
        );
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(os, out, rg, Op::Conv2d { x, w, b, spec }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x);
        let data = self.nodes[x.0].data.iter().map(|&v| v.max(T::ZERO)).collect();
        let rg = self.requires(x);
        self.push(shape, data, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x);
        let data = self
            .nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                // split by sign so exp never overflows
                if v >= T::ZERO {
                    T::ONE.add(v.neg().exp()).recip()
                } else {
                    let e = v.exp();
                    e.mul(T::ONE.add(e).recip())
                }
            })
            .collect();
        let rg = self.requires(x);
        self.push(shape, data, rg, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x.add(y), |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x.sub(y), |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x.mul(y), |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        op: impl Fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (kind, os) = broadcast_kind(sa, sb)?;
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut out = vec![T::ZERO; os.numel()];
        let plane = os.h * os.w;
        match kind {
            Broadcast::Same => {
                for ((o, &x), &y) in out.iter_mut().zip(av.iter()).zip(bv.iter()) {
                    *o = f(x, y);
                }
            }
            Broadcast::LeftChannel | Broadcast::RightChannel => {
                for n in 0..os.n {
                    for c in 0..os.c {
                        let p = (n * os.c + c) * plane;
                        if kind == Broadcast::LeftChannel {
                            let s = av[n * os.c + c];
                            for i in 0..plane {
                                out[p + i] = f(s, bv[p + i]);
                            }
                        } else {
                            let s = bv[n * os.c + c];
                            for i in 0..plane {
                                out[p + i] = f(av[p + i], s);
                            }
                        }
                    }
                }
            }
            Broadcast::LeftPixel | Broadcast::RightPixel => {
                for n in 0..os.n {
                    let small = n * plane;
                    for c in 0..os.c {
                        let p = (n * os.c + c) * plane;
                        if kind == Broadcast::LeftPixel {
                            for i in 0..plane {
                                out[p + i] = f(av[small + i], bv[p + i]);
                            }
                        } else {
                            for i in 0..plane {
                                out[p + i] = f(av[p + i], bv[small + i]);
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(os, out, rg, op(a, b)))
    }

    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::contract("concat_channels needs at least one input"));
        }
        let first = self.shape(xs[0]);
        let mut total_c = 0;
        for &id in xs {
            let s = self.shape(id);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::contract(format!(
                    "concat_channels input {s} does not match {first} on (N,H,W)"
                )));
            }
            total_c += s.c;
        }
        let os = Shape::new(first.n, total_c, first.h, first.w);
        let plane = os.h * os.w;
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..os.n {
            for &id in xs {
                let s = self.shape(id);
                out.extend_from_slice(&self.nodes[id.0].data[n * s.c * plane..(n + 1) * s.c * plane]);
            }
        }
        let rg = xs.iter().any(|&id| self.requires(id));
        Ok(self.push(os, out, rg, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    pub fn pixel_shuffle(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.c % 4 != 0 {
            return Err(Error::contract(format!(
                "pixel_shuffle needs channels divisible by 4, got {}",
                s.c
            )));
        }
        let os = Shape::new(s.n, s.c / 4, 2 * s.h, 2 * s.w);
        let out = shuffle_data(&self.nodes[x.0].data, s);
        let rg = self.requires(x);
        Ok(self.push(os, out, rg, Op::PixelShuffle { x }))
    }

    pub fn pixel_unshuffle(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::contract(format!(
                "pixel_unshuffle needs even spatial dims, got {}x{}",
                s.h, s.w
            )));
        }
        let os = Shape::new(s.n, s.c * 4, s.h / 2, s.w / 2);
        let out = unshuffle_data(&self.nodes[x.0].data, s);
        let rg = self.requires(x);
        Ok(self.push(os, out, rg, Op::PixelUnshuffle { x }))
    }

    /// Nearest-neighbour resize; the source index is
    /// `floor(dst * src_dim / out_dim)` per axis (exact integer math, and
    /// exact for integer scale factors).
    pub fn nearest_resize(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::contract("nearest_resize output dims must be positive"));
        }
        let s = self.shape(x);
        let os = Shape::new(s.n, s.c, out_h, out_w);
        let sx_table: Vec<usize> = (0..out_w).map(|ox| ox * s.w / out_w).collect();
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(os.numel());
        for p in 0..s.n * s.c {
            let plane = &src[p * s.h * s.w..(p + 1) * s.h * s.w];
            for oy in 0..out_h {
                let srow = &plane[(oy * s.h / out_h) * s.w..][..s.w];
                out.extend(sx_table.iter().map(|&sx| srow[sx]));
            }
        }
        let rg = self.requires(x);
        Ok(self.push(os, out, rg, Op::NearestResize { x }))
    }

    /// Per-channel spatial mean, shape (N, C, 1, 1).
    pub fn global_avg_pool(&mut self, x: TensorId) -> TensorId {
        let s = self.shape(x);
        let os = Shape::new(s.n, s.c, 1, 1);
        let plane = s.h * s.w;
        let inv = T::from_f64(1.0 / plane as f64);
        let src = &self.nodes[x.0].data;
        let out: Vec<T> = (0..s.n * s.c)
            .map(|p| kernels::lane_sum(&src[p * plane..(p + 1) * plane]).mul(inv))
            .collect();
        let rg = self.requires(x);
        self.push(os, out, rg, Op::GlobalAvgPool { x })
    }

    /// Channel statistics map, shape (N, 2, H, W): channel 0 is the mean
    /// over C, channel 1 the max over C (gradient goes to the lowest
    /// winning channel index on ties).
    pub fn channel_stats(&mut self, x: TensorId) -> TensorId {
        let s = self.shape(x);
        let os = Shape::new(s.n, 2, s.h, s.w);
        let plane = s.h * s.w;
        let inv_c = T::from_f64(1.0 / s.c as f64);
        let src = &self.nodes[x.0].data;
        let mut out = vec![T::ZERO; os.numel()];
        let mut argmax = vec![0u32; s.n * plane];
        for n in 0..s.n {
            for i in 0..plane {
                let mut sum = T::ZERO;
                let mut best = src[(n * s.c) * plane + i];
                let mut best_c = 0u32;
                for c in 0..s.c {
                    let v = src[(n * s.c + c) * plane + i];
                    sum = sum.add(v);
                    if v > best {
                        best = v;
                        best_c = c as u32;
                    }
                }
                out[(n * 2) * plane + i] = sum.mul(inv_c);
                out[(n * 2 + 1) * plane + i] = best;
                argmax[n * plane + i] = best_c;
            }
        }
        let rg = self.requires(x);
        self.push(os, out, rg, Op::ChannelStats { x, argmax })
    }

    /// Mean absolute difference over all elements, returned as a scalar
    /// tensor. The subgradient of |.| at zero is taken as zero.
    pub fn l1_loss(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::contract(format!("l1_loss shapes differ: {sa} vs {sb}")));
        }
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let diffs: Vec<T> = av.iter().zip(bv.iter()).map(|(&x, &y)| x.sub(y).abs()).collect();
        let mean = kernels::lane_sum(&diffs).mul(T::from_f64(1.0 / sa.numel() as f64));
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Shape::scalar(), vec![mean], rg, Op::L1Loss { a, b }))
    }

    // ---- gradient machinery ---------------------------------------------

    /// Smallest distance to a non-differentiable point recorded anywhere
    /// on the tape: ReLU pre-activation magnitudes, channel-max winning
    /// margins, and L1 difference magnitudes. Used by gradient checks to
    /// resample inputs that sit too close to a kink. Must be called before
    /// `backward`.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in &self.nodes[x.0].data {
                        margin = margin.min(v.to_f64().abs());
                    }
                }
                Op::L1Loss { a, b } => {
                    let av = &self.nodes[a.0].data;
                    let bv = &self.nodes[b.0].data;
                    for (&x, &y) in av.iter().zip(bv.iter()) {
                        margin = margin.min(x.sub(y).to_f64().abs());
                    }
                }
                Op::ChannelStats { x, argmax } => {
                    let s = self.nodes[x.0].shape;
                    let plane = s.h * s.w;
                    let src = &self.nodes[x.0].data;
                    for n in 0..s.n {
                        for i in 0..plane {
                            let win = argmax[n * plane + i] as usize;
                            let wv = src[(n * s.c + win) * plane + i].to_f64();
                            for c in 0..s.c {
                                if c != win {
                                    let v = src[(n * s.c + c) * plane + i].to_f64();
                                    margin = margin.min(wv - v);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Hash of the activation pattern: ReLU sign bits, channel-max
    /// winners and L1 difference signs. Two evaluations with equal
    /// signatures lie in the same smooth region of the loss, which is
    /// what makes a finite difference between them trustworthy.
    pub fn kink_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01B3;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bit: u64| {
            h ^= bit;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in &self.nodes[x.0].data {
                        feed((*v > T::ZERO) as u64);
                    }
                }
                Op::L1Loss { a, b } => {
                    let av = &self.nodes[a.0].data;
                    let bv = &self.nodes[b.0].data;
                    for (&x, &y) in av.iter().zip(bv.iter()) {
                        feed(if x > y {
                            2
                        } else if x < y {
                            3
                        } else {
                            4
                        });
                    }
                }
                Op::ChannelStats { argmax, .. } => {
                    for &c in argmax {
                        feed(c as u64 + 5);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` ancestor; gradients from multiple consumers add.
    /// Consumes the op records: a tape can only run backward once.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.shape(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::contract("backward already ran on this tape"));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            let op = mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if matches!(op, Op::Leaf) {
                // keep leaf gradients readable after the pass
                self.nodes[i].grad = Some(gout);
                continue;
            }
            let os = self.nodes[i].shape;
            let (left, right) = self.nodes.split_at_mut(i);
            let own = &right[0];
            match &op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, spec } => {
                    let xs = left[x.0].shape;
                    if left[x.0].requires_grad {
                        let mut gx = vec![T::ZERO; xs.numel()];
                        kernels::conv2d_backward_input(&gout, os, &left[w.0].data, *spec, &mut gx, xs);
                        add_grad(left, x.0, gx);
                    }
                    if left[w.0].requires_grad || left[b.0].requires_grad {
                        let mut gw = vec![T::ZERO; left[w.0].shape.numel()];
                        let mut gb = vec![T::ZERO; spec.cout];
                        kernels::conv2d_backward_weights(
                            &left[x.0].data,
                            xs,
                            &gout,
                            os,
                            *spec,
                            &mut gw,
                            &mut gb,
                        );
                        if left[w.0].requires_grad {
                            add_grad(left, w.0, gw);
                        }
                        if left[b.0].requires_grad {
                            add_grad(left, b.0, gb);
                        }
                    }
                }
                Op::Relu { x } => {
                    if left[x.0].requires_grad {
                        let gx: Vec<T> = left[x.0]
                            .data
                            .iter()
                            .zip(gout.iter())
                            .map(|(&xv, &g)| if xv > T::ZERO { g } else { T::ZERO })
                            .collect();
                        add_grad(left, x.0, gx);
                    }
                }
                Op::Sigmoid { x } => {
                    if left[x.0].requires_grad {
                        let gx: Vec<T> = own
                            .data
                            .iter()
                            .zip(gout.iter())
                            .map(|(&y, &g)| g.mul(y).mul(T::ONE.sub(y)))
                            .collect();
                        add_grad(left, x.0, gx);
                    }
                }
                Op::Add { a, b } => {
                    if left[a.0].requires_grad {
                        let g = reduce_to(&gout, os, left[a.0].shape, |v| v);
                        add_grad(left, a.0, g);
                    }
                    if left[b.0].requires_grad {
                        let g = reduce_to(&gout, os, left[b.0].shape, |v| v);
                        add_grad(left, b.0, g);
                    }
                }
                Op::Sub { a, b } => {
                    if left[a.0].requires_grad {
                        let g = reduce_to(&gout, os, left[a.0].shape, |v| v);
                        add_grad(left, a.0, g);
                    }
                    if left[b.0].requires_grad {
                        let g = reduce_to(&gout, os, left[b.0].shape, |v: T| v.neg());
                        add_grad(left, b.0, g);
                    }
                }
                Op::Mul { a, b } => {
                    if left[a.0].requires_grad {
                        let prod = broadcast_mul(&gout, os, &left[b.0].data, left[b.0].shape);
                        let g = reduce_to(&prod, os, left[a.0].shape, |v| v);
                        add_grad(left, a.0, g);
                    }
                    if left[b.0].requires_grad {
                        let prod = broadcast_mul(&gout, os, &left[a.0].data, left[a.0].shape);
                        let g = reduce_to(&prod, os, left[b.0].shape, |v| v);
                        add_grad(left, b.0, g);
                    }
                }
                Op::ConcatChannels { xs } => {
                    let plane = os.h * os.w;
                    let mut c0 = 0;
                    for &xid in xs {
                        let s = left[xid.0].shape;
                        if left[xid.0].requires_grad {
                            let mut g = vec![T::ZERO; s.numel()];
                            for n in 0..os.n {
                                let src = &gout
                                    [(n * os.c + c0) * plane..(n * os.c + c0 + s.c) * plane];
                                g[n * s.c * plane..(n + 1) * s.c * plane].copy_from_slice(src);
                            }
                            add_grad(left, xid.0, g);
                        }
                        c0 += s.c;
                    }
                }
                Op::PixelShuffle { x } => {
                    if left[x.0].requires_grad {
                        add_grad(left, x.0, unshuffle_data(&gout, os));
                    }
                }
                Op::PixelUnshuffle { x } => {
                    if left[x.0].requires_grad {
                        add_grad(left, x.0, shuffle_data(&gout, os));
                    }
                }
                Op::NearestResize { x } => {
                    if left[x.0].requires_grad {
                        let s = left[x.0].shape;
                        let sx_table: Vec<usize> =
                            (0..os.w).map(|ox| ox * s.w / os.w).collect();
                        let mut g = vec![T::ZERO; s.numel()];
                        for p in 0..s.n * s.c {
                            let gplane = &mut g[p * s.h * s.w..(p + 1) * s.h * s.w];
                            let oplane = &gout[p * os.h * os.w..(p + 1) * os.h * os.w];
                            for oy in 0..os.h {
                                let grow = &mut gplane[(oy * s.h / os.h) * s.w..][..s.w];
                                let orow = &oplane[oy * os.w..(oy + 1) * os.w];
                                for (ox, &sx) in sx_table.iter().enumerate() {
                                    grow[sx] = grow[sx].add(orow[ox]);
                                }
                            }
                        }
                        add_grad(left, x.0, g);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if left[x.0].requires_grad {
                        let s = left[x.0].shape;
                        let plane = s.h * s.w;
                        let inv = T::from_f64(1.0 / plane as f64);
                        let mut g = vec![T::ZERO; s.numel()];
                        for p in 0..s.n * s.c {
                            let gv = gout[p].mul(inv);
                            g[p * plane..(p + 1) * plane].iter_mut().for_each(|v| *v = gv);
                        }
                        add_grad(left, x.0, g);
                    }
                }
                Op::ChannelStats { x, argmax } => {
                    if left[x.0].requires_grad {
                        let s = left[x.0].shape;
                        let plane = s.h * s.w;
                        let inv_c = T::from_f64(1.0 / s.c as f64);
                        let mut g = vec![T::ZERO; s.numel()];
                        for n in 0..s.n {
                            for i in 0..plane {
                                let gm = gout[(n * 2) * plane + i].mul(inv_c);
                                for c in 0..s.c {
                                    let gi = (n * s.c + c) * plane + i;
                                    g[gi] = g[gi].add(gm);
                                }
                                let win = argmax[n * plane + i] as usize;
                                let gi = (n * s.c + win) * plane + i;
                                g[gi] = g[gi].add(gout[(n * 2 + 1) * plane + i]);
                            }
                        }
                        add_grad(left, x.0, g);
                    }
                }
                Op::L1Loss { a, b } => {
                    let numel = left[a.0].shape.numel();
                    let scale = gout[0].mul(T::from_f64(1.0 / numel as f64));
                    let av = &left[a.0].data;
                    let bv = &left[b.0].data;
                    let sign: Vec<T> = av
                        .iter()
                        .zip(bv.iter())
                        .map(|(&x, &y)| {
                            if x > y {
                                scale
                            } else if x < y {
                                scale.neg()
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    if left[a.0].requires_grad {
                        add_grad(left, a.0, sign.clone());
                    }
                    if left[b.0].requires_grad {
                        add_grad(left, b.0, sign.iter().map(|&v| v.neg()).collect());
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_grad<T: Scalar>(nodes: &mut [Node<T>], idx: usize, contribution: Vec<T>) {
    debug_assert_eq!(contribution.len(), nodes[idx].shape.numel());
    match &mut nodes[idx].grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contribution) {
                *gi = gi.add(ci);
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Rearrangement out(n, c, 2h+i, 2w+j) = in(n, 4c + 2i + j, h, w).
fn shuffle_data<T: Scalar>(src: &[T], s: Shape) -> Vec<T> {
    let os = Shape::new(s.n, s.c / 4, 2 * s.h, 2 * s.w);
    let mut out = vec![T::ZERO; os.numel()];
    for n in 0..s.n {
        for oc in 0..os.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    for i in 0..2 {
                        for j in 0..2 {
                            out[os.offset(n, oc, 2 * y + i, 2 * x + j)] =
                                src[s.offset(n, oc * 4 + i * 2 + j, y, x)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`shuffle_data`].
fn unshuffle_data<T: Scalar>(src: &[T], s: Shape) -> Vec<T> {
    let os = Shape::new(s.n, s.c * 4, s.h / 2, s.w / 2);
    let mut out = vec![T::ZERO; os.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    for i in 0..2 {
                        for j in 0..2 {
                            out[os.offset(n, c * 4 + i * 2 + j, oy, ox)] =
                                src[s.offset(n, c, 2 * oy + i, 2 * ox + j)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Sum a full-size gradient down to a broadcast operand's shape (identity
/// when the shapes already match). `f` maps each element (used to negate
/// for subtraction).
fn reduce_to<T: Scalar>(g: &[T], gs: Shape, target: Shape, f: impl Fn(T) -> T) -> Vec<T> {
    let plane = gs.h * gs.w;
    if target == gs {
        return g.iter().map(|&v| f(v)).collect();
    }
    if target.h == 1 && target.w == 1 {
        // (N,C,1,1): sum over the spatial plane
        let mut out = vec![T::ZERO; target.numel()];
        for p in 0..gs.n * gs.c {
            out[p] = f(kernels::lane_sum(&g[p * plane..(p + 1) * plane]));
        }
        return out;
    }
    // (N,1,H,W): sum over channels
    debug_assert!(target.c == 1);
    let mut out = vec![T::ZERO; target.numel()];
    for n in 0..gs.n {
        for c in 0..gs.c {
            let src = &g[(n * gs.c + c) * plane..(n * gs.c + c + 1) * plane];
            let dst = &mut out[n * plane..(n + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = d.add(s);
            }
        }
    }
    for v in out.iter_mut() {
        *v = f(*v);
    }
    out
}

/// Elementwise product of a full-size gradient with a (possibly
/// broadcast) operand, in the full output shape.
fn broadcast_mul<T: Scalar>(g: &[T], gs: Shape, other: &[T], os: Shape) -> Vec<T> {
    let plane = gs.h * gs.w;
    let mut out = vec![T::ZERO; gs.numel()];
    if os == gs {
        for ((o, &gv), &ov) in out.iter_mut().zip(g.iter()).zip(other.iter()) {
            *o = gv.mul(ov);
        }
    } else if os.h == 1 && os.w == 1 {
        for n in 0..gs.n {
            for c in 0..gs.c {
                let s = other[n * gs.c + c];
                let p = (n * gs.c + c) * plane;
                for i in 0..plane {
                    out[p + i] = g[p + i].mul(s);
                }
            }
        }
    } else {
        debug_assert!(os.c == 1);
        for n in 0..gs.n {
            for c in 0..gs.c {
                let p = (n * gs.c + c) * plane;
                let q = n * plane;
                for i in 0..plane {
                    out[p + i] = g[p + i].mul(other[q + i]);
                }
            }
        }
    }
    out
}
