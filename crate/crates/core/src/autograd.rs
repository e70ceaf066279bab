//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so node order is a topological order
//! of the graph and `backward` simply walks the tape from the loss downwards.
//! Leaf gradients accumulate across `backward` calls; intermediate gradients
//! are rebuilt on each call.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Var, Var),
    Slice {
        input: Var,
        start: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    GlobalAvg(Var),
    GlobalMax {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        k: usize,
    },
    Sum(Var),
    /// Scalar output whose local gradients were computed in the forward pass.
    Fused(Vec<(Var, Vec<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(ParamId, Var)>,
    track_branches: bool,
    signature: u64,
}

const FNV_PRIME: u64 = 0x100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records every discrete choice (ReLU masks, max-pool winners, fused
    /// branch bits) into [`Tape::branch_signature`].
    pub fn with_branch_tracking() -> Self {
        Tape {
            track_branches: true,
            signature: 0xcbf2_9ce4_8422_2325,
            ..Self::default()
        }
    }

    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn mix(&mut self, word: u64) {
        if self.track_branches {
            self.signature = (self.signature ^ word).wrapping_mul(FNV_PRIME);
        }
    }

    /// Folds externally computed branch bits into the signature.
    pub fn mix_signature(&mut self, word: u64) {
        self.mix(word);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Binds a stored parameter as a gradient-tracking leaf, once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let mut t = store.tensor(id).clone();
        t.clear_grad();
        let v = self.leaf(t.with_requires_grad(true));
        self.bound.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).value.shape()
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) {
                n.value.clear_grad();
            }
        }
    }

    fn unary(&mut self, x: Var, data: Vec<f64>, shape: Shape, op: Op) -> Var {
        let rg = self.rg(x);
        let t = Tensor::from_vec(shape, data).expect("op output shape");
        self.push(t, op, rg)
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if sb == sa.channel_vector() {
            Ok(true)
        } else {
            Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb })
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let broadcast = self.check_broadcast(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s = ta.shape();
        let data = if broadcast {
            let plane = s.plane();
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i / plane]))
                .collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor::from_vec(s, data)
    }

    /// Elementwise sum; `b` may also be an N×C×1×1 channel vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise product; `b` may also be an N×C×1×1 channel vector.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        self.unary(x, data, t.shape(), Op::Scale(x, factor))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..sa.n {
            data.extend_from_slice(&da[n * la..][..la]);
            data.extend_from_slice(&db[n * lb..][..lb]);
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::from_vec(out, data)?;
        Ok(self.push(t, Op::Concat(a, b), rg))
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c {
            return Err(Error::InvalidShape {
                op: "slice_channels",
                msg: format!("channels [{start}, {}) out of range for {s}", start + len),
            });
        }
        let out = Shape::new(s.n, len, s.h, s.w);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..s.n {
            data.extend_from_slice(&d[(n * s.c + start) * s.plane()..][..len * s.plane()]);
        }
        Ok(self.unary(x, data, out, Op::Slice { input: x, start }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        self.unary(x, data, t.shape(), Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape();
        if self.track_branches {
            let words: Vec<u64> = t
                .data()
                .chunks(64)
                .map(|c| {
                    c.iter()
                        .enumerate()
                        .fold(0u64, |m, (i, &v)| m | (u64::from(v > 0.0) << i))
                })
                .collect();
            words.into_iter().for_each(|w| self.mix(w));
        }
        self.unary(x, data, shape, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.exp()).collect();
        self.unary(x, data, t.shape(), Op::Exp(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let data = t
            .data()
            .chunks(s.plane())
            .map(|p| p.iter().sum::<f64>() / p.len() as f64)
            .collect();
        self.unary(x, data, s.channel_vector(), Op::GlobalAvg(x))
    }

    /// Ties resolve to the first maximum in row-major order.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let mut argmax = Vec::with_capacity(s.n * s.c);
        let mut data = Vec::with_capacity(s.n * s.c);
        for p in t.data().chunks(s.plane()) {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            argmax.push(best);
            data.push(p[best]);
        }
        if self.track_branches {
            argmax.clone().into_iter().for_each(|i| self.mix(i as u64));
        }
        self.unary(x, data, s.channel_vector(), Op::GlobalMax { input: x, argmax })
    }

    /// 2×2 stride-2 average pooling; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::InvalidShape {
                op: "avg_pool2",
                msg: format!("odd spatial size {s}"),
            });
        }
        let data = kernels::avg_pool2_forward(self.value(x).data(), s);
        Ok(self.unary(x, data, Shape::new(s.n, s.c, s.h / 2, s.w / 2), Op::AvgPool2(x)))
    }

    /// Shape-preserving cross-correlation. `weight` is Cout×Cin×k×k with k odd,
    /// `bias` is 1×Cout×1×1.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        if sw.h != sw.w || sw.h % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel must be square and odd, got {sw}"),
            });
        }
        if sw.c != sx.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != Shape::new(1, sw.n, 1, 1) {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sw,
                    rhs: sb,
                });
            }
        }
        let k = sw.h;
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            sx,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            sw.n,
            k,
        );
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let t = Tensor::from_vec(Shape::new(sx.n, sw.n, sx.h, sx.w), data)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                k,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.unary(x, vec![total], Shape::SCALAR, Op::Sum(x))
    }

    /// A scalar node with caller-supplied local gradients, one per input,
    /// each matching its input's length.
    pub fn fused_scalar(&mut self, value: f64, locals: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        for (v, g) in &locals {
            let s = self.shape(*v);
            if g.len() != s.numel() {
                return Err(Error::InvalidShape {
                    op: "fused_scalar",
                    msg: format!("{} local gradients for input of shape {s}", g.len()),
                });
            }
        }
        let rg = locals.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor::scalar(value), Op::Fused(locals), rg))
    }

    /// Propagates d(loss)/d(node) to every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if !s.is_scalar() {
            return Err(Error::NotScalar(s));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    reduce_into(gb, g, out.shape(), |_, _| 1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let plane = out.shape().plane();
                let broadcast = vb.len() != va.len();
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for (j, x) in ga.iter_mut().enumerate() {
                        let bv = if broadcast { vb[j / plane] } else { vb[j] };
                        *x += g[j] * bv;
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    reduce_into(gb, g, out.shape(), |j, _| va[j]);
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b);
                }
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    for n in 0..sa.n {
                        let src = &g[n * (la + lb)..][..la];
                        ga[n * la..][..la].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    for n in 0..sa.n {
                        let src = &g[n * (la + lb) + la..][..lb];
                        gb[n * lb..][..lb].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Slice { input, start } => {
                let s = self.shape(*input);
                let len = out.shape().c * s.plane();
                if let Some(gx) = slot(&self.nodes, grads, *input) {
                    for n in 0..s.n {
                        let dst = &mut gx[(n * s.c + start) * s.plane()..][..len];
                        dst.iter_mut().zip(&g[n * len..][..len]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, &y), &go) in gx.iter_mut().zip(out.data()).zip(g) {
                        *d += go * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, &v), &go) in gx.iter_mut().zip(vx).zip(g) {
                        if v > 0.0 {
                            *d += go;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, &y), &go) in gx.iter_mut().zip(out.data()).zip(g) {
                        *d += go * y;
                    }
                }
            }
            Op::GlobalAvg(x) => {
                let plane = self.shape(*x).plane();
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    let inv = 1.0 / plane as f64;
                    for (j, d) in gx.iter_mut().enumerate() {
                        *d += g[j / plane] * inv;
                    }
                }
            }
            Op::GlobalMax { input, argmax } => {
                let plane = self.shape(*input).plane();
                if let Some(gx) = slot(&self.nodes, grads, *input) {
                    for (p, &a) in argmax.iter().enumerate() {
                        gx[p * plane + a] += g[p];
                    }
                }
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    kernels::avg_pool2_backward(g, s, gx);
                }
            }
            Op::Conv2d { input, weight, bias, k } => {
                let sx = self.shape(*input);
                let out_c = self.shape(*weight).n;
                let xin = self.value(*input).data();
                let w = self.value(*weight).data();
                // Three distinct nodes, so take the buffers out one at a time.
                let mut gi = self.nodes[input.0]
                    .requires_grad
                    .then(|| take_or_zero(grads, *input, xin.len()));
                let mut gw = self.nodes[weight.0]
                    .requires_grad
                    .then(|| take_or_zero(grads, *weight, w.len()));
                let mut gb = bias
                    .filter(|b| self.nodes[b.0].requires_grad)
                    .map(|b| take_or_zero(grads, b, out_c));
                kernels::conv2d_backward(
                    xin,
                    sx,
                    w,
                    out_c,
                    *k,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gi {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[weight.0] = Some(v);
                }
                if let (Some(v), Some(b)) = (gb, bias) {
                    grads[b.0] = Some(v);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Fused(locals) => {
                for (v, local) in locals {
                    if let Some(gv) = slot(&self.nodes, grads, *v) {
                        gv.iter_mut().zip(local).for_each(|(d, l)| *d += g[0] * l);
                    }
                }
            }
        }
    }

    /// Adds the gradients of every bound parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.bound {
            if let Some(g) = self.grad(v) {
                store.tensor_mut(id).accumulate_grad(g);
            }
        }
    }

    /// Gradient of a bound parameter, if it was reached by `backward`.
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.bound
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.grad(v))
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.data().len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> Vec<f64> {
    grads[v.0].take().unwrap_or_else(|| vec![0.0; len])
}

/// Accumulates `g * factor(j)` into `dst`, summing over H×W when `dst` is a
/// channel vector.
fn reduce_into(dst: &mut [f64], g: &[f64], out: Shape, factor: impl Fn(usize, usize) -> f64) {
    if dst.len() == g.len() {
        for (j, d) in dst.iter_mut().enumerate() {
            *d += g[j] * factor(j, j);
        }
    } else {
        let plane = out.plane();
        for (j, &gv) in g.iter().enumerate() {
            dst[j / plane] += gv * factor(j, j / plane);
        }
    }
}

/// Logistic function, kept strictly inside (0, 1) even where `f64` would
/// round to an endpoint.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
