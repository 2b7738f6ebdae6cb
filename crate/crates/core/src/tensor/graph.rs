use std::cell::RefCell;
use std::collections::HashMap;

use super::special::{digamma, ln_gamma};
use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Lgamma(Var),
    MatMul(Var, Var),
    /// `map[i]` is the output slot of input element `i`.
    Sum { input: Var, map: Vec<usize> },
    Mean { input: Var, map: Vec<usize>, factor: f64 },
    LogSumExp { input: Var, map: Vec<usize> },
    Reshape(Var),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    AddBias { input: Var, bias: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Nodes are created in topological order, so the backward
/// pass is a single reverse sweep over insertion order.
///
/// A graph is single-threaded (`!Sync`); build one per thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients keyed by node. Accumulates across [`Graph::backward_into`] calls.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }
}

fn binary_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.rank() == 0 {
        Ok(b.shape().to_vec())
    } else if b.rank() == 0 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ (only scalar broadcasting is supported)",
            a.shape(),
            b.shape()
        )))
    }
}

#[inline]
fn at(t: &[f64], i: usize) -> f64 {
    if t.len() == 1 {
        t[0]
    } else {
        t[i]
    }
}

/// Output shape and element-to-slot map for a reduction over `axes`.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::Shape(format!("axis {a} out of range for shape {shape:?}")));
        }
        if reduced[a] {
            return Err(Error::Shape(format!("axis {a} listed twice")));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let out_strides = strides(&out_shape);
    // stride of each input axis inside the output (0 for reduced axes)
    let mut axis_stride = vec![0usize; shape.len()];
    let mut k = 0;
    for (i, &r) in reduced.iter().enumerate() {
        if !r {
            axis_stride[i] = out_strides[k];
            k += 1;
        }
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut slot = 0usize;
    for _ in 0..numel {
        map.push(slot);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            slot += axis_stride[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            slot -= axis_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok((out_shape, map))
}

/// Output positions `o` whose input coordinate `o*stride + offset - pad` lies in `[0, in_len)`.
#[inline]
fn valid_range(offset: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // o*stride + offset >= pad
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    // o*stride + offset - pad <= in_len - 1
    let hi = if offset > in_len - 1 + pad {
        0
    } else {
        ((in_len - 1 + pad - offset) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    if x.rank() != 4 || k.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects [N,C,H,W] input and [F,C,Kh,Kw] kernel, got {:?} and {:?}",
            x.shape(),
            k.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Contract("conv2d stride must be positive".into()));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if c != kc {
        return Err(Error::Shape(format!("conv2d: input has {c} channels, kernel expects {kc}")));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    })
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Constant leaf: never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.with_value(v, |t| {
            if t.numel() == 1 {
                Ok(t.data()[0])
            } else {
                Err(Error::Contract(format!("expected a scalar, got shape {:?}", t.shape())))
            }
        })
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Copy of `v` cut from the tape: gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.with_value(a, |t| t.map(f));
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = binary_shape(name, ta, tb)?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|i| f(at(ta.data(), i), at(tb.data(), i))).collect();
            Tensor::new(shape, data)?
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.check_positive("log", a)?;
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Element-wise `ln Γ(x)`; backward uses digamma.
    pub fn lgamma(&self, a: Var) -> Result<Var> {
        self.check_positive("lgamma", a)?;
        Ok(self.unary(a, Op::Lgamma(a), ln_gamma))
    }

    fn check_positive(&self, name: &str, a: Var) -> Result<()> {
        self.with_value(a, |t| match t.data().iter().find(|&&x| !(x > 0.0)) {
            Some(x) => Err(Error::Domain(format!("{name} requires positive input, found {x}"))),
            None => Ok(()),
        })
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::Shape(format!(
                    "matmul: incompatible shapes {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let (ad, bd) = (ta.data(), tb.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &y) in row.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn sum(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = reduce_map(&self.shape(a), axes)?;
        let numel = shape.iter().product();
        let mut out = vec![0.0; numel];
        self.with_value(a, |t| {
            for (x, &slot) in t.data().iter().zip(&map) {
                out[slot] += x;
            }
        });
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sum { input: a, map }, rg))
    }

    pub fn mean(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a);
        let (shape, map) = reduce_map(&in_shape, axes)?;
        let numel: usize = shape.iter().product();
        let in_numel: usize = in_shape.iter().product();
        if in_numel == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let factor = numel as f64 / in_numel as f64;
        let mut out = vec![0.0; numel];
        self.with_value(a, |t| {
            for (x, &slot) in t.data().iter().zip(&map) {
                out[slot] += x;
            }
        });
        for o in &mut out {
            *o *= factor;
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mean { input: a, map, factor }, rg))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    /// `log Σ exp(x)` over `axes`, stabilised by the per-slot maximum.
    pub fn logsumexp(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = reduce_map(&self.shape(a), axes)?;
        let numel: usize = shape.iter().product();
        let mut maxes = vec![f64::NEG_INFINITY; numel];
        let mut acc = vec![0.0; numel];
        self.with_value(a, |t| {
            for (&x, &slot) in t.data().iter().zip(&map) {
                maxes[slot] = maxes[slot].max(x);
            }
            for (&x, &slot) in t.data().iter().zip(&map) {
                acc[slot] += (x - maxes[slot]).exp();
            }
        });
        let out = maxes
            .iter()
            .zip(&acc)
            .map(|(&m, &s)| if m == f64::NEG_INFINITY { m } else { m + s.ln() })
            .collect();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSumExp { input: a, map }, rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// 2-D cross-correlation, `[N,C,H,W] ⋆ [F,C,Kh,Kw] -> [N,F,H',W']`
    /// with `H' = (H + 2·pad − Kh) / stride + 1`. Padding is zeros.
    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, k) = (&nodes[input.0].value, &nodes[kernel.0].value);
            let d = conv_dims(x, k, stride, pad)?;
            let (xd, kd) = (x.data(), k.data());
            let mut out = vec![0.0; d.n * d.f * d.oh * d.ow];
            for n in 0..d.n {
                for f in 0..d.f {
                    let obase = (n * d.f + f) * d.oh * d.ow;
                    for c in 0..d.c {
                        let xbase = (n * d.c + c) * d.h * d.w;
                        let kbase = (f * d.c + c) * d.kh * d.kw;
                        for i in 0..d.kh {
                            let (oh_lo, oh_hi) = valid_range(i, pad, stride, d.h, d.oh);
                            for j in 0..d.kw {
                                let wgt = kd[kbase + i * d.kw + j];
                                let (ow_lo, ow_hi) = valid_range(j, pad, stride, d.w, d.ow);
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * stride + i - pad;
                                    let orow = obase + oh * d.ow;
                                    let xrow = xbase + ih * d.w;
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + j - pad;
                                        out[orow + ow] += wgt * xd[xrow + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![d.n, d.f, d.oh, d.ow], out)?
        };
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Adds a 1-D `bias` along `axis` of `input` (channel bias for `[N,C,H,W]`
    /// with axis 1, feature bias for `[N,F]` with axis 1).
    pub fn add_bias(&self, input: Var, bias: Var, axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, b) = (&nodes[input.0].value, &nodes[bias.0].value);
            if axis >= x.rank() || b.rank() != 1 || b.shape()[0] != x.shape()[axis] {
                return Err(Error::Shape(format!(
                    "add_bias: bias {:?} does not match axis {axis} of {:?}",
                    b.shape(),
                    x.shape()
                )));
            }
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let extent = x.shape()[axis];
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.data()[(i / inner) % extent])
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.needs(&[input, bias]);
        Ok(self.push(value, Op::AddBias { input, bias, axis }, rg))
    }

    /// Per-sample `−log softmax(logits)[label]` for `[N,C]` logits; returns `[N]`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (losses, probs) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[logits.0].value;
            if x.rank() != 2 || x.shape()[0] == 0 {
                return Err(Error::Shape(format!("cross_entropy expects [N,C] logits with N ≥ 1, got {:?}", x.shape())));
            }
            let (n, c) = (x.shape()[0], x.shape()[1]);
            if labels.len() != n {
                return Err(Error::Shape(format!("cross_entropy: {} labels for {n} rows", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
            }
            let mut losses = Vec::with_capacity(n);
            let mut probs = Vec::with_capacity(n * c);
            for (row, &label) in x.data().chunks(c).zip(labels) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                let lse = m + s.ln();
                losses.push(lse - row[label]);
                probs.extend(row.iter().map(|&v| (v - lse).exp()));
            }
            (losses, probs)
        };
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::from_vec(losses),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Fresh reverse-mode gradients of scalar `loss` w.r.t. `params`.
    /// Parameters the loss does not reach get zeros.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.backward(loss)?;
        Ok(params
            .iter()
            .map(|&p| grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(&self.shape(p))))
            .collect())
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut out = Gradients::new();
        self.backward_into(loss, &mut out)?;
        Ok(out)
    }

    /// Adds the leaf gradients of `loss` into `out` (no reset).
    pub fn backward_into(&self, loss: Var, out: &mut Gradients) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match out.grads.get_mut(&Var(id)) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.grads.insert(Var(id), t);
                    }
                }
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Accumulate `g * d(out)/d(operand)` for a broadcast binary op.
fn acc_binary(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], local: impl Fn(usize) -> f64) {
    if let Some(dst) = slot(nodes, grads, v) {
        if dst.len() == g.len() {
            for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                *d += gi * local(i);
            }
        } else {
            dst[0] += g.iter().enumerate().map(|(i, &gi)| gi * local(i)).sum::<f64>();
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_binary(nodes, grads, *a, g, |_| 1.0);
            acc_binary(nodes, grads, *b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            acc_binary(nodes, grads, *a, g, |_| 1.0);
            acc_binary(nodes, grads, *b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_binary(nodes, grads, *a, g, |i| at(bv, i));
            acc_binary(nodes, grads, *b, g, |i| at(av, i));
        }
        Op::Scale(a, c) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &gi)| *d += c * gi);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
        }
        Op::Exp(a) => {
            let out = node.value.data();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &gi), &y) in d.iter_mut().zip(g).zip(out) {
                    *d += gi * y;
                }
            }
        }
        Op::Log(a) => {
            let x = val(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                    *d += gi / xi;
                }
            }
        }
        Op::Relu(a) => {
            let x = val(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Lgamma(a) => {
            let x = val(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                    *d += gi * digamma(xi);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let (ad, bd) = (ta.data(), tb.data());
            if let Some(da) = slot(nodes, grads, *a) {
                // dA = G Bᵀ
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                // dB = Aᵀ G
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = ad[i * k + p];
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += x * gv;
                        }
                    }
                }
            }
        }
        Op::Sum { input, map } => {
            if let Some(d) = slot(nodes, grads, *input) {
                for (d, &s) in d.iter_mut().zip(map) {
                    *d += g[s];
                }
            }
        }
        Op::Mean { input, map, factor } => {
            if let Some(d) = slot(nodes, grads, *input) {
                for (d, &s) in d.iter_mut().zip(map) {
                    *d += g[s] * factor;
                }
            }
        }
        Op::LogSumExp { input, map } => {
            let x = val(*input);
            let out = node.value.data();
            if let Some(d) = slot(nodes, grads, *input) {
                for ((d, &s), &xi) in d.iter_mut().zip(map).zip(x) {
                    if out[s] != f64::NEG_INFINITY {
                        *d += g[s] * (xi - out[s]).exp();
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
        } => {
            let (x, k) = (&nodes[input.0].value, &nodes[kernel.0].value);
            let (stride, pad) = (*stride, *pad);
            let d = conv_dims(x, k, stride, pad).expect("validated in forward");
            let (xd, kd) = (x.data(), k.data());
            let want_x = nodes[input.0].requires_grad;
            let want_k = nodes[kernel.0].requires_grad;
            let mut gx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
            let mut gk = if want_k { vec![0.0; kd.len()] } else { Vec::new() };
            for n in 0..d.n {
                for f in 0..d.f {
                    let obase = (n * d.f + f) * d.oh * d.ow;
                    for c in 0..d.c {
                        let xbase = (n * d.c + c) * d.h * d.w;
                        let kbase = (f * d.c + c) * d.kh * d.kw;
                        for i in 0..d.kh {
                            let (oh_lo, oh_hi) = valid_range(i, pad, stride, d.h, d.oh);
                            for j in 0..d.kw {
                                let kidx = kbase + i * d.kw + j;
                                let wgt = kd[kidx];
                                let (ow_lo, ow_hi) = valid_range(j, pad, stride, d.w, d.ow);
                                let mut kacc = 0.0;
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * stride + i - pad;
                                    let orow = obase + oh * d.ow;
                                    let xrow = xbase + ih * d.w;
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + j - pad;
                                        let go = g[orow + ow];
                                        if want_x {
                                            gx[xrow + iw] += go * wgt;
                                        }
                                        kacc += go * xd[xrow + iw];
                                    }
                                }
                                if want_k {
                                    gk[kidx] += kacc;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dst) = slot(nodes, grads, *input) {
                dst.iter_mut().zip(&gx).for_each(|(a, b)| *a += b);
            }
            if let Some(dst) = slot(nodes, grads, *kernel) {
                dst.iter_mut().zip(&gk).for_each(|(a, b)| *a += b);
            }
        }
        Op::AddBias { input, bias, axis } => {
            let shape = nodes[input.0].value.shape();
            let inner: usize = shape[axis + 1..].iter().product();
            let extent = shape[*axis];
            if let Some(d) = slot(nodes, grads, *input) {
                d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
            if let Some(d) = slot(nodes, grads, *bias) {
                for (i, &gi) in g.iter().enumerate() {
                    d[(i / inner) % extent] += gi;
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = nodes[logits.0].value.shape()[1];
            if let Some(d) = slot(nodes, grads, *logits) {
                for (row, (&gi, &label)) in g.iter().zip(labels).enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        d[row * c + j] += gi * (probs[row * c + j] - onehot);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_one_by_one_kernel_scales() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), Tensor::full(&[1, 1, 3, 3], 2.0));
    }

    #[test]
    fn conv_full_kernel_sums() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), Tensor::full(&[1, 1, 1, 1], 9.0));
    }

    #[test]
    fn conv_output_size_with_stride_and_pad() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 3, 7, 6]));
        let k = g.constant(Tensor::ones(&[4, 3, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), vec![2, 4, 4, 3]);
        // corner sees a 2x2 window of ones per channel
        assert_eq!(g.value(y).data()[0], 12.0);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 3, 1, 1]));
        assert!(matches!(g.conv2d(x, k, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(x, &[0, 3]).unwrap();
        for v in g.value(l).data() {
            assert!((v - 4f64.ln()).abs() < 1e-15);
        }
        let x = g.constant(t(&[1, 2], &[10.0, -10.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        // ln(1 + e^-20)
        let expect = (-20f64).exp().ln_1p();
        assert!((g.value(l).data()[0] - expect).abs() < 1e-14);
        assert!((expect - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let g = Graph::new();
        let p = g.param(t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, 1.0]));
        let loss = g.sum_all(p);
        let gr = g.grad(loss, &[p]).unwrap();
        assert_eq!(gr[0], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_square_sum() {
        let g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum_all(sq);
        let gr = g.grad(loss, &[p]).unwrap();
        assert_eq!(gr[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_into_accumulates() {
        let g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let loss = g.sum_all(p);
        let mut acc = Gradients::new();
        g.backward_into(loss, &mut acc).unwrap();
        g.backward_into(loss, &mut acc).unwrap();
        assert_eq!(acc.get(p).unwrap().data(), &[2.0, 2.0]);
        // default API resets
        assert_eq!(g.grad(loss, &[p]).unwrap()[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let q = g.param(Tensor::zeros(&[3]));
        let loss = g.sum_all(p);
        let gr = g.grad(loss, &[p, q]).unwrap();
        assert_eq!(gr[1], Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.grad(p, &[p]), Err(Error::Contract(_))));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let s = g.constant(Tensor::scalar(2.0));
        let ones = g.constant(Tensor::ones(&[2, 3]));
        let y = g.mul(ones, s).unwrap();
        assert_eq!(g.value(y), Tensor::full(&[2, 3], 2.0));
    }

    #[test]
    fn reductions_over_axes() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(g.value(g.sum(x, &[0]).unwrap()).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.value(g.sum(x, &[1]).unwrap()).data(), &[6.0, 15.0]);
        assert_eq!(g.value(g.mean(x, &[1]).unwrap()).data(), &[2.0, 5.0]);
        let y = g.constant(Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap());
        assert_eq!(g.value(g.sum(y, &[0, 2]).unwrap()).data(), &[1.0 + 4.0 + 5.0, 2.0 + 3.0 + 6.0 + 7.0]);
    }

    #[test]
    fn logsumexp_handles_huge_inputs() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1e4, 1e4 - 1.0, -1e4]));
        let y = g.logsumexp(x, &[0]).unwrap();
        let expect = 1e4 + (1.0 + (-1f64).exp()).ln();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn log_and_lgamma_domain_errors() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
        assert!(matches!(g.lgamma(x), Err(Error::Domain(_))));
    }

    #[test]
    fn lgamma_forward_values() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 4.0]));
        let y = g.lgamma(x).unwrap();
        let v = g.value(y);
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[1], 0.0);
        assert!((v.data()[2] - 1.791759469228055).abs() < 1e-12);
        let loss = g.sum_all(y);
        let gr = g.grad(loss, &[x]).unwrap();
        assert!((gr[0].data()[0] + 0.5772157).abs() < 1e-6);
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for stride in 1..4 {
            for pad in 0..3 {
                for in_len in 1..7 {
                    for k in 1..=(in_len + 2 * pad).min(5) {
                        let out_len = (in_len + 2 * pad - k) / stride + 1;
                        for off in 0..k {
                            let (lo, hi) = valid_range(off, pad, stride, in_len, out_len);
                            let brute: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let p = (o * stride + off) as isize - pad as isize;
                                    p >= 0 && (p as usize) < in_len
                                })
                                .collect();
                            assert_eq!((lo..hi).collect::<Vec<_>>(), brute);
                        }
                    }
                }
            }
        }
    }
}
