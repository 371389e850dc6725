//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its variables. Leaves are
//! copied in from [`Tensor`]s; the tensor's `requires_grad` flag decides
//! whether the leaf is differentiated. [`Tape::backward`] consumes the tape,
//! so a recorded graph can be differentiated exactly once.

use std::collections::BTreeMap;

use super::tensor::{argmax, numel, Tensor};
use crate::error::{CocaError, Result};

/// Variance epsilon of both normalization kinds.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    /// Inputs: image `(B, Cin, H, W)`, kernel `(Cout, Cin, 3, 3)`, bias `(Cout)`.
    Conv2d,
    Add,
    Sub,
    Mul,
    Div,
    ScalarDiv(f64),
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    MaxLast,
    SoftmaxLast,
    LogSumExpLast,
    /// Inputs: x, scale, shift.
    BatchNorm,
    /// Inputs: x, scale, shift.
    LayerNorm,
}

impl OpKind {
    pub fn arity(self) -> usize {
        match self {
            OpKind::Conv2d | OpKind::BatchNorm | OpKind::LayerNorm => 3,
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => 2,
            _ => 1,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulRows(Var, Var),
    ScalarDiv(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MaxLast(Var, Vec<usize>),
    SoftmaxLast(Var),
    LogSumExpLast(Var),
    Norm {
        x: Var,
        scale: Var,
        shift: Var,
        layout: NormLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves reached by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }

    /// Adds the gradient of `v`, if any, into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<bool> {
        match self.get(v) {
            Some(g) => {
                t.accumulate_grad(g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

/// How a normalization groups elements into statistics.
#[derive(Clone, Copy, Debug)]
enum NormLayout {
    /// Per feature over the batch: `(B, F)` or per channel over `(B, H, W)`.
    Batch { groups: usize, inner: usize },
    /// Per row over the last axis.
    Layer { width: usize },
}

fn shape_err(op: &'static str, detail: String) -> CocaError {
    CocaError::shape(op, detail)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t` as a leaf, differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a copy of `t` as a leaf with an explicit differentiability flag.
    pub fn leaf_with_grad(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies a recorded value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Generic dispatch over [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(CocaError::invalid(format!(
                "{kind:?} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        let i = inputs;
        match kind {
            OpKind::MatMul => self.matmul(i[0], i[1]),
            OpKind::Conv2d => self.conv2d(i[0], i[1], i[2]),
            OpKind::Add => self.add(i[0], i[1]),
            OpKind::Sub => self.sub(i[0], i[1]),
            OpKind::Mul => self.mul(i[0], i[1]),
            OpKind::Div => self.div(i[0], i[1]),
            OpKind::ScalarDiv(s) => self.scalar_div(i[0], s),
            OpKind::Relu => Ok(self.relu(i[0])),
            OpKind::Exp => Ok(self.exp(i[0])),
            OpKind::Log => self.log(i[0]),
            OpKind::Sum => Ok(self.sum(i[0])),
            OpKind::Mean => Ok(self.mean(i[0])),
            OpKind::MaxLast => self.max_last(i[0]),
            OpKind::SoftmaxLast => self.softmax_last(i[0]),
            OpKind::LogSumExpLast => self.logsumexp_last(i[0]),
            OpKind::BatchNorm => self.batch_norm(i[0], i[1], i[2]),
            OpKind::LayerNorm => self.layer_norm(i[0], i[1], i[2]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// 3x3 convolution, stride 1, zero padding that preserves the spatial size.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4
            || sw.len() != 4
            || sw[2] != 3
            || sw[3] != 3
            || sw[1] != sx[1]
            || sb != [sw[0]]
        {
            return Err(shape_err(
                "conv2d",
                format!("input {sx:?}, kernel {sw:?}, bias {sb:?}"),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
        };
        let mut out = vec![0.0; geom.batch * geom.cout * geom.h * geom.w];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let hw = geom.h * geom.w;
        for n in 0..geom.batch {
            for co in 0..geom.cout {
                let o = &mut out[(n * geom.cout + co) * hw..][..hw];
                o.iter_mut().for_each(|v| *v = bv[co]);
                for ci in 0..geom.cin {
                    let img = &xv[(n * geom.cin + ci) * hw..][..hw];
                    let ker = &wv[(co * geom.cin + ci) * 9..][..9];
                    for (ky, krow) in ker.chunks(3).enumerate() {
                        for (kx, &kv) in krow.iter().enumerate() {
                            geom.for_each_tap(ky, kx, |oi, ii| o[oi] += kv * img[ii]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let shape = vec![geom.batch, geom.cout, geom.h, geom.w];
        Ok(self.push(shape, out, rg, Op::Conv2d(x, w, b)))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb.len() <= sa.len() && sa.ends_with(sb)) {
            Ok(())
        } else {
            Err(shape_err(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    /// `a + b`; `b` may have a trailing sub-shape of `a` and is then repeated.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    /// Elementwise `a / b` for equal shapes.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "div",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        if self.value(b).contains(&0.0) {
            return Err(CocaError::invalid("div: zero divisor"));
        }
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Div(a, b)))
    }

    /// Multiplies every row `i` of `x` by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.is_empty() || ss != [sx[0]] {
            return Err(shape_err("mul_rows", format!("{sx:?} by {ss:?}")));
        }
        let w = numel(&sx[1..]);
        let sv = self.value(s);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / w.max(1)])
            .collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(sx.to_vec(), out, rg, Op::MulRows(x, s)))
    }

    pub fn scalar_div(&mut self, x: Var, s: f64) -> Result<Var> {
        if s == 0.0 || !s.is_finite() {
            return Err(CocaError::invalid(format!("scalar_div by {s}")));
        }
        let out = self.value(x).iter().map(|v| v / s).collect();
        Ok(self.push(self.shape(x).to_vec(), out, self.rg(x), Op::ScalarDiv(x, s)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, self.rg(x), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        self.push(self.shape(x).to_vec(), out, self.rg(x), Op::Exp(x))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= 0.0) {
            return Err(CocaError::invalid("log of a non-positive value"));
        }
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        Ok(self.push(self.shape(x).to_vec(), out, self.rg(x), Op::Log(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], self.rg(x), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![], vec![m], self.rg(x), Op::Mean(x))
    }

    fn last_axis(&self, op: &'static str, x: Var) -> Result<(Vec<usize>, usize)> {
        let s = self.shape(x);
        match s.split_last() {
            Some((&w, lead)) if w > 0 => Ok((lead.to_vec(), w)),
            _ => Err(shape_err(
                op,
                format!("needs a non-empty last axis, got {s:?}"),
            )),
        }
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let (lead, w) = self.last_axis("sum_last", x)?;
        let out = self.value(x).chunks(w).map(|r| r.iter().sum()).collect();
        Ok(self.push(lead, out, self.rg(x), Op::SumLast(x)))
    }

    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let (lead, w) = self.last_axis("max_last", x)?;
        let idx: Vec<usize> = self.value(x).chunks(w).map(argmax).collect();
        let out = self
            .value(x)
            .chunks(w)
            .zip(&idx)
            .map(|(r, &i)| r[i])
            .collect();
        Ok(self.push(lead, out, self.rg(x), Op::MaxLast(x, idx)))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let (_, w) = self.last_axis("softmax_last", x)?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(w) {
            out.extend(softmax(row));
        }
        Ok(self.push(self.shape(x).to_vec(), out, self.rg(x), Op::SoftmaxLast(x)))
    }

    pub fn logsumexp_last(&mut self, x: Var) -> Result<Var> {
        let (lead, w) = self.last_axis("logsumexp_last", x)?;
        let out = self.value(x).chunks(w).map(logsumexp).collect();
        Ok(self.push(lead, out, self.rg(x), Op::LogSumExpLast(x)))
    }

    /// Batch normalization with current-batch statistics.
    ///
    /// `x` is `(B, F)` (statistics per feature) or `(B, C, H, W)` (statistics
    /// per channel over batch and space). `scale`/`shift` have length F or C.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (groups, inner) = match s.len() {
            2 => (s[1], 1),
            4 => (s[1], s[2] * s[3]),
            _ => {
                return Err(shape_err(
                    "batchnorm",
                    format!("input must be rank 2 or 4, got {s:?}"),
                ))
            }
        };
        if s[0] < 2 {
            return Err(CocaError::invalid(format!(
                "batchnorm needs a batch of at least 2 samples, got {}",
                s[0]
            )));
        }
        self.norm(
            "batchnorm",
            x,
            scale,
            shift,
            groups,
            NormLayout::Batch { groups, inner },
        )
    }

    /// Per-row normalization over the last axis with a trainable affine.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (_, w) = self.last_axis("layernorm", x)?;
        self.norm(
            "layernorm",
            x,
            scale,
            shift,
            w,
            NormLayout::Layer { width: w },
        )
    }

    fn norm(
        &mut self,
        op: &'static str,
        x: Var,
        scale: Var,
        shift: Var,
        features: usize,
        layout: NormLayout,
    ) -> Result<Var> {
        if self.shape(scale) != [features] || self.shape(shift) != [features] {
            return Err(shape_err(
                op,
                format!(
                    "input {:?} needs affine of [{features}], got {:?} and {:?}",
                    self.shape(x),
                    self.shape(scale),
                    self.shape(shift)
                ),
            ));
        }
        let xv = self.value(x);
        let n = xv.len();
        let mut xhat = vec![0.0; n];
        let groups = norm_groups(layout, n);
        let mut inv_std = Vec::with_capacity(groups.len());
        for members in &groups {
            let cnt = members.len() as f64;
            let mean = members.iter().map(|&i| xv[i]).sum::<f64>() / cnt;
            let var = members.iter().map(|&i| (xv[i] - mean).powi(2)).sum::<f64>() / cnt;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for &i in members {
                xhat[i] = (xv[i] - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(scale), self.value(shift));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let f = feature_of(layout, i);
                g[f] * h + b[f]
            })
            .collect();
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Norm {
                x,
                scale,
                shift,
                layout,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, self.rg(x), Op::Reshape(x)))
    }

    /// Gathers leading-axis rows.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(shape_err(
                "select_rows",
                format!("indices {idx:?} into {s:?}"),
            ));
        }
        let w = numel(&s[1..]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&xv[i * w..(i + 1) * w]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        Ok(self.push(shape, out, self.rg(x), Op::SelectRows(x, idx.to_vec())))
    }

    /// Propagates d`loss` back to every differentiable leaf. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(CocaError::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                n.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                leaves.insert(Var(idx), gy);
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
        }
        Ok(Gradients { leaves })
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    // dA = dY · Bᵀ
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = gy[i * n..(i + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(g, bb)| g * bb)
                                .sum();
                        }
                    }
                    send(*a, da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dY
                    let av = self.value(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, g)| *d += aip * g);
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Conv2d(x, w, b) => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let geom = ConvGeom {
                    batch: sx[0],
                    cin: sx[1],
                    h: sx[2],
                    w: sx[3],
                    cout: sw[0],
                };
                let hw = geom.h * geom.w;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut dx = self.rg(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.rg(*w).then(|| vec![0.0; wv.len()]);
                let mut dbias = vec![0.0; geom.cout];
                for nb in 0..geom.batch {
                    for co in 0..geom.cout {
                        let go = &gy[(nb * geom.cout + co) * hw..][..hw];
                        dbias[co] += go.iter().sum::<f64>();
                        for ci in 0..geom.cin {
                            let ioff = (nb * geom.cin + ci) * hw;
                            let koff = (co * geom.cin + ci) * 9;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let kidx = koff + ky * 3 + kx;
                                    if let Some(dw) = dw.as_mut() {
                                        let mut acc = 0.0;
                                        geom.for_each_tap(ky, kx, |oi, ii| {
                                            acc += go[oi] * xv[ioff + ii]
                                        });
                                        dw[kidx] += acc;
                                    }
                                    if let Some(dx) = dx.as_mut() {
                                        let kv = wv[kidx];
                                        geom.for_each_tap(ky, kx, |oi, ii| {
                                            dx[ioff + ii] += kv * go[oi]
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dw) = dw {
                    send(*w, dw);
                }
                send(*b, dbias);
            }
            Op::Add(a, b) => {
                send(*a, gy.to_vec());
                if self.rg(*b) {
                    send(*b, reduce_broadcast(gy, self.value(*b).len(), |g, _| g));
                }
            }
            Op::Sub(a, b) => {
                send(*a, gy.to_vec());
                if self.rg(*b) {
                    send(*b, reduce_broadcast(gy, self.value(*b).len(), |g, _| -g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = gy
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * bv[i % bv.len()])
                        .collect();
                    send(*a, da);
                }
                if self.rg(*b) {
                    send(*b, reduce_broadcast(gy, bv.len(), |g, i| g * av[i]));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    send(*a, gy.iter().zip(bv).map(|(g, d)| g / d).collect());
                }
                if self.rg(*b) {
                    let db = gy
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (n, d))| -g * n / (d * d))
                        .collect();
                    send(*b, db);
                }
            }
            Op::MulRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let w = xv.len() / sv.len().max(1);
                if self.rg(*x) {
                    send(
                        *x,
                        gy.iter().enumerate().map(|(i, g)| g * sv[i / w]).collect(),
                    );
                }
                if self.rg(*s) {
                    let ds = gy
                        .chunks(w)
                        .zip(xv.chunks(w))
                        .map(|(g, xr)| g.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    send(*s, ds);
                }
            }
            Op::ScalarDiv(x, s) => send(*x, gy.iter().map(|g| g / s).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x);
                send(
                    *x,
                    gy.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(x) => send(*x, gy.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Log(x) => {
                let xv = self.value(*x);
                send(*x, gy.iter().zip(xv).map(|(g, v)| g / v).collect());
            }
            Op::Sum(x) => send(*x, vec![gy[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![gy[0] / n as f64; n]);
            }
            Op::SumLast(x) => {
                let w = self.value(*x).len() / gy.len().max(1);
                send(
                    *x,
                    gy.iter().flat_map(|&g| std::iter::repeat_n(g, w)).collect(),
                );
            }
            Op::MaxLast(x, idx) => {
                let w = self.value(*x).len() / gy.len().max(1);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, (&i, g)) in idx.iter().zip(gy).enumerate() {
                    dx[r * w + i] = *g;
                }
                send(*x, dx);
            }
            Op::SoftmaxLast(x) => {
                let w = *node.shape.last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(w).zip(gy.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yy, g)| yy * (g - dot)));
                }
                send(*x, dx);
            }
            Op::LogSumExpLast(x) => {
                let xv = self.value(*x);
                let w = xv.len() / gy.len().max(1);
                let mut dx = Vec::with_capacity(xv.len());
                for ((xr, &lse), &g) in xv.chunks(w).zip(y).zip(gy) {
                    dx.extend(xr.iter().map(|v| g * (v - lse).exp()));
                }
                send(*x, dx);
            }
            Op::Norm {
                x,
                scale,
                shift,
                layout,
                xhat,
                inv_std,
            } => {
                let g = self.value(*scale);
                let features = g.len();
                let mut dscale = vec![0.0; features];
                let mut dshift = vec![0.0; features];
                for (i, (&gv, &h)) in gy.iter().zip(xhat).enumerate() {
                    let f = feature_of(*layout, i);
                    dscale[f] += gv * h;
                    dshift[f] += gv;
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (gi, members) in norm_groups(*layout, xhat.len()).iter().enumerate() {
                        let cnt = members.len() as f64;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for &i in members {
                            let dh = gy[i] * g[feature_of(*layout, i)];
                            s1 += dh;
                            s2 += dh * xhat[i];
                        }
                        for &i in members {
                            let dh = gy[i] * g[feature_of(*layout, i)];
                            dx[i] = inv_std[gi] / cnt * (cnt * dh - s1 - xhat[i] * s2);
                        }
                    }
                    send(*x, dx);
                }
                send(*scale, dscale);
                send(*shift, dshift);
            }
            Op::Reshape(x) => send(*x, gy.to_vec()),
            Op::SelectRows(x, idx) => {
                let xl = self.value(*x).len();
                let w = gy.len() / idx.len().max(1);
                let mut dx = vec![0.0; xl];
                for (r, &i) in idx.iter().enumerate() {
                    dx[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&gy[r * w..(r + 1) * w])
                        .for_each(|(d, g)| *d += g);
                }
                send(*x, dx);
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
}

impl ConvGeom {
    /// Visits `(output index, input index)` pairs for kernel tap `(ky, kx)`
    /// inside one `(H, W)` plane, skipping zero-padded positions.
    #[inline]
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        let (h, w) = (self.h as isize, self.w as isize);
        let (dy, dx) = (ky as isize - 1, kx as isize - 1);
        for oy in 0..h {
            let iy = oy + dy;
            if iy < 0 || iy >= h {
                continue;
            }
            for ox in 0..w {
                let ix = ox + dx;
                if ix < 0 || ix >= w {
                    continue;
                }
                f((oy * w + ox) as usize, (iy * w + ix) as usize);
            }
        }
    }
}

fn feature_of(layout: NormLayout, i: usize) -> usize {
    match layout {
        NormLayout::Batch { groups, inner } => (i / inner) % groups,
        NormLayout::Layer { width } => i % width,
    }
}

/// Element indices sharing one set of statistics.
fn norm_groups(layout: NormLayout, n: usize) -> Vec<Vec<usize>> {
    match layout {
        NormLayout::Batch { groups, .. } => {
            let mut out = vec![Vec::new(); groups];
            for i in 0..n {
                out[feature_of(layout, i)].push(i);
            }
            out
        }
        NormLayout::Layer { width } => (0..n / width)
            .map(|r| (r * width..(r + 1) * width).collect())
            .collect(),
    }
}

fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let m = b.len();
    a.iter().enumerate().map(|(i, &x)| f(x, b[i % m])).collect()
}

/// Sums a full-shape gradient down to a repeated trailing operand of length `m`.
fn reduce_broadcast(gy: &[f64], m: usize, f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (i, &g) in gy.iter().enumerate() {
        out[i % m] += f(g, i);
    }
    out
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            orow.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(o, bb)| *o += aip * bb);
        }
    }
    out
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `ln Σ exp(row)` with max subtraction.
pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Shannon entropy (nats) of `softmax(row)`, computed as `lse(z) - Σ q z`.
pub fn entropy_of_logits(row: &[f64]) -> f64 {
    let q = softmax(row);
    let lse = logsumexp(row);
    let h = lse - q.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
    h.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[0.0; 4]));
        let y = tape.softmax_last(x).unwrap();
        assert_eq!(tape.value(y), &[0.25; 4]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0]);
    }

    #[test]
    fn logsumexp_no_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1000.0, 1000.0]));
        let y = tape.logsumexp_last(x).unwrap();
        let expect = 1000.0 + std::f64::consts::LN_2;
        assert!((tape.item(y) - expect).abs() < 1e-9);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let row = [1e4, -1e4, 0.0, 9999.0];
        let q = softmax(&row);
        assert!(q.iter().all(|v| v.is_finite()));
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn entropy_grad_vanishes_at_uniform() {
        let mut tape = Tape::new();
        let z = tape.leaf(&t(&[1, 5], &[0.3; 5]).with_requires_grad(true));
        let q = tape.softmax_last(z).unwrap();
        let qz = tape.mul(q, z).unwrap();
        let s = tape.sum_last(qz).unwrap();
        let lse = tape.logsumexp_last(z).unwrap();
        let h = tape.sub(lse, s).unwrap();
        let loss = tape.mean(h);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(z).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = tape.exp(x);
        assert!(matches!(tape.backward(y), Err(CocaError::Backward(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(t(&[4], &[0.0; 4]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn batchnorm_rejects_single_sample() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let g = tape.constant(t(&[3], &[1.0; 3]));
        let b = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.batch_norm(x, g, b).is_err());
    }

    #[test]
    fn no_grad_inputs_are_not_differentiated() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.leaf(&t(&[2], &[3.0, 4.0]).with_requires_grad(true));
        let p = tape.mul(x, w).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_parameter_grads_accumulate() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[1], &[2.0]).with_requires_grad(true));
        let a = tape.exp(w);
        let b = tape.add(a, w).unwrap();
        let l = tape.sum(b);
        let g = tape.backward(l).unwrap();
        assert!((g.get(w).unwrap()[0] - (2f64.exp() + 1.0)).abs() < 1e-12);
    }
}
