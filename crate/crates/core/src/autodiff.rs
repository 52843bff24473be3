//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so reverse iteration over the recording is a valid accumulation order.
//! Leaves are either tracked parameters ([`Tape::param`]) or constants
//! ([`Tape::constant`]); results of ops with no tracked input are recorded but
//! never receive gradient.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{invalid, Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

/// Default negative-side slope for [`Var::leaky_relu`].
pub const LEAKY_SLOPE: f64 = 0.2;

/// Variance floor added before the square root in [`Var::normalize`].
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Statistics per `(sample, channel)` over the spatial extent.
    Instance,
    /// Statistics per channel over batch and spatial extent.
    Batch,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Mean(usize),
    Sum(usize),
    Square(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Relu(usize),
    LogEps(usize, f64),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        y: usize,
        k: usize,
        geom: ConvGeom,
    },
    AddBias(usize, usize),
    Affine {
        x: usize,
        scale: usize,
        shift: usize,
    },
    Normalize {
        x: usize,
        kind: NormKind,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let tracked = parents.iter().any(|&p| self.tracked(p));
        self.push(value, op, tracked)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Contiguous element ranges that make up normalization group `group`.
fn norm_segments(kind: NormKind, shape: &[usize], group: usize) -> impl Iterator<Item = Range<usize>> {
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let (count, step, first) = match kind {
        NormKind::Instance => (1, 0, group * hw),
        NormKind::Batch => (n, c * hw, group * hw),
    };
    (0..count).map(move |i| {
        let s = first + i * step;
        s..s + hw
    })
}

fn norm_groups(kind: NormKind, shape: &[usize]) -> usize {
    match kind {
        NormKind::Instance => shape[0] * shape[1],
        NormKind::Batch => shape[1],
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn unary(self, op: Op, value: Tensor) -> Var<'t> {
        self.tape.record(value, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        Ok(self.tape.record(zip_map(&a, &b, f), op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(Op::AddScalar(self.id), v)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(Op::Scale(self.id, s), v)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        tensor::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.tape.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.unary(Op::Mean(self.id), Tensor::scalar(m))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum::<f64>();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(Op::Square(self.id), v)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(Op::LeakyRelu(self.id, slope), v)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(Op::Relu(self.id), v)
    }

    /// `ln(epsilon + x)` elementwise; `x` must be non-negative.
    pub fn log_eps(self, epsilon: f64) -> Result<Var<'t>> {
        if !(epsilon > 0.0) {
            return Err(invalid("log_eps", format!("epsilon must be > 0, got {epsilon}")));
        }
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|&&x| !(x >= 0.0)) {
            return Err(invalid("log_eps", format!("negative input {bad}")));
        }
        let out = v.map(|x| (epsilon + x).ln());
        Ok(self.unary(Op::LogEps(self.id, epsilon), out))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let conforms = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !conforms {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk: usize = v.shape()[axis..].iter().product();
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(&out_shape, data)?;
        Ok(tape.record(value, Op::Concat(ids.clone(), axis), &ids))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshaped(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.unary(
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            value,
        ))
    }

    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        let (sx, sk) = (x.shape(), k.shape());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let geom = ConvGeom::forward("conv2d", sx[1], sx[2], sx[3], sk[2], sk[3], stride, pad)?;
        let out = tensor::conv_forward(x.data(), sx[0], k.data(), sk[0], &geom);
        let value = Tensor::new(&[sx[0], sk[0], geom.out_h, geom.out_w], out)?;
        Ok(self.tape.record(
            value,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Adjoint of [`Var::conv2d`]: maps an `N×O×h×w` input through an
    /// `O×I×kh×kw` kernel to `N×I×((h−1)·stride − 2·pad + kh)×…`.
    pub fn conv_transpose2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (y, k) = (self.value(), kernel.value());
        let (sy, sk) = (y.shape(), k.shape());
        if sy.len() != 4 || sk.len() != 4 || sy[1] != sk[0] {
            return Err(Error::Shape {
                op: "conv_transpose2d",
                lhs: sy.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv_transpose2d", "stride must be >= 1"));
        }
        let extent = |e: usize, kd: usize| ((e - 1) * stride + kd) as isize - 2 * pad as isize;
        let (oh, ow) = (extent(sy[2], sk[2]), extent(sy[3], sk[3]));
        if oh <= 0 || ow <= 0 {
            return Err(invalid(
                "conv_transpose2d",
                format!("non-positive output extent {oh}x{ow}"),
            ));
        }
        let geom = ConvGeom::forward(
            "conv_transpose2d",
            sk[1],
            oh as usize,
            ow as usize,
            sk[2],
            sk[3],
            stride,
            pad,
        )?;
        debug_assert_eq!((geom.out_h, geom.out_w), (sy[2], sy[3]));
        let out = tensor::conv_input_grad(y.data(), sy[0], k.data(), sk[0], &geom);
        let value = Tensor::new(&[sy[0], sk[1], geom.height, geom.width], out)?;
        Ok(self.tape.record(
            value,
            Op::ConvTranspose2d {
                y: self.id,
                k: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Adds `bias[j]` to every element with index `j` on axis 1.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let s = x.shape();
        if s.len() < 2 || b.shape() != [s[1]] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: s.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let inner: usize = s[2..].iter().product();
        let mut out = x.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += b.data()[(i / inner) % s[1]];
        }
        let value = Tensor::new(s, out)?;
        Ok(self.tape.record(value, Op::AddBias(self.id, bias.id), &[self.id, bias.id]))
    }

    /// Per-channel `x * scale[c] + shift[c]` on axis 1.
    pub fn affine(self, scale: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
        let (x, g, b) = (self.value(), scale.value(), shift.value());
        let s = x.shape();
        if s.len() < 2 || g.shape() != [s[1]] || b.shape() != [s[1]] {
            return Err(Error::Shape {
                op: "affine",
                lhs: s.to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let inner: usize = s[2..].iter().product();
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / inner) % s[1];
                v * g.data()[c] + b.data()[c]
            })
            .collect();
        let value = Tensor::new(s, out)?;
        Ok(self.tape.record(
            value,
            Op::Affine {
                x: self.id,
                scale: scale.id,
                shift: shift.id,
            },
            &[self.id, scale.id, shift.id],
        ))
    }

    /// Standardizes an NCHW tensor per normalization group (no affine).
    /// Returns the result and the per-group `(mean, biased variance)`.
    pub fn normalize(self, kind: NormKind) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(invalid("normalize", format!("expected NCHW, got {s:?}")));
        }
        if kind == NormKind::Batch && s[0] < 2 {
            return Err(invalid("normalize", "batch statistics need a batch of at least 2"));
        }
        let groups = norm_groups(kind, s);
        let mut out = vec![0.0; x.len()];
        let (mut means, mut vars, mut inv_std) = (
            Vec::with_capacity(groups),
            Vec::with_capacity(groups),
            Vec::with_capacity(groups),
        );
        for g in 0..groups {
            let mut count = 0usize;
            let mut sum = 0.0;
            for r in norm_segments(kind, s, g) {
                count += r.len();
                sum += x.data()[r].iter().sum::<f64>();
            }
            let mean = sum / count as f64;
            let mut ss = 0.0;
            for r in norm_segments(kind, s, g) {
                ss += x.data()[r].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            let var = ss / count as f64;
            let r_std = 1.0 / (var + NORM_EPS).sqrt();
            for r in norm_segments(kind, s, g) {
                for i in r {
                    out[i] = (x.data()[i] - mean) * r_std;
                }
            }
            means.push(mean);
            vars.push(var);
            inv_std.push(r_std);
        }
        let value = Tensor::new(s, out)?;
        let v = self.unary(
            Op::Normalize {
                x: self.id,
                kind,
                inv_std,
            },
            value,
        );
        Ok((v, means, vars))
    }

    /// Spatial mean of an NCHW tensor, giving `N×C`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(invalid("global_avg_pool", format!("expected NCHW, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let out = x.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(&[s[0], s[1]], out)?;
        Ok(self.unary(Op::GlobalAvgPool(self.id), value))
    }
}

/// Gradients produced by [`backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tracked leaf, if it was reached.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`, zero-filled when unreached.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], tracked: &[bool], id: usize, contrib: Vec<f64>) {
    if !tracked[id] {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

/// Reverse accumulation from a scalar loss through everything recorded
/// before it.
pub fn backward(loss: Var<'_>) -> Result<Gradients> {
    let nodes = loss.tape.nodes.borrow();
    let root = &nodes[loss.id];
    if root.value.len() != 1 {
        return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
    }
    if !root.tracked {
        return Err(Error::UntrackedLoss);
    }
    let tracked: Vec<bool> = nodes.iter().map(|n| n.tracked).collect();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[loss.id] = Some(vec![1.0]);
    let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];

    for id in (0..=loss.id).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &nodes[id];
        let val = |i: usize| &nodes[i].value;
        let mut acc = |i: usize, c: Vec<f64>| accumulate(&mut grads, &tracked, i, c);
        match &node.op {
            Op::Leaf => {
                leaves[id] = Some(Tensor::new(node.value.shape(), g)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.iter().map(|x| -x).collect());
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::AddScalar(a) => acc(*a, g),
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if tracked[*a] {
                    let mut da = vec![0.0; m * k];
                    tensor::gemm(m, n, k, &g, false, vb.data(), true, &mut da, false);
                    acc(*a, da);
                }
                if tracked[*b] {
                    let mut db = vec![0.0; k * n];
                    tensor::gemm(k, m, n, va.data(), true, &g, false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0]; n]);
            }
            Op::Square(a) => {
                let va = val(*a).data();
                acc(*a, g.iter().zip(va).map(|(g, x)| 2.0 * x * g).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::LeakyRelu(a, slope) => {
                let va = val(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let va = val(*a).data();
                acc(
                    *a,
                    g.iter().zip(va).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::LogEps(a, eps) => {
                let va = val(*a).data();
                acc(*a, g.iter().zip(va).map(|(g, x)| g / (eps + x)).collect());
            }
            Op::Concat(ids, axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let out_chunk: usize = out_shape[*axis..].iter().product();
                let mut offset = 0;
                for &p in ids {
                    let chunk: usize = val(p).shape()[*axis..].iter().product();
                    if tracked[p] {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let s = o * out_chunk + offset;
                            d.extend_from_slice(&g[s..s + chunk]);
                        }
                        acc(p, d);
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(a) => acc(*a, g),
            Op::Slice { src, axis, start } => {
                let s = val(*src).shape();
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut d = vec![0.0; val(*src).len()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src_off = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src_off..src_off + len * inner]);
                }
                acc(*src, d);
            }
            Op::Conv2d { x, k, geom } => {
                let (vx, vk) = (val(*x), val(*k));
                let (batch, out_ch) = (vx.shape()[0], vk.shape()[0]);
                if tracked[*x] {
                    acc(*x, tensor::conv_input_grad(&g, batch, vk.data(), out_ch, geom));
                }
                if tracked[*k] {
                    acc(*k, tensor::conv_kernel_grad(vx.data(), batch, &g, out_ch, geom));
                }
            }
            Op::ConvTranspose2d { y, k, geom } => {
                let (vy, vk) = (val(*y), val(*k));
                let (batch, out_ch) = (vy.shape()[0], vk.shape()[0]);
                if tracked[*y] {
                    acc(*y, tensor::conv_forward(&g, batch, vk.data(), out_ch, geom));
                }
                if tracked[*k] {
                    acc(*k, tensor::conv_kernel_grad(&g, batch, vy.data(), out_ch, geom));
                }
            }
            Op::AddBias(x, b) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                if tracked[*b] {
                    let mut db = vec![0.0; s[1]];
                    for (i, gv) in g.iter().enumerate() {
                        db[(i / inner) % s[1]] += gv;
                    }
                    acc(*b, db);
                }
                acc(*x, g);
            }
            Op::Affine { x, scale, shift } => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let (vx, vg) = (val(*x).data(), val(*scale).data());
                let mut dg = vec![0.0; s[1]];
                let mut db = vec![0.0; s[1]];
                let mut dx = vec![0.0; g.len()];
                for (i, gv) in g.iter().enumerate() {
                    let c = (i / inner) % s[1];
                    dg[c] += gv * vx[i];
                    db[c] += gv;
                    dx[i] = gv * vg[c];
                }
                acc(*scale, dg);
                acc(*shift, db);
                acc(*x, dx);
            }
            Op::Normalize { x, kind, inv_std } => {
                let s = node.value.shape();
                let xhat = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for (grp, r_std) in inv_std.iter().enumerate() {
                    let mut count = 0usize;
                    let (mut mean_g, mut mean_gx) = (0.0, 0.0);
                    for r in norm_segments(*kind, s, grp) {
                        count += r.len();
                        for i in r {
                            mean_g += g[i];
                            mean_gx += g[i] * xhat[i];
                        }
                    }
                    mean_g /= count as f64;
                    mean_gx /= count as f64;
                    for r in norm_segments(*kind, s, grp) {
                        for i in r {
                            dx[i] = r_std * (g[i] - mean_g - xhat[i] * mean_gx);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let mut dx = Vec::with_capacity(val(*x).len());
                for gv in &g {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                acc(*x, dx);
            }
        }
    }
    Ok(Gradients { grads: leaves })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        assert_eq!(a.sub(b).unwrap().value().data(), &[-2.0, -2.0]);
        assert_eq!(a.mul(b).unwrap().value().data(), &[3.0, 8.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().value().item(), Some(0.5));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let m = tape.constant(Tensor::zeros(&[2, 3]));
        let err = m.matmul(m).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_ones() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3, 2], 1.0));
        let c = a.matmul(b).unwrap().value();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[3.0; 4]);
    }

    #[test]
    fn conv2d_identity_and_sum() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        assert_eq!(*x.conv2d(k, 1, 0).unwrap().value(), *x.value());

        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = x.conv2d(k, 1, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv2d_extent_formula() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k = tape.constant(Tensor::full(&[5, 1, 3, 3], 0.3));
        // floor((4 + 2 - 3) / 2) + 1 = 2
        assert_eq!(x.conv2d(k, 2, 1).unwrap().shape(), vec![1, 5, 2, 2]);
        let big = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(x.conv2d(big, 1, 0).is_err());
        assert!(x.conv2d(k, 0, 0).is_err());
    }

    #[test]
    fn conv_transpose_broadcast_and_extent() {
        let tape = Tape::new();
        let y = tape.constant(t(&[1, 1, 1, 1], &[5.0]));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let out = y.conv_transpose2d(k, 1, 0).unwrap().value();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[5.0; 4]);

        let y = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let out = y.conv_transpose2d(k, 2, 0).unwrap();
        assert_eq!(out.shape(), vec![1, 1, 4, 4]);
    }

    #[test]
    fn log_eps_values_and_domain() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0 - 1e-12, std::f64::consts::E - 1e-12]));
        let y = x.log_eps(1e-12).unwrap().value();
        assert!((y.data()[0] - (-27.631021115928547)).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - 1.0).abs() < 1e-12);
        let neg = tape.constant(t(&[1], &[-0.1]));
        assert!(neg.log_eps(1e-12).is_err());
        assert!(x.log_eps(0.0).is_err());
    }

    #[test]
    fn backward_power_rule_and_sigmoid_mean() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = x.mul(x).unwrap();
        assert_eq!(backward(loss).unwrap().wrt(x).data(), &[6.0]);

        let tape = Tape::new();
        let n = 5;
        let x = tape.param(Tensor::zeros(&[n]));
        let loss = x.sigmoid().mean();
        let g = backward(loss).unwrap().wrt(x);
        for v in g.data() {
            assert!((v - 0.25 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_untracked() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(backward(x.square()), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(backward(c.sum()), Err(Error::UntrackedLoss)));
    }

    #[test]
    fn gradient_accumulates_over_uses() {
        for k in 1..5 {
            let tape = Tape::new();
            let x = tape.param(t(&[2], &[0.3, -1.2]));
            let mut acc = x;
            for _ in 1..k {
                acc = acc.add(x).unwrap();
            }
            let g = backward(acc.sum()).unwrap().wrt(x);
            assert_eq!(g.data(), &[k as f64, k as f64]);
        }
    }

    #[test]
    fn leaky_relu_kink_uses_negative_slope() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[1]));
        let g = backward(x.leaky_relu(LEAKY_SLOPE).sum()).unwrap().wrt(x);
        assert_eq!(g.data(), &[LEAKY_SLOPE]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let grads = backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn batch_norm_needs_two_samples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2, 2], 1.0));
        assert!(x.normalize(NormKind::Batch).is_err());
        let (y, _, _) = x.normalize(NormKind::Instance).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }
}
