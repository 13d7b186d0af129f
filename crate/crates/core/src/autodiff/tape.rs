use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Recorded primitive. Operands are node indices into the owning tape.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Relu(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    BroadcastTo(usize),
    SumTo(usize),
    Reshape(usize),
    Softmax(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Rc<[usize]>,
    },
    Conv {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    ConvBackInput {
        gy: usize,
        w: usize,
        geom: ConvGeom,
    },
    ConvBackWeight {
        x: usize,
        gy: usize,
        geom: ConvGeom,
    },
    Gather {
        src: usize,
        idx: Rc<[usize]>,
    },
    ScatterAdd {
        src: usize,
        idx: Rc<[usize]>,
    },
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => [Some(a), Some(b)],
            MatMul { a, b, .. } => [Some(a), Some(b)],
            Conv { x, w, .. } => [Some(x), Some(w)],
            ConvBackInput { gy, w, .. } => [Some(gy), Some(w)],
            ConvBackWeight { x, gy, .. } => [Some(x), Some(gy)],
            Neg(a)
            | Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | Sigmoid(a)
            | Exp(a)
            | Log(a)
            | Square(a)
            | Sum(a)
            | BroadcastTo(a)
            | SumTo(a)
            | Reshape(a)
            | Softmax(a) => [Some(a), None],
            Clamp { x, .. } => [Some(x), None],
            SoftmaxCrossEntropy { logits, .. } => [Some(logits), None],
            Gather { src, .. } | ScatterAdd { src, .. } => [Some(src), None],
        }
    }
}

struct Node {
    shape: Rc<[usize]>,
    value: Rc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of primitive operations.
///
/// A tape is built fresh for every forward pass and is confined to one
/// thread. Gradients are computed by [`Tape::grad`]; with `create_graph`
/// the backward pass is itself recorded, so gradients can be differentiated
/// again.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(256)),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.shape().into(), Rc::new(t.data().to_vec()), true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.shape().into(), Rc::new(t.data().to_vec()), false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Rc::from(Vec::new()), Rc::new(vec![v]), false)
    }

    pub(crate) fn constant_raw(&self, shape: &[usize], data: Vec<f64>) -> Var<'_> {
        self.leaf(shape.into(), Rc::new(data), false)
    }

    fn leaf(&self, shape: Rc<[usize]>, value: Rc<Vec<f64>>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.recording.get()
            && op
                .inputs()
                .iter()
                .flatten()
                .any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            shape: shape.into(),
            value: Rc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value(&self, idx: usize) -> Rc<Vec<f64>> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn shape(&self, idx: usize) -> Rc<[usize]> {
        self.nodes.borrow()[idx].shape.clone()
    }

    fn var(&self, idx: usize) -> Var<'_> {
        Var { tape: self, idx }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Targets the output does not depend on get zero gradients. With
    /// `create_graph = false` the returned gradients are constants; with
    /// `create_graph = true` they stay connected to the tape.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::NotOnTape(output.idx));
        }
        let out_shape = output.shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if !std::ptr::eq(w.tape, self) || !nodes[w.idx].requires_grad {
                    return Err(Error::NotOnTape(w.idx));
                }
            }
        }
        let end = output.idx + 1;
        let start = wrt.iter().map(|w| w.idx).min().unwrap_or(end);

        // nodes on some path from a target to the output
        let mut relevant = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.idx < end {
                    relevant[w.idx] = true;
                }
            }
            for i in start..end {
                if relevant[i] || !nodes[i].requires_grad {
                    continue;
                }
                relevant[i] = nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|&j| j >= start && relevant[j]);
            }
        }

        let prev = self.recording.replace(create_graph);
        let result = self.backward_sweep(output, start, &relevant);
        self.recording.set(prev);
        let grads = result?;

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.idx).copied().flatten() {
                Some(g) => g,
                None => self.constant_raw(&w.shape(), vec![0.0; w.numel()]),
            })
            .collect())
    }

    fn backward_sweep<'t>(
        &'t self,
        output: Var<'t>,
        start: usize,
        relevant: &[bool],
    ) -> Result<Vec<Option<Var<'t>>>> {
        let end = output.idx + 1;
        let mut grads: Vec<Option<Var<'t>>> = vec![None; end];
        grads[output.idx] = Some(self.constant_raw(&output.shape(), vec![1.0]));
        for i in (start..end).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            for (input, contrib) in self.vjp(i, &op, g)? {
                if input < start || !relevant[input] {
                    continue;
                }
                grads[input] = Some(match grads[input] {
                    Some(prev) => prev.add(contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of node `i` (with operation `op`) against
    /// upstream gradient `g`, expressed in recorded primitives.
    fn vjp<'t>(&'t self, i: usize, op: &Op, g: Var<'t>) -> Result<Vec<(usize, Var<'t>)>> {
        let out = self.var(i);
        let v = |j: usize| self.var(j);
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, g.neg())],
            Op::Mul(a, b) => vec![(a, g.mul(v(b))?), (b, g.mul(v(a))?)],
            Op::Div(a, b) => {
                let ga = g.div(v(b))?;
                let gb = g.mul(out)?.div(v(b))?.neg();
                vec![(a, ga), (b, gb)]
            }
            Op::Neg(a) => vec![(a, g.neg())],
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::AddScalar(a) => vec![(a, g)],
            Op::MatMul { a, b, ta, tb } => {
                let ga = if ta {
                    v(b).matmul_t(g, tb, true)?
                } else {
                    g.matmul_t(v(b), false, !tb)?
                };
                let gb = if tb {
                    g.matmul_t(v(a), true, ta)?
                } else {
                    v(a).matmul_t(g, !ta, false)?
                };
                vec![(a, ga), (b, gb)]
            }
            Op::Relu(a) => {
                let mask: Vec<f64> = self
                    .value(a)
                    .iter()
                    .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let mask = self.constant_raw(&v(a).shape(), mask);
                vec![(a, g.mul(mask)?)]
            }
            Op::Clamp { x, lo, hi } => {
                let mask: Vec<f64> = self
                    .value(x)
                    .iter()
                    .map(|&z| if (lo..=hi).contains(&z) { 1.0 } else { 0.0 })
                    .collect();
                let mask = self.constant_raw(&v(x).shape(), mask);
                vec![(x, g.mul(mask)?)]
            }
            Op::Sigmoid(a) => {
                let slope = out.mul(out.neg().add_scalar(1.0))?;
                vec![(a, g.mul(slope)?)]
            }
            Op::Exp(a) => vec![(a, g.mul(out)?)],
            Op::Log(a) => vec![(a, g.div(v(a))?)],
            Op::Square(a) => vec![(a, g.mul(v(a))?.scale(2.0))],
            Op::Sum(a) => vec![(a, g.broadcast_to(&v(a).shape())?)],
            Op::BroadcastTo(a) => vec![(a, g.sum_to(&v(a).shape())?)],
            Op::SumTo(a) => vec![(a, g.broadcast_to(&v(a).shape())?)],
            Op::Reshape(a) => vec![(a, g.reshape(&v(a).shape())?)],
            Op::Softmax(a) => {
                let shape = out.shape();
                let rows = shape[0];
                let gs = g.mul(out)?;
                let row_dot = gs.sum_to(&[rows, 1])?.broadcast_to(&shape)?;
                vec![(a, out.mul(g.sub(row_dot)?)?)]
            }
            Op::SoftmaxCrossEntropy { logits, ref labels } => {
                let shape = v(logits).shape();
                let (rows, cols) = (shape[0], shape[1]);
                let mut onehot = vec![0.0; rows * cols];
                for (r, &l) in labels.iter().enumerate() {
                    onehot[r * cols + l] = 1.0;
                }
                let onehot = self.constant_raw(&shape, onehot);
                let diff = v(logits).softmax()?.sub(onehot)?;
                let scale = g.scale(1.0 / rows as f64).broadcast_to(&shape)?;
                vec![(logits, diff.mul(scale)?)]
            }
            Op::Conv { x, w, geom } => vec![
                (x, g.conv_back_input(v(w), geom)?),
                (w, v(x).conv_back_weight(g, geom)?),
            ],
            Op::ConvBackInput { gy, w, geom } => vec![
                (gy, g.conv_geom(v(w), geom)?),
                (w, g.conv_back_weight(v(gy), geom)?),
            ],
            Op::ConvBackWeight { x, gy, geom } => vec![
                (x, v(gy).conv_back_input(g, geom)?),
                (gy, v(x).conv_geom(g, geom)?),
            ],
            Op::Gather { src, ref idx } => {
                vec![(src, g.scatter_add(idx.clone(), &v(src).shape())?)]
            }
            Op::ScatterAdd { src, ref idx } => {
                vec![(src, g.gather(idx.clone(), &v(src).shape())?)]
            }
        })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape(self.idx).to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.shape(self.idx).iter().product()
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        self.tape.value(self.idx)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.value().to_vec()).expect("tape node shape is consistent")
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.value(self.idx)[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape
            .leaf(self.tape.shape(self.idx), self.tape.value(self.idx), false)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value: Vec<f64> = self.value().iter().map(|&x| f(x)).collect();
        self.tape.push(self.shape(), value, op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::shape(name, &sa, &sb));
        }
        let (a, b) = (self.value(), other.value());
        let value = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.push(sa, value, op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.idx, other.idx), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.idx, other.idx), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.idx, other.idx), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.idx, other.idx), |a, b| a / b)
    }

    /// Elementwise op after broadcasting both operands to a common shape.
    fn broadcast_pair(&self, other: Var<'t>, name: &'static str) -> Result<(Var<'t>, Var<'t>)> {
        let (sa, sb) = (self.shape(), other.shape());
        let common =
            kernels::broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        Ok((self.broadcast_to(&common)?, other.broadcast_to(&common)?))
    }

    pub fn add_bcast(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.broadcast_pair(other, "add")?;
        a.add(b)
    }

    pub fn sub_bcast(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.broadcast_pair(other, "sub")?;
        a.sub(b)
    }

    pub fn mul_bcast(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.broadcast_pair(other, "mul")?;
        a.mul(b)
    }

    pub fn div_bcast(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.broadcast_pair(other, "div")?;
        a.div(b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.idx), |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.idx), |x| x + c)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.idx), |x| x.max(0.0))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            Op::Clamp {
                x: self.idx,
                lo,
                hi,
            },
            |x| x.clamp(lo, hi),
        )
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.idx), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.idx), f64::ln)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.idx), |x| x * x)
    }

    /// `exp(0.5 * ln x)`; inputs must be positive.
    pub fn sqrt(&self) -> Var<'t> {
        self.ln().scale(0.5).exp()
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let total: f64 = self.value().iter().sum();
        self.tape.push(Vec::new(), vec![total], Op::Sum(self.idx))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let own = self.shape();
        if own == shape {
            return Ok(*self);
        }
        if !kernels::broadcastable(&own, shape) {
            return Err(Error::shape("broadcast_to", &own, shape));
        }
        let value = kernels::broadcast_to(&self.value(), &own, shape);
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::BroadcastTo(self.idx)))
    }

    /// Sum over broadcast axes down to `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let own = self.shape();
        if own == shape {
            return Ok(*self);
        }
        if !kernels::broadcastable(shape, &own) {
            return Err(Error::shape("sum_to", &own, shape));
        }
        let value = kernels::sum_to(&self.value(), &own, shape);
        Ok(self.tape.push(shape.to_vec(), value, Op::SumTo(self.idx)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let own = self.shape();
        if own.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", &own, shape));
        }
        if own == shape {
            return Ok(*self);
        }
        Ok(self
            .tape
            .push(shape.to_vec(), self.value().to_vec(), Op::Reshape(self.idx)))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) * op(other)` for rank-2 operands, `op` being an optional transpose.
    pub fn matmul_t(&self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            &self.value(),
            (sa[0], sa[1]),
            ta,
            &other.value(),
            (sb[0], sb[1]),
            tb,
            &mut out,
            false,
        );
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.idx,
                b: other.idx,
                ta,
                tb,
            },
        ))
    }

    /// Row-wise softmax of a `[rows, classes]` matrix.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("softmax", &shape, &[]));
        }
        let value = kernels::softmax_rows(&self.value(), shape[1]);
        Ok(self.tape.push(shape, value, Op::Softmax(self.idx)))
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits against integer labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&l| l >= shape[1]) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                &shape,
                &[labels.len()],
            ));
        }
        let loss = kernels::softmax_cross_entropy(&self.value(), shape[1], labels);
        Ok(self.tape.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: self.idx,
                labels: labels.into(),
            },
        ))
    }

    /// Stride-1 2-D convolution of an NCHW input with an OIHW kernel and
    /// symmetric zero padding.
    pub fn conv2d(&self, weight: Var<'t>, pad: usize) -> Result<Var<'t>> {
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            pad,
        };
        self.conv_geom(weight, geom)
    }

    fn conv_geom(&self, weight: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let (sx, sw) = (self.shape(), weight.shape());
        if sx != geom.input_shape() || sw != geom.weight_shape() {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let value = kernels::conv2d(&self.value(), &weight.value(), &geom);
        Ok(self.tape.push(
            geom.output_shape(),
            value,
            Op::Conv {
                x: self.idx,
                w: weight.idx,
                geom,
            },
        ))
    }

    /// Input-gradient of a convolution; `self` is the output gradient.
    fn conv_back_input(&self, weight: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let (sg, sw) = (self.shape(), weight.shape());
        if sg != geom.output_shape() || sw != geom.weight_shape() {
            return Err(Error::shape("conv2d_back_input", &sg, &sw));
        }
        let value = kernels::conv2d_back_input(&self.value(), &weight.value(), &geom);
        Ok(self.tape.push(
            geom.input_shape(),
            value,
            Op::ConvBackInput {
                gy: self.idx,
                w: weight.idx,
                geom,
            },
        ))
    }

    /// Kernel-gradient of a convolution; `self` is the input, `gy` the output gradient.
    fn conv_back_weight(&self, gy: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let (sx, sg) = (self.shape(), gy.shape());
        if sx != geom.input_shape() || sg != geom.output_shape() {
            return Err(Error::shape("conv2d_back_weight", &sx, &sg));
        }
        let value = kernels::conv2d_back_weight(&self.value(), &gy.value(), &geom);
        Ok(self.tape.push(
            geom.weight_shape(),
            value,
            Op::ConvBackWeight {
                x: self.idx,
                gy: gy.idx,
                geom,
            },
        ))
    }

    /// 2x2 / stride-2 max-pool over NCHW input. The backward pass routes
    /// gradients through the selected positions only (a fixed subgradient),
    /// so second derivatives through the selection are zero.
    pub fn max_pool2(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(Error::shape("max_pool2", &shape, &[2, 2]));
        }
        let (idx, out_shape) = kernels::maxpool2_indices(&self.value(), &shape);
        self.gather(idx.into(), &out_shape)
    }

    fn gather(&self, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        if idx.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("gather", &[idx.len()], shape));
        }
        let src = self.value();
        let value = idx.iter().map(|&i| src[i]).collect();
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Gather { src: self.idx, idx }))
    }

    fn scatter_add(&self, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        if idx.len() != self.numel() {
            return Err(Error::shape("scatter_add", &self.shape(), &[idx.len()]));
        }
        let mut value = vec![0.0; shape.iter().product()];
        for (&i, &g) in idx.iter().zip(self.value().iter()) {
            value[i] += g;
        }
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::ScatterAdd { src: self.idx, idx }))
    }
}
