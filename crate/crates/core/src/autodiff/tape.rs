//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends a node holding its value. [`Tape::grad`] walks the
//! list backwards and expresses each local derivative with the same primitives,
//! so the gradient is itself a tape expression and can be differentiated again.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::kernels::{self, ConvDims};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    /// tensor times a one-element tensor
    MulScalar(usize, usize),
    Recip(usize),
    Square(usize),
    Abs(usize),
    Exp(usize),
    Ln(usize),
    Sum(usize),
    /// one-element tensor broadcast to a shape
    Fill(usize, Vec<usize>),
    Relu(usize),
    /// `max(0, ·)` inserted by the guided rule; same math as `Relu`, but
    /// not a network activation.
    Clamp(usize),
    Softplus(usize, f64),
    Sigmoid(usize, f64),
    Reshape(usize, Vec<usize>),
    MatVec(usize, usize),
    MatVecT(usize, usize),
    Outer(usize, usize),
    Conv(usize, usize, ConvDims),
    ConvInputGrad(usize, usize, ConvDims),
    ConvKernelGrad(usize, usize, ConvDims),
    Gather(usize, Arc<[usize]>, Vec<usize>),
    Scatter(usize, Arc<[usize]>, Vec<usize>),
    AvgPool(usize, usize),
    AvgPoolT(usize, usize, Vec<usize>),
    ExpandChannels(usize, Vec<usize>),
    SumToChannels(usize),
    SumLeading(usize),
    RepeatLeading(usize, usize),
}

impl Op {
    fn inputs(&self) -> ([usize; 2], usize) {
        use Op::*;
        match *self {
            Leaf => ([0, 0], 0),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MulScalar(a, b) | MatVec(a, b) | MatVecT(a, b)
            | Outer(a, b) | Conv(a, b, _) | ConvInputGrad(a, b, _) | ConvKernelGrad(a, b, _) => {
                ([a, b], 2)
            }
            Neg(a) | Scale(a, _) | Recip(a) | Square(a) | Abs(a) | Exp(a) | Ln(a) | Sum(a)
            | Fill(a, _) | Relu(a) | Clamp(a) | Softplus(a, _) | Sigmoid(a, _) | Reshape(a, _)
            | Gather(a, ..) | Scatter(a, ..) | AvgPool(a, _) | AvgPoolT(a, ..)
            | ExpandChannels(a, _) | SumToChannels(a) | SumLeading(a) | RepeatLeading(a, _) => {
                ([a, 0], 1)
            }
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Options for [`Tape::grad`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GradOptions {
    /// Guided rule: at every activation node the incoming gradient is clamped
    /// to be nonnegative before the local derivative is applied.
    pub guided: bool,
    /// The gradient will be differentiated again; reject ReLU activations on
    /// the path since their second derivative is not defined.
    pub smooth: bool,
}

impl GradOptions {
    pub fn guided() -> Self {
        GradOptions {
            guided: true,
            ..Default::default()
        }
    }

    pub fn smooth() -> Self {
        GradOptions {
            smooth: true,
            ..Default::default()
        }
    }
}

/// Records primitives for one computation. Confined to a single thread.
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

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn eval(op: &Op, get: &dyn Fn(usize) -> Arc<Tensor>) -> Tensor {
    use Op::*;
    let unary = |a: usize, f: &dyn Fn(f64) -> f64| get(a).map(f);
    let binary = |a: usize, b: usize, f: &dyn Fn(f64, f64) -> f64| {
        let (x, y) = (get(a), get(b));
        Tensor::from_raw(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect(),
        )
    };
    match op {
        Leaf => unreachable!("leaves are not evaluated"),
        Add(a, b) => binary(*a, *b, &|p, q| p + q),
        Sub(a, b) => binary(*a, *b, &|p, q| p - q),
        Mul(a, b) => binary(*a, *b, &|p, q| p * q),
        Neg(a) => unary(*a, &|p| -p),
        Scale(a, c) => unary(*a, &|p| p * c),
        MulScalar(a, s) => {
            let s = get(*s).item();
            unary(*a, &|p| p * s)
        }
        Recip(a) => unary(*a, &|p| 1.0 / p),
        Square(a) => unary(*a, &|p| p * p),
        Abs(a) => unary(*a, &f64::abs),
        Exp(a) => unary(*a, &f64::exp),
        Ln(a) => unary(*a, &f64::ln),
        Sum(a) => Tensor::scalar(get(*a).sum()),
        Fill(a, shape) => Tensor::filled(shape, get(*a).item()),
        Relu(a) | Clamp(a) => unary(*a, &|p| if p > 0.0 { p } else { 0.0 }),
        Softplus(a, beta) => unary(*a, &|p| kernels::softplus(p, *beta)),
        Sigmoid(a, beta) => unary(*a, &|p| kernels::sigmoid(p, *beta)),
        Reshape(a, shape) => Tensor::from_raw(shape.clone(), get(*a).data().to_vec()),
        MatVec(w, x) => {
            let (w, x) = (get(*w), get(*x));
            let (r, c) = (w.shape()[0], w.shape()[1]);
            Tensor::from_raw(vec![r], kernels::matvec(w.data(), x.data(), r, c))
        }
        MatVecT(w, g) => {
            let (w, g) = (get(*w), get(*g));
            let (r, c) = (w.shape()[0], w.shape()[1]);
            Tensor::from_raw(vec![c], kernels::matvec_t(w.data(), g.data(), r, c))
        }
        Outer(a, b) => {
            let (a, b) = (get(*a), get(*b));
            Tensor::from_raw(vec![a.len(), b.len()], kernels::outer(a.data(), b.data()))
        }
        Conv(x, k, d) => Tensor::from_raw(
            vec![d.o, d.ho(), d.wo()],
            kernels::conv2d(get(*x).data(), get(*k).data(), *d),
        ),
        ConvInputGrad(g, k, d) => Tensor::from_raw(
            vec![d.c, d.h, d.w],
            kernels::conv2d_input_grad(get(*g).data(), get(*k).data(), *d),
        ),
        ConvKernelGrad(x, g, d) => Tensor::from_raw(
            vec![d.o, d.c, d.kh, d.kw],
            kernels::conv2d_kernel_grad(get(*x).data(), get(*g).data(), *d),
        ),
        Gather(a, idx, shape) => Tensor::from_raw(shape.clone(), kernels::gather(get(*a).data(), idx)),
        Scatter(a, idx, shape) => {
            Tensor::from_raw(shape.clone(), kernels::scatter(get(*a).data(), idx, numel(shape)))
        }
        AvgPool(a, w) => {
            let a = get(*a);
            let s = a.shape();
            Tensor::from_raw(
                vec![s[0], s[1] / w, s[2] / w],
                kernels::avgpool(a.data(), s[0], s[1], s[2], *w),
            )
        }
        AvgPoolT(a, w, shape) => Tensor::from_raw(
            shape.clone(),
            kernels::avgpool_t(get(*a).data(), shape[0], shape[1], shape[2], *w),
        ),
        ExpandChannels(a, shape) => {
            let a = get(*a);
            let inner = numel(&shape[1..]);
            let data = a.data().iter().flat_map(|&v| std::iter::repeat_n(v, inner)).collect();
            Tensor::from_raw(shape.clone(), data)
        }
        SumToChannels(a) => {
            let a = get(*a);
            let inner = numel(&a.shape()[1..]);
            let data = a.data().chunks(inner).map(|c| c.iter().sum()).collect();
            Tensor::from_raw(vec![a.shape()[0]], data)
        }
        SumLeading(a) => {
            let a = get(*a);
            let inner = numel(&a.shape()[1..]);
            let mut out = vec![0.0; inner];
            for chunk in a.data().chunks(inner) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            Tensor::from_raw(a.shape()[1..].to_vec(), out)
        }
        RepeatLeading(a, n) => {
            let a = get(*a);
            let mut shape = vec![*n];
            shape.extend_from_slice(a.shape());
            Tensor::from_raw(shape, a.data().repeat(*n))
        }
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), true)
    }

    /// A non-differentiable input (parameters held fixed, masks, targets).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn var_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.leaf(value, true)
    }

    pub(crate) fn push(&self, op: Op) -> Var<'_> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let (ins, n) = op.inputs();
            let rg = ins[..n].iter().any(|&i| nodes[i].requires_grad);
            (eval(&op, &|i| nodes[i].value.clone()), rg)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of recorded primitive operations (leaves excluded).
    pub fn op_count(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    fn owns(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::ForeignTape)
        }
    }

    /// Re-executes every recorded primitive from the stored leaves and returns
    /// the recomputed values in node order.
    pub fn replay(&self) -> Vec<Arc<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Arc<Tensor>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => Arc::new(eval(op, &|i| values[i].clone())),
            };
            values.push(v);
        }
        values
    }

    /// Values currently stored on the tape, in node order.
    pub fn values(&self) -> Vec<Arc<Tensor>> {
        self.nodes.borrow().iter().map(|n| n.value.clone()).collect()
    }

    /// Reverse-mode gradient of a scalar `output` with respect to each of `wrt`.
    ///
    /// The returned variables live on this tape; differentiating them again
    /// yields second-order derivatives.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        opts: GradOptions,
    ) -> Result<Vec<Var<'t>>> {
        self.owns(&output)?;
        for w in wrt {
            self.owns(w)?;
        }
        let out_shape = output.shape();
        if numel(&out_shape) != 1 {
            return Err(Error::NonScalarOutput { shape: out_shape });
        }
        let end = output.id + 1;

        // reach[i]: node i depends on one of `wrt`
        let mut reach = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            if !nodes[output.id].requires_grad {
                return Err(Error::Detached);
            }
            for w in wrt {
                if w.id < end {
                    reach[w.id] = true;
                }
            }
            for i in 0..end {
                if reach[i] {
                    continue;
                }
                let (ins, n) = nodes[i].op.inputs();
                reach[i] = ins[..n].iter().any(|&j| reach[j]);
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; end];
        if reach[output.id] {
            grads[output.id] = Some(self.constant(Tensor::filled(&out_shape, 1.0)));
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let this = Var { tape: self, id: i };
            self.backprop_node(&op, this, g, &reach, opts, &mut grads)?;
        }

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&w.shape())),
            })
            .collect())
    }

    fn backprop_node<'t>(
        &'t self,
        op: &Op,
        out: Var<'t>,
        g: Var<'t>,
        reach: &[bool],
        opts: GradOptions,
        grads: &mut [Option<Var<'t>>],
    ) -> Result<()> {
        use Op::*;
        let v = |id: usize| Var { tape: self, id };
        let mut acc = |id: usize, contrib: &dyn Fn() -> Var<'t>| {
            if !reach[id] {
                return;
            }
            let c = contrib();
            grads[id] = Some(match grads[id] {
                Some(prev) => self.push(Add(prev.id, c.id)),
                None => c,
            });
        };
        let p = |op: Op| self.push(op);
        match *op {
            Leaf => {}
            Add(a, b) => {
                acc(a, &|| g);
                acc(b, &|| g);
            }
            Sub(a, b) => {
                acc(a, &|| g);
                acc(b, &|| p(Neg(g.id)));
            }
            Mul(a, b) => {
                acc(a, &|| p(Mul(g.id, b)));
                acc(b, &|| p(Mul(g.id, a)));
            }
            Neg(a) => acc(a, &|| p(Neg(g.id))),
            Scale(a, c) => acc(a, &|| p(Scale(g.id, c))),
            MulScalar(t, s) => {
                acc(t, &|| p(MulScalar(g.id, s)));
                acc(s, &|| {
                    let dot = p(Sum(p(Mul(g.id, t)).id));
                    p(Reshape(dot.id, v(s).shape()))
                });
            }
            Recip(a) => acc(a, &|| {
                let sq = p(Square(out.id));
                p(Mul(g.id, p(Neg(sq.id)).id))
            }),
            Square(a) => acc(a, &|| p(Mul(g.id, p(Scale(a, 2.0)).id))),
            Abs(a) => acc(a, &|| {
                let sign = v(a).value().map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                p(Mul(g.id, self.constant(sign).id))
            }),
            Exp(a) => acc(a, &|| p(Mul(g.id, out.id))),
            Ln(a) => acc(a, &|| p(Mul(g.id, p(Recip(a)).id))),
            Sum(a) => acc(a, &|| p(Fill(g.id, v(a).shape()))),
            Fill(a, _) => acc(a, &|| p(Reshape(p(Sum(g.id)).id, v(a).shape()))),
            Relu(a) => {
                if opts.smooth && reach[a] {
                    return Err(Error::NotTwiceDifferentiable);
                }
                let g = if opts.guided { p(Clamp(g.id)) } else { g };
                acc(a, &|| {
                    let step = v(a).value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    p(Mul(g.id, self.constant(step).id))
                });
            }
            Clamp(a) => acc(a, &|| {
                let step = v(a).value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                p(Mul(g.id, self.constant(step).id))
            }),
            Softplus(a, beta) => {
                let g = if opts.guided { p(Clamp(g.id)) } else { g };
                acc(a, &|| p(Mul(g.id, p(Sigmoid(a, beta)).id)));
            }
            Sigmoid(a, beta) => acc(a, &|| {
                // β·s·(1 − s) = β·(s − s²)
                let s2 = p(Square(out.id));
                let ds = p(Scale(p(Sub(out.id, s2.id)).id, beta));
                p(Mul(g.id, ds.id))
            }),
            Reshape(a, _) => acc(a, &|| p(Reshape(g.id, v(a).shape()))),
            MatVec(w, x) => {
                acc(w, &|| p(Outer(g.id, x)));
                acc(x, &|| p(MatVecT(w, g.id)));
            }
            MatVecT(w, gg) => {
                acc(w, &|| p(Outer(gg, g.id)));
                acc(gg, &|| p(MatVec(w, g.id)));
            }
            Outer(a, b) => {
                acc(a, &|| p(MatVec(g.id, b)));
                acc(b, &|| p(MatVecT(g.id, a)));
            }
            Conv(x, k, d) => {
                acc(x, &|| p(ConvInputGrad(g.id, k, d)));
                acc(k, &|| p(ConvKernelGrad(x, g.id, d)));
            }
            ConvInputGrad(gg, k, d) => {
                acc(gg, &|| p(Conv(g.id, k, d)));
                acc(k, &|| p(ConvKernelGrad(g.id, gg, d)));
            }
            ConvKernelGrad(x, gg, d) => {
                acc(x, &|| p(ConvInputGrad(gg, g.id, d)));
                acc(gg, &|| p(Conv(x, g.id, d)));
            }
            Gather(a, ref idx, _) => acc(a, &|| p(Scatter(g.id, idx.clone(), v(a).shape()))),
            Scatter(a, ref idx, _) => acc(a, &|| p(Gather(g.id, idx.clone(), v(a).shape()))),
            AvgPool(a, w) => acc(a, &|| p(AvgPoolT(g.id, w, v(a).shape()))),
            AvgPoolT(a, w, _) => acc(a, &|| p(AvgPool(g.id, w))),
            ExpandChannels(a, _) => acc(a, &|| p(SumToChannels(g.id))),
            SumToChannels(a) => acc(a, &|| p(ExpandChannels(g.id, v(a).shape()))),
            SumLeading(a) => acc(a, &|| p(RepeatLeading(g.id, v(a).shape()[0]))),
            RepeatLeading(a, _) => acc(a, &|| p(SumLeading(g.id))),
        }
        Ok(())
    }

    /// Applies a primitive by name, e.g. `"square"`, `"softplus:10"`,
    /// `"conv:1"`, `"maxpool:2"`.
    pub fn apply<'t>(&'t self, primitive: &str, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let prim: Primitive = primitive.parse()?;
        let arity = prim.arity();
        if inputs.len() != arity {
            return Err(Error::InvalidParameter(format!(
                "primitive `{primitive}` takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        for x in inputs {
            self.owns(x)?;
        }
        match prim {
            Primitive::Add => inputs[0].add(inputs[1]),
            Primitive::Mul => inputs[0].mul(inputs[1]),
            Primitive::MatMul => inputs[0].matvec(inputs[1]),
            Primitive::Conv { stride } => inputs[0].conv2d(inputs[1], stride),
            Primitive::MaxPool { window } => inputs[0].maxpool(window),
            Primitive::AvgPool { window } => inputs[0].avgpool(window),
            Primitive::Relu => Ok(inputs[0].relu()),
            Primitive::Softplus { beta } => inputs[0].softplus(beta),
            Primitive::Sum => Ok(inputs[0].sum()),
            Primitive::Square => Ok(inputs[0].square()),
            Primitive::Abs => Ok(inputs[0].abs()),
        }
    }
}

/// The named primitive set accepted by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Mul,
    MatMul,
    Conv { stride: usize },
    MaxPool { window: usize },
    AvgPool { window: usize },
    Relu,
    Softplus { beta: f64 },
    Sum,
    Square,
    Abs,
}

const SUPPORTED: &str = "add, mul, matmul, conv[:stride], maxpool[:window], avgpool[:window], relu, softplus[:beta], sum, square, abs";

impl Primitive {
    fn arity(&self) -> usize {
        match self {
            Primitive::Add | Primitive::Mul | Primitive::MatMul | Primitive::Conv { .. } => 2,
            _ => 1,
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::UnsupportedPrimitive {
            name: s.to_string(),
            supported: SUPPORTED.to_string(),
        };
        let uint = |default: usize| -> Result<usize> {
            match arg {
                None => Ok(default),
                Some(a) => a.parse().ok().filter(|&n| n > 0).ok_or_else(bad),
            }
        };
        Ok(match name {
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "matmul" => Primitive::MatMul,
            "conv" => Primitive::Conv { stride: uint(1)? },
            "maxpool" => Primitive::MaxPool { window: uint(2)? },
            "avgpool" => Primitive::AvgPool { window: uint(2)? },
            "relu" => Primitive::Relu,
            "softplus" => Primitive::Softplus {
                beta: match arg {
                    None => 1.0,
                    Some(a) => a.parse().map_err(|_| bad())?,
                },
            },
            "sum" => Primitive::Sum,
            "square" => Primitive::Square,
            "abs" => Primitive::Abs,
            _ => return Err(bad()),
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value; panics unless the variable holds one element.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        self.tape.owns(other)?;
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(mismatch(op, &a, &b));
        }
        Ok(())
    }

    fn push(&self, op: Op) -> Var<'t> {
        self.tape.push(op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "add")?;
        Ok(self.push(Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "sub")?;
        Ok(self.push(Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "mul")?;
        Ok(self.push(Op::Mul(self.id, other.id)))
    }

    pub fn neg(self) -> Var<'t> {
        self.push(Op::Neg(self.id))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.push(Op::Scale(self.id, factor))
    }

    /// Multiplies every element by a one-element variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.tape.owns(&s)?;
        if s.value().len() != 1 {
            return Err(mismatch("mul_scalar", &self.shape(), &s.shape()));
        }
        Ok(self.push(Op::MulScalar(self.id, s.id)))
    }

    pub fn recip(self) -> Var<'t> {
        self.push(Op::Recip(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.push(Op::Square(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.push(Op::Abs(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.push(Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.push(Op::Ln(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.push(Op::Sum(self.id))
    }

    /// Broadcasts a one-element variable to `shape`.
    pub fn fill(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.value().len() != 1 {
            return Err(mismatch("fill", &self.shape(), shape));
        }
        Ok(self.push(Op::Fill(self.id, shape.to_vec())))
    }

    pub fn relu(self) -> Var<'t> {
        self.push(Op::Relu(self.id))
    }

    pub fn softplus(self, beta: f64) -> Result<Var<'t>> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidBeta(beta));
        }
        Ok(self.push(Op::Softplus(self.id, beta)))
    }

    pub fn sigmoid(self, beta: f64) -> Result<Var<'t>> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidBeta(beta));
        }
        Ok(self.push(Op::Sigmoid(self.id, beta)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let cur = self.shape();
        if numel(&cur) != numel(shape) {
            return Err(mismatch("reshape", &cur, shape));
        }
        Ok(self.push(Op::Reshape(self.id, shape.to_vec())))
    }

    /// Matrix-vector product `self · x` with `self: [rows, cols]`, `x: [cols]`.
    pub fn matvec(self, x: Var<'t>) -> Result<Var<'t>> {
        self.tape.owns(&x)?;
        let (w, xs) = (self.shape(), x.shape());
        if w.len() != 2 || xs.len() != 1 || w[1] != xs[0] {
            return Err(mismatch("matmul", &w, &xs));
        }
        Ok(self.push(Op::MatVec(self.id, x.id)))
    }

    /// `selfᵀ · g` with `self: [rows, cols]`, `g: [rows]`.
    pub fn matvec_t(self, g: Var<'t>) -> Result<Var<'t>> {
        self.tape.owns(&g)?;
        let (w, gs) = (self.shape(), g.shape());
        if w.len() != 2 || gs.len() != 1 || w[0] != gs[0] {
            return Err(mismatch("matmul_t", &w, &gs));
        }
        Ok(self.push(Op::MatVecT(self.id, g.id)))
    }

    fn conv_dims(x: &[usize], k: &[usize], stride: usize) -> Result<ConvDims> {
        if x.len() != 3 || k.len() != 4 || x[0] != k[1] || x[1] < k[2] || x[2] < k[3] || stride == 0 {
            return Err(mismatch("conv", x, k));
        }
        Ok(ConvDims {
            c: x[0],
            h: x[1],
            w: x[2],
            o: k[0],
            kh: k[2],
            kw: k[3],
            stride,
        })
    }

    /// Valid (unpadded) 2-D convolution of `self: [C, H, W]` with
    /// `kernel: [O, C, KH, KW]`.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.tape.owns(&kernel)?;
        let d = Self::conv_dims(&self.shape(), &kernel.shape(), stride)?;
        Ok(self.push(Op::Conv(self.id, kernel.id, d)))
    }

    /// Transposed convolution: maps `self: [O, HO, WO]` back to `input_shape`.
    pub fn conv2d_transpose(self, kernel: Var<'t>, stride: usize, input_shape: &[usize]) -> Result<Var<'t>> {
        self.tape.owns(&kernel)?;
        let d = Self::conv_dims(input_shape, &kernel.shape(), stride)?;
        let gs = self.shape();
        if gs != [d.o, d.ho(), d.wo()] {
            return Err(mismatch("conv_transpose", &gs, &[d.o, d.ho(), d.wo()]));
        }
        Ok(self.push(Op::ConvInputGrad(self.id, kernel.id, d)))
    }

    fn pool_check(&self, window: usize, op: &'static str) -> Result<Vec<usize>> {
        let s = self.shape();
        if s.len() != 3 || window == 0 || s[1] < window || s[2] < window {
            return Err(mismatch(op, &s, &[window, window]));
        }
        Ok(s)
    }

    /// Non-overlapping max pooling over `[C, H, W]`.
    pub fn maxpool(self, window: usize) -> Result<Var<'t>> {
        let s = self.pool_check(window, "maxpool")?;
        let idx = kernels::maxpool_indices(self.value().data(), s[0], s[1], s[2], window);
        Ok(self.push(Op::Gather(
            self.id,
            idx.into(),
            vec![s[0], s[1] / window, s[2] / window],
        )))
    }

    /// Non-overlapping average pooling over `[C, H, W]`.
    pub fn avgpool(self, window: usize) -> Result<Var<'t>> {
        self.pool_check(window, "avgpool")?;
        Ok(self.push(Op::AvgPool(self.id, window)))
    }

    /// Transpose of [`Var::avgpool`]: spreads each value uniformly over its
    /// window in a tensor of `input_shape`.
    pub fn avgpool_transpose(self, window: usize, input_shape: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if input_shape.len() != 3 || s != [input_shape[0], input_shape[1] / window, input_shape[2] / window] {
            return Err(mismatch("avgpool_transpose", &s, input_shape));
        }
        Ok(self.push(Op::AvgPoolT(self.id, window, input_shape.to_vec())))
    }

    /// Adds `self[idx[i]]`-style routing in reverse: `out[idx[i]] += self[i]`.
    pub(crate) fn scatter(self, idx: Arc<[usize]>, shape: &[usize]) -> Var<'t> {
        self.push(Op::Scatter(self.id, idx, shape.to_vec()))
    }

    /// Broadcast a per-channel vector `[O]` over `shape = [O, ...]`.
    pub fn expand_channels(self, shape: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 1 || shape.is_empty() || shape[0] != s[0] {
            return Err(mismatch("expand_channels", &s, shape));
        }
        Ok(self.push(Op::ExpandChannels(self.id, shape.to_vec())))
    }

    /// Sums `[O, ...]` down to `[O]`.
    pub fn sum_to_channels(self) -> Var<'t> {
        self.push(Op::SumToChannels(self.id))
    }

    /// Sums over the leading axis: `[C, ...] -> [...]`.
    pub fn sum_leading(self) -> Var<'t> {
        self.push(Op::SumLeading(self.id))
    }

    pub fn repeat_leading(self, count: usize) -> Var<'t> {
        self.push(Op::RepeatLeading(self.id, count))
    }
}
