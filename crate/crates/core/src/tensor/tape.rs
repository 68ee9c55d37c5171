use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Tensor, TensorError};

/// Operation tag of a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Matmul,
    Conv1d,
    Relu,
    Abs,
    Cos,
    Sin,
    Exp,
    Log,
    Sum,
    Mean,
    MinReduce,
    MaxReduce,
    Cumsum,
    Reshape,
    Gather,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Matmul => "matmul",
            OpKind::Conv1d => "conv1d",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Cos => "cos",
            OpKind::Sin => "sin",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MinReduce => "min_reduce",
            OpKind::MaxReduce => "max_reduce",
            OpKind::Cumsum => "cumsum",
            OpKind::Reshape => "reshape",
            OpKind::Gather => "gather",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 22] = [
    OpKind::Leaf,
    OpKind::Constant,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Neg,
    OpKind::Matmul,
    OpKind::Conv1d,
    OpKind::Relu,
    OpKind::Abs,
    OpKind::Cos,
    OpKind::Sin,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::MinReduce,
    OpKind::MaxReduce,
    OpKind::Cumsum,
    OpKind::Reshape,
    OpKind::Gather,
];

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    Constant,
    Binary(OpKind, usize, usize),
    Unary(OpKind, usize),
    Matmul(usize, usize),
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Extremum {
        kind: OpKind,
        input: usize,
        index: usize,
    },
    Gather {
        input: usize,
        indices: Rc<[usize]>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Binary(k, ..) | Op::Unary(k, _) | Op::Extremum { kind: k, .. } => *k,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Gather { .. } => OpKind::Gather,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations. Nodes are stored in creation order,
/// so every node's inputs precede it.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    checked: bool,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A checked tape: non-finite results, division by zero and log of
    /// non-positive values are reported as errors.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            checked: true,
            fault: None,
        }
    }

    /// A tape that lets IEEE special values propagate instead of failing.
    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    /// Negates every gradient contribution of `kind` during backward.
    /// Used to verify that gradient checks catch a broken rule.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push_unchecked(t, Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_unchecked(t, Op::Constant, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push_unchecked(&self, t: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, t: Tensor, op: Op) -> Result<Var<'_>, TensorError> {
        if self.checked && !t.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.kind().name(),
            });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            let rg = |i: usize| nodes[i].requires_grad;
            match &op {
                Op::Leaf => true,
                Op::Constant => false,
                Op::Binary(_, a, b) | Op::Matmul(a, b) => rg(*a) || rg(*b),
                Op::Unary(_, a) => rg(*a),
                Op::Conv1d { x, w, bias, .. } => rg(*x) || rg(*w) || bias.is_some_and(rg),
                Op::Extremum { input, .. } | Op::Gather { input, .. } => rg(*input),
            }
        };
        Ok(self.push_unchecked(t, op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar root. Every node reachable from a leaf
    /// receives its accumulated gradient.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, TensorError> {
        self.assert_owns(root);
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if !root_val.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                let flipped: Vec<f64> = g.iter().map(|v| -v).collect();
                propagate(&nodes, &node.op, &node.value, &flipped, &mut grads);
            } else {
                propagate(&nodes, &node.op, &node.value, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| Tensor {
                    shape: nodes[id].value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn assert_owns(&self, v: Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variable belongs to a different tape"
        );
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root through a differentiable path.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(
    nodes: &[Node],
    op: &Op,
    out: &Tensor,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.as_ref();
    match *op {
        Op::Leaf | Op::Constant => {}
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(a), val(b));
            let ai = |i: usize| if av.is_scalar() { av.data[0] } else { av.data[i] };
            let bi = |i: usize| if bv.is_scalar() { bv.data[0] } else { bv.data[i] };
            if rg(a) {
                let d = |i: usize| match kind {
                    OpKind::Add | OpKind::Sub => g[i],
                    OpKind::Mul => g[i] * bi(i),
                    OpKind::Div => g[i] / bi(i),
                    _ => unreachable!(),
                };
                accumulate_broadcast(slot(grads, a, av.len()), av.is_scalar(), g.len(), d);
            }
            if rg(b) {
                let d = |i: usize| match kind {
                    OpKind::Add => g[i],
                    OpKind::Sub => -g[i],
                    OpKind::Mul => g[i] * ai(i),
                    OpKind::Div => {
                        let y = bi(i);
                        -g[i] * ai(i) / (y * y)
                    }
                    _ => unreachable!(),
                };
                accumulate_broadcast(slot(grads, b, bv.len()), bv.is_scalar(), g.len(), d);
            }
        }
        Op::Unary(kind, a) => {
            if !rg(a) {
                return;
            }
            let x = val(a);
            let dst = slot(grads, a, x.len());
            match kind {
                OpKind::Sum => dst.iter_mut().for_each(|d| *d += g[0]),
                OpKind::Mean => {
                    let s = g[0] / x.len() as f64;
                    dst.iter_mut().for_each(|d| *d += s);
                }
                OpKind::Cumsum => {
                    let mut run = 0.0;
                    for i in (0..g.len()).rev() {
                        run += g[i];
                        dst[i] += run;
                    }
                }
                OpKind::Reshape => dst.iter_mut().zip(g).for_each(|(d, gi)| *d += gi),
                _ => {
                    for (i, d) in dst.iter_mut().enumerate() {
                        let xi = x.data[i];
                        *d += g[i]
                            * match kind {
                                OpKind::Neg => -1.0,
                                OpKind::Relu => f64::from(u8::from(xi > 0.0)),
                                OpKind::Abs => {
                                    if xi > 0.0 {
                                        1.0
                                    } else if xi < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                OpKind::Cos => -xi.sin(),
                                OpKind::Sin => xi.cos(),
                                OpKind::Exp => out.data[i],
                                OpKind::Log => 1.0 / xi,
                                _ => unreachable!(),
                            };
                    }
                }
            }
        }
        Op::Extremum { input, index, .. } => {
            if rg(input) {
                slot(grads, input, val(input).len())[index] += g[0];
            }
        }
        Op::Gather { input, ref indices } => {
            if rg(input) {
                let dst = slot(grads, input, val(input).len());
                for (j, &src) in indices.iter().enumerate() {
                    dst[src] += g[j];
                }
            }
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            if rg(a) {
                // dA = G · Bᵀ
                let dst = slot(grads, a, m * k);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv.data[p * n..(p + 1) * n];
                        dst[i * k + p] += dot(grow, brow);
                    }
                }
            }
            if rg(b) {
                // dB = Aᵀ · G
                let dst = slot(grads, b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av.data[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let drow = &mut dst[p * n..(p + 1) * n];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
            }
        }
        Op::Conv1d {
            x,
            w,
            bias,
            stride,
            pad,
        } => {
            let (xv, wv) = (val(x), val(w));
            let geo = ConvGeometry::new(xv.shape(), wv.shape(), stride, pad);
            if let Some(b) = bias.filter(|&b| rg(b)) {
                let dst = slot(grads, b, geo.c_out);
                for (o, d) in dst.iter_mut().enumerate() {
                    *d += g[o * geo.n_out..(o + 1) * geo.n_out].iter().sum::<f64>();
                }
            }
            if rg(w) {
                let cols = geo.im2col(&xv.data);
                let dst = slot(grads, w, wv.len());
                for o in 0..geo.c_out {
                    let grow = &g[o * geo.n_out..(o + 1) * geo.n_out];
                    for r in 0..geo.rows() {
                        dst[o * geo.rows() + r] += dot(grow, &cols[r * geo.n_out..(r + 1) * geo.n_out]);
                    }
                }
            }
            if rg(x) {
                let mut dcols = vec![0.0; geo.rows() * geo.n_out];
                for o in 0..geo.c_out {
                    let grow = &g[o * geo.n_out..(o + 1) * geo.n_out];
                    let wrow = &wv.data[o * geo.rows()..(o + 1) * geo.rows()];
                    for (r, &kv) in wrow.iter().enumerate() {
                        if kv != 0.0 {
                            axpy(&mut dcols[r * geo.n_out..(r + 1) * geo.n_out], kv, grow);
                        }
                    }
                }
                let dst = slot(grads, x, xv.len());
                geo.col2im_add(&dcols, dst);
            }
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn accumulate_broadcast(dst: &mut [f64], scalar: bool, n: usize, d: impl Fn(usize) -> f64) {
    if scalar {
        dst[0] += (0..n).map(d).sum::<f64>();
    } else {
        for (i, v) in dst.iter_mut().enumerate() {
            *v += d(i);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    n: usize,
    width: usize,
    n_out: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let n = x[1];
        let width = w[2];
        Self {
            c_in: x[0],
            c_out: w[0],
            n,
            width,
            n_out: (n + 2 * pad - width) / stride + 1,
            stride,
            pad,
        }
    }

    /// Rows of the unfolded input: one per (input channel, tap).
    fn rows(&self) -> usize {
        self.c_in * self.width
    }

    /// Unfolds `x: [C_in×N]` into `[(C_in·W)×N_out]` with zeros for padding.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.n_out];
        for c in 0..self.c_in {
            let xrow = &x[c * self.n..(c + 1) * self.n];
            for j in 0..self.width {
                let dst = &mut cols[(c * self.width + j) * self.n_out..][..self.n_out];
                for t in self.taps(j) {
                    dst[t] = xrow[t * self.stride + j - self.pad];
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeometry::im2col`], accumulated into `dx`.
    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        for c in 0..self.c_in {
            let drow = &mut dx[c * self.n..(c + 1) * self.n];
            for j in 0..self.width {
                let src = &cols[(c * self.width + j) * self.n_out..][..self.n_out];
                for t in self.taps(j) {
                    drow[t * self.stride + j - self.pad] += src[t];
                }
            }
        }
    }

    /// Outputs `t` whose tap `j` reads a real (unpadded) input, which is
    /// `t·stride + j − pad`.
    #[inline]
    fn taps(&self, j: usize) -> std::ops::Range<usize> {
        let lo = if j >= self.pad { 0 } else { (self.pad - j).div_ceil(self.stride) };
        let hi = if self.n + self.pad > j {
            (self.n + self.pad - j).div_ceil(self.stride).min(self.n_out)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> Option<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: Var<'_>) {
        self.tape.assert_owns(other);
    }

    fn binary(
        self,
        other: Var<'t>,
        kind: OpKind,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let shape = if a.shape == b.shape || b.is_scalar() {
            a.shape.clone()
        } else if a.is_scalar() {
            b.shape.clone()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: kind.name(),
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        };
        if kind == OpKind::Div && self.tape.checked && b.data.contains(&0.0) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        let n: usize = shape.iter().product();
        let at = |i: usize| if a.is_scalar() { a.data[0] } else { a.data[i] };
        let bt = |i: usize| if b.is_scalar() { b.data[0] } else { b.data[i] };
        let data = (0..n).map(|i| f(at(i), bt(i))).collect();
        self.tape.push(
            Tensor { shape, data },
            Op::Binary(kind, self.id, other.id),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, OpKind::Mul, |x, y| x * y)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, OpKind::Div, |x, y| x / y)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>, TensorError> {
        self.add(self.tape.scalar(c))
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>, TensorError> {
        self.mul(self.tape.scalar(c))
    }

    fn unary(self, kind: OpKind, f: impl Fn(f64) -> f64) -> Result<Var<'t>, TensorError> {
        let t = self.value().map(f);
        self.tape.push(t, Op::Unary(kind, self.id))
    }

    pub fn neg(self) -> Result<Var<'t>, TensorError> {
        self.unary(OpKind::Neg, |x| -x)
    }

    pub fn relu(self) -> Result<Var<'t>, TensorError> {
        self.unary(OpKind::Relu, |x| x.max(0.0))
    }

    /// Absolute value; the backward rule uses subgradient 0 at 0.
    pub fn abs(self) -> Result<Var<'t>, TensorError> {
        self.unary(OpKind::Abs, f64::abs)
    }

    pub fn cos(self) -> Result<Var<'t>, TensorError> {
        self.unary(OpKind::Cos, f64::cos)
    }

    pub fn sin(self) -> Result<Var<'t>, TensorError> {
        self.unary(OpKind::Sin, f64::sin)
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        self.unary(OpKind::Exp, f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>, TensorError> {
        if self.tape.checked {
            if let Some(&bad) = self.value().data.iter().find(|&&v| v <= 0.0) {
                return Err(TensorError::LogDomain { value: bad });
            }
        }
        self.unary(OpKind::Log, f64::ln)
    }

    pub fn sum(self) -> Result<Var<'t>, TensorError> {
        let s = self.value().data.iter().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Unary(OpKind::Sum, self.id))
    }

    pub fn mean(self) -> Result<Var<'t>, TensorError> {
        let v = self.value();
        if v.is_empty() {
            return Err(TensorError::Empty { op: "mean" });
        }
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        self.tape
            .push(Tensor::scalar(m), Op::Unary(OpKind::Mean, self.id))
    }

    fn extremum(self, kind: OpKind, better: impl Fn(f64, f64) -> bool) -> Result<Var<'t>, TensorError> {
        let v = self.value();
        if v.is_empty() {
            return Err(TensorError::Empty { op: kind.name() });
        }
        let mut index = 0;
        for (i, &x) in v.data.iter().enumerate().skip(1) {
            if better(x, v.data[index]) {
                index = i;
            }
        }
        self.tape.push(
            Tensor::scalar(v.data[index]),
            Op::Extremum {
                kind,
                input: self.id,
                index,
            },
        )
    }

    /// Minimum over all elements. Gradient flows to the first minimizer.
    pub fn min_reduce(self) -> Result<Var<'t>, TensorError> {
        self.extremum(OpKind::MinReduce, |x, best| x < best)
    }

    /// Maximum over all elements. Gradient flows to the first maximizer.
    pub fn max_reduce(self) -> Result<Var<'t>, TensorError> {
        self.extremum(OpKind::MaxReduce, |x, best| x > best)
    }

    pub fn cumsum(self) -> Result<Var<'t>, TensorError> {
        let v = self.value();
        if v.rank() != 1 {
            return Err(TensorError::Invalid {
                op: "cumsum",
                msg: format!("expected rank 1, got shape {:?}", v.shape),
            });
        }
        if v.is_empty() {
            return Err(TensorError::Empty { op: "cumsum" });
        }
        let data = v
            .data
            .iter()
            .scan(0.0, |acc, &x| {
                *acc += x;
                Some(*acc)
            })
            .collect();
        self.tape.push(
            Tensor {
                shape: v.shape.clone(),
                data,
            },
            Op::Unary(OpKind::Cumsum, self.id),
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>, TensorError> {
        let t = (*self.value()).clone().reshaped(shape)?;
        self.tape.push(t, Op::Unary(OpKind::Reshape, self.id))
    }

    /// `out.flat[j] = self.flat[indices[j]]`, shaped as `shape`.
    pub fn gather(self, indices: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var<'t>, TensorError> {
        let shape = shape.into();
        let v = self.value();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(TensorError::SizeMismatch {
                shape,
                len: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {} elements", v.len()),
            });
        }
        let data = indices.iter().map(|&i| v.data[i]).collect();
        self.tape.push(
            Tensor { shape, data },
            Op::Gather {
                input: self.id,
                indices,
            },
        )
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let out = &mut data[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, bv) in out.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        self.tape.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::Matmul(self.id, other.id),
        )
    }

    /// Cross-correlation of `self: [C_in×N]` with `kernels: [C_out×C_in×W]`
    /// plus an optional per-channel `bias: [C_out]`, with `pad` zeros on
    /// each side. Output length is `(N + 2·pad − W) / stride + 1`.
    pub fn conv1d(
        self,
        kernels: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(kernels);
        let (x, w) = (self.value(), kernels.value());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv1d",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        };
        if x.rank() != 2 || w.rank() != 3 || x.shape[0] != w.shape[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv1d",
                msg: "stride must be positive".into(),
            });
        }
        if w.shape[2] == 0 || w.shape[2] > x.shape[1] + 2 * pad {
            return Err(TensorError::Invalid {
                op: "conv1d",
                msg: format!(
                    "kernel width {} exceeds padded length {}",
                    w.shape[2],
                    x.shape[1] + 2 * pad
                ),
            });
        }
        let bias_val = match bias {
            Some(b) => {
                self.same_tape(b);
                let bv = b.value();
                if bv.shape != [w.shape[0]] {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv1d bias",
                        lhs: bv.shape.clone(),
                        rhs: vec![w.shape[0]],
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let geo = ConvGeometry::new(&x.shape, &w.shape, stride, pad);
        let cols = geo.im2col(&x.data);
        let mut data = vec![0.0; geo.c_out * geo.n_out];
        for (o, out) in data.chunks_exact_mut(geo.n_out).enumerate() {
            if let Some(bv) = &bias_val {
                out.fill(bv.data[o]);
            }
            let wrow = &w.data[o * geo.rows()..(o + 1) * geo.rows()];
            for (r, &kv) in wrow.iter().enumerate() {
                if kv != 0.0 {
                    axpy(out, kv, &cols[r * geo.n_out..(r + 1) * geo.n_out]);
                }
            }
        }
        self.tape.push(
            Tensor {
                shape: vec![geo.c_out, geo.n_out],
                data,
            },
            Op::Conv1d {
                x: self.id,
                w: kernels.id,
                bias: bias.map(|b| b.id),
                stride,
                pad,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn elementwise_add() {
        let tape = Tape::new();
        let a = tape.constant(vec_t(&[1.0, 2.0]));
        let b = tape.constant(vec_t(&[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_annihilates() {
        let tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.5, -2.0, 3.0]));
        let z = tape.constant(Tensor::zeros([3]));
        let y = x.mul(z).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn div_by_zero_is_error_when_checked() {
        let tape = Tape::new();
        let a = tape.constant(vec_t(&[1.0, 2.0]));
        let b = tape.constant(vec_t(&[1.0, 0.0]));
        assert!(matches!(a.div(b), Err(TensorError::DivisionByZero { .. })));
        let loose = Tape::unchecked();
        let a = loose.constant(vec_t(&[1.0, 2.0]));
        let b = loose.constant(vec_t(&[1.0, 0.0]));
        assert!(a.div(b).unwrap().value().data()[1].is_infinite());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2]));
        let b = tape.constant(Tensor::zeros([3]));
        let err = a.add(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let y = x.mul(s).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[6.0]);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let v = tape.constant(Tensor::matrix(3, 1, vec![4., 5., 6.]));
        assert_eq!(eye.matmul(v).unwrap().value().data(), &[4., 5., 6.]);
        let a = tape.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]));
        let b = tape.constant(Tensor::matrix(2, 1, vec![1., 1.]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[3., 7.]);
        assert!(b.matmul(a).is_err());
    }

    #[test]
    fn conv1d_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1., 2., 3.]));
        let k = tape.constant(Tensor::new([1, 1, 1], vec![1.]).unwrap());
        assert_eq!(x.conv1d(k, None, 1, 0).unwrap().value().data(), &[1., 2., 3.]);

        let x = tape.constant(Tensor::matrix(1, 4, vec![1., 2., 3., 4.]));
        let k = tape.constant(Tensor::new([1, 1, 2], vec![1., 1.]).unwrap());
        assert_eq!(x.conv1d(k, None, 1, 0).unwrap().value().data(), &[3., 5., 7.]);

        let wide = tape.constant(Tensor::new([1, 1, 7], vec![1.; 7]).unwrap());
        assert!(x.conv1d(wide, None, 1, 1).is_err());
        // same-mode padding keeps the length
        let k3 = tape.constant(Tensor::new([1, 1, 3], vec![0., 1., 0.]).unwrap());
        assert_eq!(x.conv1d(k3, None, 1, 1).unwrap().value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn unary_examples() {
        let tape = Tape::new();
        let x = tape.constant(vec_t(&[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(Tensor::scalar(0.0));
        let c = z.cos().unwrap();
        assert_eq!(c.item(), Some(1.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[-0.0]);

        let r = tape.leaf(Tensor::scalar(0.0));
        let g = tape.backward(r.relu().unwrap()).unwrap();
        assert_eq!(g.get(r).unwrap().data(), &[0.0]);

        let neg = tape.constant(vec_t(&[1.0, -1.0]));
        assert!(matches!(neg.log(), Err(TensorError::LogDomain { .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
        assert_eq!(g.get(x).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn extremum_tie_break_first_index() {
        let tape = Tape::new();
        let x = tape.leaf(vec_t(&[3.0, 1.0, 1.0, 2.0]));
        let m = x.min_reduce().unwrap();
        assert_eq!(m.item(), Some(1.0));
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);

        let y = tape.constant(vec_t(&[5.0]));
        assert_eq!(y.max_reduce().unwrap().item(), Some(5.0));
        let e = tape.constant(Tensor::zeros([0]));
        assert!(matches!(e.max_reduce(), Err(TensorError::Empty { .. })));
    }

    #[test]
    fn cumsum_examples() {
        let tape = Tape::new();
        let x = tape.constant(vec_t(&[1.0, 1.0, 1.0]));
        assert_eq!(x.cumsum().unwrap().value().data(), &[1.0, 2.0, 3.0]);
        let e = tape.constant(Tensor::zeros([0]));
        assert!(e.cumsum().is_err());
    }

    #[test]
    fn product_rule_by_hand() {
        // f = x*y + x, df/dx = y + 1, df/dy = x
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(5.0));
        let f = x.mul(y).unwrap().add(x).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
        assert_eq!(g.get(y).unwrap().item(), Some(2.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn fault_injection_flips_gradient() {
        let tape = Tape::with_fault(OpKind::Mul);
        let x = tape.leaf(Tensor::scalar(3.0));
        let g = tape.backward(x.mul(x).unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(-6.0));
    }

    #[test]
    fn gather_scatters_back() {
        let err = finite_diff_check(
            |x| {
                let idx: Rc<[usize]> = vec![0, 0, 2, 1, 2].into();
                x.gather(idx, [5])?.mul(x.tape().constant(vec_t(&[1., 2., 3., 4., 5.])))?.sum()
            },
            &vec_t(&[0.1, 0.2, 0.3]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn kinds_roundtrip_names() {
        for k in ALL_KINDS {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
