use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw};
use super::{AdError, Tensor};

/// Inputs to `log` below this value are saturated to it.
pub const LOG_FLOOR: f64 = 1e-300;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Concat(usize, usize),
    Relu(usize),
    Tanh(usize),
    Softmax(usize),
    Log(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    SquaredNorm(usize),
    CrossEntropy(usize, Vec<usize>),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf | Constant => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRow(a, b) | Concat(a, b) => {
                [Some(a), Some(b)]
            }
            Scale(a, _) | Relu(a) | Tanh(a) | Softmax(a) | Log(a) | Abs(a) | Sum(a) | Mean(a)
            | SquaredNorm(a) | CrossEntropy(a, _) => [Some(a), None],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Constant => "constant",
            Add(..) => "add",
            Sub(..) => "sub",
            Scale(..) => "scale",
            Mul(..) => "mul",
            MatMul(..) => "matmul",
            AddRow(..) => "add_row",
            Concat(..) => "concat",
            Relu(..) => "relu",
            Tanh(..) => "tanh",
            Softmax(..) => "softmax",
            Log(..) => "log",
            Abs(..) => "abs",
            Sum(..) => "sum",
            Mean(..) => "mean",
            SquaredNorm(..) => "squared_norm",
            CrossEntropy(..) => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a computation, differentiated in reverse.
///
/// Parents always precede children, so the node list is already in
/// topological order and backward is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not reach the output.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Whether `var` depends on a leaf and reaches the output.
    pub fn is_connected(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AdError {
    AdError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for o in &mut out[start..start + c] {
            *o /= z;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn eval<V: std::ops::Index<usize, Output = Tensor> + ?Sized>(
    op: &Op,
    vals: &V,
) -> Result<Tensor, AdError> {
    use Op::*;
    Ok(match op {
        Leaf | Constant => unreachable!("leaves carry their own values"),
        Add(a, b) | Sub(a, b) | Mul(a, b) => {
            let (x, y) = (&vals[*a], &vals[*b]);
            if x.shape() != y.shape() {
                return Err(mismatch(op.name(), x, y));
            }
            match op {
                Add(..) => x.zip(y, |p, q| p + q),
                Sub(..) => x.zip(y, |p, q| p - q),
                _ => x.zip(y, |p, q| p * q),
            }
        }
        Scale(a, c) => {
            let c = *c;
            vals[*a].map(|v| v * c)
        }
        MatMul(a, b) => {
            let (x, y) = (&vals[*a], &vals[*b]);
            if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
                return Err(mismatch("matmul", x, y));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            Tensor::from_parts(vec![m, n], matmul_raw(x.data(), y.data(), m, k, n))
        }
        AddRow(a, b) => {
            let (x, r) = (&vals[*a], &vals[*b]);
            if r.len() != x.cols() || r.cols() != x.cols() {
                return Err(mismatch("add_row", x, r));
            }
            let c = x.cols();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + r.data()[i % c])
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Concat(a, b) => {
            let (x, y) = (&vals[*a], &vals[*b]);
            let xs = x.shape();
            let ys = y.shape();
            if xs.len() != ys.len() || xs[..xs.len() - 1] != ys[..ys.len() - 1] {
                return Err(mismatch("concat", x, y));
            }
            let (cx, cy) = (x.cols(), y.cols());
            let mut data = Vec::with_capacity(x.len() + y.len());
            for r in 0..x.rows() {
                data.extend_from_slice(x.row(r));
                data.extend_from_slice(y.row(r));
            }
            let mut shape = xs.to_vec();
            *shape.last_mut().unwrap() = cx + cy;
            Tensor::from_parts(shape, data)
        }
        Relu(a) => vals[*a].map(|v| if v > 0.0 { v } else { 0.0 }),
        Tanh(a) => vals[*a].map(f64::tanh),
        Softmax(a) => softmax_rows(&vals[*a]),
        Log(a) => vals[*a].map(|v| v.max(LOG_FLOOR).ln()),
        Abs(a) => vals[*a].map(f64::abs),
        Sum(a) => Tensor::scalar(vals[*a].data().iter().sum()),
        Mean(a) => {
            let x = &vals[*a];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        SquaredNorm(a) => Tensor::scalar(vals[*a].squared_norm()),
        CrossEntropy(a, targets) => {
            let x = &vals[*a];
            if x.shape().len() != 2 || targets.len() != x.rows() {
                return Err(AdError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: x.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let c = x.cols();
            let mut out = Vec::with_capacity(targets.len());
            for (r, &t) in targets.iter().enumerate() {
                if t >= c {
                    return Err(AdError::ClassOutOfRange {
                        index: t,
                        classes: c,
                    });
                }
                let row = x.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                out.push(lse - row[t]);
            }
            Tensor::from_parts(vec![targets.len()], out)
        }
    })
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Indices of nodes registered with [`Tape::leaf`].
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        self.leaves.push(idx);
        Var(idx)
    }

    /// Registers a value that is not differentiated (data, noise draws).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var, AdError> {
        let value = eval(&op, &NodeValues(&self.nodes))?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        self.push(Op::Scale(a.0, c))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.push(Op::MatMul(a.0, b.0))
    }

    /// Adds a row vector to every row of `a` (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AdError> {
        self.push(Op::AddRow(a.0, row.0))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.push(Op::Concat(a.0, b.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        self.push(Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AdError> {
        self.push(Op::Tanh(a.0))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AdError> {
        self.push(Op::Softmax(a.0))
    }

    /// Natural log; inputs below [`LOG_FLOOR`] saturate.
    pub fn log(&mut self, a: Var) -> Result<Var, AdError> {
        self.push(Op::Log(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, AdError> {
        self.push(Op::Abs(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        self.push(Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AdError> {
        self.push(Op::Mean(a.0))
    }

    pub fn squared_norm(&mut self, a: Var) -> Result<Var, AdError> {
        self.push(Op::SquaredNorm(a.0))
    }

    /// Per-row cross-entropy of `logits: [batch, classes]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AdError> {
        self.push(Op::CrossEntropy(logits.0, targets.to_vec()))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients, AdError> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(AdError::NonScalarOutput(out.shape().to_vec()));
        }
        // Only nodes downstream of a leaf carry adjoints.
        let mut live = vec![false; output.0 + 1];
        for (i, node) in self.nodes[..=output.0].iter().enumerate() {
            live[i] = match node.op {
                Op::Leaf => true,
                Op::Constant => false,
                ref op => op.parents().into_iter().flatten().any(|p| live[p]),
            };
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if live[output.0] {
            grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &live, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, live: &[bool], grads: &mut [Option<Tensor>]) {
        use Op::*;
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, t: Tensor| {
            if !live[j] {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[i].op {
            Leaf | Constant => {}
            Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|v| v * c));
            }
            Mul(a, b) => {
                acc(*a, g.zip(val(*b), |p, q| p * q));
                acc(*b, g.zip(val(*a), |p, q| p * q));
            }
            MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if live[*a] {
                    let ga = matmul_a_bt(g.data(), y.data(), m, n, k);
                    acc(*a, Tensor::from_parts(vec![m, k], ga));
                }
                if live[*b] {
                    let gb = matmul_at_b(x.data(), g.data(), m, k, n);
                    acc(*b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            AddRow(a, b) => {
                let c = g.cols();
                let mut gr = vec![0.0; c];
                for (j, v) in g.data().iter().enumerate() {
                    gr[j % c] += v;
                }
                acc(*a, g.clone());
                acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), gr));
            }
            Concat(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (cx, cy) = (x.cols(), y.cols());
                let mut gx = Vec::with_capacity(x.len());
                let mut gy = Vec::with_capacity(y.len());
                for r in 0..g.rows() {
                    let row = g.row(r);
                    gx.extend_from_slice(&row[..cx]);
                    gy.extend_from_slice(&row[cx..cx + cy]);
                }
                acc(*a, Tensor::from_parts(x.shape().to_vec(), gx));
                acc(*b, Tensor::from_parts(y.shape().to_vec(), gy));
            }
            Relu(a) => acc(*a, g.zip(val(*a), |p, x| if x > 0.0 { p } else { 0.0 })),
            Tanh(a) => {
                let y = &self.nodes[i].value;
                acc(*a, g.zip(y, |p, t| p * (1.0 - t * t)));
            }
            Softmax(a) => {
                let y = &self.nodes[i].value;
                let c = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    out.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                debug_assert_eq!(out.len(), y.rows() * c);
                acc(*a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Log(a) => acc(*a, g.zip(val(*a), |p, x| p / x.max(LOG_FLOOR))),
            Abs(a) => acc(
                *a,
                g.zip(val(*a), |p, x| {
                    if x > 0.0 {
                        p
                    } else if x < 0.0 {
                        -p
                    } else {
                        0.0
                    }
                }),
            ),
            Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::full(val(*a).shape(), s));
            }
            Mean(a) => {
                let x = val(*a);
                let s = g.item() / x.len() as f64;
                acc(*a, Tensor::full(x.shape(), s));
            }
            SquaredNorm(a) => {
                let s = g.item();
                acc(*a, val(*a).map(|v| 2.0 * s * v));
            }
            CrossEntropy(a, targets) => {
                let p = softmax_rows(val(*a));
                let c = p.cols();
                let mut out = p.into_data();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        out[r * c + j] = (out[r * c + j] - onehot) * gr;
                    }
                }
                acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), out));
            }
        }
    }

    /// Recomputes every non-leaf node from its parents.
    pub fn replay(&self) -> Result<Vec<Tensor>, AdError> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                ref op => eval(op, vals.as_slice())?,
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Signs of the inputs of every relu and abs node: 1, -1, or 0 exactly at a kink.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = node.op {
                sig.extend(self.nodes[a].value.data().iter().map(|&v| {
                    if v > 0.0 {
                        1
                    } else if v < 0.0 {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        sig
    }

    /// Parent indices of a node, for structural checks.
    pub fn parents_of(&self, var: Var) -> Vec<usize> {
        self.nodes[var.0].op.parents().into_iter().flatten().collect()
    }
}

struct NodeValues<'a>(&'a [Node]);

impl std::ops::Index<usize> for NodeValues<'_> {
    type Output = Tensor;
    fn index(&self, i: usize) -> &Tensor {
        &self.0[i].value
    }
}
