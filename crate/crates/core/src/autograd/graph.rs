use super::tensor::{argmax, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive kinds recorded on the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    /// `M x` for an `r×c` matrix and a length-`c` vector.
    MatVec,
    /// `xᵀ M` for a length-`r` vector and an `r×c` matrix.
    VecMat,
    MatMul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sum,
    Mean,
    Scale(f64),
    Concat,
    Softmax,
    LogSoftmax,
    StopGradient,
    /// Forward: one-hot at the argmax. Backward: identity.
    StraightThrough,
    Select(usize),
    Gather(Vec<usize>),
    Scatter { indices: Vec<usize>, len: usize },
    Clamp { lo: f64, hi: f64 },
    Minimum,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatVec => "matvec",
            Op::VecMat => "vecmat",
            Op::MatMul => "matmul",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Scale(_) => "scale",
            Op::Concat => "concat",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough => "straight_through",
            Op::Select(_) => "select",
            Op::Gather(_) => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Clamp { .. } => "clamp",
            Op::Minimum => "minimum",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf | Op::Constant => Some(0),
            Op::Add | Op::Sub | Op::Mul | Op::MatVec | Op::VecMat | Op::MatMul | Op::Minimum => {
                Some(2)
            }
            Op::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of primitive applications.
///
/// Nodes are stored in creation order, which is also a valid topological
/// order: an input always has a smaller id than its consumer.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `var`, or zeros of its shape if no path reached it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn shape_err(op: &Op, values: &[&Tensor]) -> Error {
    let shapes = values
        .iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(" vs ");
    Error::Shape {
        op: op.name(),
        shapes,
    }
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - max - lse;
        }
    }
    out
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; receives a gradient in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, Vec::new(), value, false)
    }

    /// Records `op` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if n != inputs.len() {
                return Err(Error::invalid(format!(
                    "{} takes {} inputs, got {}",
                    op.name(),
                    n,
                    inputs.len()
                )));
            }
        }
        if matches!(op, Op::Leaf | Op::Constant) {
            return Err(Error::invalid("leaves are created with leaf() or constant()"));
        }
        let value = self.forward(&op, inputs)?;
        let requires_grad = match op {
            Op::StopGradient => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(op, ids, value, requires_grad))
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<Tensor> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = match op {
            Op::Leaf | Op::Constant => unreachable!(),
            Op::Add | Op::Sub | Op::Mul | Op::Minimum => {
                let (a, b) = (vals[0], vals[1]);
                if a.shape() != b.shape() {
                    return Err(shape_err(op, &vals));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    Op::Mul => |x, y| x * y,
                    _ => |x, y| if x <= y { x } else { y },
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::MatVec => {
                let (m, x) = (vals[0], vals[1]);
                if m.rank() != 2 || x.rank() != 1 || m.cols() != x.len() {
                    return Err(shape_err(op, &vals));
                }
                let data = (0..m.rows())
                    .map(|i| m.row(i).iter().zip(x.data()).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::vector(data)
            }
            Op::VecMat => {
                let (x, m) = (vals[0], vals[1]);
                if m.rank() != 2 || x.rank() != 1 || m.rows() != x.len() {
                    return Err(shape_err(op, &vals));
                }
                let mut data = vec![0.0; m.cols()];
                for (i, &xi) in x.data().iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (d, &mij) in data.iter_mut().zip(m.row(i)) {
                        *d += xi * mij;
                    }
                }
                Tensor::vector(data)
            }
            Op::MatMul => {
                let (a, b) = (vals[0], vals[1]);
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                    return Err(shape_err(op, &vals));
                }
                let (r, k, c) = (a.rows(), a.cols(), b.cols());
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for p in 0..k {
                        let aip = a.data()[i * k + p];
                        for j in 0..c {
                            data[i * c + j] += aip * b.data()[p * c + j];
                        }
                    }
                }
                Tensor::matrix(r, c, data)?
            }
            Op::Tanh => vals[0].map(f64::tanh),
            Op::Sigmoid => vals[0].map(|v| 1.0 / (1.0 + (-v).exp())),
            Op::Exp => vals[0].map(f64::exp),
            Op::Log => vals[0].map(f64::ln),
            Op::Sum => Tensor::scalar(vals[0].data().iter().sum()),
            Op::Mean => {
                let t = vals[0];
                if t.is_empty() {
                    return Err(shape_err(op, &vals));
                }
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::Scale(c) => vals[0].map(|v| c * v),
            Op::Concat => {
                if vals.is_empty() || vals.iter().any(|t| t.rank() > 1) {
                    return Err(shape_err(op, &vals));
                }
                Tensor::vector(vals.iter().flat_map(|t| t.data().iter().copied()).collect())
            }
            Op::Softmax | Op::LogSoftmax => {
                let t = vals[0];
                if !t.is_finite() {
                    return Err(Error::NonFinite(op.name()));
                }
                if t.is_empty() {
                    return Err(shape_err(op, &vals));
                }
                let cols = last_dim(t);
                let data = if *op == Op::Softmax {
                    softmax_rows(t.data(), cols)
                } else {
                    log_softmax_rows(t.data(), cols)
                };
                Tensor::new(t.shape().to_vec(), data)?
            }
            Op::StopGradient => vals[0].clone(),
            Op::StraightThrough => {
                let t = vals[0];
                if t.rank() != 1 || t.is_empty() {
                    return Err(shape_err(op, &vals));
                }
                Tensor::one_hot(t.len(), argmax(t.data()))
            }
            Op::Select(i) => {
                let t = vals[0];
                if t.rank() != 1 || *i >= t.len() {
                    return Err(Error::Shape {
                        op: "select",
                        shapes: format!("index {} into {:?}", i, t.shape()),
                    });
                }
                Tensor::scalar(t.data()[*i])
            }
            Op::Gather(idx) => {
                let t = vals[0];
                if t.rank() != 1 || idx.iter().any(|&i| i >= t.len()) {
                    return Err(Error::Shape {
                        op: "gather",
                        shapes: format!("indices {:?} into {:?}", idx, t.shape()),
                    });
                }
                Tensor::vector(idx.iter().map(|&i| t.data()[i]).collect())
            }
            Op::Scatter { indices, len } => {
                let t = vals[0];
                if t.rank() != 1 || t.len() != indices.len() || indices.iter().any(|&i| i >= *len)
                {
                    return Err(Error::Shape {
                        op: "scatter",
                        shapes: format!("{:?} to indices {:?} of length {}", t.shape(), indices, len),
                    });
                }
                let mut data = vec![0.0; *len];
                for (&i, &v) in indices.iter().zip(t.data()) {
                    data[i] += v;
                }
                Tensor::vector(data)
            }
            Op::Clamp { lo, hi } => vals[0].map(|v| v.clamp(*lo, *hi)),
        };
        Ok(out)
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                shapes: format!("output must be scalar, got {:?}", out.value.shape()),
            });
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if out.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        // keep only nodes that actually take part in differentiation
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let input = |k: usize| &self.nodes[node.inputs[k]];
        let mut acc = |k: usize, f: &mut dyn FnMut(&mut [f64])| {
            let src = &self.nodes[node.inputs[k]];
            if !src.requires_grad {
                return;
            }
            let slot = grads[node.inputs[k]].get_or_insert_with(|| vec![0.0; src.value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add => {
                acc(0, &mut |g| g.iter_mut().zip(gy).for_each(|(a, b)| *a += b));
                acc(1, &mut |g| g.iter_mut().zip(gy).for_each(|(a, b)| *a += b));
            }
            Op::Sub => {
                acc(0, &mut |g| g.iter_mut().zip(gy).for_each(|(a, b)| *a += b));
                acc(1, &mut |g| g.iter_mut().zip(gy).for_each(|(a, b)| *a -= b));
            }
            Op::Mul => {
                let (a, b) = (input(0).value.data(), input(1).value.data());
                acc(0, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * b[i];
                    }
                });
                acc(1, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * a[i];
                    }
                });
            }
            Op::Minimum => {
                let (a, b) = (input(0).value.data(), input(1).value.data());
                acc(0, &mut |g| {
                    for i in 0..g.len() {
                        if a[i] <= b[i] {
                            g[i] += gy[i];
                        }
                    }
                });
                acc(1, &mut |g| {
                    for i in 0..g.len() {
                        if a[i] > b[i] {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::MatVec => {
                let m = &input(0).value;
                let x = input(1).value.data();
                let c = m.cols();
                acc(0, &mut |g| {
                    for (i, &gi) in gy.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += gi * x[j];
                        }
                    }
                });
                acc(1, &mut |g| {
                    for (i, &gi) in gy.iter().enumerate() {
                        for (gj, &mij) in g.iter_mut().zip(m.row(i)) {
                            *gj += mij * gi;
                        }
                    }
                });
            }
            Op::VecMat => {
                let x = input(0).value.data();
                let m = &input(1).value;
                let c = m.cols();
                acc(0, &mut |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += m.row(i).iter().zip(gy).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                acc(1, &mut |g| {
                    for (i, &xi) in x.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            g[i * c + j] += xi * gy[j];
                        }
                    }
                });
            }
            Op::MatMul => {
                let (a, b) = (&input(0).value, &input(1).value);
                let (r, k, c) = (a.rows(), a.cols(), b.cols());
                let (ad, bd) = (a.data(), b.data());
                acc(0, &mut |g| {
                    for i in 0..r {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..c {
                                s += gy[i * c + j] * bd[p * c + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                acc(1, &mut |g| {
                    for p in 0..k {
                        for j in 0..c {
                            let mut s = 0.0;
                            for i in 0..r {
                                s += ad[i * k + p] * gy[i * c + j];
                            }
                            g[p * c + j] += s;
                        }
                    }
                });
            }
            Op::Tanh => acc(0, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid => acc(0, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Exp => acc(0, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i];
                }
            }),
            Op::Log => {
                let x = input(0).value.data();
                acc(0, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] / x[i];
                    }
                })
            }
            Op::Sum => acc(0, &mut |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean => acc(0, &mut |g| {
                let n = g.len() as f64;
                g.iter_mut().for_each(|v| *v += gy[0] / n)
            }),
            Op::Scale(c) => acc(0, &mut |g| {
                for i in 0..g.len() {
                    g[i] += c * gy[i];
                }
            }),
            Op::Concat => {
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let len = input(k).value.len();
                    let part = &gy[offset..offset + len];
                    acc(k, &mut |g| g.iter_mut().zip(part).for_each(|(a, b)| *a += b));
                    offset += len;
                }
            }
            Op::Softmax => {
                let cols = last_dim(&node.value);
                acc(0, &mut |g| {
                    for r in 0..g.len() / cols {
                        let s = r * cols..(r + 1) * cols;
                        let dot: f64 = gy[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for i in s {
                            g[i] += y[i] * (gy[i] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax => {
                let cols = last_dim(&node.value);
                acc(0, &mut |g| {
                    for r in 0..g.len() / cols {
                        let s = r * cols..(r + 1) * cols;
                        let total: f64 = gy[s.clone()].iter().sum();
                        for i in s {
                            g[i] += gy[i] - y[i].exp() * total;
                        }
                    }
                })
            }
            Op::StraightThrough => {
                acc(0, &mut |g| g.iter_mut().zip(gy).for_each(|(a, b)| *a += b))
            }
            Op::Select(i) => acc(0, &mut |g| g[*i] += gy[0]),
            Op::Gather(idx) => acc(0, &mut |g| {
                for (j, &i) in idx.iter().enumerate() {
                    g[i] += gy[j];
                }
            }),
            Op::Scatter { indices, .. } => acc(0, &mut |g| {
                for (j, &i) in indices.iter().enumerate() {
                    g[j] += gy[i];
                }
            }),
            Op::Clamp { lo, hi } => {
                let x = input(0).value.data();
                acc(0, &mut |g| {
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            g[i] += gy[i];
                        }
                    }
                })
            }
        }
    }

    // Convenience wrappers. Ops that cannot fail on shape return `Var`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Minimum, &[a, b])
    }

    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        self.apply(Op::MatVec, &[m, x])
    }

    pub fn vecmat(&mut self, x: Var, m: Var) -> Result<Var> {
        self.apply(Op::VecMat, &[x, m])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    fn unary(&mut self, op: Op, x: Var) -> Var {
        self.apply(op, &[x]).expect("unary primitive")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Op::Log, x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.unary(Op::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::Scale(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, xs)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[x])
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        self.unary(Op::StopGradient, x)
    }

    pub fn straight_through(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::StraightThrough, &[x])
    }

    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        self.apply(Op::Select(index), &[x])
    }

    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::Gather(indices), &[x])
    }

    pub fn scatter(&mut self, x: Var, indices: Vec<usize>, len: usize) -> Result<Var> {
        self.apply(Op::Scatter { indices, len }, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { lo, hi }, x)
    }

    /// Sum of scalar nodes. An empty slice yields a constant zero.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }
}
