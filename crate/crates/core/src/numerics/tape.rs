//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. Because inputs always precede their consumers, the node list
//! is already in topological order and [`Tape::backward`] can propagate
//! adjoints with a single reverse sweep.
//!
//! ```
//! use adgen_core::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.item(y), 9.0);
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

use super::tensor::{log_softmax_raw, matvec_raw, sigmoid, softmax_raw, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Row(Var, usize),
    Index(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape. Single-threaded; build a fresh tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, or `None` if `v` does not
    /// influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor, zero-filled when `v` is unreachable.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::from_parts_unchecked(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First entry of a node's value; intended for scalar nodes.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{op:?} produced {} at entry {pos}",
                data[pos]
            )));
        }
        self.nodes.push(Node {
            value: Tensor::from_parts_unchecked(shape, data),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&x| f(x)).collect();
        self.push(shape, data, op)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let shape = ta.shape().to_vec();
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(shape, data, op)
    }

    /// Matrix product `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.data()[i * k + p];
                let brow = &tb.data()[p * n..(p + 1) * n];
                for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += aip * b;
                }
            }
        }
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    /// Matrix–vector product `[m×n]·[n] → [m]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (&self.nodes[a.0].value, &self.nodes[x.0].value);
        if ta.rank() != 2 || tx.rank() != 1 || ta.cols() != tx.len() {
            return Err(shape_err("matvec", ta.shape(), tx.shape()));
        }
        let out = matvec_raw(ta.data(), ta.rows(), ta.cols(), tx.data());
        self.push(vec![ta.rows()], out, Op::MatVec(a, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LogSigmoid(a), super::tensor::log_sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural logarithm; non-positive inputs yield a non-finite error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 1 {
            return Err(Error::Dimension(format!("softmax of shape {:?}", t.shape())));
        }
        let out = softmax_raw(t.data());
        self.push(vec![out.len()], out, Op::Softmax(a))
    }

    /// Log-softmax over a vector.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 1 {
            return Err(Error::Dimension(format!("log_softmax of shape {:?}", t.shape())));
        }
        let out = log_softmax_raw(t.data());
        self.push(vec![out.len()], out, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(a))
    }

    /// Sum of a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var> {
        let (first, rest) = items
            .split_first()
            .ok_or_else(|| Error::Dimension("add_all of empty list".into()))?;
        rest.iter().try_fold(*first, |acc, &v| self.add(acc, v))
    }

    /// Inner product of two vectors as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() != 1 {
                return Err(Error::Dimension(format!("concat of shape {:?}", t.shape())));
            }
            out.extend_from_slice(t.data());
        }
        if out.is_empty() {
            return Err(Error::Dimension("concat of nothing".into()));
        }
        self.push(vec![out.len()], out, Op::Concat(parts.to_vec()))
    }

    /// Row `i` of a matrix as a vector (embedding lookup).
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 || i >= t.rows() {
            return Err(Error::Dimension(format!("row {i} of shape {:?}", t.shape())));
        }
        let out = t.row(i).to_vec();
        self.push(vec![out.len()], out, Op::Row(a, i))
    }

    /// Entry `i` of a vector as a scalar node.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if i >= t.len() {
            return Err(Error::Dimension(format!("index {i} of shape {:?}", t.shape())));
        }
        let v = t.data()[i];
        self.push(vec![1], vec![v], Op::Index(a, i))
    }

    /// Reverse sweep from a scalar output. Each node is visited once, in
    /// reverse insertion order.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        if let Some(bad) = grads.iter().flatten().flatten().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {bad}")));
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * tb.data()[p * n + j];
                            gb[p * n + j] += ta.data()[i * k + p] * g[i * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::MatVec(a, x) => {
                let (ta, tx) = (val(*a), val(*x));
                let (m, n) = (ta.rows(), ta.cols());
                let mut ga = vec![0.0; m * n];
                let mut gx = vec![0.0; n];
                for i in 0..m {
                    let gi = g[i];
                    let arow = &ta.data()[i * n..(i + 1) * n];
                    for j in 0..n {
                        ga[i * n + j] = gi * tx.data()[j];
                        gx[j] += gi * arow[j];
                    }
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *x, &gx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let ga: Vec<f64> = g.iter().zip(tb).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = g.iter().zip(ta).map(|(g, a)| g * a).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| c * v).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Neg(a) => {
                let ga: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::LogSigmoid(a) => {
                let x = val(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| g * sigmoid(-x)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Ln(a) => {
                let x = val(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Square(a) => {
                let x = val(*a).data();
                let ga: Vec<f64> = g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Softmax(a) => {
                let gy: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| y * (g - gy)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(g, ly)| g - ly.exp() * total)
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    accumulate(grads, *p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Row(a, i) => {
                let ta = val(*a);
                let c = ta.cols();
                let slot = grads[a.0].get_or_insert_with(|| vec![0.0; ta.len()]);
                for (s, gv) in slot[i * c..(i + 1) * c].iter_mut().zip(g) {
                    *s += gv;
                }
            }
            Op::Index(a, i) => {
                let n = val(*a).len();
                let slot = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                slot[*i] += g[0];
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
