use std::collections::HashMap;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Exp,
    Log,
    Sqrt,
    Relu,
    Sum,
    Mean,
    RowSum,
    Broadcast,
    Concat,
    GatherRows,
    RowNorm,
    PairwiseSqdist,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Broadcast(Var),
    Concat(Var, Var, usize),
    GatherRows(Var, Vec<usize>),
    RowNorm(Var),
    PairwiseSqdist(Var, Var),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Constant => Primitive::Constant,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::ScalarMul(..) => Primitive::ScalarMul,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Exp(_) => Primitive::Exp,
            Op::Log(_) => Primitive::Log,
            Op::Sqrt(_) => Primitive::Sqrt,
            Op::Relu(_) => Primitive::Relu,
            Op::Sum(_) => Primitive::Sum,
            Op::Mean(_) => Primitive::Mean,
            Op::RowSum(_) => Primitive::RowSum,
            Op::Broadcast(_) => Primitive::Broadcast,
            Op::Concat(..) => Primitive::Concat,
            Op::GatherRows(..) => Primitive::GatherRows,
            Op::RowNorm(_) => Primitive::RowNorm,
            Op::PairwiseSqdist(..) => Primitive::PairwiseSqdist,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::Concat(a, b, _)
            | Op::PairwiseSqdist(a, b) => vec![*a, *b],
            Op::ScalarMul(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::Broadcast(a)
            | Op::GatherRows(a, _)
            | Op::RowNorm(a) => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Every node's parents have smaller indices, so a single reverse sweep
/// in index order is a valid topological traversal. A graph is consumed by
/// [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }
}

fn require_matrix(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_matrix() {
        return Err(dim_err(format!("{what}: expected 2-D input, got {:?}", t.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        self.nodes[v.0].op.primitive()
    }

    /// Parent handles of a node; always smaller than the node itself.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Brings `a` and `b` to a common shape. Only scalar-with-tensor and
    /// row-with-matrix broadcasting is supported.
    fn align(&mut self, a: Var, b: Var, what: &str) -> Result<(Var, Var)> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let na = self.value(a).numel();
        let nb = self.value(b).numel();
        if na == 1 && nb != 1 {
            return Ok((self.broadcast(a, &sb)?, b));
        }
        if nb == 1 && na != 1 {
            return Ok((a, self.broadcast(b, &sa)?));
        }
        if na == 1 && nb == 1 {
            // Keep the higher-rank shape, e.g. a 1x1 matrix times a scalar.
            return if sa.len() >= sb.len() {
                Ok((a, self.broadcast(b, &sa)?))
            } else {
                Ok((self.broadcast(a, &sb)?, b))
            };
        }
        if let Ok(a2) = self.broadcast_check(a, &sb) {
            return Ok((self.push_broadcast(a, a2), b));
        }
        if let Ok(b2) = self.broadcast_check(b, &sa) {
            let bb = self.push_broadcast(b, b2);
            return Ok((a, bb));
        }
        Err(dim_err(format!("{what}: cannot combine shapes {sa:?} and {sb:?}")))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b, "add")?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b, "sub")?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align(a, b, "mul")?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(Op::ScalarMul(a, c), out)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix(ta, "matmul")?;
        require_matrix(tb, "matmul")?;
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(dim_err(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = Tensor::new(vec![n, m], matmul_raw(ta.data(), tb.data(), n, k, m))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    /// Natural logarithm; defined for strictly positive input.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = t.map(f64::ln);
        Ok(self.push(Op::Log(a), out))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| !(x >= 0.0)) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        let out = t.map(f64::sqrt);
        Ok(self.push(Op::Sqrt(a), out))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), out)
    }

    /// `1 / a`, expressed as `exp(-log a)`.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let l = self.log(a)?;
        let n = self.neg(l);
        Ok(self.exp(n))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(dim_err("mean of empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(m)))
    }

    /// Sums each row of an `n x m` matrix into an `n x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        require_matrix(t, "row_sum")?;
        let n = t.rows();
        let data = (0..n).map(|i| t.row(i).iter().sum()).collect();
        let out = Tensor::new(vec![n, 1], data)?;
        Ok(self.push(Op::RowSum(a), out))
    }

    fn broadcast_check(&self, a: Var, shape: &[usize]) -> Result<Tensor> {
        let t = self.value(a);
        let numel: usize = shape.iter().product();
        if t.numel() == 1 {
            return Ok(Tensor::full(shape, t.data()[0]));
        }
        let row_like = matches!(t.shape(), [_] | [1, _]);
        if row_like && shape.len() == 2 && shape[1] == t.numel() {
            let mut data = Vec::with_capacity(numel);
            for _ in 0..shape[0] {
                data.extend_from_slice(t.data());
            }
            return Tensor::new(shape.to_vec(), data);
        }
        Err(dim_err(format!(
            "broadcast: cannot expand {:?} to {shape:?}",
            t.shape()
        )))
    }

    fn push_broadcast(&mut self, a: Var, value: Tensor) -> Var {
        self.push(Op::Broadcast(a), value)
    }

    /// Expands a one-element tensor to any shape, or a row (`[d]` / `[1, d]`)
    /// to an `n x d` matrix.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.broadcast_check(a, shape)?;
        Ok(self.push_broadcast(a, value))
    }

    /// Joins two matrices along `axis` (0 = stack rows, 1 = append columns).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix(ta, "concat")?;
        require_matrix(tb, "concat")?;
        let out = match axis {
            0 => {
                if ta.cols() != tb.cols() {
                    return Err(dim_err("concat axis 0: column counts differ"));
                }
                let mut data = ta.data().to_vec();
                data.extend_from_slice(tb.data());
                Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data)?
            }
            1 => {
                if ta.rows() != tb.rows() {
                    return Err(dim_err("concat axis 1: row counts differ"));
                }
                let mut data = Vec::with_capacity(ta.numel() + tb.numel());
                for i in 0..ta.rows() {
                    data.extend_from_slice(ta.row(i));
                    data.extend_from_slice(tb.row(i));
                }
                Tensor::new(vec![ta.rows(), ta.cols() + tb.cols()], data)?
            }
            _ => return Err(dim_err(format!("concat: invalid axis {axis}"))),
        };
        Ok(self.push(Op::Concat(a, b, axis), out))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        require_matrix(t, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(dim_err(format!(
                "gather_rows: index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), t.cols()], data)?;
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), out))
    }

    /// Euclidean norm of every row, as an `n x 1` column.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        require_matrix(t, "row_norm")?;
        let data = (0..t.rows())
            .map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(vec![t.rows(), 1], data)?;
        Ok(self.push(Op::RowNorm(a), out))
    }

    /// Squared Euclidean distances between the rows of `a` (n x d) and `b` (m x d).
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix(ta, "pairwise_sqdist")?;
        require_matrix(tb, "pairwise_sqdist")?;
        if ta.cols() != tb.cols() {
            return Err(dim_err(format!(
                "pairwise_sqdist: trailing dimensions {} and {} differ",
                ta.cols(),
                tb.cols()
            )));
        }
        let out = Tensor::new(vec![ta.rows(), tb.rows()], sqdist_raw(ta, tb))?;
        Ok(self.push(Op::PairwiseSqdist(a, b), out))
    }

    /// Reverse sweep from a scalar root. Consumes the graph.
    ///
    /// Every leaf receives a gradient of its own shape; leaves the root does
    /// not depend on get zeros.
    pub fn backward(mut self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        let mut grads = HashMap::new();
        for k in (0..=root.0).rev() {
            let Some(g) = adj[k].take() else { continue };
            if !self.nodes[k].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[k].op {
                grads.insert(Var(k), g);
                continue;
            }
            let node = &self.nodes[k];
            for (parent, contrib) in self.local_grads(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Nothing above k reads this value again.
            self.nodes[k].value = Tensor::zeros(&[0]);
        }
        for (k, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                grads
                    .entry(Var(k))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip(val(b), |x, y| x * y)),
                (*b, g.zip(val(a), |x, y| x * y)),
            ],
            Op::ScalarMul(a, c) => vec![(*a, g.map(|x| c * x))],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                let bt = transpose_raw(tb.data(), k, m);
                let at = transpose_raw(ta.data(), n, k);
                let ga = Tensor::new(vec![n, k], matmul_raw(g.data(), &bt, n, m, k))
                    .expect("matmul grad shape");
                let gb = Tensor::new(vec![k, m], matmul_raw(&at, g.data(), k, n, m))
                    .expect("matmul grad shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Exp(a) => vec![(*a, g.zip(&node.value, |x, y| x * y))],
            Op::Log(a) => vec![(*a, g.zip(val(a), |x, y| x / y))],
            Op::Sqrt(a) => vec![(
                *a,
                g.zip(&node.value, |x, s| if s > 0.0 { x / (2.0 * s) } else { 0.0 }),
            )],
            Op::Relu(a) => vec![(*a, g.zip(val(a), |x, y| if y > 0.0 { x } else { 0.0 }))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let t = val(a);
                vec![(*a, Tensor::full(t.shape(), g.data()[0] / t.numel() as f64))]
            }
            Op::RowSum(a) => {
                let t = val(a);
                let (n, m) = (t.rows(), t.cols());
                let mut data = Vec::with_capacity(n * m);
                for i in 0..n {
                    data.extend(std::iter::repeat_n(g.data()[i], m));
                }
                vec![(*a, Tensor::new(t.shape().to_vec(), data).expect("row_sum grad"))]
            }
            Op::Broadcast(a) => {
                let t = val(a);
                if t.numel() == 1 {
                    let s = g.data().iter().sum();
                    vec![(*a, Tensor::full(t.shape(), s))]
                } else {
                    let d = t.numel();
                    let mut acc = vec![0.0; d];
                    for chunk in g.data().chunks_exact(d) {
                        for (s, x) in acc.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    vec![(*a, Tensor::new(t.shape().to_vec(), acc).expect("broadcast grad"))]
                }
            }
            Op::Concat(a, b, axis) => {
                let (ta, tb) = (val(a), val(b));
                match axis {
                    0 => {
                        let split = ta.numel();
                        let ga = Tensor::new(ta.shape().to_vec(), g.data()[..split].to_vec());
                        let gb = Tensor::new(tb.shape().to_vec(), g.data()[split..].to_vec());
                        vec![(*a, ga.expect("concat grad")), (*b, gb.expect("concat grad"))]
                    }
                    _ => {
                        let (ca, cb) = (ta.cols(), tb.cols());
                        let mut da = Vec::with_capacity(ta.numel());
                        let mut db = Vec::with_capacity(tb.numel());
                        for row in g.data().chunks_exact(ca + cb) {
                            da.extend_from_slice(&row[..ca]);
                            db.extend_from_slice(&row[ca..]);
                        }
                        vec![
                            (*a, Tensor::new(ta.shape().to_vec(), da).expect("concat grad")),
                            (*b, Tensor::new(tb.shape().to_vec(), db).expect("concat grad")),
                        ]
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let t = val(a);
                let c = t.cols();
                let mut ga = Tensor::zeros(t.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut ga.data_mut()[i * c..(i + 1) * c];
                    for (d, s) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *d += s;
                    }
                }
                vec![(*a, ga)]
            }
            Op::RowNorm(a) => {
                let t = val(a);
                let c = t.cols();
                let mut ga = Tensor::zeros(t.shape());
                for i in 0..t.rows() {
                    let norm = node.value.data()[i];
                    if norm > 0.0 {
                        let scale = g.data()[i] / norm;
                        for j in 0..c {
                            ga.data_mut()[i * c + j] = scale * t.data()[i * c + j];
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::PairwiseSqdist(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (n, m, d) = (ta.rows(), tb.rows(), ta.cols());
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for i in 0..n {
                    let ai = ta.row(i);
                    for j in 0..m {
                        let gij = 2.0 * g.data()[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = tb.row(j);
                        for k in 0..d {
                            let diff = gij * (ai[k] - bj[k]);
                            ga.data_mut()[i * d + k] += diff;
                            gb.data_mut()[j * d + k] -= diff;
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
        }
    }
}

fn sqdist_raw(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            let bj = b.row(j);
            out.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
        }
    }
    out
}
