//! Define-by-run reverse-mode tape over dense matrices.
//!
//! Every operation appends one node holding its value and the indices of its
//! inputs. [`Tape::backward`] walks the nodes in reverse, so the recording
//! order is already a topological order. A tape is consumed by one backward
//! pass; build a fresh tape for the next minibatch.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::Matrix;
use super::params::ParameterSet;
use crate::error::{contract, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    Clamp(usize, f64, f64),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    SumAll(usize),
    RowSum(usize),
    LogSumExpRows(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Parameter name → node handle for one registered [`ParameterSet`].
pub type ParamVars = BTreeMap<String, Var>;

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: &Matrix) -> Var {
        let v = self.push(value.clone(), Op::Leaf);
        self.params.push((name.to_string(), v.index));
        v
    }

    /// Registers every array of `set` as a named leaf.
    pub fn params(&mut self, set: &ParameterSet) -> ParamVars {
        set.iter().map(|(name, value)| (name.to_string(), self.param(name, value))).collect()
    }

    /// Unnamed leaf whose gradient can be queried through [`Gradients::get`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value);
        self.push(v, Op::MatMul(ia, ib))
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ir) = (self.idx(a), self.idx(row));
        let (av, rv) = (&self.nodes[ia].value, &self.nodes[ir].value);
        assert_eq!(rv.rows(), 1);
        assert_eq!(av.cols(), rv.cols(), "bias width mismatch");
        let mut out = av.clone();
        let m = av.cols();
        for chunk in out.data_mut().chunks_mut(m) {
            for (o, b) in chunk.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(ia, ir))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, f);
        self.push(v, op(ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    /// Sum of a nonempty list of same-shaped nodes.
    pub fn add_all(&mut self, items: &[Var]) -> Var {
        let mut acc = items[0];
        for &v in &items[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(f);
        self.push(v, op(ia))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(|x| x * c);
        self.push(v, Op::Scale(ia, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x + c, Op::AddScalar)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip)
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(ia, lo, hi))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.slice_cols(start, end);
        self.push(v, Op::SliceCols(ia, start))
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn concat_cols(&mut self, items: &[Var]) -> Var {
        let idx: Vec<usize> = items.iter().map(|&v| self.idx(v)).collect();
        let rows = self.nodes[idx[0]].value.rows();
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                let m = &self.nodes[i].value;
                assert_eq!(m.rows(), rows, "concat row mismatch");
                data.extend_from_slice(m.row(r));
            }
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatCols(idx))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s = self.nodes[ia].value.sum();
        self.push(Matrix::scalar(s), Op::SumAll(ia))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum: `n × m → n × 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = &self.nodes[ia].value;
        let data = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let v = Matrix::from_vec(m.rows(), 1, data);
        self.push(v, Op::RowSum(ia))
    }

    /// Per-row log-sum-exp with max-shift stabilization: `n × k → n × 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = &self.nodes[ia].value;
        let data = (0..m.rows()).map(|r| logsumexp(m.row(r))).collect();
        let v = Matrix::from_vec(m.rows(), 1, data);
        self.push(v, Op::LogSumExpRows(ia))
    }

    /// Reverse pass from a scalar output. A tape supports exactly one backward pass.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        let out = self.idx(output);
        if self.consumed {
            return contract("backward() already ran on this tape; record a new tape");
        }
        if self.nodes[out].value.len() != 1 {
            let (r, c) = self.nodes[out].value.shape();
            return contract(format!("backward() needs a scalar output, got {r}x{c}"));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out] = Some(Matrix::scalar(1.0));

        for i in (0..=out).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            // interior gradients are dropped once propagated
            let Some(g) = grads[i].take() else { continue };
            let val = &node.value;
            let nodes = &self.nodes;
            let v = |j: usize| &nodes[j].value;
            let send = |j: usize, contrib: Matrix, grads: &mut Vec<Option<Matrix>>| match &mut grads[j] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Leaf | Op::Const => unreachable!(),
                Op::MatMul(a, b) => {
                    send(*a, g.matmul_t(v(*b)), &mut grads);
                    send(*b, v(*a).t_matmul(&g), &mut grads);
                }
                Op::AddRow(a, r) => {
                    let m = g.cols();
                    let mut row = vec![0.0; m];
                    for chunk in g.data().chunks(m) {
                        for (acc, x) in row.iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    send(*r, Matrix::row_vector(row), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*b, g.clone(), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(v(*b), |x, y| x * y), &mut grads);
                    send(*b, g.zip_map(v(*a), |x, y| x * y), &mut grads);
                }
                Op::Div(a, b) => {
                    // d(a/b)/da = 1/b, d(a/b)/db = -(a/b)/b
                    send(*a, g.zip_map(v(*b), |x, y| x / y), &mut grads);
                    let t = g.zip_map(val, |x, q| x * q);
                    send(*b, t.zip_map(v(*b), |x, y| -x / y), &mut grads);
                }
                Op::Neg(a) => send(*a, g.map(|x| -x), &mut grads),
                Op::Scale(a, c) => {
                    let c = *c;
                    send(*a, g.map(|x| x * c), &mut grads)
                }
                Op::AddScalar(a) => send(*a, g, &mut grads),
                Op::Exp(a) => send(*a, g.zip_map(val, |x, e| x * e), &mut grads),
                Op::Ln(a) => send(*a, g.zip_map(v(*a), |x, y| x / y), &mut grads),
                Op::Tanh(a) => send(*a, g.zip_map(val, |x, t| x * (1.0 - t * t)), &mut grads),
                Op::Relu(a) => send(*a, g.zip_map(v(*a), |x, y| if y > 0.0 { x } else { 0.0 }), &mut grads),
                Op::Abs(a) => send(*a, g.zip_map(v(*a), |x, y| x * y.signum() * f64::from(y != 0.0)), &mut grads),
                Op::Square(a) => send(*a, g.zip_map(v(*a), |x, y| 2.0 * x * y), &mut grads),
                Op::Sqrt(a) => send(*a, g.zip_map(val, |x, s| 0.5 * x / s), &mut grads),
                Op::Recip(a) => send(*a, g.zip_map(val, |x, r| -x * r * r), &mut grads),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    send(*a, g.zip_map(v(*a), |x, y| if y >= lo && y <= hi { x } else { 0.0 }), &mut grads)
                }
                Op::SliceCols(a, start) => {
                    let src = v(*a);
                    let mut full = Matrix::zeros(src.rows(), src.cols());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        let off = r * src.cols() + start;
                        full.data_mut()[off..off + w].copy_from_slice(g.row(r));
                    }
                    send(*a, full, &mut grads);
                }
                Op::ConcatCols(items) => {
                    let mut offset = 0;
                    for &j in items {
                        let w = v(j).cols();
                        send(j, g.slice_cols(offset, offset + w), &mut grads);
                        offset += w;
                    }
                }
                Op::SumAll(a) => {
                    let (r, c) = v(*a).shape();
                    send(*a, Matrix::filled(r, c, g.item()), &mut grads);
                }
                Op::RowSum(a) => {
                    let (r, c) = v(*a).shape();
                    let mut full = Matrix::zeros(r, c);
                    for (row, &gr) in full.data_mut().chunks_mut(c).zip(g.data()) {
                        row.fill(gr);
                    }
                    send(*a, full, &mut grads);
                }
                Op::LogSumExpRows(a) => {
                    // softmax weights times upstream gradient
                    let src = v(*a);
                    let c = src.cols();
                    let mut full = Matrix::zeros(src.rows(), c);
                    for r in 0..src.rows() {
                        let lse = val.data()[r];
                        let gr = g.data()[r];
                        for (o, &x) in full.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src.row(r)) {
                            *o = gr * (x - lse).exp();
                        }
                    }
                    send(*a, full, &mut grads);
                }
            }
        }

        let names = self.params.iter().cloned().collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { tape: self.id, grads, shapes, names })
    }
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    names: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient with respect to the leaf `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Matrix {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.index];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Gradient map keyed by parameter name. Gradients of parameters registered
    /// more than once are summed.
    pub fn by_name(&self) -> BTreeMap<String, Matrix> {
        let mut out: BTreeMap<String, Matrix> = BTreeMap::new();
        for (name, idx) in &self.names {
            let g = self.get(Var { tape: self.tape, index: *idx });
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

/// Max-shifted log-sum-exp of a slice. Returns `-inf` for an empty slice or all `-inf` inputs.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gradient_is_one() {
        let mut t = Tape::new();
        let w = t.param("w", &Matrix::scalar(3.5));
        let g = t.backward(w).unwrap();
        assert_eq!(g.by_name()["w"].item(), 1.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w0 = Matrix::row_vector(vec![1.0, -2.0, 0.5]);
        let mut t = Tape::new();
        let w = t.param("w", &w0);
        let sq = t.square(w);
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.by_name()["w"].data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut t = Tape::new();
        let w = t.param("w", &Matrix::scalar(1.0));
        let y = t.square(w);
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let w = t.param("w", &Matrix::row_vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(crate::Error::Contract(_))));
    }

    #[test]
    #[should_panic(expected = "different tape")]
    fn tapes_do_not_share_nodes() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.constant(Matrix::scalar(1.0));
        b.exp(x);
    }

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.param("a", &Matrix::row_vector(vec![1.0, 2.0]));
        let b = t.param("b", &Matrix::scalar(2.0));
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).data(), &[0.0]);
        assert_eq!(g.get(a).data(), &[1.0, 1.0]);
    }
}
