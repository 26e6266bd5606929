//! Matrix-level reverse-mode differentiation tape.
//!
//! Each forward operation appends a node holding its value and enough
//! context to push exact vector-Jacobian products back to its parents.
//! A tape lives for one forward/backward pass: leaves are created from
//! parameter values, the loss is built up through the ops below, and
//! [`Tape::backward`] fills the leaf gradients.
//!
//! Shapes are validated by the public module entry points before any
//! tape is built, so shape violations here are programming errors and
//! panic rather than returning `Result`.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;

/// Handle to a tape node. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Leaf or constant; no parents.
    Input,
    MatMul(Var, Var),
    /// `a * b^T`.
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sqrt(Var),
    Ln(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var, f64),
    Sum(Var),
    RowSums(Var),
    CrossEntropy(Var, Rc<Vec<usize>>),
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Reshape(Var),
    MulConst(Var, Rc<Matrix>),
    AddConst(Var),
    /// Broadcast a 1xC bias row over an NxC matrix.
    AddBiasRow(Var, Var),
    /// Per-block scaled dot-product attention over stacked rows.
    BlockAttention { q: Var, k: Var, block: usize, tau: f64 },
    /// Per-block product `P_u * V_u` over stacked rows.
    BlockMatMul { p: Var, v: Var, block: usize },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input whose gradient will be tracked.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// Registers a constant input (gradient still accumulated, callers
    /// simply never read it).
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// Copy of the value at `v`.
    pub fn value(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Reads without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let m = &nodes[v.0].value;
        assert_eq!(m.shape(), (1, 1), "scalar() on non-1x1 node");
        m.get(0, 0)
    }

    /// Gradient accumulated at `v` after [`Tape::backward`]; zeros if
    /// the node never received one.
    pub fn grad(&self, v: Var) -> Matrix {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    // ---- forward ops ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .matmul(&nodes[b.0].value)
                .expect("tape matmul: shapes pre-validated")
        };
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul_nt(&nodes[b.0].value)
        };
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.add(&nodes[b.0].value)
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.sub(&nodes[b.0].value)
        };
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.hadamard(&nodes[b.0].value)
        };
        self.push(value, Op::Mul(a, b))
    }

    /// Elementwise division.
    pub fn div(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.zip_map(&nodes[b.0].value, |x, y| x / y)
        };
        self.push(value, Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.scale(k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v + k);
        self.push(value, Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn powf(&self, a: Var, p: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v.powf(p));
        self.push(value, Op::Powf(a, p))
    }

    pub fn clamp_min(&self, a: Var, lo: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v.max(lo));
        self.push(value, Op::ClampMin(a, lo))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax of `a / tau`, computed with row-max subtraction.
    pub fn softmax_rows(&self, a: Var, tau: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            softmax_rows_value(&nodes[a.0].value, tau)
        };
        self.push(value, Op::SoftmaxRows(a, tau))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Matrix::from_vec(1, 1, vec![nodes[a.0].value.sum()]).expect("finite sum")
        };
        self.push(value, Op::Sum(a))
    }

    /// Column vector of row sums.
    pub fn row_sums(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.row_sums();
        self.push(value, Op::RowSums(a))
    }

    /// Mean negative log-softmax probability of the true class per row.
    pub fn cross_entropy(&self, logits: Var, labels: Rc<Vec<usize>>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let l = &nodes[logits.0].value;
            assert_eq!(l.rows(), labels.len(), "cross_entropy: one logit row per label");
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                assert!(y < l.cols(), "cross_entropy: label {y} out of {}", l.cols());
                let row = l.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            Matrix::from_vec(1, 1, vec![total / labels.len() as f64]).expect("finite loss")
        };
        self.push(value, Op::CrossEntropy(logits, labels))
    }

    pub fn gather_rows(&self, a: Var, indices: Rc<Vec<usize>>) -> Var {
        let value = self.nodes.borrow()[a.0].value.gather_rows(&indices);
        self.push(value, Op::GatherRows(a, indices))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.rows(), y.rows(), "concat_cols: row counts differ");
            Matrix::from_fn(x.rows(), x.cols() + y.cols(), |i, j| {
                if j < x.cols() {
                    x.get(i, j)
                } else {
                    y.get(i, j - x.cols())
                }
            })
        };
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.cols(), y.cols(), "concat_rows: col counts differ");
            let mut data = Vec::with_capacity(x.len() + y.len());
            data.extend_from_slice(x.as_slice());
            data.extend_from_slice(y.as_slice());
            Matrix::from_vec(x.rows() + y.rows(), x.cols(), data).expect("finite concat")
        };
        self.push(value, Op::ConcatRows(a, b))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.0].value;
            assert_eq!(m.len(), rows * cols, "reshape: size mismatch");
            Matrix::from_vec(rows, cols, m.as_slice().to_vec()).expect("finite reshape")
        };
        self.push(value, Op::Reshape(a))
    }

    /// Elementwise multiply by a constant matrix (masks, indicators).
    pub fn mul_const(&self, a: Var, c: Rc<Matrix>) -> Var {
        let value = self.nodes.borrow()[a.0].value.hadamard(&c);
        self.push(value, Op::MulConst(a, c))
    }

    /// Elementwise add of a constant matrix.
    pub fn add_const(&self, a: Var, c: Rc<Matrix>) -> Var {
        let value = self.nodes.borrow()[a.0].value.add(&c);
        self.push(value, Op::AddConst(a))
    }

    /// `a[i, j] + bias[0, j]`.
    pub fn add_bias_row(&self, a: Var, bias: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, b) = (&nodes[a.0].value, &nodes[bias.0].value);
            assert_eq!(b.rows(), 1, "add_bias_row: bias must be 1 row");
            assert_eq!(b.cols(), x.cols(), "add_bias_row: width mismatch");
            Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + b.get(0, j))
        };
        self.push(value, Op::AddBiasRow(a, bias))
    }

    /// For stacked per-patient blocks of `block` rows, computes the
    /// row-stochastic attention `softmax_j(q_i . k_j / tau)` within each
    /// block. Input rows `u*block + i` hold the i-th query/key of
    /// patient u; output rows hold the matching attention rows.
    pub fn block_attention(&self, q: Var, k: Var, block: usize, tau: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (qm, km) = (&nodes[q.0].value, &nodes[k.0].value);
            assert_eq!(qm.shape(), km.shape(), "block_attention: q/k shapes differ");
            assert!(block > 0 && qm.rows() % block == 0, "block_attention: bad block");
            let mut out = Matrix::zeros(qm.rows(), block);
            for u in 0..qm.rows() / block {
                for i in 0..block {
                    let qi = qm.row(u * block + i);
                    let row = out.row_mut(u * block + i);
                    for j in 0..block {
                        let kj = km.row(u * block + j);
                        row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / tau;
                    }
                }
                for i in 0..block {
                    softmax_in_place(out.row_mut(u * block + i));
                }
            }
            out
        };
        self.push(value, Op::BlockAttention { q, k, block, tau })
    }

    /// For stacked blocks, multiplies each `block x block` slice of `p`
    /// with the matching `block x d` slice of `v`.
    pub fn block_matmul(&self, p: Var, v: Var, block: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            block_matmul_value(&nodes[p.0].value, &nodes[v.0].value, block)
        };
        self.push(value, Op::BlockMatMul { p, v, block })
    }

    // ---- backward ----

    /// Propagates 1.0 from the 1x1 node `loss` back to every input.
    pub fn backward(&self, loss: Var) {
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(
            nodes[loss.0].value.shape(),
            (1, 1),
            "backward: loss must be scalar"
        );
        nodes[loss.0].grad = Some(Matrix::from_vec(1, 1, vec![1.0]).unwrap());

        for i in (0..nodes.len()).rev() {
            let g = match nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&mut nodes, i, &g);
            nodes[i].grad = Some(g);
        }
    }
}

fn softmax_rows_value(m: &Matrix, tau: f64) -> Matrix {
    let mut out = m.map(|v| v / tau);
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn block_matmul_value(p: &Matrix, v: &Matrix, block: usize) -> Matrix {
    assert_eq!(p.cols(), block, "block_matmul: p width must equal block");
    assert_eq!(p.rows(), v.rows(), "block_matmul: row counts differ");
    assert!(block > 0 && p.rows() % block == 0, "block_matmul: bad block");
    let d = v.cols();
    let mut out = Matrix::zeros(v.rows(), d);
    for u in 0..p.rows() / block {
        for i in 0..block {
            let p_row = p.row(u * block + i);
            let out_row = out.row_mut(u * block + i);
            for (j, &w) in p_row.iter().enumerate() {
                let v_row = &v.row(u * block + j)[..d];
                for (o, x) in out_row.iter_mut().zip(v_row) {
                    *o += w * x;
                }
            }
        }
    }
    out
}

fn accum(nodes: &mut [Node], idx: usize, delta: Matrix) {
    match &mut nodes[idx].grad {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Softmax vector-Jacobian product for one row: given output probs `p`
/// and upstream grad `g`, writes `(g - (g.p)) * p` into `out`.
fn softmax_vjp_row(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o = (gi - dot) * pi;
    }
}

fn backprop_node(nodes: &mut Vec<Node>, i: usize, g: &Matrix) {
    // Values are read before any gradient slot of a parent is touched;
    // all index pairs here are distinct from `i` except via accum.
    match &nodes[i].op {
        Op::Input => {}
        Op::MatMul(a, b) => {
            let (a, b) = (a.0, b.0);
            let da = g.matmul_nt(&nodes[b].value);
            let db = nodes[a].value.transpose().matmul(g).expect("shapes fixed");
            accum(nodes, a, da);
            accum(nodes, b, db);
        }
        Op::MatMulNt(a, b) => {
            let (a, b) = (a.0, b.0);
            let da = g.matmul(&nodes[b].value).expect("shapes fixed");
            let db = g.transpose().matmul(&nodes[a].value).expect("shapes fixed");
            accum(nodes, a, da);
            accum(nodes, b, db);
        }
        Op::Transpose(a) => {
            let a = a.0;
            accum(nodes, a, g.transpose());
        }
        Op::Add(a, b) => {
            let (a, b) = (a.0, b.0);
            accum(nodes, a, g.clone());
            accum(nodes, b, g.clone());
        }
        Op::Sub(a, b) => {
            let (a, b) = (a.0, b.0);
            accum(nodes, a, g.clone());
            accum(nodes, b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            let (a, b) = (a.0, b.0);
            let da = g.hadamard(&nodes[b].value);
            let db = g.hadamard(&nodes[a].value);
            accum(nodes, a, da);
            accum(nodes, b, db);
        }
        Op::Div(a, b) => {
            let (a, b) = (a.0, b.0);
            let da = g.zip_map(&nodes[b].value, |gi, y| gi / y);
            let db = {
                let out = nodes[a].value.zip_map(&nodes[b].value, |x, y| x / y);
                g.hadamard(&out).zip_map(&nodes[b].value, |gy, y| -gy / y)
            };
            accum(nodes, a, da);
            accum(nodes, b, db);
        }
        Op::Scale(a, k) => {
            let (a, k) = (a.0, *k);
            accum(nodes, a, g.scale(k));
        }
        Op::AddScalar(a) => {
            let a = a.0;
            accum(nodes, a, g.clone());
        }
        Op::Relu(a) => {
            let a = a.0;
            let da = g.zip_map(&nodes[a].value, |gi, x| if x > 0.0 { gi } else { 0.0 });
            accum(nodes, a, da);
        }
        Op::Sqrt(a) => {
            let a = a.0;
            let da = g.zip_map(&nodes[i].value, |gi, s| gi * 0.5 / s);
            accum(nodes, a, da);
        }
        Op::Ln(a) => {
            let a = a.0;
            let da = g.zip_map(&nodes[a].value, |gi, x| gi / x);
            accum(nodes, a, da);
        }
        Op::Powf(a, p) => {
            let (a, p) = (a.0, *p);
            let da = g.zip_map(&nodes[a].value, |gi, x| gi * p * x.powf(p - 1.0));
            accum(nodes, a, da);
        }
        Op::ClampMin(a, lo) => {
            let (a, lo) = (a.0, *lo);
            let da = g.zip_map(&nodes[a].value, |gi, x| if x >= lo { gi } else { 0.0 });
            accum(nodes, a, da);
        }
        Op::Clamp(a, lo, hi) => {
            let (a, lo, hi) = (a.0, *lo, *hi);
            let da = g.zip_map(
                &nodes[a].value,
                |gi, x| if x >= lo && x <= hi { gi } else { 0.0 },
            );
            accum(nodes, a, da);
        }
        Op::SoftmaxRows(a, tau) => {
            let (a, tau) = (a.0, *tau);
            let p = &nodes[i].value;
            let mut da = Matrix::zeros(p.rows(), p.cols());
            for r in 0..p.rows() {
                let mut row = vec![0.0; p.cols()];
                softmax_vjp_row(p.row(r), g.row(r), &mut row);
                for v in row.iter_mut() {
                    *v /= tau;
                }
                da.row_mut(r).copy_from_slice(&row);
            }
            accum(nodes, a, da);
        }
        Op::Sum(a) => {
            let a = a.0;
            let s = g.get(0, 0);
            let (r, c) = nodes[a].value.shape();
            accum(nodes, a, Matrix::filled(r, c, s));
        }
        Op::RowSums(a) => {
            let a = a.0;
            let (r, c) = nodes[a].value.shape();
            let da = Matrix::from_fn(r, c, |ri, _| g.get(ri, 0));
            accum(nodes, a, da);
        }
        Op::CrossEntropy(logits, labels) => {
            let (logits, labels) = (logits.0, labels.clone());
            let s = g.get(0, 0) / labels.len() as f64;
            let l = &nodes[logits].value;
            let mut da = softmax_rows_value(l, 1.0);
            for (r, &y) in labels.iter().enumerate() {
                let row = da.row_mut(r);
                row[y] -= 1.0;
                for v in row.iter_mut() {
                    *v *= s;
                }
            }
            accum(nodes, logits, da);
        }
        Op::GatherRows(a, indices) => {
            let (a, indices) = (a.0, indices.clone());
            let (r, c) = nodes[a].value.shape();
            let mut da = Matrix::zeros(r, c);
            for (src, &dst) in indices.iter().enumerate() {
                let g_row = g.row(src).to_vec();
                for (o, v) in da.row_mut(dst).iter_mut().zip(g_row) {
                    *o += v;
                }
            }
            accum(nodes, a, da);
        }
        Op::ConcatCols(a, b) => {
            let (a, b) = (a.0, b.0);
            let ca = nodes[a].value.cols();
            let da = Matrix::from_fn(g.rows(), ca, |r, c| g.get(r, c));
            let db = Matrix::from_fn(g.rows(), g.cols() - ca, |r, c| g.get(r, c + ca));
            accum(nodes, a, da);
            accum(nodes, b, db);
        }
        Op::ConcatRows(a, b) => {
            let (a, b) = (a.0, b.0);
            let ra = nodes[a].value.rows();
            let da = Matrix::from_fn(ra, g.cols(), |r, c| g.get(r, c));
            let db = Matrix::from_fn(g.rows() - ra, g.cols(), |r, c| g.get(r + ra, c));
            accum(nodes, a, da);
            accum(nodes, b, db);
        }
        Op::Reshape(a) => {
            let a = a.0;
            let (r, c) = nodes[a].value.shape();
            let da = Matrix::from_vec(r, c, g.as_slice().to_vec()).expect("finite grad");
            accum(nodes, a, da);
        }
        Op::MulConst(a, c) => {
            let (a, c) = (a.0, c.clone());
            accum(nodes, a, g.hadamard(&c));
        }
        Op::AddConst(a) => {
            let a = a.0;
            accum(nodes, a, g.clone());
        }
        Op::AddBiasRow(a, bias) => {
            let (a, bias) = (a.0, bias.0);
            let mut db = Matrix::zeros(1, g.cols());
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    db.set(0, c, db.get(0, c) + g.get(r, c));
                }
            }
            accum(nodes, a, g.clone());
            accum(nodes, bias, db);
        }
        Op::BlockAttention { q, k, block, tau } => {
            let (q, k, block, tau) = (q.0, k.0, *block, *tau);
            let p = &nodes[i].value;
            let qm = &nodes[q].value;
            let km = &nodes[k].value;
            let d = qm.cols();
            let mut dq = Matrix::zeros(qm.rows(), d);
            let mut dk = Matrix::zeros(km.rows(), d);
            let mut ds_row = vec![0.0; block];
            for u in 0..qm.rows() / block {
                for i_row in 0..block {
                    let r = u * block + i_row;
                    softmax_vjp_row(p.row(r), g.row(r), &mut ds_row);
                    // dS_ij flows to q_i and k_j with factor 1/tau.
                    for (j, &ds) in ds_row.iter().enumerate() {
                        if ds == 0.0 {
                            continue;
                        }
                        let w = ds / tau;
                        let kj = u * block + j;
                        for t in 0..d {
                            let kv = km.get(kj, t);
                            let qv = qm.get(r, t);
                            dq.set(r, t, dq.get(r, t) + w * kv);
                            dk.set(kj, t, dk.get(kj, t) + w * qv);
                        }
                    }
                }
            }
            accum(nodes, q, dq);
            accum(nodes, k, dk);
        }
        Op::BlockMatMul { p, v, block } => {
            let (p, v, block) = (p.0, v.0, *block);
            let pm = &nodes[p].value;
            let vm = &nodes[v].value;
            let d = vm.cols();
            let mut dp = Matrix::zeros(pm.rows(), block);
            let mut dv = Matrix::zeros(vm.rows(), d);
            for u in 0..pm.rows() / block {
                for i_row in 0..block {
                    let r = u * block + i_row;
                    let g_row = g.row(r);
                    for j in 0..block {
                        let vj = u * block + j;
                        let v_row = vm.row(vj);
                        // dP[i,j] = g_i . v_j ; dV[j] += P[i,j] * g_i
                        let mut dot = 0.0;
                        for t in 0..d {
                            dot += g_row[t] * v_row[t];
                        }
                        dp.set(r, j, dot);
                        let w = pm.get(r, j);
                        if w != 0.0 {
                            for t in 0..d {
                                dv.set(vj, t, dv.get(vj, t) + w * g_row[t]);
                            }
                        }
                    }
                }
            }
            accum(nodes, p, dp);
            accum(nodes, v, dv);
        }
    }
}

/// Value-level row softmax shared with the tape op.
pub fn softmax_rows(logits: &Matrix, tau: f64) -> Result<Matrix> {
    if tau <= 0.0 {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    Ok(softmax_rows_value(logits, tau))
}

/// Value-level mean cross-entropy shared with the tape op.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::dimension(
            "cross_entropy",
            format!("{} logit rows vs {} labels", logits.rows(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, Rc::new(labels.to_vec()));
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn finite_diff(
        f: &mut dyn FnMut(&Matrix) -> f64,
        x: &Matrix,
        h: f64,
    ) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut xp = x.clone();
                xp.set(i, j, x.get(i, j) + h);
                let mut xm = x.clone();
                xm.set(i, j, x.get(i, j) - h);
                out.set(i, j, (f(&xp) - f(&xm)) / (2.0 * h));
            }
        }
        out
    }

    /// Runs `build` to a scalar loss and checks the tape gradient of the
    /// single input against central differences.
    fn check_grad(x: Matrix, build: impl Fn(&Tape, Var) -> Var) {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = build(&tape, v);
        tape.backward(loss);
        let analytic = tape.grad(v);

        let mut eval = |m: &Matrix| {
            let t = Tape::new();
            let v = t.leaf(m.clone());
            t.scalar(build(&t, v))
        };
        let numeric = finite_diff(&mut eval, &x, 1e-5);
        let diff = analytic.max_abs_diff(&numeric);
        let scale = numeric
            .as_slice()
            .iter()
            .map(|v| v.abs())
            .fold(1.0, f64::max);
        assert!(
            diff / scale < 1e-6,
            "grad mismatch: analytic {:?} numeric {:?}",
            analytic.as_slice(),
            numeric.as_slice()
        );
    }

    fn test_matrix(rows: usize, cols: usize, shift: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| {
            ((i * cols + j) as f64 * 0.7 + shift).sin() * 0.9 + 0.1
        })
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_closed_form() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0_f64.ln(), 0.0]]).unwrap();
        let p = softmax_rows(&m, 1.0).unwrap();
        assert_abs_diff_eq!(p.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(1, 0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(1, 1), 1.0 / 3.0, epsilon = 1e-15);
        for i in 0..2 {
            assert_abs_diff_eq!(p.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_positive_tau() {
        let m = Matrix::zeros(1, 2);
        assert!(matches!(
            softmax_rows(&m, 0.0),
            Err(crate::error::Error::Parameter(_))
        ));
        assert!(softmax_rows(&m, -1.0).is_err());
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let m = Matrix::from_rows(&[vec![50.0, -50.0, 10.0]]).unwrap();
        let p = softmax_rows(&m, 1.0).unwrap();
        assert!(p.is_finite());
        assert_abs_diff_eq!(p.row(0).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // Uniform logits over C classes -> ln C.
        let logits = Matrix::zeros(3, 4);
        let loss = cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert_abs_diff_eq!(loss, 4.0_f64.ln(), epsilon = 1e-12);

        // Two classes, logits [0, ln 3], true class 1 -> ln(4/3).
        let logits = Matrix::from_rows(&[vec![0.0, 3.0_f64.ln()]]).unwrap();
        let loss = cross_entropy(&logits, &[1]).unwrap();
        assert_abs_diff_eq!(loss, (4.0_f64 / 3.0).ln(), epsilon = 1e-12);

        // Huge margin for the true class -> loss ~ 0.
        let logits = Matrix::from_rows(&[vec![80.0, 0.0]]).unwrap();
        let loss = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Matrix::zeros(1, 2);
        assert!(matches!(
            cross_entropy(&logits, &[2]),
            Err(crate::error::Error::Data(_))
        ));
    }

    #[test]
    fn grad_matmul_chain() {
        let x = test_matrix(3, 4, 0.0);
        let w = test_matrix(4, 2, 1.3);
        check_grad(x, move |t, v| {
            let wv = t.constant(w.clone());
            let y = t.matmul(v, wv);
            t.sum(t.mul(y, y))
        });
    }

    #[test]
    fn grad_matmul_nt_and_div() {
        let x = test_matrix(3, 3, 0.4);
        check_grad(x, |t, v| {
            let a = t.matmul_nt(v, v);
            let denom = t.add_scalar(t.mul(v, v), 2.0);
            t.sum(t.div(a, denom))
        });
    }

    #[test]
    fn grad_softmax_cross_entropy_path() {
        let x = test_matrix(4, 3, 0.9);
        check_grad(x, |t, v| {
            let p = t.softmax_rows(v, 1.7);
            let q = t.relu(t.add_scalar(p, -0.05));
            t.cross_entropy(q, Rc::new(vec![0, 2, 1, 1]))
        });
    }

    #[test]
    fn grad_block_attention_and_block_matmul() {
        let q = test_matrix(6, 3, 0.2); // 2 blocks of 3
        let k = test_matrix(6, 3, 1.1);
        let v = test_matrix(6, 3, 2.2);
        check_grad(q, move |t, qv| {
            let kv = t.constant(k.clone());
            let vv = t.constant(v.clone());
            let p = t.block_attention(qv, kv, 3, 1.5);
            let agg = t.block_matmul(p, vv, 3);
            t.sum(t.mul(agg, agg))
        });
        let q = test_matrix(6, 3, 0.2);
        let k2 = test_matrix(6, 3, 1.1);
        check_grad(k2, move |t, kv| {
            let qv = t.constant(q.clone());
            let p = t.block_attention(qv, kv, 3, 1.5);
            t.sum(t.mul(p, p))
        });
    }

    #[test]
    fn grad_block_matmul_wrt_values() {
        let p = test_matrix(4, 2, 0.0).map(|x| x.abs() + 0.1); // 2 blocks of 2
        let v = test_matrix(4, 3, 0.5);
        check_grad(v, move |t, vv| {
            let pv = t.constant(p.clone());
            let agg = t.block_matmul(pv, vv, 2);
            t.sum(t.mul(agg, agg))
        });
    }

    #[test]
    fn grad_reductions_and_elementwise() {
        let x = test_matrix(3, 4, 0.0).map(|v| v.abs() + 0.5);
        check_grad(x, |t, v| {
            let rs = t.row_sums(v);
            let ln = t.ln(t.clamp_min(rs, 1e-12));
            let sq = t.sqrt(v);
            let pw = t.powf(v, -0.5);
            t.add(t.sum(ln), t.add(t.sum(sq), t.sum(pw)))
        });
    }

    #[test]
    fn grad_gather_concat_reshape() {
        let x = test_matrix(4, 3, 0.3);
        check_grad(x, |t, v| {
            let g = t.gather_rows(v, Rc::new(vec![2, 0, 2, 3]));
            let c = t.concat_cols(g, g);
            let r = t.reshape(c, 8, 3);
            let rows = t.concat_rows(r, r);
            t.sum(t.mul(rows, rows))
        });
    }

    #[test]
    fn grad_bias_row() {
        let b = test_matrix(1, 3, 0.8);
        check_grad(b, |t, bias| {
            let x = t.constant(test_matrix(4, 3, 0.1));
            let y = t.add_bias_row(x, bias);
            t.sum(t.mul(y, y))
        });
    }

    #[test]
    fn gradients_accumulate_across_shared_use() {
        // f(x) = sum(x) + sum(x) has gradient 2 everywhere.
        let tape = Tape::new();
        let v = tape.leaf(Matrix::filled(2, 2, 3.0));
        let loss = tape.add(tape.sum(v), tape.sum(v));
        tape.backward(loss);
        assert_eq!(tape.grad(v).as_slice(), &[2.0; 4]);
    }
}
