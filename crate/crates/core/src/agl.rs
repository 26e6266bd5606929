//! Adaptive graph structure learning.
//!
//! The patient graph is the thresholded, rescaled weighted cosine
//! similarity of embeddings under a trainable metric `W_A`, regularized
//! for smoothness (Dirichlet energy), connectivity (log barrier), and
//! against excessive density (Frobenius term). A kNN/RBF construction
//! is included as the non-learned baseline.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Parameter, Tape, Var};

/// Row sums below this are clamped inside the log barrier.
const DEGREE_FLOOR: f64 = 1e-12;
/// Projected embeddings with a norm below this are degenerate.
const NORM_FLOOR: f64 = 1e-12;

/// Trainable metric and sparsification/regularization hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphLearnerParams {
    /// Metric weight matrix, `(d_h + M^2) x d_A`, right-multiplied.
    pub metric: Parameter,
    /// Sparsification threshold in (0, 1).
    pub theta: f64,
    /// Connectivity weight.
    pub beta: f64,
    /// Frobenius weight.
    pub gamma: f64,
}

impl GraphLearnerParams {
    pub fn new(
        embed_dim: usize,
        d_a: usize,
        theta: f64,
        beta: f64,
        gamma: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_theta(theta)?;
        if beta < 0.0 || gamma < 0.0 {
            return Err(Error::Parameter(format!(
                "beta and gamma must be >= 0, got {beta} and {gamma}"
            )));
        }
        Ok(GraphLearnerParams {
            metric: Parameter::uniform_fan_in("agl.metric", embed_dim, d_a, rng),
            theta,
            beta,
            gamma,
        })
    }

    pub fn bind(&self, tape: &Tape) -> Var {
        tape.leaf(self.metric.value.clone())
    }

    pub fn collect_grads(&mut self, tape: &Tape, bound: Var) {
        self.metric.accumulate_grad(&tape.grad(bound));
    }

    /// Weighted cosine similarity on the tape: `S_ij = cos(h_i W, h_j W)`,
    /// clamped to `[-1, 1]`. Symmetric with unit diagonal.
    pub fn similarity(&self, tape: &Tape, metric: Var, h: Var) -> Result<Var> {
        let (n, d) = tape.shape(h);
        if n < 2 {
            return Err(Error::Data(format!("similarity needs >= 2 patients, got {n}")));
        }
        if d != self.metric.value.rows() {
            return Err(Error::dimension(
                "similarity",
                format!("embedding width {d} vs metric input {}", self.metric.value.rows()),
            ));
        }
        let z = tape.matmul(h, metric);
        let norms = tape.sqrt(tape.row_sums(tape.mul(z, z)));
        tape.with_value(norms, |m| {
            for i in 0..m.rows() {
                if m.get(i, 0) < NORM_FLOOR {
                    return Err(Error::Numeric(format!(
                        "patient {i}: projected embedding norm below {NORM_FLOOR}"
                    )));
                }
            }
            Ok(())
        })?;
        let gram = tape.matmul_nt(z, z);
        let denom = tape.matmul_nt(norms, norms);
        Ok(tape.clamp(tape.div(gram, denom), -1.0, 1.0))
    }

    /// Similarity followed by sparsification; the training-time graph.
    pub fn learn_adjacency(&self, tape: &Tape, metric: Var, h: Var) -> Result<Var> {
        let s = self.similarity(tape, metric, h)?;
        Ok(sparsify_var(tape, s, self.theta))
    }

    /// Value-level similarity matrix.
    pub fn similarity_matrix(&self, h: &Matrix) -> Result<Matrix> {
        let tape = Tape::new();
        let metric = tape.constant(self.metric.value.clone());
        let hv = tape.constant(h.clone());
        let s = self.similarity(&tape, metric, hv)?;
        Ok(tape.value(s))
    }

    /// Value-level learned graph over the given nodes.
    pub fn learned_graph(&self, h: &Matrix, node_ids: Vec<String>) -> Result<LearnedGraph> {
        let s = self.similarity_matrix(h)?;
        let adjacency = sparsify(&s, self.theta)?;
        Ok(LearnedGraph { adjacency, node_ids })
    }

    /// Edge weights from each unseen node to every training node under
    /// the trained metric: similarity plus the sparsification map, with
    /// no unseen-unseen edges and the training graph untouched.
    pub fn extend(&self, h_train: &Matrix, h_new: &Matrix) -> Result<Matrix> {
        if h_train.cols() != h_new.cols() {
            return Err(Error::dimension(
                "extend_graph",
                format!(
                    "training width {} vs unseen width {}",
                    h_train.cols(),
                    h_new.cols()
                ),
            ));
        }
        let z_train = h_train.matmul(&self.metric.value)?;
        let z_new = h_new.matmul(&self.metric.value)?;
        let norm = |z: &Matrix, who: &str| -> Result<Vec<f64>> {
            (0..z.rows())
                .map(|i| {
                    let n = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n < NORM_FLOOR {
                        Err(Error::Numeric(format!(
                            "{who} patient {i}: projected embedding norm below {NORM_FLOOR}"
                        )))
                    } else {
                        Ok(n)
                    }
                })
                .collect()
        };
        let tn = norm(&z_train, "training")?;
        let un = norm(&z_new, "unseen")?;
        let mut cross = z_new.matmul_nt(&z_train);
        for i in 0..cross.rows() {
            for j in 0..cross.cols() {
                let c = (cross.get(i, j) / (un[i] * tn[j])).clamp(-1.0, 1.0);
                cross.set(i, j, c);
            }
        }
        Ok(sparsify_entries(&cross, self.theta))
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&theta) || theta == 0.0 {
        return Err(Error::Parameter(format!(
            "theta must lie strictly inside (0, 1), got {theta}"
        )));
    }
    Ok(())
}

/// The sparsification map on raw cosine values.
///
/// Algebraically identical to scaling `[-1,1]` to `[0,1]`, zeroing
/// entries below `theta`, and rescaling survivors from `[theta,1]` back
/// to `[0,1]`: with `t = 2*theta - 1` that composite is
/// `max(0, s - t) / (1 - t)`, which for `theta = 0.5` reduces to plain
/// `max(0, s)` exactly.
fn sparsify_entries(s: &Matrix, theta: f64) -> Matrix {
    let t = 2.0 * theta - 1.0;
    let inv = 1.0 / (1.0 - t);
    s.map(|v| (v - t).max(0.0) * inv)
}

/// Sparsifies a square similarity matrix and zeroes its diagonal.
pub fn sparsify(s: &Matrix, theta: f64) -> Result<Matrix> {
    check_theta(theta)?;
    let mut a = sparsify_entries(s, theta);
    let n = a.rows().min(a.cols());
    for i in 0..n {
        a.set(i, i, 0.0);
    }
    Ok(a)
}

/// Tape version of [`sparsify`]; differentiates through the exact
/// piecewise-linear map (zero slope below the threshold kink).
pub fn sparsify_var(tape: &Tape, s: Var, theta: f64) -> Var {
    let t = 2.0 * theta - 1.0;
    let inv = 1.0 / (1.0 - t);
    let (n, _) = tape.shape(s);
    let scaled = tape.scale(tape.relu(tape.add_scalar(s, -t)), inv);
    let off_diag = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
    tape.mul_const(scaled, Rc::new(off_diag))
}

/// Dirichlet energy of the embeddings over the graph:
/// `(1/2N^2) * sum_ij A_ij ||h_i - h_j||^2`.
pub fn smoothness_loss(tape: &Tape, a: Var, h: Var) -> Var {
    let (n, _) = tape.shape(h);
    assert_eq!(tape.shape(a), (n, n), "smoothness_loss: A must be NxN");
    let ones = tape.constant(Matrix::filled(n, 1, 1.0));
    let sq = tape.row_sums(tape.mul(h, h));
    let gram = tape.matmul_nt(h, h);
    // dist2[i][j] = sq_i + sq_j - 2 * <h_i, h_j>
    let dist2 = tape.sub(
        tape.add(tape.matmul_nt(sq, ones), tape.matmul_nt(ones, sq)),
        tape.scale(gram, 2.0),
    );
    let total = tape.sum(tape.mul(a, dist2));
    tape.scale(total, 1.0 / (2.0 * (n * n) as f64))
}

/// Log-barrier connectivity term `-(1/N) 1^T log(A 1)` with row sums
/// clamped at `1e-12`. Returns the loss and the number of clamped
/// (isolated) rows for diagnostics.
pub fn connectivity_loss(tape: &Tape, a: Var) -> (Var, usize) {
    let (n, _) = tape.shape(a);
    let row_sums = tape.row_sums(a);
    let clamped = tape.with_value(row_sums, |m| {
        m.as_slice().iter().filter(|&&v| v < DEGREE_FLOOR).count()
    });
    let loss = tape.scale(
        tape.sum(tape.ln(tape.clamp_min(row_sums, DEGREE_FLOOR))),
        -1.0 / n as f64,
    );
    (loss, clamped)
}

/// Components of the total graph regularizer.
pub struct RegularizerVars {
    pub total: Var,
    pub smoothness: Var,
    pub connectivity: Var,
    pub frobenius: Var,
    /// Rows whose degree hit the barrier clamp.
    pub clamped_rows: usize,
}

/// `L_g = L_smh + beta * L_con + (gamma/N^2) * ||A||_F^2`.
pub fn graph_regularizer(tape: &Tape, a: Var, h: Var, beta: f64, gamma: f64) -> RegularizerVars {
    let (n, _) = tape.shape(a);
    let smoothness = smoothness_loss(tape, a, h);
    let (connectivity, clamped_rows) = connectivity_loss(tape, a);
    let frobenius = tape.scale(tape.sum(tape.mul(a, a)), gamma / (n * n) as f64);
    let total = tape.add(
        tape.add(smoothness, tape.scale(connectivity, beta)),
        frobenius,
    );
    RegularizerVars {
        total,
        smoothness,
        connectivity,
        frobenius,
        clamped_rows,
    }
}

/// Symmetric nonnegative sparse patient graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LearnedGraph {
    /// `N x N`, symmetric, entries in `[0, 1]`, zero diagonal.
    pub adjacency: Matrix,
    /// Patient identifiers in row order.
    pub node_ids: Vec<String>,
}

impl LearnedGraph {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    /// Nonzero-weight neighbors of node `i`.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        self.adjacency
            .row(i)
            .iter()
            .enumerate()
            .filter(|&(j, &w)| w > 0.0 && j != i)
            .map(|(j, &w)| (j, w))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adjacency;
        if a.rows() != a.cols() || a.rows() != self.node_ids.len() {
            return Err(Error::Contract(format!(
                "graph shape {:?} vs {} node ids",
                a.shape(),
                self.node_ids.len()
            )));
        }
        for i in 0..a.rows() {
            if a.get(i, i) != 0.0 {
                return Err(Error::Contract(format!("nonzero diagonal at node {i}")));
            }
            for j in 0..a.cols() {
                let w = a.get(i, j);
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Contract(format!("weight {w} outside [0,1] at ({i},{j})")));
                }
                if (w - a.get(j, i)).abs() > 1e-9 {
                    return Err(Error::Contract(format!("asymmetry at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    /// Writes `node_i,node_j,weight` lines (upper triangle of nonzero
    /// edges) plus a JSON sidecar carrying node order and theta.
    pub fn write_edge_list(&self, path: &Path, theta: f64) -> Result<()> {
        let mut out = String::from("node_i,node_j,weight\n");
        for i in 0..self.num_nodes() {
            for j in (i + 1)..self.num_nodes() {
                let w = self.adjacency.get(i, j);
                if w > 0.0 {
                    out.push_str(&format!("{},{},{}\n", self.node_ids[i], self.node_ids[j], w));
                }
            }
        }
        std::fs::write(path, out)?;
        let sidecar = serde_json::json!({
            "version": 1,
            "nodes": self.node_ids,
            "theta": theta,
        });
        let meta_path = path.with_extension("meta.json");
        std::fs::write(meta_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// kNN graph under an RBF kernel: weight `exp(-||h_i - h_j||^2 / 2s^2)`
/// kept iff `j` is among `i`'s `k` nearest by Euclidean distance
/// (ties broken by index), symmetrized by max, zero diagonal.
pub fn knn_rbf_graph(h: &Matrix, k: usize, sigma: f64, node_ids: Vec<String>) -> Result<LearnedGraph> {
    let n = h.rows();
    if k >= n {
        return Err(Error::Parameter(format!("k = {k} must be below N = {n}")));
    }
    if sigma <= 0.0 {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let mut dist2 = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = h
                .row(i)
                .iter()
                .zip(h.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist2.set(i, j, d);
            dist2.set(j, i, d);
        }
    }
    let mut adjacency = Matrix::zeros(n, n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            dist2
                .get(i, a)
                .partial_cmp(&dist2.get(i, b))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            let w = (-dist2.get(i, j) / (2.0 * sigma * sigma)).exp();
            adjacency.set(i, j, w);
        }
    }
    // Symmetrize by max so one-sided kNN picks survive.
    for i in 0..n {
        for j in (i + 1)..n {
            let w = adjacency.get(i, j).max(adjacency.get(j, i));
            adjacency.set(i, j, w);
            adjacency.set(j, i, w);
        }
    }
    Ok(LearnedGraph { adjacency, node_ids })
}

/// Median Euclidean distance over all node pairs; the conventional RBF
/// bandwidth for the baseline graph.
pub fn median_pairwise_distance(h: &Matrix) -> f64 {
    let n = h.rows();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = h
                .row(i)
                .iter()
                .zip(h.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

/// Convenience names for graph nodes when patients are anonymous.
pub fn index_node_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("n{i}")).collect()
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn learned_adjacency_invariants(
            seed in 0u64..10_000,
            n in 3usize..10,
            d in 2usize..6,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let params = GraphLearnerParams::new(d, d, 0.5, 1.0, 1.0, &mut rng).unwrap();
            let h = Matrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0) + 0.01);
            let graph = params.learned_graph(&h, index_node_ids(n)).unwrap();
            let a = &graph.adjacency;
            for i in 0..n {
                prop_assert_eq!(a.get(i, i), 0.0);
                for j in 0..n {
                    let w = a.get(i, j);
                    prop_assert!((0.0..=1.0).contains(&w));
                    prop_assert!((w - a.get(j, i)).abs() < 1e-9);
                }
            }
        }
    }
}
