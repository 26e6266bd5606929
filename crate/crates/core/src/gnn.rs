//! Two-layer graph convolutional predictor with neighbor-sampled
//! mini-batch aggregation, plus the single-layer auxiliary classifier
//! on the modality-specified embeddings.
//!
//! Aggregation is weighted: learned edge weights enter the normalized
//! adjacency rather than being binarized. Self-loops are added here at
//! normalization time (`A + I`), complementing the zero diagonal the
//! graph learner produces.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{BoundLinear, Linear, Matrix, Parameter, Tape, Var};

/// Two dense layers with a rectifier between them; no biases.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GcnParams {
    pub layer1: Linear,
    pub layer2: Linear,
}

impl GcnParams {
    pub fn new(in_dim: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        GcnParams {
            layer1: Linear::new("gnn.layer1", in_dim, hidden, false, rng),
            layer2: Linear::new("gnn.layer2", hidden, classes, false, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layer2.out_dim()
    }

    pub fn bind(&self, tape: &Tape) -> GcnBound {
        GcnBound {
            layer1: self.layer1.bind(tape),
            layer2: self.layer2.bind(tape),
        }
    }

    pub fn collect_grads(&mut self, tape: &Tape, bound: &GcnBound) {
        self.layer1.collect_grads(tape, &bound.layer1);
        self.layer2.collect_grads(tape, &bound.layer2);
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = self.layer1.params();
        v.extend(self.layer2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.layer1.params_mut();
        v.extend(self.layer2.params_mut());
        v
    }
}

#[derive(Clone, Copy)]
pub struct GcnBound {
    pub layer1: BoundLinear,
    pub layer2: BoundLinear,
}

/// Single-layer classifier over the flattened attention embeddings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuxClassifierParams {
    pub layer: Linear,
}

impl AuxClassifierParams {
    pub fn new(m_squared: usize, classes: usize, rng: &mut impl Rng) -> Self {
        AuxClassifierParams {
            layer: Linear::new("aux", m_squared, classes, true, rng),
        }
    }

    pub fn bind(&self, tape: &Tape) -> BoundLinear {
        self.layer.bind(tape)
    }

    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundLinear) {
        self.layer.collect_grads(tape, bound);
    }

    /// Affine map from specified embeddings to class logits.
    pub fn forward(&self, tape: &Tape, bound: &BoundLinear, h_sp: Var) -> Result<Var> {
        let (_, c) = tape.shape(h_sp);
        if c != self.layer.in_dim() {
            return Err(Error::dimension(
                "aux_forward",
                format!("input width {c} vs expected {}", self.layer.in_dim()),
            ));
        }
        Ok(self.layer.apply(tape, bound, h_sp))
    }

    pub fn forward_value(&self, h_sp: &Matrix) -> Result<Matrix> {
        if h_sp.cols() != self.layer.in_dim() {
            return Err(Error::dimension(
                "aux_forward",
                format!("input width {} vs expected {}", h_sp.cols(), self.layer.in_dim()),
            ));
        }
        self.layer.forward_value(h_sp)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layer.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layer.params_mut()
    }
}

/// Symmetric degree normalization with self-loops:
/// `A_hat = D^(-1/2) (A + I) D^(-1/2)` where `D` is the degree matrix
/// of `A + I` (always positive, so no special cases).
pub fn normalize_adjacency_var(tape: &Tape, a: Var) -> Var {
    let (n, _) = tape.shape(a);
    let deg = tape.add_scalar(tape.row_sums(a), 1.0);
    let inv = tape.powf(deg, -0.5);
    let norm = tape.matmul_nt(inv, inv);
    let eye = Rc::new(Matrix::identity(n));
    tape.mul(tape.add_const(a, eye), norm)
}

/// Value-level [`normalize_adjacency_var`].
pub fn normalize_adjacency(a: &Matrix) -> Matrix {
    let tape = Tape::new();
    let av = tape.constant(a.clone());
    tape.value(normalize_adjacency_var(&tape, av))
}

/// Full-graph two-layer forward on the tape:
/// `A_hat relu(A_hat H W1) W2`.
pub fn forward_dense_var(tape: &Tape, a: Var, h: Var, gcn: &GcnParams, bound: &GcnBound) -> Var {
    let a_hat = normalize_adjacency_var(tape, a);
    let z1 = tape.relu(gcn.layer1.apply(tape, &bound.layer1, tape.matmul(a_hat, h)));
    gcn.layer2.apply(tape, &bound.layer2, tape.matmul(a_hat, z1))
}

/// Value-level dense forward over all nodes.
pub fn forward_dense(a: &Matrix, h: &Matrix, gcn: &GcnParams) -> Result<Matrix> {
    if a.rows() != a.cols() || a.rows() != h.rows() {
        return Err(Error::dimension(
            "gcn_forward",
            format!("adjacency {:?} vs embeddings {:?}", a.shape(), h.shape()),
        ));
    }
    let tape = Tape::new();
    let av = tape.constant(a.clone());
    let hv = tape.constant(h.clone());
    let bound = gcn.bind(&tape);
    Ok(tape.value(forward_dense_var(&tape, av, hv, gcn, &bound)))
}

/// How neighbors are drawn per hop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Up to the fanout, uniformly without replacement.
    Random,
    /// Every nonzero-weight neighbor.
    Full,
}

/// A graph as the sampler and aggregator see it.
///
/// The extended form appends unseen nodes (rows of `cross`) behind the
/// training block. Unseen nodes never serve as neighbors of anyone and
/// carry no implicit self-loop: their own similarity to a duplicate
/// training patient already shows up as a learned edge. An unseen node
/// with no learned edges falls back to a self-only neighborhood, which
/// reduces its prediction to the two-layer MLP on its own embedding.
pub enum GraphView<'a> {
    Square(&'a Matrix),
    Extended {
        train: &'a Matrix,
        /// `k x N_train` edge weights from unseen nodes to training nodes.
        cross: &'a Matrix,
    },
}

impl GraphView<'_> {
    pub fn num_nodes(&self) -> usize {
        match self {
            GraphView::Square(a) => a.rows(),
            GraphView::Extended { train, cross } => train.rows() + cross.rows(),
        }
    }

    /// Nonzero-weight neighbors of `u`, ascending by id, self excluded.
    pub fn neighbors(&self, u: usize) -> Vec<(usize, f64)> {
        let row: &[f64] = match self {
            GraphView::Square(a) => a.row(u),
            GraphView::Extended { train, cross } => {
                if u < train.rows() {
                    train.row(u)
                } else {
                    cross.row(u - train.rows())
                }
            }
        };
        row.iter()
            .enumerate()
            .filter(|&(j, &w)| w > 0.0 && j != u)
            .map(|(j, &w)| (j, w))
            .collect()
    }

    /// Self-loop weight used at aggregation time.
    pub fn self_weight(&self, u: usize) -> f64 {
        match self {
            GraphView::Square(_) => 1.0,
            GraphView::Extended { train, cross } => {
                if u < train.rows() {
                    1.0
                } else {
                    // Isolated-node fallback only.
                    let isolated = cross.row(u - train.rows()).iter().all(|&w| w <= 0.0);
                    if isolated {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        }
    }

    /// Degree over every incident edge plus the self-loop weight.
    pub fn full_degree(&self, u: usize) -> f64 {
        self.self_weight(u) + self.neighbors(u).iter().map(|&(_, w)| w).sum::<f64>()
    }
}

/// Two hops of sampled neighbors for a batch of target nodes.
#[derive(Clone, Debug)]
pub struct SampledNeighborhood {
    pub targets: Vec<usize>,
    /// Hop-1 samples per target, `(node, weight)` ascending by node.
    pub target_samples: Vec<Vec<(usize, f64)>>,
    /// Nodes whose hop-1 values are needed: targets with self-loops
    /// plus every sampled hop-1 neighbor, deduplicated and sorted.
    pub frontier: Vec<usize>,
    /// Hop-2 samples per frontier node.
    pub frontier_samples: Vec<Vec<(usize, f64)>>,
}

/// Draws the 1-hop and 2-hop neighborhoods for `targets`.
///
/// Deterministic for a fixed seed; `Full` mode keeps every
/// nonzero-weight neighbor regardless of fanout.
pub fn sample_neighbors(
    view: &GraphView,
    targets: &[usize],
    fanouts: [usize; 2],
    mode: SamplingMode,
    seed: u64,
) -> Result<SampledNeighborhood> {
    let n = view.num_nodes();
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Data(format!("unknown target node id {bad} (graph has {n} nodes)")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut draw = |nbrs: Vec<(usize, f64)>, fanout: usize| -> Vec<(usize, f64)> {
        match mode {
            SamplingMode::Full => nbrs,
            SamplingMode::Random => {
                if nbrs.len() <= fanout {
                    nbrs
                } else {
                    let mut picked: Vec<(usize, f64)> =
                        rand::seq::index::sample(&mut rng, nbrs.len(), fanout)
                            .into_iter()
                            .map(|i| nbrs[i])
                            .collect();
                    picked.sort_by_key(|&(j, _)| j);
                    picked
                }
            }
        }
    };

    let target_samples: Vec<Vec<(usize, f64)>> = targets
        .iter()
        .map(|&t| draw(view.neighbors(t), fanouts[0]))
        .collect();

    let mut frontier: Vec<usize> = targets
        .iter()
        .copied()
        .filter(|&t| view.self_weight(t) > 0.0)
        .chain(target_samples.iter().flatten().map(|&(j, _)| j))
        .collect();
    frontier.sort_unstable();
    frontier.dedup();

    let frontier_samples: Vec<Vec<(usize, f64)>> = frontier
        .iter()
        .map(|&f| draw(view.neighbors(f), fanouts[1]))
        .collect();

    Ok(SampledNeighborhood {
        targets: targets.to_vec(),
        target_samples,
        frontier,
        frontier_samples,
    })
}

fn sampled_degree(view: &GraphView, node: usize, samples: &[(usize, f64)]) -> f64 {
    view.self_weight(node) + samples.iter().map(|&(_, w)| w).sum::<f64>()
}

/// Value-level sampled two-layer forward: hop-2 values aggregate into
/// the frontier, the frontier into the targets. Edge coefficients are
/// `w / sqrt(d_dst * d_src)` where a node's degree is its sampled
/// degree when this neighborhood sampled it as a destination and its
/// full degree otherwise — so full-mode sampling reproduces the dense
/// normalization exactly.
pub fn forward_sampled(
    view: &GraphView,
    nbh: &SampledNeighborhood,
    features: &Matrix,
    gcn: &GcnParams,
) -> Result<Matrix> {
    if features.rows() != view.num_nodes() {
        return Err(Error::dimension(
            "gcn_forward",
            format!("{} feature rows vs {} graph nodes", features.rows(), view.num_nodes()),
        ));
    }
    if nbh.frontier_samples.len() != nbh.frontier.len()
        || nbh.target_samples.len() != nbh.targets.len()
    {
        return Err(Error::Contract("neighborhood lists out of sync".into()));
    }
    let frontier_pos: BTreeMap<usize, usize> = nbh
        .frontier
        .iter()
        .enumerate()
        .map(|(i, &f)| (f, i))
        .collect();

    let xw1 = features.matmul(&gcn.layer1.weight.value)?;
    let hidden = gcn.layer1.out_dim();
    let d2: Vec<f64> = nbh
        .frontier
        .iter()
        .zip(&nbh.frontier_samples)
        .map(|(&f, s)| sampled_degree(view, f, s))
        .collect();

    // Ascending merge of the self edge into the sampled neighbor list.
    let with_self = |node: usize, samples: &[(usize, f64)]| -> Vec<(usize, f64)> {
        let sw = view.self_weight(node);
        let mut edges = samples.to_vec();
        if sw > 0.0 {
            let pos = edges.partition_point(|&(j, _)| j < node);
            edges.insert(pos, (node, sw));
        }
        edges
    };

    let mut z1 = Matrix::zeros(nbh.frontier.len(), hidden);
    for (fi, &f) in nbh.frontier.iter().enumerate() {
        let df = d2[fi];
        if df <= 0.0 {
            continue;
        }
        for (v, w) in with_self(f, &nbh.frontier_samples[fi]) {
            let dv = match frontier_pos.get(&v) {
                Some(&vi) => d2[vi],
                None => view.full_degree(v),
            };
            let coef = w / (df * dv).sqrt();
            let row = z1.row_mut(fi);
            for (o, x) in row.iter_mut().zip(xw1.row(v)) {
                *o += coef * x;
            }
        }
        for v in z1.row_mut(fi) {
            *v = v.max(0.0);
        }
    }

    let mut agg = Matrix::zeros(nbh.targets.len(), hidden);
    for (ti, &t) in nbh.targets.iter().enumerate() {
        let dt = sampled_degree(view, t, &nbh.target_samples[ti]);
        if dt <= 0.0 {
            continue;
        }
        for (v, w) in with_self(t, &nbh.target_samples[ti]) {
            let vi = *frontier_pos.get(&v).ok_or_else(|| {
                Error::Contract(format!("target {t}: neighbor {v} missing from frontier"))
            })?;
            let coef = w / (dt * d2[vi]).sqrt();
            let row = agg.row_mut(ti);
            for (o, x) in row.iter_mut().zip(z1.row(vi)) {
                *o += coef * x;
            }
        }
    }
    agg.matmul(&gcn.layer2.weight.value)
}

/// Tape version of the sampled forward for square training graphs,
/// expressed as masked dense aggregation so gradients reach the learned
/// edge weights. Returns logits for `nbh.targets` in order.
pub fn forward_sampled_var(
    tape: &Tape,
    a: Var,
    h: Var,
    nbh: &SampledNeighborhood,
    gcn: &GcnParams,
    bound: &GcnBound,
) -> Result<Var> {
    let (n, _) = tape.shape(a);
    if nbh.frontier_samples.len() != nbh.frontier.len()
        || nbh.target_samples.len() != nbh.targets.len()
    {
        return Err(Error::Contract("neighborhood lists out of sync".into()));
    }
    if let Some(&bad) = nbh
        .targets
        .iter()
        .chain(nbh.frontier.iter())
        .find(|&&v| v >= n)
    {
        return Err(Error::Contract(format!("node {bad} outside batch graph of {n}")));
    }

    // Masks: every row keeps its diagonal so degrees stay positive;
    // only destination rows carry their sampled off-diagonal entries.
    // Non-destination rows produce values that nothing downstream reads.
    let mut mask2 = Matrix::identity(n);
    for (&f, samples) in nbh.frontier.iter().zip(&nbh.frontier_samples) {
        for &(v, _) in samples {
            mask2.set(f, v, 1.0);
        }
    }
    let mut mask1 = Matrix::identity(n);
    for (&t, samples) in nbh.targets.iter().zip(&nbh.target_samples) {
        for &(v, _) in samples {
            mask1.set(t, v, 1.0);
        }
    }
    let mut indicator = Matrix::zeros(n, 1);
    for &f in &nbh.frontier {
        indicator.set(f, 0, 1.0);
    }
    let complement = indicator.map(|v| 1.0 - v);

    let eye = Rc::new(Matrix::identity(n));
    let a_loops = tape.add_const(a, eye);
    let deg_full = tape.add_scalar(tape.row_sums(a), 1.0);

    let block2_un = tape.mul_const(a_loops, Rc::new(mask2));
    let d2 = tape.row_sums(block2_un);
    let d_src2 = tape.add(
        tape.mul_const(d2, Rc::new(indicator.clone())),
        tape.mul_const(deg_full, Rc::new(complement)),
    );
    let block2 = tape.mul(
        block2_un,
        tape.matmul_nt(tape.powf(d2, -0.5), tape.powf(d_src2, -0.5)),
    );
    let z1 = tape.relu(gcn.layer1.apply(tape, &bound.layer1, tape.matmul(block2, h)));

    let block1_un = tape.mul_const(a_loops, Rc::new(mask1));
    let d1 = tape.row_sums(block1_un);
    let block1 = tape.mul(
        block1_un,
        tape.matmul_nt(tape.powf(d1, -0.5), tape.powf(d2, -0.5)),
    );
    let logits_all = gcn.layer2.apply(tape, &bound.layer2, tape.matmul(block1, z1));
    Ok(tape.gather_rows(logits_all, Rc::new(nbh.targets.clone())))
}
