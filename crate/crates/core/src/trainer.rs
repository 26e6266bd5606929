//! Joint optimization of the fusion front-end, the graph learner, and
//! the predictor, plus transductive and inductive prediction.
//!
//! Each training epoch runs two phases over the mini-batches: phase one
//! updates the front-end and graph learner with the predictor frozen,
//! phase two updates the graph learner, predictor, and auxiliary head
//! with the front-end frozen. Both phases minimize the same joint loss
//! `L = L_gnn + lambda * L_g + eta * L_sp`, with the graph and its
//! regularizers rebuilt per mini-batch from the current embeddings.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::agl::{graph_regularizer, GraphLearnerParams};
use crate::data::{mask_indices, MultiModalDataset};
use crate::error::{Error, Result};
use crate::gnn::{
    forward_dense_var, forward_sampled, forward_sampled_var, sample_neighbors,
    AuxClassifierParams, GcnParams, GraphView, SampledNeighborhood, SamplingMode,
};
use crate::marl::{MarlParams, MarlVars};
use crate::numeric::{adam_step, AdamState, BoundLinear, Matrix, Parameter, Tape, Var};

/// Which representation feeds the graph learner and predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrontEndKind {
    /// Attention fusion with the auxiliary classifier (the full model).
    Marl,
    /// Raw feature concatenation; ablation baseline, no auxiliary head.
    Concat,
}

/// How held-out nodes are evaluated during and after training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Held-out nodes are attached to the training graph at test time.
    Inductive,
    /// Evaluation nodes join the graph alongside training nodes.
    Transductive,
}

/// All hyperparameters. `tau`, `d_a`, and `batch_size` default from the
/// problem instance when left unset (`sqrt(d_f)`, the embedding width,
/// and `min(64, n_train)` respectively).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d_f: usize,
    pub d_h: usize,
    pub d_g: usize,
    pub d_a: Option<usize>,
    pub alpha: f64,
    pub tau: Option<f64>,
    pub theta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub eta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub fanouts: [usize; 2],
    pub seed: u64,
    pub eval_every: usize,
    pub use_bias: bool,
    pub frontend: FrontEndKind,
    pub mode: EvalMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_f: 32,
            d_h: 32,
            d_g: 16,
            d_a: None,
            alpha: 1.0,
            tau: None,
            theta: 0.5,
            beta: 0.5,
            gamma: 1.0,
            lambda: 1.0,
            eta: 1.0,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 200,
            batch_size: None,
            fanouts: [10, 10],
            seed: 0,
            eval_every: 1,
            use_bias: false,
            frontend: FrontEndKind::Marl,
            mode: EvalMode::Inductive,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_f == 0 || self.d_h == 0 || self.d_g == 0 {
            return Err(Error::Parameter("dimensions must be >= 1".into()));
        }
        if self.d_a == Some(0) {
            return Err(Error::Parameter("d_a must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.theta) || self.theta == 0.0 {
            return Err(Error::Parameter(format!("theta must lie in (0,1), got {}", self.theta)));
        }
        if self.alpha < 0.0 {
            return Err(Error::Parameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if let Some(tau) = self.tau {
            if tau <= 0.0 {
                return Err(Error::Parameter(format!("tau must be positive, got {tau}")));
            }
        }
        if self.beta < 0.0 || self.gamma < 0.0 || self.lambda < 0.0 || self.eta < 0.0 {
            return Err(Error::Parameter("loss weights must be nonnegative".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Parameter("eval_every must be >= 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn tau_for(&self, d_f: usize) -> f64 {
        self.tau.unwrap_or_else(|| (d_f as f64).sqrt())
    }

    pub fn batch_size_for(&self, n_train: usize) -> usize {
        self.batch_size.unwrap_or_else(|| n_train.min(64)).max(1)
    }

    /// Applies `key = value` overrides (one per line, `#` comments).
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Parse(format!("config line {}: {what} value {value:?}", lineno + 1))
            };
            match key {
                "d_f" => self.d_f = value.parse().map_err(|_| bad("integer"))?,
                "d_h" => self.d_h = value.parse().map_err(|_| bad("integer"))?,
                "d_g" => self.d_g = value.parse().map_err(|_| bad("integer"))?,
                "d_a" => self.d_a = Some(value.parse().map_err(|_| bad("integer"))?),
                "alpha" => self.alpha = value.parse().map_err(|_| bad("float"))?,
                "tau" => self.tau = Some(value.parse().map_err(|_| bad("float"))?),
                "theta" => self.theta = value.parse().map_err(|_| bad("float"))?,
                "beta" => self.beta = value.parse().map_err(|_| bad("float"))?,
                "gamma" => self.gamma = value.parse().map_err(|_| bad("float"))?,
                "lambda" => self.lambda = value.parse().map_err(|_| bad("float"))?,
                "eta" => self.eta = value.parse().map_err(|_| bad("float"))?,
                "learning_rate" | "lr" => {
                    self.learning_rate = value.parse().map_err(|_| bad("float"))?
                }
                "adam_beta1" => self.adam_beta1 = value.parse().map_err(|_| bad("float"))?,
                "adam_beta2" => self.adam_beta2 = value.parse().map_err(|_| bad("float"))?,
                "adam_epsilon" => self.adam_epsilon = value.parse().map_err(|_| bad("float"))?,
                "epochs" => self.epochs = value.parse().map_err(|_| bad("integer"))?,
                "batch_size" => self.batch_size = Some(value.parse().map_err(|_| bad("integer"))?),
                "eval_every" => self.eval_every = value.parse().map_err(|_| bad("integer"))?,
                "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
                "use_bias" => self.use_bias = value.parse().map_err(|_| bad("boolean"))?,
                "fanouts" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 2 {
                        return Err(bad("fanout pair (e.g. 10,10)"));
                    }
                    self.fanouts = [
                        parts[0].parse().map_err(|_| bad("integer"))?,
                        parts[1].parse().map_err(|_| bad("integer"))?,
                    ];
                }
                "frontend" => {
                    self.frontend = match value {
                        "marl" => FrontEndKind::Marl,
                        "concat" => FrontEndKind::Concat,
                        _ => return Err(bad("frontend (marl|concat)")),
                    }
                }
                "mode" => {
                    self.mode = match value {
                        "inductive" => EvalMode::Inductive,
                        "transductive" => EvalMode::Transductive,
                        _ => return Err(bad("mode (inductive|transductive)")),
                    }
                }
                _ => return Err(Error::Parse(format!("config line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        self.validate()
    }
}

/// Parameter groups for the modular training schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Marl,
    Agl,
    Gnn,
    Aux,
}

/// Front-end parameters; `Concat` has none.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum FrontEndParams {
    Marl(MarlParams),
    Concat,
}

/// Everything trainable plus the optimizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelState {
    pub frontend: FrontEndParams,
    pub agl: GraphLearnerParams,
    pub gnn: GcnParams,
    pub aux: Option<AuxClassifierParams>,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub seed: u64,
    pub modality_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelState {
    pub fn new(cfg: &TrainConfig, modality_dims: &[usize], num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let m = modality_dims.len();
        let (frontend, aux, embed_dim) = match cfg.frontend {
            FrontEndKind::Marl => {
                let marl = MarlParams::new(
                    modality_dims,
                    cfg.d_f,
                    cfg.d_h,
                    cfg.alpha,
                    cfg.tau_for(cfg.d_f),
                    cfg.use_bias,
                    &mut rng,
                )?;
                let embed_dim = marl.embedding_dim();
                let aux = AuxClassifierParams::new(m * m, num_classes, &mut rng);
                (FrontEndParams::Marl(marl), Some(aux), embed_dim)
            }
            FrontEndKind::Concat => {
                let embed_dim: usize = modality_dims.iter().sum();
                (FrontEndParams::Concat, None, embed_dim)
            }
        };
        let agl = GraphLearnerParams::new(
            embed_dim,
            cfg.d_a.unwrap_or(embed_dim),
            cfg.theta,
            cfg.beta,
            cfg.gamma,
            &mut rng,
        )?;
        let gnn = GcnParams::new(embed_dim, cfg.d_g, num_classes, &mut rng);
        Ok(ModelState {
            frontend,
            agl,
            gnn,
            aux,
            optimizer: AdamState::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon),
            epoch: 0,
            seed: cfg.seed,
            modality_dims: modality_dims.to_vec(),
            num_classes,
        })
    }

    pub fn marl(&self) -> Option<&MarlParams> {
        match &self.frontend {
            FrontEndParams::Marl(m) => Some(m),
            FrontEndParams::Concat => None,
        }
    }

    /// Value-level front-end embedding of the given feature blocks.
    pub fn embed(&self, features: &[Matrix]) -> Result<Matrix> {
        match &self.frontend {
            FrontEndParams::Marl(marl) => Ok(marl.forward_embedding(features)?.combined),
            FrontEndParams::Concat => Ok(concat_blocks(features)),
        }
    }

    pub fn params_mut_of(&mut self, groups: &[ParamGroup]) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        if groups.contains(&ParamGroup::Marl) {
            if let FrontEndParams::Marl(m) = &mut self.frontend {
                out.extend(m.params_mut());
            }
        }
        if groups.contains(&ParamGroup::Agl) {
            out.push(&mut self.agl.metric);
        }
        if groups.contains(&ParamGroup::Gnn) {
            out.extend(self.gnn.params_mut());
        }
        if groups.contains(&ParamGroup::Aux) {
            if let Some(aux) = &mut self.aux {
                out.extend(aux.params_mut());
            }
        }
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.params_mut_of(&[ParamGroup::Marl, ParamGroup::Agl, ParamGroup::Gnn, ParamGroup::Aux])
    }

    pub fn all_params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        if let FrontEndParams::Marl(m) = &self.frontend {
            out.extend(m.params());
        }
        out.push(&self.agl.metric);
        out.extend(self.gnn.params());
        if let Some(aux) = &self.aux {
            out.extend(aux.params());
        }
        out
    }

    fn zero_all_grads(&mut self) {
        for p in self.all_params_mut() {
            p.zero_grad();
        }
    }
}

fn concat_blocks(features: &[Matrix]) -> Matrix {
    let n = features[0].rows();
    let total: usize = features.iter().map(Matrix::cols).sum();
    Matrix::from_fn(n, total, |i, j| {
        let mut offset = 0;
        for block in features {
            if j < offset + block.cols() {
                return block.get(i, j - offset);
            }
            offset += block.cols();
        }
        unreachable!()
    })
}

/// Deterministic stream derivation from the master seed.
pub(crate) fn mix_seed(master: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = master
        ^ (a.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b.wrapping_add(1)).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (c.wrapping_add(1)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Raw loss terms; the trained objective is
/// `total = gnn + lambda * graph + eta * specified`.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub gnn: f64,
    pub graph: f64,
    pub specified: f64,
}

enum FrontVars {
    Marl(MarlVars),
    Concat(Var),
}

impl FrontVars {
    fn combined(&self) -> Var {
        match self {
            FrontVars::Marl(v) => v.combined,
            FrontVars::Concat(v) => *v,
        }
    }
}

struct Bindings {
    marl: Option<crate::marl::MarlBound>,
    metric: Var,
    gnn: crate::gnn::GcnBound,
    aux: Option<BoundLinear>,
}

struct BatchForward {
    tape: Tape,
    bindings: Bindings,
    loss: Var,
    components: LossComponents,
}

/// Builds the joint loss for one batch on a fresh tape.
fn batch_forward(
    state: &ModelState,
    cfg: &TrainConfig,
    features: &[Matrix],
    labels: &[usize],
    mode: SamplingMode,
    sample_seed: u64,
) -> Result<BatchForward> {
    let n = features.first().map_or(0, Matrix::rows);
    if n != labels.len() {
        return Err(Error::Data(format!("{n} feature rows vs {} labels", labels.len())));
    }
    if labels.iter().any(|&y| y >= state.num_classes) {
        return Err(Error::Data("label out of range".into()));
    }
    let tape = Tape::new();

    let (front, marl_bound) = match &state.frontend {
        FrontEndParams::Marl(marl) => {
            let bound = marl.bind(&tape);
            let vars = marl.forward(&tape, &bound, features)?;
            (FrontVars::Marl(vars), Some(bound))
        }
        FrontEndParams::Concat => {
            let h = tape.constant(concat_blocks(features));
            (FrontVars::Concat(h), None)
        }
    };
    let h = front.combined();

    let metric = state.agl.bind(&tape);
    let a = state.agl.learn_adjacency(&tape, metric, h)?;

    let neighborhood = tape.with_value(a, |a_val| {
        let view = GraphView::Square(a_val);
        let targets: Vec<usize> = (0..n).collect();
        sample_neighbors(&view, &targets, cfg.fanouts, mode, sample_seed)
    })?;

    let gnn_bound = state.gnn.bind(&tape);
    let logits = forward_sampled_var(&tape, a, h, &neighborhood, &state.gnn, &gnn_bound)?;
    let labels_rc = Rc::new(labels.to_vec());
    let l_gnn = tape.cross_entropy(logits, labels_rc.clone());

    let reg = graph_regularizer(&tape, a, h, state.agl.beta, state.agl.gamma);

    let (l_sp, aux_bound) = match (&state.aux, &front) {
        (Some(aux), FrontVars::Marl(vars)) => {
            let bound = aux.bind(&tape);
            let aux_logits = aux.forward(&tape, &bound, vars.specified)?;
            (Some(tape.cross_entropy(aux_logits, labels_rc)), Some(bound))
        }
        _ => (None, None),
    };

    let mut loss = tape.add(l_gnn, tape.scale(reg.total, cfg.lambda));
    if let Some(sp) = l_sp {
        loss = tape.add(loss, tape.scale(sp, cfg.eta));
    }

    let components = LossComponents {
        total: tape.scalar(loss),
        gnn: tape.scalar(l_gnn),
        graph: tape.scalar(reg.total),
        specified: l_sp.map_or(0.0, |v| tape.scalar(v)),
    };

    Ok(BatchForward {
        tape,
        bindings: Bindings {
            marl: marl_bound,
            metric,
            gnn: gnn_bound,
            aux: aux_bound,
        },
        loss,
        components,
    })
}

fn collect_all_grads(state: &mut ModelState, fwd: &BatchForward) {
    let tape = &fwd.tape;
    if let (FrontEndParams::Marl(marl), Some(bound)) = (&mut state.frontend, &fwd.bindings.marl) {
        marl.collect_grads(tape, bound);
    }
    state.agl.collect_grads(tape, fwd.bindings.metric);
    state.gnn.collect_grads(tape, &fwd.bindings.gnn);
    if let (Some(aux), Some(bound)) = (&mut state.aux, &fwd.bindings.aux) {
        aux.collect_grads(tape, bound);
    }
}

/// Evaluates the joint loss on a batch without touching any state.
pub fn joint_loss(
    state: &ModelState,
    cfg: &TrainConfig,
    features: &[Matrix],
    labels: &[usize],
    mode: SamplingMode,
    sample_seed: u64,
) -> Result<LossComponents> {
    Ok(batch_forward(state, cfg, features, labels, mode, sample_seed)?.components)
}

/// Runs forward + backward on a batch, accumulating gradients into
/// every parameter. Returns the loss components.
pub fn joint_loss_backward(
    state: &mut ModelState,
    cfg: &TrainConfig,
    features: &[Matrix],
    labels: &[usize],
    mode: SamplingMode,
    sample_seed: u64,
) -> Result<LossComponents> {
    let fwd = batch_forward(state, cfg, features, labels, mode, sample_seed)?;
    fwd.tape.backward(fwd.loss);
    collect_all_grads(state, &fwd);
    Ok(fwd.components)
}

/// Per-epoch history entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub gnn: f64,
    pub graph: f64,
    pub specified: f64,
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
}

/// Mini-batch index chunks; a trailing singleton is merged into its
/// predecessor because the graph learner needs at least two nodes.
fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn phase_groups(cfg: &TrainConfig, phase: usize) -> Vec<ParamGroup> {
    match (cfg.frontend, phase) {
        (FrontEndKind::Marl, 1) => vec![ParamGroup::Marl, ParamGroup::Agl],
        (FrontEndKind::Marl, _) => vec![ParamGroup::Agl, ParamGroup::Gnn, ParamGroup::Aux],
        (FrontEndKind::Concat, 1) => vec![ParamGroup::Agl],
        (FrontEndKind::Concat, _) => vec![ParamGroup::Agl, ParamGroup::Gnn],
    }
}

/// One epoch of the modular schedule: phase 1 trains the front-end and
/// graph learner jointly, phase 2 the graph learner and prediction
/// modules, each over freshly shuffled mini-batches with sampled
/// neighborhoods. Parameters outside the active groups stay bit-exact.
pub fn train_epoch(
    state: &mut ModelState,
    dataset: &MultiModalDataset,
    train_mask: &[bool],
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    let train_idx = mask_indices(train_mask);
    if train_idx.is_empty() {
        return Err(Error::Data("training mask is empty".into()));
    }
    let batch_size = cfg.batch_size_for(train_idx.len());
    let epoch = state.epoch as u64;

    let mut sum = LossComponents::default();
    let mut batches_seen = 0usize;
    for phase in [1usize, 2] {
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha12Rng::seed_from_u64(mix_seed(state.seed, epoch, phase as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);

        let groups = phase_groups(cfg, phase);
        for (bi, batch) in batches(&order, batch_size).iter().enumerate() {
            let features = dataset.gather_features(batch);
            let labels = dataset.gather_labels(batch);
            let sample_seed = mix_seed(state.seed, epoch, phase as u64, bi as u64);
            let components = joint_loss_backward(
                state,
                cfg,
                &features,
                &labels,
                SamplingMode::Random,
                sample_seed,
            )?;
            if !components.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} phase {phase} batch {bi}: \
                     gnn={} graph={} specified={}",
                    components.gnn, components.graph, components.specified
                )));
            }
            let mut optimizer = state.optimizer.clone();
            adam_step(&mut optimizer, &mut state.params_mut_of(&groups))?;
            state.optimizer = optimizer;
            state.zero_all_grads();

            sum.total += components.total;
            sum.gnn += components.gnn;
            sum.graph += components.graph;
            sum.specified += components.specified;
            batches_seen += 1;
        }
    }
    state.epoch += 1;
    let k = batches_seen as f64;
    Ok(LossComponents {
        total: sum.total / k,
        gnn: sum.gnn / k,
        graph: sum.graph / k,
        specified: sum.specified / k,
    })
}

/// Graph context of a trained model over its training nodes.
pub struct TrainedContext {
    pub train_rows: Vec<usize>,
    pub embeddings: Matrix,
    pub adjacency: Matrix,
}

/// Embeds the training rows and builds the learned graph over them.
pub fn build_context(
    state: &ModelState,
    dataset: &MultiModalDataset,
    train_mask: &[bool],
) -> Result<TrainedContext> {
    let train_rows = mask_indices(train_mask);
    let features = dataset.gather_features(&train_rows);
    let embeddings = state.embed(&features)?;
    let tape = Tape::new();
    let metric = tape.constant(state.agl.metric.value.clone());
    let h = tape.constant(embeddings.clone());
    let a = state.agl.learn_adjacency(&tape, metric, h)?;
    Ok(TrainedContext {
        train_rows,
        embeddings,
        adjacency: tape.value(a),
    })
}

/// Full-graph forward over every row of the dataset; callers slice the
/// partition they care about. Deterministic (dense aggregation).
pub fn transductive_predict(state: &ModelState, dataset: &MultiModalDataset) -> Result<Matrix> {
    let all: Vec<usize> = (0..dataset.num_patients()).collect();
    let features = dataset.gather_features(&all);
    let embeddings = state.embed(&features)?;
    let tape = Tape::new();
    let metric = tape.constant(state.agl.metric.value.clone());
    let h = tape.constant(embeddings);
    let a = state.agl.learn_adjacency(&tape, metric, h)?;
    let bound = state.gnn.bind(&tape);
    let logits = forward_dense_var(&tape, a, tape_h(&tape, h), &state.gnn, &bound);
    Ok(tape.value(logits))
}

// `h` is already a Var; helper keeps the call site readable.
fn tape_h(_tape: &Tape, h: Var) -> Var {
    h
}

/// Predicts unseen patients against a trained context: embed, connect
/// with the learned metric, sample neighborhoods (unseen nodes never
/// serve as neighbors), aggregate. The training graph is not modified.
pub fn inductive_predict(
    state: &ModelState,
    ctx: &TrainedContext,
    dataset: &MultiModalDataset,
    unseen_rows: &[usize],
    mode: SamplingMode,
    fanouts: [usize; 2],
    sample_seed: u64,
) -> Result<Matrix> {
    if unseen_rows.is_empty() {
        return Ok(Matrix::zeros(0, state.num_classes));
    }
    let features = dataset.gather_features(unseen_rows);
    for (mi, block) in features.iter().enumerate() {
        if block.cols() != state.modality_dims[mi] {
            return Err(Error::Data(format!(
                "modality {mi}: width {} does not match the trained schema {}",
                block.cols(),
                state.modality_dims[mi]
            )));
        }
    }
    let unseen_emb = state.embed(&features)?;
    let cross = state.agl.extend(&ctx.embeddings, &unseen_emb)?;
    let view = GraphView::Extended {
        train: &ctx.adjacency,
        cross: &cross,
    };
    let n_train = ctx.adjacency.rows();
    let targets: Vec<usize> = (n_train..n_train + unseen_rows.len()).collect();
    let nbh: SampledNeighborhood = sample_neighbors(&view, &targets, fanouts, mode, sample_seed)?;

    let mut all_rows: Vec<Vec<f64>> = Vec::with_capacity(n_train + unseen_rows.len());
    for i in 0..n_train {
        all_rows.push(ctx.embeddings.row(i).to_vec());
    }
    for i in 0..unseen_emb.rows() {
        all_rows.push(unseen_emb.row(i).to_vec());
    }
    let all_features = Matrix::from_rows(&all_rows)?;
    forward_sampled(&view, &nbh, &all_features, &state.gnn)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn validation_metrics(
    state: &ModelState,
    dataset: &MultiModalDataset,
    train_mask: &[bool],
    val_mask: &[bool],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let val_rows = mask_indices(val_mask);
    let val_labels = dataset.gather_labels(&val_rows);
    let logits = match cfg.mode {
        EvalMode::Inductive => {
            let ctx = build_context(state, dataset, train_mask)?;
            inductive_predict(state, &ctx, dataset, &val_rows, SamplingMode::Full, cfg.fanouts, 0)?
        }
        EvalMode::Transductive => {
            // Train and validation nodes share the graph; test stays out.
            let mut rows = mask_indices(train_mask);
            let offset = rows.len();
            rows.extend(val_rows.iter().copied());
            let features = dataset.gather_features(&rows);
            let embeddings = state.embed(&features)?;
            let tape = Tape::new();
            let metric = tape.constant(state.agl.metric.value.clone());
            let h = tape.constant(embeddings);
            let a = state.agl.learn_adjacency(&tape, metric, h)?;
            let bound = state.gnn.bind(&tape);
            let logits = forward_dense_var(&tape, a, h, &state.gnn, &bound);
            let all = tape.value(logits);
            all.gather_rows(&(offset..offset + val_rows.len()).collect::<Vec<_>>())
        }
    };
    let acc = accuracy(&logits, &val_labels);
    let loss = crate::numeric::cross_entropy(&logits, &val_labels)?;
    Ok((acc, loss))
}

/// Trains for `cfg.epochs` epochs, tracking validation accuracy every
/// `cfg.eval_every` epochs, and returns the best-validation state
/// (ties broken by lower validation loss; the final state when no
/// validation rows are given) plus the full per-epoch history.
pub fn fit(
    dataset: &MultiModalDataset,
    train_mask: &[bool],
    val_mask: &[bool],
    cfg: &TrainConfig,
) -> Result<(ModelState, Vec<EpochRecord>)> {
    cfg.validate()?;
    if dataset.has_missing() {
        return Err(Error::Data(
            "dataset still has missing values; impute before training".into(),
        ));
    }
    let mut state = ModelState::new(cfg, &dataset.modality_dims(), dataset.num_classes())?;
    let has_val = val_mask.iter().any(|&b| b);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, ModelState)> = None;

    for epoch in 0..cfg.epochs {
        let components = train_epoch(&mut state, dataset, train_mask, cfg)?;
        let mut record = EpochRecord {
            epoch,
            total: components.total,
            gnn: components.gnn,
            graph: components.graph,
            specified: components.specified,
            val_accuracy: None,
            val_loss: None,
        };
        let last = epoch + 1 == cfg.epochs;
        if has_val && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let (acc, loss) = validation_metrics(&state, dataset, train_mask, val_mask, cfg)?;
            record.val_accuracy = Some(acc);
            record.val_loss = Some(loss);
            let better = match &best {
                None => true,
                Some((best_acc, best_loss, _)) => {
                    acc > *best_acc || (acc == *best_acc && loss < *best_loss)
                }
            };
            if better {
                best = Some((acc, loss, state.clone()));
            }
        }
        history.push(record);
    }

    let final_state = match best {
        Some((_, _, s)) => s,
        None => state,
    };
    Ok((final_state, history))
}

// ---- checkpointing ----

const CHECKPOINT_VERSION: u32 = 1;

/// Dataset schema a checkpoint was trained on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub modality_dims: Vec<usize>,
    pub num_classes: usize,
}

impl DatasetFingerprint {
    pub fn of(dataset: &MultiModalDataset) -> Self {
        DatasetFingerprint {
            modality_dims: dataset.modality_dims(),
            num_classes: dataset.num_classes(),
        }
    }
}

/// Preprocessing statistics captured at training time so later
/// invocations transform new data identically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub impute: crate::data::ImputeStats,
    pub standardize: crate::data::StandardizeStats,
}

/// Serialized model: state, config, dataset fingerprint, and optional
/// preprocessing statistics, all under a format version.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub fingerprint: DatasetFingerprint,
    pub state: ModelState,
    pub preprocess: Option<PreprocessStats>,
}

impl Checkpoint {
    pub fn new(
        state: ModelState,
        config: TrainConfig,
        fingerprint: DatasetFingerprint,
        preprocess: Option<PreprocessStats>,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            fingerprint,
            state,
            preprocess,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Hard error when the dataset schema differs from training time.
    pub fn ensure_matches(&self, dataset: &MultiModalDataset) -> Result<()> {
        let fp = DatasetFingerprint::of(dataset);
        if fp != self.fingerprint {
            return Err(Error::Data(format!(
                "dataset fingerprint {:?} does not match checkpoint {:?}",
                fp, self.fingerprint
            )));
        }
        Ok(())
    }
}
