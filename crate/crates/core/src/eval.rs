//! Metrics, graph-quality analysis, and cross-validation orchestration.
//!
//! Accuracy comes from the confusion matrix (argmax predictions, ties
//! to the lowest class index). Binary AUC is the rank statistic over
//! the positive-class score with midrank tie handling; multi-class AUC
//! is macro one-vs-rest. Sensitivity and specificity are reported for
//! binary tasks only. Fold aggregation reports mean and sample
//! standard deviation.

use serde::{Deserialize, Serialize};

use crate::agl::LearnedGraph;
use crate::data::{carve_validation, mask_indices, stratified_kfold, MultiModalDataset};
use crate::error::{Error, Result};
use crate::gnn::SamplingMode;
use crate::numeric::{softmax_rows, Matrix};
use crate::trainer::{
    build_context, fit, inductive_predict, mix_seed, transductive_predict, EvalMode, TrainConfig,
};

/// Metrics for one evaluation (one fold or one split).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub auc: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// `confusion[true_class][predicted_class]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Mean and sample standard deviation across folds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Summary { mean, std }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub accuracy: Summary,
    pub auc: Summary,
    pub sensitivity: Option<Summary>,
    pub specificity: Option<Summary>,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let auc: Vec<f64> = folds.iter().map(|f| f.auc).collect();
        let sen: Vec<f64> = folds.iter().filter_map(|f| f.sensitivity).collect();
        let spe: Vec<f64> = folds.iter().filter_map(|f| f.specificity).collect();
        MetricsReport {
            accuracy: summarize(&acc),
            auc: summarize(&auc),
            sensitivity: (sen.len() == folds.len() && !sen.is_empty())
                .then(|| summarize(&sen)),
            specificity: (spe.len() == folds.len() && !spe.is_empty())
                .then(|| summarize(&spe)),
            folds,
        }
    }
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

/// Mann-Whitney AUC with midrank tie handling; agrees exactly with the
/// exhaustive pair-counting definition.
fn binary_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    debug_assert!(n_pos > 0 && n_neg > 0);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Average 1-based rank of the tied block [i, j).
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positive[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Computes accuracy, AUC, the confusion matrix, and for binary tasks
/// sensitivity and specificity, from raw logits.
pub fn compute_metrics(
    logits: &Matrix,
    labels: &[usize],
    num_classes: usize,
) -> Result<FoldMetrics> {
    if logits.rows() != labels.len() {
        return Err(Error::dimension(
            "compute_metrics",
            format!("{} logit rows vs {} labels", logits.rows(), labels.len()),
        ));
    }
    if logits.cols() != num_classes {
        return Err(Error::dimension(
            "compute_metrics",
            format!("{} logit columns vs {num_classes} classes", logits.cols()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Data(format!("label {bad} out of range")));
    }
    let distinct = {
        let mut seen = vec![false; num_classes];
        for &y in labels {
            seen[y] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Data(
            "AUC undefined: labels contain a single class".into(),
        ));
    }

    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        confusion[y][argmax(logits.row(i))] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / labels.len() as f64;

    let probs = softmax_rows(logits, 1.0)?;
    let auc = if num_classes == 2 {
        let scores: Vec<f64> = (0..labels.len()).map(|i| probs.get(i, 1)).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        binary_auc(&scores, &positive)
    } else {
        // Macro one-vs-rest over classes with both positives and negatives.
        let mut total = 0.0;
        let mut counted = 0usize;
        for c in 0..num_classes {
            let n_pos = labels.iter().filter(|&&y| y == c).count();
            if n_pos == 0 || n_pos == labels.len() {
                continue;
            }
            let scores: Vec<f64> = (0..labels.len()).map(|i| probs.get(i, c)).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            total += binary_auc(&scores, &positive);
            counted += 1;
        }
        total / counted as f64
    };

    let (sensitivity, specificity) = if num_classes == 2 {
        let tp = confusion[1][1] as f64;
        let fn_ = confusion[1][0] as f64;
        let tn = confusion[0][0] as f64;
        let fp = confusion[0][1] as f64;
        (Some(tp / (tp + fn_).max(1.0)), Some(tn / (tn + fp).max(1.0)))
    } else {
        (None, None)
    };

    Ok(FoldMetrics {
        accuracy,
        auc,
        sensitivity,
        specificity,
        confusion,
    })
}

/// Per-node fraction of incident edges whose endpoint carries a
/// different class; isolated nodes are flagged, not scored as zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphQualityEntry {
    pub method: String,
    pub per_node: Vec<Option<f64>>,
    /// Ten buckets over [0, 1]; the last bucket is closed above.
    pub histogram: Vec<usize>,
    pub isolated: usize,
    pub median: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphQualityReport {
    pub entries: Vec<GraphQualityEntry>,
}

pub fn incorrect_link_proportion(
    graph: &LearnedGraph,
    labels: &[usize],
    method: &str,
) -> Result<GraphQualityEntry> {
    let n = graph.num_nodes();
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} graph nodes", labels.len())));
    }
    let mut per_node: Vec<Option<f64>> = Vec::with_capacity(n);
    for u in 0..n {
        let neighbors = graph.neighbors(u);
        if neighbors.is_empty() {
            per_node.push(None);
            continue;
        }
        let wrong = neighbors
            .iter()
            .filter(|&&(v, _)| labels[v] != labels[u])
            .count();
        per_node.push(Some(wrong as f64 / neighbors.len() as f64));
    }
    let mut scored: Vec<f64> = per_node.iter().flatten().copied().collect();
    scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let isolated = n - scored.len();
    let mut histogram = vec![0usize; 10];
    for &p in &scored {
        let bucket = ((p * 10.0).floor() as usize).min(9);
        histogram[bucket] += 1;
    }
    let median = (!scored.is_empty()).then(|| scored[scored.len() / 2]);
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(GraphQualityEntry {
        method: method.to_string(),
        per_node,
        histogram,
        isolated,
        median,
        mean,
    })
}

/// Fold-local preprocessing: imputation and standardization statistics
/// from the training rows only, applied to every row.
pub fn preprocess_fold(
    dataset: &MultiModalDataset,
    train_mask: &[bool],
) -> Result<(MultiModalDataset, crate::trainer::PreprocessStats)> {
    let (imputed, impute) = dataset.mean_impute(train_mask)?;
    let (standardized, standardize) = imputed.standardize(train_mask)?;
    Ok((standardized, crate::trainer::PreprocessStats { impute, standardize }))
}

/// K independent fits with fold-local preprocessing and held-out
/// evaluation (inductive attachment or transductive full-graph forward
/// per `cfg.mode`). Per-fold seeds derive from the master seed.
pub fn run_cv(dataset: &MultiModalDataset, cfg: &TrainConfig, k: usize) -> Result<MetricsReport> {
    let split = stratified_kfold(&dataset.labels, k, cfg.seed)?;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        folds.push(run_fold(dataset, cfg, &split.masks(fold), fold as u64)?);
    }
    Ok(MetricsReport::from_folds(folds))
}

fn run_fold(
    dataset: &MultiModalDataset,
    cfg: &TrainConfig,
    masks: &(Vec<bool>, Vec<bool>),
    fold: u64,
) -> Result<FoldMetrics> {
    let (train_full, test) = masks;
    let fold_seed = mix_seed(cfg.seed, fold, 0x666f6c64, 0);
    let (train, val) = carve_validation(&dataset.labels, train_full, 0.1, fold_seed);
    let (processed, _stats) = preprocess_fold(dataset, &train)?;
    let fold_cfg = TrainConfig {
        seed: fold_seed,
        ..cfg.clone()
    };
    let (state, _history) = fit(&processed, &train, &val, &fold_cfg)?;

    let test_rows = mask_indices(test);
    let test_labels = processed.gather_labels(&test_rows);
    let logits = match cfg.mode {
        EvalMode::Inductive => {
            let ctx = build_context(&state, &processed, &train)?;
            inductive_predict(
                &state,
                &ctx,
                &processed,
                &test_rows,
                SamplingMode::Full,
                cfg.fanouts,
                0,
            )?
        }
        EvalMode::Transductive => {
            let all = transductive_predict(&state, &processed)?;
            all.gather_rows(&test_rows)
        }
    };
    compute_metrics(&logits, &test_labels, processed.num_classes())
}

/// One row of the label-fraction sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub metrics: FoldMetrics,
}

/// Transductive protocol: for each labeled fraction, train on that
/// fraction (remainder split between validation and test), run the
/// full-graph forward, and score the test partition.
pub fn label_sweep(
    dataset: &MultiModalDataset,
    cfg: &TrainConfig,
    fractions: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for (i, &fraction) in fractions.iter().enumerate() {
        let seed = mix_seed(cfg.seed, i as u64, 0x73776565, 0);
        let (train, val, test) =
            crate::data::stratified_fraction_split(&dataset.labels, fraction, seed)?;
        let (processed, _stats) = preprocess_fold(dataset, &train)?;
        let sweep_cfg = TrainConfig {
            seed,
            mode: EvalMode::Transductive,
            ..cfg.clone()
        };
        let (state, _) = fit(&processed, &train, &val, &sweep_cfg)?;
        let logits = transductive_predict(&state, &processed)?;
        let test_rows = mask_indices(&test);
        let metrics = compute_metrics(
            &logits.gather_rows(&test_rows),
            &processed.gather_labels(&test_rows),
            processed.num_classes(),
        )?;
        rows.push(SweepRow { fraction, metrics });
    }
    Ok(rows)
}

/// The sweep grid: 10% through 80% in steps of 10.
pub fn sweep_fractions() -> Vec<f64> {
    (1..=8).map(|i| i as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agl::index_node_ids;
    use approx::assert_abs_diff_eq;

    fn logits_from_scores(scores: &[f64]) -> Matrix {
        // Two-class logits whose positive probability is the score.
        Matrix::from_fn(scores.len(), 2, |i, j| {
            if j == 1 {
                scores[i].ln()
            } else {
                (1.0 - scores[i]).ln()
            }
        })
    }

    #[test]
    fn auc_hand_case() {
        // scores [0.9, 0.8, 0.3, 0.1], labels [1, 0, 1, 0] -> AUC 0.75.
        let logits = logits_from_scores(&[0.9, 0.8, 0.3, 0.1]);
        let m = compute_metrics(&logits, &[1, 0, 1, 0], 2).unwrap();
        assert_abs_diff_eq!(m.auc, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn perfect_separation_gives_all_ones() {
        let logits = logits_from_scores(&[0.9, 0.95, 0.05, 0.1]);
        let m = compute_metrics(&logits, &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.sensitivity, Some(1.0));
        assert_eq!(m.specificity, Some(1.0));
    }

    #[test]
    fn random_scores_hover_near_half_auc() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let n = 4000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2usize)).collect();
        let m = compute_metrics(&logits_from_scores(&scores), &labels, 2).unwrap();
        assert!((m.auc - 0.5).abs() < 0.05, "auc {}", m.auc);
    }

    #[test]
    fn auc_matches_pair_counting_oracle_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        for trial in 0..200 {
            let n = 2 + trial % 199; // up to 200 samples
            // Coarse grid to force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..7) as f64 / 7.0).collect();
            let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if positive.iter().all(|&p| p) {
                positive[0] = false;
            }
            if positive.iter().all(|&p| !p) {
                positive[0] = true;
            }
            let fast = binary_auc(&scores, &positive);
            // Exhaustive pairs: wins + half-credit ties.
            let mut num = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                if !positive[i] {
                    continue;
                }
                for j in 0..n {
                    if positive[j] {
                        continue;
                    }
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
            let oracle = num / pairs;
            assert_eq!(fast, oracle, "trial {trial}");
        }
    }

    #[test]
    fn accuracy_is_consistent_with_confusion_matrix() {
        let logits = Matrix::from_rows(&[
            vec![2.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0], // tie breaks to class 0
        ])
        .unwrap();
        let labels = [0, 1, 2, 0];
        let m = compute_metrics(&logits, &labels, 3).unwrap();
        let total: usize = m.confusion.iter().flatten().sum();
        let diag: usize = (0..3).map(|c| m.confusion[c][c]).sum();
        assert_eq!(total, 4);
        assert_abs_diff_eq!(m.accuracy, diag as f64 / 4.0, epsilon = 1e-15);
        assert_eq!(m.accuracy, 1.0);
        assert!(m.sensitivity.is_none() && m.specificity.is_none());
    }

    #[test]
    fn single_class_labels_reject_auc() {
        let logits = Matrix::zeros(3, 2);
        let err = compute_metrics(&logits, &[1, 1, 1], 2).unwrap_err();
        assert!(err.to_string().contains("AUC undefined"), "{err}");
    }

    #[test]
    fn incorrect_links_same_class_graph_is_zero() {
        let mut a = Matrix::zeros(4, 4);
        // Edges only within {0,1} and {2,3}; labels match the blocks.
        a.set(0, 1, 0.9);
        a.set(1, 0, 0.9);
        a.set(2, 3, 0.4);
        a.set(3, 2, 0.4);
        let graph = LearnedGraph {
            adjacency: a,
            node_ids: index_node_ids(4),
        };
        let entry = incorrect_link_proportion(&graph, &[0, 0, 1, 1], "learned").unwrap();
        assert!(entry.per_node.iter().all(|p| *p == Some(0.0)));
        assert_eq!(entry.isolated, 0);
        assert_eq!(entry.median, Some(0.0));
    }

    #[test]
    fn incorrect_links_complete_balanced_graph() {
        // Complete graph, 2 classes of size n: every node sees n wrong
        // links among 2n-1.
        let n = 4;
        let total = 2 * n;
        let a = Matrix::from_fn(total, total, |i, j| if i == j { 0.0 } else { 1.0 });
        let labels: Vec<usize> = (0..total).map(|i| i / n).collect();
        let graph = LearnedGraph {
            adjacency: a,
            node_ids: index_node_ids(total),
        };
        let entry = incorrect_link_proportion(&graph, &labels, "complete").unwrap();
        let expect = n as f64 / (2 * n - 1) as f64;
        for p in &entry.per_node {
            assert_abs_diff_eq!(p.unwrap(), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn isolated_nodes_are_flagged_not_scored() {
        let mut a = Matrix::zeros(3, 3);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        let graph = LearnedGraph {
            adjacency: a,
            node_ids: index_node_ids(3),
        };
        let entry = incorrect_link_proportion(&graph, &[0, 1, 0], "learned").unwrap();
        assert_eq!(entry.per_node[2], None);
        assert_eq!(entry.isolated, 1);
        let hist_total: usize = entry.histogram.iter().sum();
        assert_eq!(hist_total, 2);
    }

    #[test]
    fn cv_smoke_run_is_deterministic() {
        use crate::data::synthetic::{synthetic_generate, SyntheticSpec};
        let ds = synthetic_generate(&SyntheticSpec {
            n: 60,
            modality_dims: vec![4, 4],
            num_classes: 2,
            separation: 4.0,
            noise: 0.5,
            complementary: false,
            redundant: false,
            seed: 3,
        })
        .unwrap();
        let cfg = TrainConfig {
            d_f: 4,
            d_h: 6,
            d_g: 6,
            epochs: 4,
            eval_every: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let report = run_cv(&ds, &cfg, 2).unwrap();
        assert_eq!(report.folds.len(), 2);
        assert!(report.folds.iter().all(|f| f.sensitivity.is_some()));
        let again = run_cv(&ds, &cfg, 2).unwrap();
        for (a, b) in report.folds.iter().zip(&again.folds) {
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
            assert_eq!(a.auc.to_bits(), b.auc.to_bits());
        }
    }

    #[test]
    fn sweep_grid_has_eight_fractions() {
        let f = sweep_fractions();
        assert_eq!(f.len(), 8);
        assert_abs_diff_eq!(f[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(f[7], 0.8, epsilon = 1e-15);
    }
}
