//! Modality-aware representation learning.
//!
//! Heterogeneous per-patient feature blocks are projected into a common
//! width, fused by inter-modal scaled dot-product attention into a
//! shared embedding, and the per-patient attention matrix itself is
//! kept, flattened, as the modality-specified embedding. The final
//! per-patient representation is the concatenation of the two.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{BoundLinear, Linear, Matrix, Parameter, Tape, Var};

/// Parameters of the fusion front-end.
///
/// All projections are stored in right-multiplication convention
/// (`y = x W`), so `modality_projections[m]` has shape `d_m x d_f` and
/// `output` has shape `(d_f * M) x d_h`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarlParams {
    pub modality_projections: Vec<Linear>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    /// Self-preservation strength on the aggregation diagonal.
    pub alpha: f64,
    /// Attention temperature.
    pub tau: f64,
}

impl MarlParams {
    pub fn new(
        modality_dims: &[usize],
        d_f: usize,
        d_h: usize,
        alpha: f64,
        tau: f64,
        use_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if modality_dims.is_empty() {
            return Err(Error::Parameter("at least one modality required".into()));
        }
        if alpha < 0.0 {
            return Err(Error::Parameter(format!("alpha must be >= 0, got {alpha}")));
        }
        if tau <= 0.0 {
            return Err(Error::Parameter(format!("tau must be positive, got {tau}")));
        }
        let m = modality_dims.len();
        let modality_projections = modality_dims
            .iter()
            .enumerate()
            .map(|(i, &d_m)| Linear::new(&format!("marl.proj{i}"), d_m, d_f, use_bias, rng))
            .collect();
        Ok(MarlParams {
            modality_projections,
            query: Linear::new("marl.query", d_f, d_f, use_bias, rng),
            key: Linear::new("marl.key", d_f, d_f, use_bias, rng),
            value: Linear::new("marl.value", d_f, d_f, use_bias, rng),
            output: Linear::new("marl.output", d_f * m, d_h, use_bias, rng),
            alpha,
            tau,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_projections.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.query.in_dim()
    }

    pub fn shared_dim(&self) -> usize {
        self.output.out_dim()
    }

    /// Width of the combined embedding: `d_h + M^2`.
    pub fn embedding_dim(&self) -> usize {
        let m = self.num_modalities();
        self.shared_dim() + m * m
    }

    fn check_batch(&self, features: &[Matrix]) -> Result<usize> {
        if features.len() != self.num_modalities() {
            return Err(Error::Data(format!(
                "expected {} modalities, got {}",
                self.num_modalities(),
                features.len()
            )));
        }
        let n = features[0].rows();
        for (i, (block, proj)) in features.iter().zip(&self.modality_projections).enumerate() {
            if block.rows() != n {
                return Err(Error::Data(format!(
                    "modality {i}: {} rows, expected {n}",
                    block.rows()
                )));
            }
            if block.cols() != proj.in_dim() {
                return Err(Error::Data(format!(
                    "modality {i}: feature dim {} does not match projection input {}",
                    block.cols(),
                    proj.in_dim()
                )));
            }
        }
        Ok(n)
    }

    pub fn bind(&self, tape: &Tape) -> MarlBound {
        MarlBound {
            modality_projections: self
                .modality_projections
                .iter()
                .map(|l| l.bind(tape))
                .collect(),
            query: self.query.bind(tape),
            key: self.key.bind(tape),
            value: self.value.bind(tape),
            output: self.output.bind(tape),
        }
    }

    /// Batch forward pass on the tape.
    ///
    /// `features[m]` holds modality m for all patients in the batch
    /// (`n x d_m`). Differentiable w.r.t. every bound parameter; the
    /// attention feeds both the shared aggregation and the specified
    /// embedding, so gradients reach the query/key projections through
    /// both uses.
    pub fn forward(&self, tape: &Tape, bound: &MarlBound, features: &[Matrix]) -> Result<MarlVars> {
        let n = self.check_batch(features)?;
        let m = self.num_modalities();
        let d_f = self.feature_dim();

        let projected: Vec<Var> = features
            .iter()
            .zip(&self.modality_projections)
            .zip(&bound.modality_projections)
            .map(|((block, layer), b)| {
                let x = tape.constant(block.clone());
                layer.apply(tape, b, x)
            })
            .collect();

        // Stack to (n*M) x d_f with row u*M + m holding patient u's
        // modality-m feature row.
        let by_modality = projected
            .into_iter()
            .reduce(|acc, v| tape.concat_rows(acc, v))
            .expect("at least one modality");
        let mut interleave = Vec::with_capacity(n * m);
        for u in 0..n {
            for mi in 0..m {
                interleave.push(mi * n + u);
            }
        }
        let stacked = tape.gather_rows(by_modality, Rc::new(interleave));

        let q = self.query.apply(tape, &bound.query, stacked);
        let k = self.key.apply(tape, &bound.key, stacked);
        let v = self.value.apply(tape, &bound.value, stacked);

        let attention_stack = tape.block_attention(q, k, m, self.tau);
        let aggregated = tape.add(
            tape.scale(v, self.alpha),
            tape.block_matmul(attention_stack, v, m),
        );

        // Row-major reshape concatenates each patient's M aggregated
        // value rows: exactly Vec(V_hat^T).
        let flattened = tape.reshape(aggregated, n, m * d_f);
        let shared = self.output.apply(tape, &bound.output, flattened);
        let specified = tape.reshape(attention_stack, n, m * m);
        let combined = tape.concat_cols(shared, specified);

        Ok(MarlVars {
            shared,
            specified,
            combined,
            attention_stack,
        })
    }

    /// Value-level forward producing the embedding container.
    pub fn forward_embedding(&self, features: &[Matrix]) -> Result<ModalityAwareEmbedding> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let vars = self.forward(&tape, &bound, features)?;
        Ok(ModalityAwareEmbedding::from_vars(
            &tape,
            &vars,
            self.num_modalities(),
        ))
    }

    pub fn collect_grads(&mut self, tape: &Tape, bound: &MarlBound) {
        for (layer, b) in self
            .modality_projections
            .iter_mut()
            .zip(&bound.modality_projections)
        {
            layer.collect_grads(tape, b);
        }
        self.query.collect_grads(tape, &bound.query);
        self.key.collect_grads(tape, &bound.key);
        self.value.collect_grads(tape, &bound.value);
        self.output.collect_grads(tape, &bound.output);
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = Vec::new();
        for layer in &self.modality_projections {
            v.extend(layer.params());
        }
        v.extend(self.query.params());
        v.extend(self.key.params());
        v.extend(self.value.params());
        v.extend(self.output.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = Vec::new();
        for layer in &mut self.modality_projections {
            v.extend(layer.params_mut());
        }
        v.extend(self.query.params_mut());
        v.extend(self.key.params_mut());
        v.extend(self.value.params_mut());
        v.extend(self.output.params_mut());
        v
    }

    // ---- per-patient operations ----

    /// Projects one patient's modality features into the `d_f x M`
    /// feature matrix whose column m is the projection of modality m.
    pub fn project_modalities(&self, features: &[Vec<f64>]) -> Result<Matrix> {
        if features.len() != self.num_modalities() {
            return Err(Error::Data(format!(
                "expected {} modalities, got {}",
                self.num_modalities(),
                features.len()
            )));
        }
        let d_f = self.feature_dim();
        let m = self.num_modalities();
        let mut out = Matrix::zeros(d_f, m);
        for (mi, (x, layer)) in features.iter().zip(&self.modality_projections).enumerate() {
            if x.len() != layer.in_dim() {
                return Err(Error::Data(format!(
                    "modality {mi}: feature dim {} does not match projection input {}",
                    x.len(),
                    layer.in_dim()
                )));
            }
            let row = Matrix::from_vec(1, x.len(), x.clone())?;
            let projected = layer.forward_value(&row)?;
            for i in 0..d_f {
                out.set(i, mi, projected.get(0, i));
            }
        }
        Ok(out)
    }

    /// Row-stochastic inter-modal attention for one patient.
    pub fn inter_modal_attention(&self, x_u: &Matrix) -> Result<Matrix> {
        self.check_feature_matrix(x_u)?;
        let xt = x_u.transpose(); // M x d_f, rows are modality features
        let q = self.query.forward_value(&xt)?;
        let k = self.key.forward_value(&xt)?;
        let scores = q.matmul_nt(&k);
        crate::numeric::softmax_rows(&scores, self.tau)
    }

    /// Self-preserving attention aggregation of the value vectors:
    /// row i of the result's transpose is `alpha * v_i + sum_j P_ij v_j`.
    pub fn aggregate_values(&self, x_u: &Matrix, attention: &Matrix) -> Result<Matrix> {
        self.check_feature_matrix(x_u)?;
        let m = self.num_modalities();
        if attention.shape() != (m, m) {
            return Err(Error::dimension(
                "aggregate_values",
                format!("attention is {:?}, expected {m}x{m}", attention.shape()),
            ));
        }
        let vt = self.value.forward_value(&x_u.transpose())?; // M x d_f
        let agg = vt.scale(self.alpha).add(&attention.matmul(&vt)?);
        Ok(agg.transpose()) // back to d_f x M
    }

    /// Projects the flattened aggregated values to the shared embedding.
    pub fn shared_representation(&self, aggregated: &Matrix) -> Result<Vec<f64>> {
        let m = self.num_modalities();
        let d_f = self.feature_dim();
        if aggregated.shape() != (d_f, m) {
            return Err(Error::dimension(
                "shared_representation",
                format!("aggregated is {:?}, expected {d_f}x{m}", aggregated.shape()),
            ));
        }
        // Vec of the transpose: modality-major flattening.
        let flat = aggregated.transpose();
        let row = Matrix::from_vec(1, m * d_f, flat.as_slice().to_vec())?;
        Ok(self.output.forward_value(&row)?.as_slice().to_vec())
    }

    fn check_feature_matrix(&self, x_u: &Matrix) -> Result<()> {
        let expect = (self.feature_dim(), self.num_modalities());
        if x_u.shape() != expect {
            return Err(Error::dimension(
                "marl",
                format!("feature matrix is {:?}, expected {expect:?}", x_u.shape()),
            ));
        }
        Ok(())
    }
}

/// Row-wise flattening of a patient's attention matrix.
pub fn specified_representation(attention: &Matrix) -> Vec<f64> {
    attention.as_slice().to_vec()
}

/// Per-modality contribution scores: column means of the attention
/// matrix. Sums to 1 because attention rows do.
pub fn contribution_scores(attention: &Matrix) -> Vec<f64> {
    let m = attention.rows();
    (0..attention.cols())
        .map(|j| (0..m).map(|i| attention.get(i, j)).sum::<f64>() / m as f64)
        .collect()
}

/// Tape handles for a bound [`MarlParams`].
pub struct MarlBound {
    pub modality_projections: Vec<BoundLinear>,
    pub query: BoundLinear,
    pub key: BoundLinear,
    pub value: BoundLinear,
    pub output: BoundLinear,
}

/// Tape nodes produced by one batch forward pass.
pub struct MarlVars {
    /// `n x d_h` shared embedding.
    pub shared: Var,
    /// `n x M^2` flattened attention.
    pub specified: Var,
    /// `n x (d_h + M^2)` concatenation of the two.
    pub combined: Var,
    /// `(n*M) x M` stacked attention rows.
    pub attention_stack: Var,
}

/// Materialized per-batch embeddings.
#[derive(Clone, Debug)]
pub struct ModalityAwareEmbedding {
    /// `n x d_h`.
    pub shared: Matrix,
    /// `n x M^2`, row-wise flattening of each patient's attention.
    pub specified: Matrix,
    /// `n x (d_h + M^2)`.
    pub combined: Matrix,
    /// Per-patient `M x M` attention matrices.
    pub attention: Vec<Matrix>,
}

impl ModalityAwareEmbedding {
    pub fn from_vars(tape: &Tape, vars: &MarlVars, m: usize) -> Self {
        let specified = tape.value(vars.specified);
        let attention = (0..specified.rows())
            .map(|u| {
                Matrix::from_vec(m, m, specified.row(u).to_vec()).expect("finite attention")
            })
            .collect();
        ModalityAwareEmbedding {
            shared: tape.value(vars.shared),
            specified,
            combined: tape.value(vars.combined),
            attention,
        }
    }

    pub fn num_patients(&self) -> usize {
        self.combined.rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn params(dims: &[usize], d_f: usize, d_h: usize, seed: u64) -> MarlParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        MarlParams::new(dims, d_f, d_h, 1.0, (d_f as f64).sqrt(), false, &mut rng).unwrap()
    }

    fn random_features(dims: &[usize], n: usize, seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        dims.iter()
            .map(|&d| Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.5..1.5)))
            .collect()
    }

    #[test]
    fn identity_projections_pass_features_through() {
        let mut p = params(&[3, 3], 3, 4, 1);
        for layer in &mut p.modality_projections {
            layer.weight.value = Matrix::identity(3);
        }
        let x = p
            .project_modalities(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]])
            .unwrap();
        for i in 0..3 {
            assert_eq!(x.get(i, 0), (i + 1) as f64);
            assert_eq!(x.get(i, 1), (i + 4) as f64);
        }
    }

    #[test]
    fn zero_projections_give_zero_matrix() {
        let mut p = params(&[2, 4], 3, 4, 2);
        for layer in &mut p.modality_projections {
            layer.weight.value = Matrix::zeros(layer.in_dim(), 3);
        }
        let x = p
            .project_modalities(&[vec![1.0, -1.0], vec![2.0, 0.5, -3.0, 1.0]])
            .unwrap();
        assert!(x.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_matches_matmul_oracle() {
        let p = params(&[4, 2], 3, 4, 3);
        let f0 = vec![0.5, -1.0, 2.0, 0.25];
        let f1 = vec![1.5, -0.5];
        let x = p.project_modalities(&[f0.clone(), f1.clone()]).unwrap();
        for (mi, feats) in [f0, f1].iter().enumerate() {
            let w = &p.modality_projections[mi].weight.value;
            for out_i in 0..3 {
                let expect: f64 = feats
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * w.get(k, out_i))
                    .sum();
                assert_abs_diff_eq!(x.get(out_i, mi), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn wrong_modality_count_or_dim_is_a_data_error() {
        let p = params(&[3, 2], 3, 4, 4);
        assert!(matches!(
            p.project_modalities(&[vec![0.0; 3]]),
            Err(Error::Data(_))
        ));
        let err = p
            .project_modalities(&[vec![0.0; 3], vec![0.0; 5]])
            .unwrap_err();
        assert!(err.to_string().contains("modality 1"), "{err}");
    }

    #[test]
    fn identical_columns_give_uniform_attention() {
        let mut p = params(&[2, 2, 2], 2, 4, 5);
        p.key.weight.value = p.query.weight.value.clone();
        let x_u = Matrix::from_fn(2, 3, |i, _| (i as f64) * 0.7 - 0.2);
        let att = p.inter_modal_attention(&x_u).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(att.get(i, j), 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_closed_form_two_modalities() {
        // Craft q/k so q1.k1/tau = ln 2 and q1.k2/tau = 0.
        let mut p = params(&[2, 2], 2, 4, 6);
        p.tau = 2.0;
        p.query.weight.value = Matrix::identity(2);
        p.key.weight.value =
            Matrix::from_rows(&[vec![2.0 * 2.0_f64.ln(), 0.0], vec![0.0, 1.0]]).unwrap();
        // x_u columns are unit vectors e1, e2.
        let x_u = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let att = p.inter_modal_attention(&x_u).unwrap();
        assert_abs_diff_eq!(att.get(0, 0), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(att.get(0, 1), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn aggregation_alpha_zero_uniform_attention_averages_values() {
        let mut p = params(&[3, 3, 3], 3, 4, 7);
        p.alpha = 0.0;
        let x_u = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.3 - 1.0);
        let uniform = Matrix::filled(3, 3, 1.0 / 3.0);
        let agg = p.aggregate_values(&x_u, &uniform).unwrap();
        let vt = p.value.forward_value(&x_u.transpose()).unwrap();
        for d in 0..3 {
            let mean = (vt.get(0, d) + vt.get(1, d) + vt.get(2, d)) / 3.0;
            for mi in 0..3 {
                assert_abs_diff_eq!(agg.get(d, mi), mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_single_modality_doubles_value() {
        // M = 1 forces P = [[1]]; with alpha = 1 the result is 2V.
        let p = params(&[3], 2, 4, 8);
        let x_u = Matrix::from_rows(&[vec![0.4], vec![-1.2]]).unwrap();
        let att = Matrix::identity(1);
        let agg = p.aggregate_values(&x_u, &att).unwrap();
        let vt = p.value.forward_value(&x_u.transpose()).unwrap();
        for d in 0..2 {
            assert_abs_diff_eq!(agg.get(d, 0), 2.0 * vt.get(0, d), epsilon = 1e-12);
        }
    }

    #[test]
    fn shared_representation_zero_and_identity_output() {
        let mut p = params(&[2, 2], 2, 4, 9);
        p.output.weight.value = Matrix::zeros(4, 4);
        let agg = Matrix::from_fn(2, 2, |i, j| (i + j) as f64);
        assert!(p
            .shared_representation(&agg)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        // d_h = d_f * M with identity output reproduces the flattening.
        p.output.weight.value = Matrix::identity(4);
        let h = p.shared_representation(&agg).unwrap();
        assert_eq!(h, vec![0.0, 1.0, 1.0, 2.0]); // rows of agg^T
    }

    #[test]
    fn specified_representation_flattens_row_wise() {
        let att = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        assert_eq!(specified_representation(&att), vec![0.7, 0.3, 0.4, 0.6]);
        let sum: f64 = specified_representation(&att).iter().sum();
        assert_abs_diff_eq!(sum, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn contribution_scores_hand_case_and_uniform() {
        let att = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let c = contribution_scores(&att);
        assert_abs_diff_eq!(c[0], 0.55, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], 0.45, epsilon = 1e-12);

        let uniform = Matrix::filled(3, 3, 1.0 / 3.0);
        for v in contribution_scores(&uniform) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn batch_forward_matches_per_patient_ops() {
        let dims = [4, 2, 3];
        let p = params(&dims, 3, 5, 10);
        let n = 6;
        let features = random_features(&dims, n, 11);
        let emb = p.forward_embedding(&features).unwrap();

        assert_eq!(emb.combined.cols(), p.embedding_dim());
        for u in 0..n {
            let per_modality: Vec<Vec<f64>> =
                features.iter().map(|f| f.row(u).to_vec()).collect();
            let x_u = p.project_modalities(&per_modality).unwrap();
            let att = p.inter_modal_attention(&x_u).unwrap();
            let agg = p.aggregate_values(&x_u, &att).unwrap();
            let h_sh = p.shared_representation(&agg).unwrap();
            let h_sp = specified_representation(&att);

            assert!(emb.attention[u].max_abs_diff(&att) < 1e-12);
            for (j, v) in h_sh.iter().enumerate() {
                assert_abs_diff_eq!(emb.shared.get(u, j), *v, epsilon = 1e-12);
            }
            for (j, v) in h_sp.iter().enumerate() {
                assert_abs_diff_eq!(emb.specified.get(u, j), *v, epsilon = 1e-12);
                // combined = concat(shared, specified)
                assert_eq!(emb.combined.get(u, p.shared_dim() + j), emb.specified.get(u, j));
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let dims = [3, 3];
        let p = params(&dims, 4, 6, 12);
        let features = random_features(&dims, 5, 13);
        let a = p.forward_embedding(&features).unwrap();
        let b = p.forward_embedding(&features).unwrap();
        assert_eq!(a.combined, b.combined);
        assert_eq!(a.specified, b.specified);
    }

    #[test]
    fn specified_round_trips_to_attention_bit_exactly() {
        let dims = [2, 3, 4];
        let p = params(&dims, 3, 4, 14);
        let features = random_features(&dims, 4, 15);
        let emb = p.forward_embedding(&features).unwrap();
        let m = p.num_modalities();
        for u in 0..4 {
            let rebuilt = Matrix::from_vec(m, m, emb.specified.row(u).to_vec()).unwrap();
            assert_eq!(rebuilt, emb.attention[u]);
        }
    }

    #[test]
    fn permuting_modalities_permutes_attention_and_preserves_shared() {
        let dims = [3, 2, 4];
        let p = params(&dims, 3, 5, 16);
        let n = 4;
        let features = random_features(&dims, n, 17);
        let emb = p.forward_embedding(&features).unwrap();

        // Permutation sigma: new position i takes old modality perm[i].
        let perm = [2usize, 0, 1];
        let m = dims.len();
        let d_f = 3;
        let mut permuted = p.clone();
        permuted.modality_projections =
            perm.iter().map(|&i| p.modality_projections[i].clone()).collect();
        // Output weight rows move in d_f-sized blocks with the modalities.
        let w = &p.output.weight.value;
        let mut w_new = Matrix::zeros(w.rows(), w.cols());
        for (new_m, &old_m) in perm.iter().enumerate() {
            for r in 0..d_f {
                for c in 0..w.cols() {
                    w_new.set(new_m * d_f + r, c, w.get(old_m * d_f + r, c));
                }
            }
        }
        permuted.output.weight.value = w_new;

        let features_perm: Vec<Matrix> = perm.iter().map(|&i| features[i].clone()).collect();
        let emb_perm = permuted.forward_embedding(&features_perm).unwrap();

        assert!(emb_perm.shared.max_abs_diff(&emb.shared) < 1e-9);
        for u in 0..n {
            for i in 0..m {
                for j in 0..m {
                    assert_abs_diff_eq!(
                        emb_perm.attention[u].get(i, j),
                        emb.attention[u].get(perm[i], perm[j]),
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_in_batch() {
        let dims = [5, 3];
        let p = params(&dims, 4, 6, 18);
        let features = random_features(&dims, 8, 19);
        let emb = p.forward_embedding(&features).unwrap();
        for att in &emb.attention {
            for i in 0..att.rows() {
                let s: f64 = att.row(i).iter().sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
                assert!(att.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
