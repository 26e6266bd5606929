//! Synthetic multi-modal dataset generation.
//!
//! Class-conditional Gaussian clusters per modality, with optional
//! structure flags:
//!
//! - `complementary`: class centroids collide within every single
//!   modality (each modality only tells one class apart from the rest),
//!   so no single modality separates all classes but the concatenation
//!   does.
//! - `redundant`: modality 1's class signal is a fixed linear image of
//!   modality 0's, so it adds correlation but no new information.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, MultiModalDataset};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub modality_dims: Vec<usize>,
    pub num_classes: usize,
    /// Distance from each class centroid to the origin, per modality.
    pub separation: f64,
    /// Standard deviation of the per-dimension Gaussian noise.
    pub noise: f64,
    #[serde(default)]
    pub complementary: bool,
    #[serde(default)]
    pub redundant: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.modality_dims.is_empty() || self.modality_dims.iter().any(|&d| d == 0) {
            return Err(Error::Parameter("modality dims must all be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter("at least 2 classes required".into()));
        }
        if self.n < self.num_classes {
            return Err(Error::Parameter(format!(
                "n = {} is smaller than the number of classes {}",
                self.n, self.num_classes
            )));
        }
        if self.separation < 0.0 || self.noise < 0.0 {
            return Err(Error::Parameter(
                "separation and noise must be nonnegative".into(),
            ));
        }
        let m = self.modality_dims.len();
        if self.complementary && self.num_classes > m + 1 {
            return Err(Error::Parameter(format!(
                "complementary structure supports at most M+1 = {} classes, got {}",
                m + 1,
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Per-modality class centroids.
fn centroids(spec: &SyntheticSpec, rng: &mut ChaCha12Rng) -> Vec<Vec<Vec<f64>>> {
    let m = spec.modality_dims.len();
    let c = spec.num_classes;
    let mut out: Vec<Vec<Vec<f64>>> = Vec::with_capacity(m);
    for (mi, &d) in spec.modality_dims.iter().enumerate() {
        let mut per_class = Vec::with_capacity(c);
        for ci in 0..c {
            let centroid: Vec<f64> = if spec.complementary {
                // Modality mi singles out class (mi mod C): sign flip on a
                // shared all-ones direction, norm = separation.
                let sign = if ci == mi % c { 1.0 } else { -1.0 };
                let v = sign * spec.separation / (d as f64).sqrt();
                vec![v; d]
            } else {
                // Independent random direction per (modality, class).
                let raw: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                raw.iter().map(|v| v / norm * spec.separation).collect()
            };
            per_class.push(centroid);
        }
        out.push(per_class);
    }
    if spec.redundant && m >= 2 {
        // Modality 1 mirrors modality 0's signal through a fixed map.
        let d0 = spec.modality_dims[0];
        let d1 = spec.modality_dims[1];
        let map = Matrix::from_fn(d0, d1, |_, _| rng.sample::<f64, _>(StandardNormal));
        for ci in 0..c {
            let src = Matrix::from_vec(1, d0, out[0][ci].clone()).expect("finite centroid");
            let img = src.matmul(&map).expect("shapes fixed");
            let norm = img.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            let scale = if spec.separation > 0.0 {
                spec.separation / norm
            } else {
                0.0
            };
            out[1][ci] = img.as_slice().iter().map(|v| v * scale).collect();
        }
    }
    out
}

/// Generates a dataset; bit-identical for a fixed spec.
pub fn synthetic_generate(spec: &SyntheticSpec) -> Result<MultiModalDataset> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let c = spec.num_classes;

    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);
    let cents = centroids(spec, &mut rng);

    let mut modalities = Vec::with_capacity(spec.modality_dims.len());
    for (mi, &d) in spec.modality_dims.iter().enumerate() {
        let mut features = Matrix::zeros(spec.n, d);
        for i in 0..spec.n {
            let centroid = &cents[mi][labels[i]];
            for j in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                features.set(i, j, centroid[j] + spec.noise * noise);
            }
        }
        modalities.push(Modality {
            name: format!("mod{mi}"),
            features,
            missing: vec![false; spec.n * d],
        });
    }

    Ok(MultiModalDataset {
        modalities,
        labels,
        class_names: (0..c).map(|ci| format!("c{ci}")).collect(),
        patient_ids: (0..spec.n).map(|i| format!("p{i:04}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(separation: f64, noise: f64, complementary: bool) -> SyntheticSpec {
        SyntheticSpec {
            n: 300,
            modality_dims: vec![6, 5, 4],
            num_classes: 3,
            separation,
            noise,
            complementary,
            redundant: false,
            seed: 11,
        }
    }

    /// Nearest-centroid oracle: fit class means on even rows, classify
    /// the odd rows by closest centroid.
    fn centroid_accuracy(features: &Matrix, labels: &[usize], classes: usize) -> f64 {
        let d = features.cols();
        let mut sums = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for (i, &y) in labels.iter().enumerate().filter(|(i, _)| i % 2 == 0) {
            counts[y] += 1;
            for j in 0..d {
                sums[y][j] += features.get(i, j);
            }
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            for v in s.iter_mut() {
                *v /= n.max(1) as f64;
            }
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for (i, &y) in labels.iter().enumerate().filter(|(i, _)| i % 2 == 1) {
            let best = (0..classes)
                .map(|ci| {
                    let d2: f64 = (0..d)
                        .map(|j| (features.get(i, j) - sums[ci][j]).powi(2))
                        .sum();
                    (d2, ci)
                })
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .unwrap()
                .1;
            total += 1;
            if best == y {
                correct += 1;
            }
        }
        correct as f64 / total as f64
    }

    fn concat(ds: &MultiModalDataset) -> Matrix {
        let total: usize = ds.modality_dims().iter().sum();
        Matrix::from_fn(ds.num_patients(), total, |i, j| {
            let mut offset = 0;
            for m in &ds.modalities {
                if j < offset + m.dim() {
                    return m.features.get(i, j - offset);
                }
                offset += m.dim();
            }
            unreachable!()
        })
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synthetic_generate(&spec(3.0, 1.0, true)).unwrap();
        let b = synthetic_generate(&spec(3.0, 1.0, true)).unwrap();
        for (x, y) in a.modalities.iter().zip(&b.modalities) {
            assert_eq!(x.features, y.features);
        }
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn zero_separation_is_chance_level() {
        let ds = synthetic_generate(&spec(0.0, 1.0, false)).unwrap();
        let acc = centroid_accuracy(&concat(&ds), &ds.labels, 3);
        // Centroids fit on the evaluation data retain a little optimism;
        // anything near 1/3 means no usable signal.
        assert!(acc < 0.55, "accuracy {acc} with zero separation");
    }

    #[test]
    fn strong_separation_is_nearly_perfect() {
        let ds = synthetic_generate(&SyntheticSpec {
            separation: 5.0,
            noise: 0.1,
            ..spec(0.0, 0.0, false)
        })
        .unwrap();
        let acc = centroid_accuracy(&concat(&ds), &ds.labels, 3);
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn complementary_structure_needs_the_combination() {
        let ds = synthetic_generate(&SyntheticSpec {
            separation: 5.0,
            noise: 0.1,
            ..spec(0.0, 0.0, true)
        })
        .unwrap();
        for m in &ds.modalities {
            let acc = centroid_accuracy(&m.features, &ds.labels, 3);
            assert!(acc < 0.75, "single modality {} reached {acc}", m.name);
        }
        let acc = centroid_accuracy(&concat(&ds), &ds.labels, 3);
        assert!(acc >= 0.95, "concatenated accuracy {acc}");
    }

    #[test]
    fn redundant_modality_carries_the_same_signal() {
        let ds = synthetic_generate(&SyntheticSpec {
            redundant: true,
            separation: 4.0,
            noise: 0.2,
            ..spec(0.0, 0.0, false)
        })
        .unwrap();
        // Modality 1 alone should classify about as well as modality 0.
        let a0 = centroid_accuracy(&ds.modalities[0].features, &ds.labels, 3);
        let a1 = centroid_accuracy(&ds.modalities[1].features, &ds.labels, 3);
        assert!(a0 > 0.9 && a1 > 0.9, "{a0} vs {a1}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(1.0, 1.0, true);
        s.num_classes = 5; // > M + 1 = 4
        assert!(synthetic_generate(&s).is_err());
        let mut s = spec(1.0, 1.0, false);
        s.modality_dims = vec![];
        assert!(synthetic_generate(&s).is_err());
        let mut s = spec(1.0, 1.0, false);
        s.n = 2;
        assert!(synthetic_generate(&s).is_err());
    }
}
