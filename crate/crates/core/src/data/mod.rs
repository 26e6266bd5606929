//! Multi-modal dataset ingestion, cleaning, and fold splitting.
//!
//! Datasets arrive as a JSON manifest pointing at one CSV per modality
//! plus a labels CSV, all keyed by a `patient_id` column. Preprocessing
//! statistics (imputation means, standardization moments) are always
//! computed on training rows only and applied unchanged everywhere
//! else, so held-out rows never leak into the statistics.

pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// One feature block: `N x d_m` values plus a missingness mask.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub features: Matrix,
    /// `missing[i * d + j]` marks entry `(i, j)` as unobserved.
    pub missing: Vec<bool>,
}

impl Modality {
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[row * self.dim() + col]
    }
}

/// Aligned multi-modal dataset: every modality shares row order with
/// `patient_ids` and `labels`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiModalDataset {
    pub modalities: Vec<Modality>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub patient_ids: Vec<String>,
}

impl MultiModalDataset {
    pub fn num_patients(&self) -> usize {
        self.labels.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.dim()).collect()
    }

    /// Feature blocks restricted to the given rows, in order.
    pub fn gather_features(&self, rows: &[usize]) -> Vec<Matrix> {
        self.modalities
            .iter()
            .map(|m| m.features.gather_rows(rows))
            .collect()
    }

    pub fn gather_labels(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    pub fn has_missing(&self) -> bool {
        self.modalities
            .iter()
            .any(|m| m.missing.iter().any(|&b| b))
    }

    /// Removes patients whose missing fraction across all concatenated
    /// features exceeds `threshold` (strictly greater).
    pub fn drop_high_missing(&self, threshold: f64) -> Result<MultiModalDataset> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Parameter(format!(
                "missing-rate threshold must lie in [0,1], got {threshold}"
            )));
        }
        let total_dim: usize = self.modality_dims().iter().sum();
        let keep: Vec<usize> = (0..self.num_patients())
            .filter(|&i| {
                let missing: usize = self
                    .modalities
                    .iter()
                    .map(|m| (0..m.dim()).filter(|&j| m.is_missing(i, j)).count())
                    .sum();
                missing as f64 / total_dim as f64 <= threshold
            })
            .collect();
        if keep.is_empty() {
            return Err(Error::Data(format!(
                "no patients left after dropping rows with missing rate above {threshold}"
            )));
        }
        Ok(self.select_rows(&keep))
    }

    fn select_rows(&self, rows: &[usize]) -> MultiModalDataset {
        MultiModalDataset {
            modalities: self
                .modalities
                .iter()
                .map(|m| Modality {
                    name: m.name.clone(),
                    features: m.features.gather_rows(rows),
                    missing: rows
                        .iter()
                        .flat_map(|&r| {
                            (0..m.dim()).map(move |j| m.is_missing(r, j))
                        })
                        .collect(),
                })
                .collect(),
            labels: self.gather_labels(rows),
            class_names: self.class_names.clone(),
            patient_ids: rows.iter().map(|&r| self.patient_ids[r].clone()).collect(),
        }
    }

    /// Replaces missing entries by per-column means computed over the
    /// observed entries of training rows only, then clears the masks.
    pub fn mean_impute(&self, train_mask: &[bool]) -> Result<(MultiModalDataset, ImputeStats)> {
        self.check_mask(train_mask)?;
        let mut out = self.clone();
        let mut stats = ImputeStats { column_means: Vec::new() };
        for m in &mut out.modalities {
            let d = m.dim();
            let mut means = Vec::with_capacity(d);
            for j in 0..d {
                let mut sum = 0.0;
                let mut count = 0usize;
                for i in 0..self.num_patients() {
                    if train_mask[i] && !m.is_missing(i, j) {
                        sum += m.features.get(i, j);
                        count += 1;
                    }
                }
                if count == 0 {
                    return Err(Error::Data(format!(
                        "column {j} of modality {} has no observed training values",
                        m.name
                    )));
                }
                means.push(sum / count as f64);
            }
            for i in 0..self.num_patients() {
                for j in 0..d {
                    if m.is_missing(i, j) {
                        m.features.set(i, j, means[j]);
                    }
                }
            }
            m.missing = vec![false; m.missing.len()];
            stats.column_means.push(means);
        }
        Ok((out, stats))
    }

    /// Per-feature z-scoring with training-row statistics. Features
    /// with a training standard deviation below `1e-12` are centered
    /// only.
    pub fn standardize(&self, train_mask: &[bool]) -> Result<(MultiModalDataset, StandardizeStats)> {
        self.check_mask(train_mask)?;
        let n_train = train_mask.iter().filter(|&&b| b).count();
        if n_train < 2 {
            return Err(Error::Data(format!(
                "standardization needs at least 2 training rows, got {n_train}"
            )));
        }
        let mut out = self.clone();
        let mut stats = StandardizeStats { means: Vec::new(), stds: Vec::new() };
        for m in &mut out.modalities {
            let d = m.dim();
            let mut means = Vec::with_capacity(d);
            let mut stds = Vec::with_capacity(d);
            for j in 0..d {
                let values: Vec<f64> = (0..self.num_patients())
                    .filter(|&i| train_mask[i])
                    .map(|i| m.features.get(i, j))
                    .collect();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / values.len() as f64;
                let std = var.sqrt();
                means.push(mean);
                stds.push(std);
            }
            for i in 0..self.num_patients() {
                for j in 0..d {
                    let v = m.features.get(i, j) - means[j];
                    let v = if stds[j] < 1e-12 { v } else { v / stds[j] };
                    m.features.set(i, j, v);
                }
            }
            stats.means.push(means);
            stats.stds.push(stds);
        }
        Ok((out, stats))
    }

    /// Applies previously computed preprocessing to raw feature rows of
    /// the same schema (imputation means for missing entries, then the
    /// stored standardization).
    pub fn apply_preprocessing(
        features: &mut [Matrix],
        missing: &[Vec<bool>],
        impute: &ImputeStats,
        standardize: &StandardizeStats,
    ) -> Result<()> {
        if features.len() != impute.column_means.len() {
            return Err(Error::Data(format!(
                "{} modalities vs {} imputation blocks",
                features.len(),
                impute.column_means.len()
            )));
        }
        for (mi, block) in features.iter_mut().enumerate() {
            let means = &impute.column_means[mi];
            let s_mean = &standardize.means[mi];
            let s_std = &standardize.stds[mi];
            if block.cols() != means.len() {
                return Err(Error::Data(format!(
                    "modality {mi}: {} columns vs {} stored stats",
                    block.cols(),
                    means.len()
                )));
            }
            for i in 0..block.rows() {
                for j in 0..block.cols() {
                    let raw = if missing[mi][i * block.cols() + j] {
                        means[j]
                    } else {
                        block.get(i, j)
                    };
                    let v = raw - s_mean[j];
                    let v = if s_std[j] < 1e-12 { v } else { v / s_std[j] };
                    block.set(i, j, v);
                }
            }
        }
        Ok(())
    }

    fn check_mask(&self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.num_patients() {
            return Err(Error::Data(format!(
                "mask length {} vs {} patients",
                mask.len(),
                self.num_patients()
            )));
        }
        Ok(())
    }
}

/// Column means used for imputation, per modality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImputeStats {
    pub column_means: Vec<Vec<f64>>,
}

/// Standardization moments, per modality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StandardizeStats {
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

// ---- manifest IO ----

#[derive(Debug, Serialize, Deserialize)]
struct ManifestModality {
    name: String,
    path: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    modalities: Vec<ManifestModality>,
    labels: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
}

struct CsvBlock {
    ids: Vec<String>,
    header: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
}

fn read_feature_csv(path: &Path) -> Result<CsvBlock> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("patient_id") {
        return Err(Error::Data(format!(
            "{}: first column must be patient_id",
            path.display()
        )));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut iter = record.iter();
        let id = iter
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty record", path.display())))?
            .to_string();
        let mut row = Vec::with_capacity(header.len() - 1);
        for (col, cell) in iter.enumerate() {
            if cell.is_empty() {
                row.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Parse(format!(
                        "{}: row {}, column {}: non-numeric value {cell:?}",
                        path.display(),
                        line + 2,
                        header.get(col + 1).cloned().unwrap_or_default()
                    ))
                })?;
                row.push(Some(v));
            }
        }
        ids.push(id);
        rows.push(row);
    }
    Ok(CsvBlock { ids, header, rows })
}

/// Loads a dataset from a JSON manifest.
///
/// Rows are ordered by the labels CSV. Patients present in the labels
/// file but absent from a modality CSV become fully-missing rows of
/// that modality. Duplicate patient ids are rejected.
pub fn load_dataset(manifest_path: &Path) -> Result<MultiModalDataset> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    // Labels first: they fix patient order.
    let labels_path = base.join(&manifest.labels);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&labels_path)
        .map_err(|e| Error::Parse(format!("{}: {e}", labels_path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Parse(format!("labels: {e}")))?
        .clone();
    if header.get(0) != Some("patient_id") || header.get(1) != Some("label") {
        return Err(Error::Data(format!(
            "{}: labels CSV must have patient_id,label columns",
            labels_path.display()
        )));
    }
    let mut patient_ids = Vec::new();
    let mut raw_labels = Vec::new();
    let mut seen = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(format!("labels: {e}")))?;
        let id = record.get(0).unwrap_or_default().to_string();
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::Data(format!("duplicate patient id {id:?} in labels")));
        }
        patient_ids.push(id);
        raw_labels.push(record.get(1).unwrap_or_default().to_string());
    }

    // Map raw label strings to class indices.
    let class_names = match &manifest.class_names {
        Some(names) => names.clone(),
        None => {
            let all_numeric = raw_labels.iter().all(|l| l.parse::<usize>().is_ok());
            if all_numeric {
                let max = raw_labels
                    .iter()
                    .map(|l| l.parse::<usize>().unwrap())
                    .max()
                    .unwrap_or(0);
                (0..=max).map(|c| c.to_string()).collect()
            } else {
                let mut distinct: Vec<String> = raw_labels.clone();
                distinct.sort();
                distinct.dedup();
                distinct
            }
        }
    };
    let class_index: BTreeMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| {
            class_index.get(l.as_str()).copied().ok_or_else(|| {
                Error::Data(format!("label {l:?} not among classes {class_names:?}"))
            })
        })
        .collect::<Result<_>>()?;

    let row_of: BTreeMap<&str, usize> = patient_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let n = patient_ids.len();

    let mut modalities = Vec::new();
    for spec in &manifest.modalities {
        let block = read_feature_csv(&base.join(&spec.path))?;
        let d = block.header.len() - 1;
        let mut features = Matrix::zeros(n, d);
        let mut missing = vec![true; n * d];
        let mut seen_ids = BTreeMap::new();
        for (id, row) in block.ids.iter().zip(&block.rows) {
            if seen_ids.insert(id.clone(), ()).is_some() {
                return Err(Error::Data(format!(
                    "duplicate patient id {id:?} in modality {}",
                    spec.name
                )));
            }
            // Feature rows without a label row are ignored.
            let Some(&i) = row_of.get(id.as_str()) else {
                continue;
            };
            for (j, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite feature for patient {id:?} in modality {}",
                            spec.name
                        )));
                    }
                    features.set(i, j, *v);
                    missing[i * d + j] = false;
                }
            }
        }
        modalities.push(Modality {
            name: spec.name.clone(),
            features,
            missing,
        });
    }

    Ok(MultiModalDataset {
        modalities,
        labels,
        class_names,
        patient_ids,
    })
}

/// Writes a dataset as a manifest plus CSVs under `dir`; the inverse of
/// [`load_dataset`].
pub fn save_dataset(ds: &MultiModalDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        modalities: Vec::new(),
        labels: "labels.csv".to_string(),
        class_names: Some(ds.class_names.clone()),
    };
    for m in &ds.modalities {
        let file = format!("{}.csv", m.name);
        let mut out = String::from("patient_id");
        for j in 0..m.dim() {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for i in 0..ds.num_patients() {
            out.push_str(&ds.patient_ids[i]);
            for j in 0..m.dim() {
                if m.is_missing(i, j) {
                    out.push(',');
                } else {
                    out.push_str(&format!(",{}", m.features.get(i, j)));
                }
            }
            out.push('\n');
        }
        std::fs::write(dir.join(&file), out)?;
        manifest.modalities.push(ManifestModality {
            name: m.name.clone(),
            path: file,
        });
    }
    let mut labels = String::from("patient_id,label\n");
    for (id, &y) in ds.patient_ids.iter().zip(&ds.labels) {
        labels.push_str(&format!("{id},{}\n", ds.class_names[y]));
    }
    std::fs::write(dir.join("labels.csv"), labels)?;
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest_path)
}

// ---- splits ----

/// Stratified fold assignment: `fold_of[i]` in `[0, k)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_of: Vec<usize>,
    pub k: usize,
}

impl FoldSplit {
    /// Boolean masks `(train, test)` for one fold.
    pub fn masks(&self, fold: usize) -> (Vec<bool>, Vec<bool>) {
        let test: Vec<bool> = self.fold_of.iter().map(|&f| f == fold).collect();
        let train: Vec<bool> = test.iter().map(|&b| !b).collect();
        (train, test)
    }
}

/// Stratified k-fold assignment, deterministic per seed. Each class is
/// shuffled then dealt round-robin, so per-fold class counts stay
/// within one of proportional.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Parameter(format!("k must be at least 2, got {k}")));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < k {
            return Err(Error::Data(format!(
                "class {c} has {} members, fewer than {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            fold_of[i] = pos % k;
        }
    }
    Ok(FoldSplit { fold_of, k })
}

/// Stratified `(train, val, test)` masks with `train_fraction` of each
/// class labeled for training and the remainder split evenly between
/// validation and test.
pub fn stratified_fraction_split(
    labels: &[usize],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<bool>, Vec<bool>, Vec<bool>)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Parameter(format!(
            "train fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut train = vec![false; labels.len()];
    let mut val = vec![false; labels.len()];
    let mut test = vec![false; labels.len()];
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n_train = ((members.len() as f64) * train_fraction).round() as usize;
        let n_train = n_train.clamp(1, members.len().saturating_sub(2).max(1));
        let rest = members.len() - n_train;
        let n_val = rest / 2;
        for (pos, &i) in members.iter().enumerate() {
            if pos < n_train {
                train[i] = true;
            } else if pos < n_train + n_val {
                val[i] = true;
            } else {
                test[i] = true;
            }
        }
    }
    Ok((train, val, test))
}

/// Carves a stratified validation subset out of a training mask;
/// roughly `val_fraction` of each class, at least one row kept for
/// training per class.
pub fn carve_validation(
    labels: &[usize],
    train_mask: &[bool],
    val_fraction: f64,
    seed: u64,
) -> (Vec<bool>, Vec<bool>) {
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut train = train_mask.to_vec();
    let mut val = vec![false; labels.len()];
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len())
            .filter(|&i| train_mask[i] && labels[i] == c)
            .collect();
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64) * val_fraction).floor() as usize;
        let n_val = n_val.min(members.len().saturating_sub(1));
        for &i in members.iter().take(n_val) {
            train[i] = false;
            val[i] = true;
        }
    }
    (train, val)
}

/// Indices set in a boolean mask.
pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|&(_, &b)| b)
        .map(|(i, _)| i)
        .collect()
}
