//! Multi-modal graph learning for node-level prediction.
//!
//! The pipeline maps per-patient multi-modal feature blocks into a
//! shared + modality-specified embedding via inter-modal attention,
//! learns a sparse population graph from the embeddings with a
//! trainable weighted cosine metric, and classifies nodes with a
//! two-layer graph convolutional network — all trained jointly under
//! `L = L_gnn + lambda * L_g + eta * L_sp`.
//!
//! Entry points: [`trainer::fit`] to train, [`trainer::transductive_predict`]
//! and [`trainer::inductive_predict`] to predict, [`eval::run_cv`] for
//! cross-validated evaluation, and [`data::synthetic::synthetic_generate`]
//! for reproducible desk-scale datasets.

pub mod agl;
pub mod data;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod marl;
pub mod numeric;
pub mod trainer;

pub use agl::{GraphLearnerParams, LearnedGraph};
pub use data::{synthetic::SyntheticSpec, FoldSplit, MultiModalDataset};
pub use error::{Error, Result};
pub use eval::{GraphQualityReport, MetricsReport};
pub use gnn::{AuxClassifierParams, GcnParams, SampledNeighborhood, SamplingMode};
pub use marl::{MarlParams, ModalityAwareEmbedding};
pub use numeric::{AdamState, Matrix, Parameter};
pub use trainer::{Checkpoint, EvalMode, ModelState, TrainConfig};
