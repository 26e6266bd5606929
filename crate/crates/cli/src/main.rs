//! Command-line interface: synthetic data generation, training,
//! cross-validated evaluation, graph-quality analysis, modality
//! contribution reports, and the transductive label-fraction sweep.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
//! failure. Failures print one machine-readable JSON line on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmgl_core::agl::{knn_rbf_graph, median_pairwise_distance};
use mmgl_core::data::synthetic::{synthetic_generate, SyntheticSpec};
use mmgl_core::data::{carve_validation, load_dataset, save_dataset, MultiModalDataset};
use mmgl_core::error::Error;
use mmgl_core::eval::{
    incorrect_link_proportion, label_sweep, preprocess_fold, run_cv, sweep_fractions,
    GraphQualityReport, MetricsReport,
};
use mmgl_core::marl::contribution_scores;
use mmgl_core::trainer::{
    fit, Checkpoint, DatasetFingerprint, EvalMode, FrontEndParams, TrainConfig,
};
use mmgl_core::Matrix;

/// Default missing-rate cutoff applied before training or evaluation.
const MISSING_RATE_THRESHOLD: f64 = 0.05;
const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "mmgl",
    version,
    about = "Multi-modal graph learning: train, evaluate, and analyze"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Inductive,
    Transductive,
}

#[derive(Args)]
struct ConfigOpts {
    /// Key-value config file overriding the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation setting; overrides the config file.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modal dataset from a spec file.
    Synth {
        /// JSON spec: n, modality_dims, num_classes, separation, noise,
        /// complementary, redundant, seed.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit on the dataset and write a checkpoint plus history CSV.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigOpts,
    },
    /// Cross-validated evaluation; writes metrics JSON and per-fold CSV.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of stratified folds.
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[command(flatten)]
        config: ConfigOpts,
    },
    /// Compare the learned graph against the kNN/RBF baseline.
    AnalyzeGraph {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Neighbor count for the baseline graph.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// RBF bandwidth; defaults to the median pairwise distance.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Per-patient modality contribution scores and class averages.
    Contributions {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transductive label-fraction sweep (10% to 80% labeled).
    LabelSweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigOpts,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful output, not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            emit_error("usage", &e.to_string());
            std::process::exit(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            let (kind, code) = classify(&e);
            emit_error(kind, &e.to_string());
            std::process::exit(code);
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    let line = serde_json::json!({"error": {"kind": kind, "message": message}});
    eprintln!("{line}");
}

fn classify(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Parameter(_) | Error::Dimension { .. } => ("usage", 1),
        Error::Data(_) | Error::Parse(_) | Error::Io(_) | Error::Json(_) => ("data", 2),
        Error::Numeric(_) | Error::Contract(_) => ("numeric", 3),
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Train { dataset, out, config } => cmd_train(&dataset, &out, &config),
        Command::Evaluate { dataset, out, folds, config } => {
            cmd_evaluate(&dataset, &out, folds, &config)
        }
        Command::AnalyzeGraph { dataset, checkpoint, out, k, sigma } => {
            cmd_analyze_graph(&dataset, &checkpoint, &out, k, sigma)
        }
        Command::Contributions { dataset, checkpoint, out } => {
            cmd_contributions(&dataset, &checkpoint, &out)
        }
        Command::LabelSweep { dataset, out, config } => cmd_label_sweep(&dataset, &out, &config),
    }
}

fn build_config(opts: &ConfigOpts) -> Result<TrainConfig, Error> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path)?;
        cfg.apply_overrides(&text)?;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = opts.mode {
        cfg.mode = match mode {
            ModeArg::Inductive => EvalMode::Inductive,
            ModeArg::Transductive => EvalMode::Transductive,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_and_clean(path: &Path) -> Result<MultiModalDataset, Error> {
    let ds = load_dataset(path)?;
    ds.drop_high_missing(MISSING_RATE_THRESHOLD)
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(spec_path)?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("synthetic spec: {e}")))?;
    let ds = synthetic_generate(&spec)?;
    let manifest = save_dataset(&ds, out)?;
    println!("wrote {} patients to {}", ds.num_patients(), manifest.display());
    Ok(())
}

fn cmd_train(dataset: &Path, out: &Path, opts: &ConfigOpts) -> Result<(), Error> {
    let cfg = build_config(opts)?;
    let ds = load_and_clean(dataset)?;
    let all = vec![true; ds.num_patients()];
    let (train, val) = carve_validation(&ds.labels, &all, 0.1, cfg.seed);
    let (processed, stats) = preprocess_fold(&ds, &train)?;
    let (state, history) = fit(&processed, &train, &val, &cfg)?;

    std::fs::create_dir_all(out)?;
    let ckpt = Checkpoint::new(state, cfg, DatasetFingerprint::of(&processed), Some(stats));
    let ckpt_path = out.join("checkpoint.json");
    ckpt.save(&ckpt_path)?;

    let mut w = csv::Writer::from_path(out.join("history.csv")).map_err(csv_err)?;
    w.write_record(["epoch", "total", "gnn", "graph", "specified", "val_accuracy", "val_loss"])
        .map_err(csv_err)?;
    for r in &history {
        w.write_record([
            r.epoch.to_string(),
            r.total.to_string(),
            r.gnn.to_string(),
            r.graph.to_string(),
            r.specified.to_string(),
            r.val_accuracy.map(|v| v.to_string()).unwrap_or_default(),
            r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv write: {e}"))
}

fn write_metrics_json(
    path: &Path,
    report: &MetricsReport,
    mode: EvalMode,
    folds: usize,
) -> Result<(), Error> {
    let doc = serde_json::json!({
        "version": METRICS_SCHEMA_VERSION,
        "mode": match mode {
            EvalMode::Inductive => "inductive",
            EvalMode::Transductive => "transductive",
        },
        "folds": folds,
        "accuracy": report.accuracy,
        "auc": report.auc,
        "sensitivity": report.sensitivity,
        "specificity": report.specificity,
        "per_fold": report.folds,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn cmd_evaluate(dataset: &Path, out: &Path, folds: usize, opts: &ConfigOpts) -> Result<(), Error> {
    let cfg = build_config(opts)?;
    let ds = load_and_clean(dataset)?;
    let report = run_cv(&ds, &cfg, folds)?;

    std::fs::create_dir_all(out)?;
    write_metrics_json(&out.join("metrics.json"), &report, cfg.mode, folds)?;

    let mut w = csv::Writer::from_path(out.join("folds.csv")).map_err(csv_err)?;
    w.write_record(["fold", "accuracy", "auc", "sensitivity", "specificity"])
        .map_err(csv_err)?;
    for (i, f) in report.folds.iter().enumerate() {
        w.write_record([
            i.to_string(),
            f.accuracy.to_string(),
            f.auc.to_string(),
            f.sensitivity.map(|v| v.to_string()).unwrap_or_default(),
            f.specificity.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    println!(
        "accuracy {:.4} +/- {:.4}, auc {:.4} +/- {:.4}",
        report.accuracy.mean, report.accuracy.std, report.auc.mean, report.auc.std
    );
    Ok(())
}

/// Rebuilds the embeddings of every dataset row under a checkpoint's
/// parameters and stored preprocessing statistics.
fn embed_with_checkpoint(ckpt: &Checkpoint, ds: &MultiModalDataset) -> Result<Matrix, Error> {
    ckpt.ensure_matches(ds)?;
    let stats = ckpt
        .preprocess
        .as_ref()
        .ok_or_else(|| Error::Data("checkpoint lacks preprocessing statistics".into()))?;
    let all: Vec<usize> = (0..ds.num_patients()).collect();
    let mut features = ds.gather_features(&all);
    let missing: Vec<Vec<bool>> = ds.modalities.iter().map(|m| m.missing.clone()).collect();
    MultiModalDataset::apply_preprocessing(
        &mut features,
        &missing,
        &stats.impute,
        &stats.standardize,
    )?;
    ckpt.state.embed(&features)
}

fn cmd_analyze_graph(
    dataset: &Path,
    checkpoint: &Path,
    out: &Path,
    k: usize,
    sigma: Option<f64>,
) -> Result<(), Error> {
    let ds = load_and_clean(dataset)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let embeddings = embed_with_checkpoint(&ckpt, &ds)?;

    std::fs::create_dir_all(out)?;
    let learned = ckpt
        .state
        .agl
        .learned_graph(&embeddings, ds.patient_ids.clone())?;
    learned.write_edge_list(&out.join("learned_edges.csv"), ckpt.state.agl.theta)?;

    let sigma = sigma.unwrap_or_else(|| median_pairwise_distance(&embeddings));
    let knn = knn_rbf_graph(&embeddings, k, sigma, ds.patient_ids.clone())?;
    knn.write_edge_list(&out.join("knn_edges.csv"), ckpt.state.agl.theta)?;

    let report = GraphQualityReport {
        entries: vec![
            incorrect_link_proportion(&learned, &ds.labels, "learned")?,
            incorrect_link_proportion(&knn, &ds.labels, "knn-rbf")?,
        ],
    };
    let doc = serde_json::json!({
        "version": METRICS_SCHEMA_VERSION,
        "k": k,
        "sigma": sigma,
        "entries": report.entries,
    });
    std::fs::write(
        out.join("graph_quality.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;
    for e in &report.entries {
        println!(
            "{}: median incorrect-link {:?}, isolated {}",
            e.method, e.median, e.isolated
        );
    }
    Ok(())
}

fn cmd_contributions(dataset: &Path, checkpoint: &Path, out: &Path) -> Result<(), Error> {
    let ds = load_and_clean(dataset)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.ensure_matches(&ds)?;
    let marl = match &ckpt.state.frontend {
        FrontEndParams::Marl(m) => m,
        FrontEndParams::Concat => {
            return Err(Error::Data(
                "contribution scores need the attention front-end (checkpoint used concat)".into(),
            ))
        }
    };
    let stats = ckpt
        .preprocess
        .as_ref()
        .ok_or_else(|| Error::Data("checkpoint lacks preprocessing statistics".into()))?;
    let all: Vec<usize> = (0..ds.num_patients()).collect();
    let mut features = ds.gather_features(&all);
    let missing: Vec<Vec<bool>> = ds.modalities.iter().map(|m| m.missing.clone()).collect();
    MultiModalDataset::apply_preprocessing(
        &mut features,
        &missing,
        &stats.impute,
        &stats.standardize,
    )?;
    let embedding = marl.forward_embedding(&features)?;

    std::fs::create_dir_all(out)?;
    let modality_names: Vec<&str> = ds.modalities.iter().map(|m| m.name.as_str()).collect();

    let mut w = csv::Writer::from_path(out.join("contributions.csv")).map_err(csv_err)?;
    let mut header = vec!["patient_id".to_string(), "class".to_string()];
    header.extend(modality_names.iter().map(|n| format!("c_{n}")));
    w.write_record(&header).map_err(csv_err)?;

    let m = ds.num_modalities();
    let mut class_sums = vec![vec![0.0; m]; ds.num_classes()];
    let mut class_counts = vec![0usize; ds.num_classes()];
    for (i, att) in embedding.attention.iter().enumerate() {
        let scores = contribution_scores(att);
        let mut record = vec![
            ds.patient_ids[i].clone(),
            ds.class_names[ds.labels[i]].clone(),
        ];
        record.extend(scores.iter().map(f64::to_string));
        w.write_record(&record).map_err(csv_err)?;
        class_counts[ds.labels[i]] += 1;
        for (j, s) in scores.iter().enumerate() {
            class_sums[ds.labels[i]][j] += s;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("class_average_contributions.csv")).map_err(csv_err)?;
    let mut header = vec!["class".to_string()];
    header.extend(modality_names.iter().map(|n| format!("c_{n}")));
    w.write_record(&header).map_err(csv_err)?;
    for (c, name) in ds.class_names.iter().enumerate() {
        let mut record = vec![name.clone()];
        record.extend(
            class_sums[c]
                .iter()
                .map(|s| (s / class_counts[c].max(1) as f64).to_string()),
        );
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    println!("wrote contribution scores for {} patients", ds.num_patients());
    Ok(())
}

fn cmd_label_sweep(dataset: &Path, out: &Path, opts: &ConfigOpts) -> Result<(), Error> {
    let cfg = build_config(opts)?;
    let ds = load_and_clean(dataset)?;
    let rows = label_sweep(&ds, &cfg, &sweep_fractions())?;

    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv")).map_err(csv_err)?;
    w.write_record(["fraction", "accuracy", "auc", "sensitivity", "specificity"])
        .map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.fraction.to_string(),
            r.metrics.accuracy.to_string(),
            r.metrics.auc.to_string(),
            r.metrics
                .sensitivity
                .map(|v| v.to_string())
                .unwrap_or_default(),
            r.metrics
                .specificity
                .map(|v| v.to_string())
                .unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    println!("wrote {} sweep rows", rows.len());
    Ok(())
}
