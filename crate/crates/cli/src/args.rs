use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tmgp::autodiff::AdamConfig;
use tmgp::evaluation::ReportFormat;
use tmgp::topology::{CentralityMetric, DistanceInterpretation};
use tmgp::training::{GpMode, LossWeights, ProbeSettings, TrainingConfig};

#[derive(Debug, Parser)]
#[command(name = "tmgp", version, about = "Predict multiple target brain graphs from a single source graph")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-view population in the dataset layout.
    Simulate(SimulateArgs),
    /// Train a model bundle on a dataset.
    Train(TrainCmd),
    /// Predict every target view for the subjects of a dataset.
    Predict(PredictArgs),
    /// Score predictions against ground truth, or cross-validate with --folds.
    Evaluate(EvaluateArgs),
    /// Print the six node scores of one graph.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 120)]
    pub subjects: usize,
    #[arg(long, default_value_t = 35)]
    pub rois: usize,
    #[arg(long, default_value_t = 6)]
    pub views: usize,
    #[arg(long, default_value_t = 2)]
    pub clusters: usize,
    /// Distance between consecutive cluster means, in latent standard deviations.
    #[arg(long, default_value_t = 5.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 4)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Optional holdout split shared by `train` and `predict`.
#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Train on the first `floor(frac · s)` shuffled subjects and predict the rest.
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Position of the source view among the dataset's views.
    #[arg(long, default_value_t = 0)]
    pub source_view: usize,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 70)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 5)]
    pub n_critic: usize,
    #[arg(long, default_value_t = 2)]
    pub clusters: usize,
    /// Node score matched by the topology loss: cc, bc or ec.
    #[arg(long, default_value = "ec")]
    pub centrality: CentralityMetric,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lambda_gdc: Option<f64>,
    #[arg(long)]
    pub lambda_gp: Option<f64>,
    #[arg(long)]
    pub lambda_top: Option<f64>,
    #[arg(long)]
    pub lambda_inf: Option<f64>,
    /// Gradient-penalty threshold; defaults to the number of target views.
    #[arg(long)]
    pub sigma_gp: Option<f64>,
    #[arg(long, default_value = "probe")]
    pub gp_mode: GpMode,
    #[arg(long, default_value_t = 4)]
    pub probes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub probe_delta: f64,
    /// How edge weights become path lengths: distance or inverse.
    #[arg(long, default_value = "distance")]
    pub interp: DistanceInterpretation,
    #[arg(long, default_value_t = 50)]
    pub eigen_iters: usize,
}

impl TrainArgs {
    pub fn config(&self) -> TrainingConfig {
        TrainingConfig {
            iterations: self.iters,
            batch_size: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                ..AdamConfig::default()
            },
            n_critic: self.n_critic,
            centrality: self.centrality,
            clusters: self.clusters,
            seed: self.seed,
            gp_mode: self.gp_mode,
            probe: ProbeSettings {
                probes: self.probes,
                delta: self.probe_delta,
            },
            interp: self.interp,
            eigen_iters: self.eigen_iters,
            ..TrainingConfig::default()
        }
    }

    pub fn weights(&self, targets: usize) -> LossWeights {
        let d = LossWeights::for_targets(targets);
        LossWeights {
            lambda_gdc: self.lambda_gdc.unwrap_or(d.lambda_gdc),
            lambda_gp: self.lambda_gp.unwrap_or(d.lambda_gp),
            lambda_top: self.lambda_top.unwrap_or(d.lambda_top),
            lambda_inf: self.lambda_inf.unwrap_or(d.lambda_inf),
            sigma_gp: self.sigma_gp.unwrap_or(d.sigma_gp),
        }
    }

    /// Fully resolved configuration for the run manifest.
    pub fn to_json(&self, weights: &LossWeights) -> serde_json::Value {
        let cfg = self.config();
        json!({
            "source_view": self.source_view,
            "iterations": cfg.iterations,
            "batch_size": cfg.batch_size,
            "adam": {
                "lr": cfg.adam.lr,
                "beta1": cfg.adam.beta1,
                "beta2": cfg.adam.beta2,
                "epsilon": cfg.adam.epsilon,
            },
            "n_critic": cfg.n_critic,
            "centrality": cfg.centrality.short_name(),
            "clusters": cfg.clusters,
            "seed": cfg.seed,
            "gp_mode": format!("{:?}", cfg.gp_mode).to_lowercase(),
            "probes": cfg.probe.probes,
            "probe_delta": cfg.probe.delta,
            "interp": interp_name(cfg.interp),
            "eigen_iters": cfg.eigen_iters,
            "weights": {
                "lambda_gdc": weights.lambda_gdc,
                "lambda_gp": weights.lambda_gp,
                "lambda_top": weights.lambda_top,
                "lambda_inf": weights.lambda_inf,
                "sigma_gp": weights.sigma_gp,
            },
            "mkml": {
                "num_kernels": cfg.mkml.num_kernels,
                "knn_values": cfg.mkml.knn_values,
                "sigma_multipliers": cfg.mkml.sigma_multipliers,
                "weight_iters": cfg.mkml.weight_iters,
                "rho": cfg.mkml.rho,
            },
        })
    }
}

pub fn interp_name(interp: DistanceInterpretation) -> &'static str {
    match interp {
        DistanceInterpretation::WeightsAreDistances => "distance",
        DistanceInterpretation::InverseWeights => "inverse",
    }
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// Dataset root (manifest.txt plus view_<k>/ directories).
    #[arg(long)]
    pub data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV; defaults to the model path with a `.trace.csv` extension.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory, written in the dataset layout.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted dataset directory.
    #[arg(long, conflicts_with = "folds")]
    pub pred: Option<PathBuf>,
    /// Ground-truth dataset directory.
    #[arg(long, conflicts_with = "folds")]
    pub truth: Option<PathBuf>,
    /// Second prediction of the same subjects; adds paired t-test p-values.
    #[arg(long, conflicts_with = "folds")]
    pub baseline: Option<PathBuf>,
    /// Cross-validate: split --data into this many folds, then train, predict and score each.
    #[arg(long, requires = "data")]
    pub folds: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Report path; cross-validation also writes `<stem>_fold<k>` reports beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "csv")]
    pub format: ReportFormat,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Connectivity matrix CSV.
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value = "distance")]
    pub interp: DistanceInterpretation,
    /// Also write the table to this CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
