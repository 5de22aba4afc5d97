//! Alternating adversarial training of the encoder, the cluster-specific
//! generators and the discriminator, and test-time multigraph prediction.

mod losses;
#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use losses::{
    adversarial_loss, critic_fooling_loss, discriminator_loss, domain_classification_loss, feature_mae, generator_loss,
    gradient_penalty, info_max_loss, probe_debias, topological_loss, Critic, DiscriminatorParts, GeneratorParts,
    ProbeSettings, TopologySettings, TopologyTarget, PROB_CLIP,
};

use crate::affinity::{
    learn_affinity, normalize_adjacency, sub_affinity, AffinityError, AffinityMatrix, MkmlConfig,
};
use crate::autodiff::{Adam, AdamConfig, AutodiffError, Gradients, Tape, Var};
use crate::clustering::{cluster_source_embeddings, ClusterAssignment, ClusterError};
use crate::data::{devectorize, ConnectivityMatrix, DataError, PopulationDataset};
use crate::matrix::Matrix;
use crate::models::{Layers, ModelBundle, ModelDims, ModelError};
use crate::topology::{centrality_matrix, CentralityMetric, DistanceInterpretation, TopologyError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("training diverged: {0}")]
    Numeric(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Affinity(#[from] AffinityError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_gdc: f64,
    pub lambda_gp: f64,
    pub lambda_top: f64,
    pub lambda_inf: f64,
    pub sigma_gp: f64,
}

impl Default for LossWeights {
    /// Defaults for a single target view; see [`LossWeights::for_targets`].
    fn default() -> Self {
        Self::for_targets(1)
    }
}

impl LossWeights {
    pub const FIELD_COUNT: usize = 5;

    /// Default weights with the penalty threshold set to the target count.
    pub fn for_targets(k: usize) -> Self {
        Self {
            lambda_gdc: 1.0,
            lambda_gp: 0.1,
            lambda_top: 0.1,
            lambda_inf: 1.0,
            sigma_gp: k as f64,
        }
    }

    pub fn to_array(&self) -> [f64; Self::FIELD_COUNT] {
        [self.lambda_gdc, self.lambda_gp, self.lambda_top, self.lambda_inf, self.sigma_gp]
    }

    pub fn from_array(a: [f64; Self::FIELD_COUNT]) -> Self {
        Self {
            lambda_gdc: a[0],
            lambda_gp: a[1],
            lambda_top: a[2],
            lambda_inf: a[3],
            sigma_gp: a[4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_gdc, self.lambda_gp, self.lambda_top, self.lambda_inf];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(TrainingError::Precondition(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if !(self.sigma_gp > 0.0 && self.sigma_gp.is_finite()) {
            return Err(TrainingError::Precondition(format!("sigma_gp must be positive, got {}", self.sigma_gp)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GpMode {
    /// Finite-difference probe estimate of the critic's input gradient.
    #[default]
    Probe,
    /// Exact input gradients; needs second-order autodiff, which the engine lacks.
    Exact,
}

impl FromStr for GpMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "probe" => Ok(Self::Probe),
            "exact" => Ok(Self::Exact),
            other => Err(format!("unknown gradient-penalty mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub n_critic: usize,
    pub centrality: CentralityMetric,
    pub clusters: usize,
    pub seed: u64,
    pub gp_mode: GpMode,
    pub probe: ProbeSettings,
    pub interp: DistanceInterpretation,
    pub eigen_iters: usize,
    pub mkml: MkmlConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 70,
            adam: AdamConfig::default(),
            n_critic: 5,
            centrality: CentralityMetric::Eigenvector,
            clusters: 2,
            seed: 0,
            gp_mode: GpMode::Probe,
            probe: ProbeSettings::default(),
            interp: DistanceInterpretation::default(),
            eigen_iters: crate::topology::DIFFERENTIABLE_EIGEN_ITERS,
            mkml: MkmlConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(TrainingError::Precondition(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if self.n_critic < 1 {
            return Err(TrainingError::Precondition("n_critic must be >= 1".into()));
        }
        if self.clusters < 1 {
            return Err(TrainingError::Precondition("need at least one cluster".into()));
        }
        if self.gp_mode == GpMode::Exact {
            return Err(TrainingError::Precondition(
                "exact gradient penalty needs second-order gradients; use the probe mode".into(),
            ));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(TrainingError::Precondition(format!("invalid Adam settings {a:?}")));
        }
        if self.probe.probes < 1 || !(self.probe.delta > 0.0) {
            return Err(TrainingError::Precondition(format!("invalid probe settings {:?}", self.probe)));
        }
        if self.eigen_iters < 1 {
            return Err(TrainingError::Precondition("eigen_iters must be >= 1".into()));
        }
        self.topology(0).validate()?;
        self.mkml.validate()?;
        Ok(())
    }

    fn topology(&self, rois: usize) -> TopologySettings {
        TopologySettings {
            mode: self.centrality,
            rois,
            interp: self.interp,
            eigen_iters: self.eigen_iters,
        }
    }
}

/// Loss values of one iteration, summed over clusters. Discriminator terms
/// come from the last critic step of the iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub l_d: f64,
    pub l_adv: f64,
    pub l_gp: f64,
    pub l_gdc: f64,
    pub l_g: f64,
    pub l_top: f64,
    pub l_inf: f64,
    /// Seconds since training started.
    pub elapsed: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    /// Cluster assigned to every training subject.
    pub clusters: Vec<usize>,
}

impl TrainingTrace {
    pub const CSV_HEADER: &'static str = "iteration,L_D,L_adv,L_gp,L_gdc,L_G,L_top,L_inf,elapsed_s";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.3}",
                r.iteration, r.l_d, r.l_adv, r.l_gp, r.l_gdc, r.l_g, r.l_top, r.l_inf, r.elapsed
            )
            .expect("write to string");
        }
        out
    }
}

/// Per-cluster data fixed for the whole run.
struct ClusterData {
    members: Vec<usize>,
    /// Affinity over members for every view position.
    affinities: Vec<AffinityMatrix>,
    /// Real node scores of members, one `members × r` matrix per target.
    centralities: Vec<Matrix>,
}

struct Batch<'t> {
    source: Matrix,
    source_norm: Var<'t>,
    targets: Vec<Matrix>,
    target_norms: Vec<Var<'t>>,
    target_scores: Vec<Matrix>,
}

fn sample_batch<'t>(
    tape: &'t Tape,
    cluster: &ClusterData,
    features: &[Matrix],
    source_pos: usize,
    targets: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<'t>> {
    let n = cluster.members.len();
    let size = batch_size.min(n);
    let mut local: Vec<usize> = index::sample(rng, n, size).into_vec();
    local.sort_unstable();
    let global: Vec<usize> = local.iter().map(|&i| cluster.members[i]).collect();
    let norm = |pos: usize| -> Result<Var<'t>> {
        let sub = sub_affinity(&cluster.affinities[pos], &local)?;
        Ok(tape.constant(normalize_adjacency(&sub).matrix().clone()))
    };
    Ok(Batch {
        source: features[source_pos].select_rows(&global),
        source_norm: norm(source_pos)?,
        targets: targets.iter().map(|&p| features[p].select_rows(&global)).collect(),
        target_norms: targets.iter().map(|&p| norm(p)).collect::<Result<_>>()?,
        target_scores: cluster.centralities.iter().map(|c| c.select_rows(&local)).collect(),
    })
}

fn check_finite(name: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(TrainingError::Numeric(format!("{name} became {x}")))
    }
}

fn collect_grads(grads: &Gradients, params: &[Var<'_>]) -> Vec<Matrix> {
    params
        .iter()
        .map(|p| grads.get(*p).expect("every parameter is a trainable leaf").clone())
        .collect()
}

/// Trains a fresh bundle on every subject of `dataset`.
pub fn train(
    dataset: &PopulationDataset,
    source_pos: usize,
    cfg: &TrainingConfig,
    weights: &LossWeights,
) -> Result<(ModelBundle, TrainingTrace)> {
    cfg.validate()?;
    weights.validate()?;
    let v = dataset.num_views();
    let r = dataset.rois();
    let s = dataset.num_subjects();
    if v < 2 {
        return Err(TrainingError::Precondition(format!("need at least 2 views, got {v}")));
    }
    if source_pos >= v {
        return Err(TrainingError::Precondition(format!("source view position {source_pos} out of range")));
    }
    if s < 2 * cfg.clusters {
        return Err(TrainingError::Precondition(format!(
            "{s} training subjects cannot fill {} clusters of at least 2",
            cfg.clusters
        )));
    }
    let topo = cfg.topology(r);
    topo.validate()?;

    let start = Instant::now();
    let mut bundle = ModelBundle::init(ModelDims::new(r, v, cfg.clusters), source_pos, *weights, cfg.seed)?;
    let targets = bundle.target_views();
    let k = targets.len();
    let features: Vec<Matrix> = (0..v).map(|p| dataset.feature_matrix(p)).collect();

    // Cluster the initial encoder's embeddings of the whole source population.
    let source_affinity = learn_affinity(&features[source_pos], &cfg.mkml)?.affinity;
    let source_norm = normalize_adjacency(&source_affinity);
    let embeddings = bundle.encoder.encode_matrix(&features[source_pos], source_norm.matrix())?;
    let assignment = cluster_source_embeddings(&embeddings, &cfg.mkml, cfg.clusters, cfg.seed)?;
    let clusters = prepare_clusters(dataset, &features, &assignment, &targets, cfg)?;
    info!(
        "clusters of sizes {:?}",
        clusters.iter().map(|c| c.members.len()).collect::<Vec<_>>()
    );

    let mut gen_adam = Adam::new(generator_side(&bundle).iter().map(|m| &**m), cfg.adam);
    let mut disc_adam = Adam::new(
        bundle.discriminator.layers().into_iter().map(|l| &l.weight),
        cfg.adam,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c_4e5f_0001);
    let mut trace = TrainingTrace {
        records: Vec::with_capacity(cfg.iterations),
        clusters: assignment.labels.clone(),
    };

    for iteration in 0..cfg.iterations {
        let mut disc_values = [0.0; 4];
        for _ in 0..cfg.n_critic {
            disc_values = critic_step(&mut bundle, &mut disc_adam, &clusters, &features, &targets, cfg, weights, &mut rng)?;
        }
        let gen_values = generator_step(&mut bundle, &mut gen_adam, &clusters, &features, &targets, cfg, &topo, &mut rng)?;
        let record = TraceRecord {
            iteration,
            l_d: disc_values[0],
            l_adv: disc_values[1],
            l_gp: disc_values[2],
            l_gdc: disc_values[3],
            l_g: gen_values[0],
            l_top: gen_values[1],
            l_inf: gen_values[2],
            elapsed: start.elapsed().as_secs_f64(),
        };
        if iteration % 50 == 0 || iteration + 1 == cfg.iterations {
            debug!("{record:?}");
        }
        trace.records.push(record);
    }
    debug_assert_eq!(k, bundle.generators[0].len());
    Ok((bundle, trace))
}

fn prepare_clusters(
    dataset: &PopulationDataset,
    features: &[Matrix],
    assignment: &ClusterAssignment,
    targets: &[usize],
    cfg: &TrainingConfig,
) -> Result<Vec<ClusterData>> {
    assignment
        .members()
        .into_iter()
        .enumerate()
        .map(|(j, members)| {
            if members.len() < 2 {
                return Err(TrainingError::Precondition(format!(
                    "cluster {j} has {} subject(s); retry with fewer clusters",
                    members.len()
                )));
            }
            let affinities = features
                .iter()
                .map(|f| Ok(learn_affinity(&f.select_rows(&members), &cfg.mkml)?.affinity))
                .collect::<Result<Vec<_>>>()?;
            let centralities = targets
                .iter()
                .map(|&p| {
                    let graphs: Vec<ConnectivityMatrix> =
                        members.iter().map(|&i| dataset.matrix(i, p).clone()).collect();
                    Ok(centrality_matrix(&graphs, cfg.centrality, cfg.interp)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ClusterData {
                members,
                affinities,
                centralities,
            })
        })
        .collect()
}

/// Encoder then generators in (cluster, target) order.
fn generator_side(bundle: &ModelBundle) -> Vec<&Matrix> {
    let mut out: Vec<&Matrix> = bundle.encoder.layers().into_iter().map(|l| &l.weight).collect();
    for row in &bundle.generators {
        for g in row {
            out.extend(g.layers().into_iter().map(|l| &l.weight));
        }
    }
    out
}

fn generator_side_mut(bundle: &mut ModelBundle) -> Vec<&mut Matrix> {
    let mut out = bundle.encoder.weights_mut();
    for row in &mut bundle.generators {
        for g in row {
            out.extend(g.weights_mut());
        }
    }
    out
}

/// One discriminator update; returns `[L_D, L_adv, L_gp, L_gdc]` summed over clusters.
#[allow(clippy::too_many_arguments)]
fn critic_step(
    bundle: &mut ModelBundle,
    adam: &mut Adam,
    clusters: &[ClusterData],
    features: &[Matrix],
    targets: &[usize],
    cfg: &TrainingConfig,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<[f64; 4]> {
    let tape = Tape::new();
    let disc = bundle.discriminator.bind(&tape, true);
    let encoder = bundle.encoder.bind(&tape, false);
    let mut parts = Vec::with_capacity(clusters.len());
    for (j, cluster) in clusters.iter().enumerate() {
        let batch = sample_batch(&tape, cluster, features, bundle.source_view, targets, cfg.batch_size, rng)?;
        let z = encoder.encode(tape.constant(batch.source.clone()), batch.source_norm)?;
        let fakes: Vec<Matrix> = bundle.generators[j]
            .iter()
            .zip(&batch.target_norms)
            .map(|(g, &norm)| Ok((*g.bind(&tape, false).generate(z, norm)?.value()).clone()))
            .collect::<Result<_>>()?;

        let (critic_real, _) = disc.discriminate(tape.constant(batch.source.clone()), batch.source_norm)?;
        let mut critic_fakes = Vec::with_capacity(fakes.len());
        let mut probs_fake = Vec::with_capacity(fakes.len());
        let mut probs_real = Vec::with_capacity(fakes.len());
        for (fake, real) in fakes.iter().zip(&batch.targets) {
            let (c, p) = disc.discriminate(tape.constant(fake.clone()), batch.source_norm)?;
            critic_fakes.push(c);
            probs_fake.push(p);
            let (_, p) = disc.discriminate(tape.constant(real.clone()), batch.source_norm)?;
            probs_real.push(p);
        }
        let adversarial = adversarial_loss(critic_real, &critic_fakes)?;
        let domain_classification = domain_classification_loss(&probs_fake, &probs_real)?;
        let penalty = gradient_penalty(
            &disc,
            &tape,
            &batch.source,
            &fakes,
            batch.source_norm,
            weights.sigma_gp,
            cfg.probe,
            rng,
        )?;
        parts.push(DiscriminatorParts {
            adversarial,
            gradient_penalty: penalty,
            domain_classification,
        });
    }
    let loss = discriminator_loss(&parts, weights)?;
    let values = [
        check_finite("L_D", loss.item())?,
        parts.iter().map(|p| p.adversarial.item()).sum(),
        parts.iter().map(|p| p.gradient_penalty.item()).sum(),
        parts.iter().map(|p| p.domain_classification.item()).sum(),
    ];
    let params = disc.params();
    let grads = tape.backward(loss)?;
    adam.step(bundle.discriminator.weights_mut(), &collect_grads(&grads, &params))?;
    Ok(values)
}

/// One update of the encoder and all generators; returns `[L_G, L_top, L_inf]`.
#[allow(clippy::too_many_arguments)]
fn generator_step(
    bundle: &mut ModelBundle,
    adam: &mut Adam,
    clusters: &[ClusterData],
    features: &[Matrix],
    targets: &[usize],
    cfg: &TrainingConfig,
    topo: &TopologySettings,
    rng: &mut ChaCha8Rng,
) -> Result<[f64; 3]> {
    let tape = Tape::new();
    let encoder = bundle.encoder.bind(&tape, true);
    let generators: Vec<Vec<_>> = bundle
        .generators
        .iter()
        .map(|row| row.iter().map(|g| g.bind(&tape, true)).collect())
        .collect();
    let disc = bundle.discriminator.bind(&tape, false);
    let mut params = encoder.params();
    for row in &generators {
        for g in row {
            params.extend(g.params());
        }
    }

    let mut parts = Vec::with_capacity(clusters.len());
    for (j, cluster) in clusters.iter().enumerate() {
        let batch = sample_batch(&tape, cluster, features, bundle.source_view, targets, cfg.batch_size, rng)?;
        let z = encoder.encode(tape.constant(batch.source.clone()), batch.source_norm)?;
        let mut fakes = Vec::with_capacity(targets.len());
        let mut critic_fakes = Vec::with_capacity(targets.len());
        let mut probs_fake = Vec::with_capacity(targets.len());
        for (g, &norm) in generators[j].iter().zip(&batch.target_norms) {
            let fake = g.generate(z, norm)?;
            let (c, p) = disc.discriminate(fake, batch.source_norm)?;
            fakes.push(fake);
            critic_fakes.push(c);
            probs_fake.push(p);
        }
        let real: Vec<TopologyTarget> = batch
            .targets
            .into_iter()
            .zip(batch.target_scores)
            .map(|(features, centralities)| TopologyTarget { features, centralities })
            .collect();
        parts.push(GeneratorParts {
            adversarial: critic_fooling_loss(&critic_fakes)?,
            topology: topological_loss(&real, &fakes, topo)?,
            info_max: info_max_loss(&probs_fake)?,
        });
    }
    let loss = generator_loss(&parts, &bundle.weights)?;
    let values = [
        check_finite("L_G", loss.item())?,
        parts.iter().map(|p| p.topology.item()).sum(),
        parts.iter().map(|p| p.info_max.item()).sum(),
    ];
    let grads = tape.backward(loss)?;
    adam.step(generator_side_mut(bundle), &collect_grads(&grads, &params))?;
    Ok(values)
}

/// Predicted target graphs of the test subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Dataset view positions of the predicted targets.
    pub target_views: Vec<usize>,
    /// `m × f` averaged generator output per target.
    pub features: Vec<Matrix>,
    /// `graphs[subject][target]`, clamped to nonnegative weights.
    pub graphs: Vec<Vec<ConnectivityMatrix>>,
}

impl Prediction {
    /// Packs the predicted graphs as a dataset over the given subjects, with
    /// view ids looked up from the positions in `target_views`.
    pub fn to_dataset(&self, subject_ids: Vec<String>, dataset_view_ids: &[usize]) -> Result<PopulationDataset> {
        let view_ids = self
            .target_views
            .iter()
            .map(|&p| {
                dataset_view_ids.get(p).copied().ok_or_else(|| {
                    TrainingError::Dimension(format!("target position {p} outside {} views", dataset_view_ids.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PopulationDataset::new(subject_ids, view_ids, self.graphs.clone())?)
    }
}

/// Predicts every target view from `m × f` source features.
pub fn predict_multigraph(bundle: &ModelBundle, source: &Matrix, mkml: &MkmlConfig) -> Result<Prediction> {
    let f = bundle.dims.features();
    let (m, cols) = source.shape();
    if cols != f {
        return Err(TrainingError::Dimension(format!(
            "model expects {f} features per subject, got {cols}"
        )));
    }
    if m == 0 {
        return Err(TrainingError::Precondition("no test subjects".into()));
    }
    let norm = normalize_adjacency(&learn_affinity(source, mkml)?.affinity);
    let tape = Tape::new();
    let norm_var = tape.constant(norm.matrix().clone());
    let z = bundle.encoder.bind(&tape, false).encode(tape.constant(source.clone()), norm_var)?;
    let c = bundle.generators.len();
    let k = bundle.dims.targets();
    let mut averaged = Vec::with_capacity(k);
    for t in 0..k {
        let mut sum = Matrix::zeros(m, f);
        for row in &bundle.generators {
            sum.add_assign(&row[t].bind(&tape, false).generate(z, norm_var)?.value());
        }
        let mean = sum.scaled(1.0 / c as f64);
        if !mean.is_finite() {
            return Err(TrainingError::Numeric("non-finite prediction".into()));
        }
        averaged.push(mean);
    }
    let graphs = (0..m)
        .map(|i| {
            averaged
                .iter()
                .map(|feats| Ok(devectorize(feats.row(i), bundle.dims.rois)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction {
        target_views: bundle.target_views(),
        features: averaged,
        graphs,
    })
}
