//! Discriminator and generator objectives, recorded on a tape.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{LossWeights, Result, TrainingError};
use crate::autodiff::{Tape, Var};
use crate::data::{devectorize, devectorize_index};
use crate::matrix::Matrix;
use crate::models::{BoundDiscriminator, ModelError};
use crate::special::ln_gamma;
use crate::topology::{
    differentiable_eigenvector, graph_from_feature_row, CentralityMetric, DistanceInterpretation,
    TopologyError,
};

/// Probabilities are clipped into `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-7;

/// `−mean D(real source) + (1/k) Σ_i mean D(fake_i)`.
pub fn adversarial_loss<'t>(critic_real: Var<'t>, critic_fakes: &[Var<'t>]) -> Result<Var<'t>> {
    let k = critic_fakes.len();
    if k == 0 {
        return Err(TrainingError::Precondition("adversarial loss needs at least one target".into()));
    }
    let mut fake = critic_fakes[0].mean()?;
    for c in &critic_fakes[1..] {
        fake = fake.add(c.mean()?)?;
    }
    Ok(fake.scale(1.0 / k as f64).sub(critic_real.mean()?)?)
}

/// `Σ_i [MSE(fake_i, 0) + MSE(real_i, 1)]`.
pub fn domain_classification_loss<'t>(probs_fake: &[Var<'t>], probs_real: &[Var<'t>]) -> Result<Var<'t>> {
    if probs_fake.len() != probs_real.len() || probs_fake.is_empty() {
        return Err(TrainingError::Dimension(format!(
            "{} fake vs {} real domains",
            probs_fake.len(),
            probs_real.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for (pf, pr) in probs_fake.iter().zip(probs_real) {
        if pf.shape() != pr.shape() {
            return Err(TrainingError::Dimension(format!(
                "fake probabilities {:?} vs real {:?}",
                pf.shape(),
                pr.shape()
            )));
        }
        let fake_term = pf.mul(*pf)?.mean()?;
        let miss = pr.add_scalar(-1.0);
        let real_term = miss.mul(miss)?.mean()?;
        let term = fake_term.add(real_term)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty"))
}

/// `Σ_i mean(−ln p_i)` with clipped probabilities.
pub fn info_max_loss<'t>(probs_fake: &[Var<'t>]) -> Result<Var<'t>> {
    let Some((first, rest)) = probs_fake.split_first() else {
        return Err(TrainingError::Precondition("information loss needs at least one domain".into()));
    };
    let term = |p: &Var<'t>| -> Result<Var<'t>> {
        Ok(p.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln().mean()?.scale(-1.0))
    };
    let mut total = term(first)?;
    for p in rest {
        total = total.add(term(p)?)?;
    }
    Ok(total)
}

/// Components of one cluster's discriminator objective.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorParts<'t> {
    pub adversarial: Var<'t>,
    pub gradient_penalty: Var<'t>,
    pub domain_classification: Var<'t>,
}

/// `Σ_j (L_adv + λ_gp L_gp + λ_gdc L_gdc)`.
pub fn discriminator_loss<'t>(parts: &[DiscriminatorParts<'t>], w: &LossWeights) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for p in parts {
        let term = p
            .adversarial
            .add(p.gradient_penalty.scale(w.lambda_gp))?
            .add(p.domain_classification.scale(w.lambda_gdc))?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| TrainingError::Precondition("no cluster terms".into()))
}

/// Components of one cluster's generator objective.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorParts<'t> {
    /// `−(1/k) Σ_i mean D(fake_i)`.
    pub adversarial: Var<'t>,
    pub topology: Var<'t>,
    pub info_max: Var<'t>,
}

/// `Σ_j (−(1/k) Σ_i mean D(fake_i) + λ_top L_top + λ_inf L_inf)`.
pub fn generator_loss<'t>(parts: &[GeneratorParts<'t>], w: &LossWeights) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for p in parts {
        let term = p
            .adversarial
            .add(p.topology.scale(w.lambda_top))?
            .add(p.info_max.scale(w.lambda_inf))?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| TrainingError::Precondition("no cluster terms".into()))
}

/// `−(1/k) Σ_i mean D(fake_i)`.
pub fn critic_fooling_loss<'t>(critic_fakes: &[Var<'t>]) -> Result<Var<'t>> {
    let k = critic_fakes.len();
    if k == 0 {
        return Err(TrainingError::Precondition("critic-fooling loss needs at least one target".into()));
    }
    let mut total = critic_fakes[0].mean()?;
    for c in &critic_fakes[1..] {
        total = total.add(c.mean()?)?;
    }
    Ok(total.scale(-1.0 / k as f64))
}

/// `mean |F − F̂|` with the gradient flowing into `pred`.
pub fn feature_mae<'t>(real: &Matrix, pred: Var<'t>) -> Result<Var<'t>> {
    Ok(pred.sub(pred.tape().constant(real.clone()))?.abs().mean()?)
}

/// Which node score the local topology term compares.
#[derive(Debug, Clone)]
pub struct TopologySettings {
    pub mode: CentralityMetric,
    pub rois: usize,
    pub interp: DistanceInterpretation,
    pub eigen_iters: usize,
}

impl TopologySettings {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CentralityMetric::Closeness | CentralityMetric::Betweenness | CentralityMetric::Eigenvector => Ok(()),
            other => Err(TrainingError::Precondition(format!(
                "topology loss supports cc, bc and ec, not {}",
                other.short_name()
            ))),
        }
    }
}

/// Ground truth of one target domain within a batch.
#[derive(Debug, Clone)]
pub struct TopologyTarget {
    /// `b × f` real target features.
    pub features: Matrix,
    /// `b × r` real node scores under the configured metric.
    pub centralities: Matrix,
}

/// `Σ_i [MAE(X_i, X̂_i) + MAE(F_i, F̂_i)]` over target domains.
///
/// The feature term is always differentiable. The node-score term is
/// differentiable in eigenvector mode; shortest-path modes contribute their
/// value with no gradient.
pub fn topological_loss<'t>(
    real: &[TopologyTarget],
    pred: &[Var<'t>],
    settings: &TopologySettings,
) -> Result<Var<'t>> {
    settings.validate()?;
    if real.len() != pred.len() || real.is_empty() {
        return Err(TrainingError::Dimension(format!(
            "{} real vs {} predicted domains",
            real.len(),
            pred.len()
        )));
    }
    let tape = pred[0].tape();
    let r = settings.rois;
    let index: Rc<[Option<usize>]> = devectorize_index(r).into();
    let mut total: Option<Var<'t>> = None;
    for (target, &fake) in real.iter().zip(pred) {
        if target.features.shape() != fake.shape() || target.centralities.shape() != (fake.rows(), r) {
            return Err(TrainingError::Dimension(format!(
                "real features {:?} / scores {:?} vs prediction {:?}",
                target.features.shape(),
                target.centralities.shape(),
                fake.shape()
            )));
        }
        let global = feature_mae(&target.features, fake)?;
        let local = local_topology_term(tape, target, fake, settings, &index)?;
        let term = global.add(local)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty"))
}

fn local_topology_term<'t>(
    tape: &'t Tape,
    target: &TopologyTarget,
    fake: Var<'t>,
    settings: &TopologySettings,
    index: &Rc<[Option<usize>]>,
) -> Result<Var<'t>> {
    let (b, _) = fake.shape();
    let r = settings.rois;
    let denom = (b * r) as f64;
    if settings.mode == CentralityMetric::Eigenvector {
        let mut sum: Option<Var<'t>> = None;
        for a in 0..b {
            let g = graph_from_feature_row(fake.slice_rows(a, 1)?, r, index)?;
            let ec = match differentiable_eigenvector(g, settings.eigen_iters) {
                Ok(v) => v,
                // An all-zero clamped prediction carries no gradient anyway.
                Err(TopologyError::Degenerate(_)) => tape.constant(Matrix::filled(r, 1, 1.0 / (r as f64).sqrt())),
                Err(e) => return Err(e.into()),
            };
            let real = tape.constant(Matrix::column(target.centralities.row(a)));
            let diff = ec.sub(real)?.abs().sum()?;
            sum = Some(match sum {
                Some(s) => s.add(diff)?,
                None => diff,
            });
        }
        return Ok(sum.expect("b >= 1").scale(1.0 / denom));
    }
    let values = fake.value();
    let mut total = 0.0;
    for a in 0..b {
        let graph = devectorize(values.row(a), r)?;
        let scores = settings.mode.compute(&graph, settings.interp)?;
        total += scores
            .values
            .iter()
            .zip(target.centralities.row(a))
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>();
    }
    Ok(tape.scalar(total / denom))
}

/// Scalar critic evaluated per batch block; lets tests substitute simple critics.
pub trait Critic<'t> {
    fn critic(&self, features: Var<'t>, norm_a: Var<'t>) -> std::result::Result<Var<'t>, ModelError>;
}

impl<'t> Critic<'t> for BoundDiscriminator<'t> {
    fn critic(&self, features: Var<'t>, norm_a: Var<'t>) -> std::result::Result<Var<'t>, ModelError> {
        self.critic_scores(features, norm_a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSettings {
    pub probes: usize,
    pub delta: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { probes: 4, delta: 1e-3 }
    }
}

/// `E[√(Σ_{p≤q} (g·u_p)²)] = ‖g‖ · E[√B]` for an orthonormal frame of `q`
/// uniformly random directions in `ℝ^f`, where `B ~ Beta(q/2, (f−q)/2)`.
/// Returns the factor that turns the `f/q`-scaled estimate into an unbiased
/// one.
pub fn probe_debias(f: usize, q: usize) -> f64 {
    if q >= f {
        return 1.0;
    }
    let (f, q) = (f as f64, q as f64);
    let mean_sqrt_beta =
        (ln_gamma((q + 1.0) / 2.0) + ln_gamma(f / 2.0) - ln_gamma(q / 2.0) - ln_gamma((f + 1.0) / 2.0)).exp();
    (f / q).sqrt() * mean_sqrt_beta
}

/// `q` orthonormal random directions for each of `rows` rows, as `q` matrices
/// of shape `rows × f`.
fn probe_directions(rows: usize, f: usize, q: usize, rng: &mut impl Rng) -> Vec<Matrix> {
    let mut out = vec![Matrix::zeros(rows, f); q];
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(q);
    for row in 0..rows {
        frame.clear();
        while frame.len() < q {
            let mut u: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
            for prev in &frame {
                let dot: f64 = u.iter().zip(prev).map(|(a, b)| a * b).sum();
                u.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            u.iter_mut().for_each(|x| *x /= norm);
            frame.push(u.clone());
        }
        for (p, u) in frame.iter().enumerate() {
            out[p].row_mut(row).copy_from_slice(u);
        }
    }
    out
}

/// Hinged gradient penalty `(max{0, E‖∇D(F̃)‖ − σ})²` on interpolates
/// `F̃ = αF_S + (1−α)F̂` with per-row `α ~ U[0, 1]`.
///
/// `source` and each entry of `fakes` are `b × f` blocks sharing `norm_a`.
/// Input-gradient norms are estimated per row from central differences of
/// the critic along random orthonormal directions, so the penalty stays
/// differentiable in the critic's parameters without second-order autodiff.
pub fn gradient_penalty<'t, C: Critic<'t>>(
    critic: &C,
    tape: &'t Tape,
    source: &Matrix,
    fakes: &[Matrix],
    norm_a: Var<'t>,
    sigma: f64,
    probe: ProbeSettings,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(TrainingError::Precondition(format!("gradient-penalty sigma must be positive, got {sigma}")));
    }
    if fakes.is_empty() {
        return Err(TrainingError::Precondition("gradient penalty needs at least one fake block".into()));
    }
    if probe.probes == 0 || !(probe.delta > 0.0) {
        return Err(TrainingError::Precondition(format!("invalid probe settings {probe:?}")));
    }
    let (b, f) = source.shape();
    let q = probe.probes.min(f);
    let scale = f as f64 / q as f64;
    let debias = probe_debias(f, q);
    let mut norms_sum: Option<Var<'t>> = None;
    for fake in fakes {
        if fake.shape() != (b, f) {
            return Err(TrainingError::Dimension(format!(
                "fake block {:?} vs source {:?}",
                fake.shape(),
                source.shape()
            )));
        }
        let mut interp = Matrix::zeros(b, f);
        for row in 0..b {
            let alpha: f64 = rng.random();
            for ((dst, &s), &g) in interp.row_mut(row).iter_mut().zip(source.row(row)).zip(fake.row(row)) {
                *dst = alpha * s + (1.0 - alpha) * g;
            }
        }
        let mut squares: Option<Var<'t>> = None;
        for dir in probe_directions(b, f, q, rng) {
            let step = dir.scaled(probe.delta);
            let plus = interp.zip_map(&step, |x, d| x + d);
            let minus = interp.zip_map(&step, |x, d| x - d);
            let up = critic.critic(tape.constant(plus), norm_a)?;
            let down = critic.critic(tape.constant(minus), norm_a)?;
            let slope = up.sub(down)?.scale(0.5 / probe.delta);
            let sq = slope.mul(slope)?;
            squares = Some(match squares {
                Some(s) => s.add(sq)?,
                None => sq,
            });
        }
        let norms = squares
            .expect("q >= 1")
            .scale(scale)
            .add_scalar(1e-12)
            .sqrt()
            .scale(1.0 / debias)
            .sum()?;
        norms_sum = Some(match norms_sum {
            Some(s) => s.add(norms)?,
            None => norms,
        });
    }
    let mean = norms_sum.expect("nonempty").scale(1.0 / (b * fakes.len()) as f64);
    let excess = mean.add_scalar(-sigma).relu();
    Ok(excess.mul(excess)?)
}
