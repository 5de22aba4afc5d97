//! Synthetic multi-view brain-graph populations with planted subject clusters.
//!
//! Every subject draws a latent vector from one of several Gaussian modes.
//! Each view owns a nonnegative `f × L` loading matrix; a subject's view
//! features are the loadings applied to its latent, plus Gaussian noise,
//! passed through `|·|` and scaled into roughly `[0, 1]`. Modes sit along
//! the all-ones latent direction at a fixed offset from the origin, so
//! latents stay positive and the noise-free map is linear.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::connectome::{devectorize, feature_count};
use super::dataset::PopulationDataset;
use super::DataError;
use crate::matrix::Matrix;

/// Offset of the first mode from the origin along the all-ones direction.
const MODE_OFFSET: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationParams {
    pub subjects: usize,
    pub rois: usize,
    pub views: usize,
    pub clusters: usize,
    /// Euclidean distance between consecutive mode means, in units of the
    /// within-mode latent standard deviation.
    pub separation: f64,
    /// Standard deviation of per-entry feature noise, in the same units.
    pub noise: f64,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            subjects: 120,
            rois: 35,
            views: 6,
            clusters: 2,
            separation: 5.0,
            noise: 1.0,
            latent_dim: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedPopulation {
    pub dataset: PopulationDataset,
    /// Planted mode of each subject.
    pub labels: Vec<usize>,
    /// `subjects × latent_dim` latent vectors.
    pub latents: Matrix,
}

pub fn simulate_population(params: &SimulationParams) -> Result<SimulatedPopulation, DataError> {
    let SimulationParams {
        subjects: s,
        rois: r,
        views: v,
        clusters,
        separation,
        noise,
        latent_dim: l,
        seed,
    } = *params;
    if s < 2 || r < 3 || v < 2 || clusters < 1 || l < 1 {
        return Err(DataError::Precondition(format!(
            "simulation needs subjects >= 2, rois >= 3, views >= 2, clusters >= 1, latent_dim >= 1; got {params:?}"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite() && noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::Precondition(format!(
            "separation and noise must be finite and nonnegative; got {separation}, {noise}"
        )));
    }
    let f = feature_count(r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let loadings: Vec<Matrix> = (0..v)
        .map(|_| {
            let data = (0..f * l).map(|_| rng.random::<f64>()).collect();
            Matrix::from_vec(f, l, data).expect("f × l")
        })
        .collect();

    let mut labels: Vec<usize> = (0..s).map(|i| i % clusters).collect();
    labels.shuffle(&mut rng);

    let step = separation / (l as f64).sqrt();
    let mut latents = Matrix::zeros(s, l);
    for (i, &c) in labels.iter().enumerate() {
        let centre = MODE_OFFSET + c as f64 * step;
        for x in latents.row_mut(i) {
            *x = centre + rng.sample::<f64, _>(StandardNormal);
        }
    }

    // Loadings average 1/2, so the largest mode maps to features near 1/2.
    let scale = l as f64 * (MODE_OFFSET + (clusters - 1) as f64 * step);

    let mut matrices: Vec<Vec<_>> = (0..s).map(|_| Vec::with_capacity(v)).collect();
    for load in &loadings {
        let mapped = latents.matmul_t(load);
        for (i, per_subject) in matrices.iter_mut().enumerate() {
            let feats: Vec<f64> = mapped
                .row(i)
                .iter()
                .map(|&x| {
                    let eps: f64 = rng.sample(StandardNormal);
                    (x + noise * eps).abs() / scale
                })
                .collect();
            per_subject.push(devectorize(&feats, r)?);
        }
    }

    let width = (s.max(2) - 1).to_string().len().max(4);
    let subject_ids = (0..s).map(|i| format!("sub_{i:0width$}")).collect();
    let dataset = PopulationDataset::new(subject_ids, (0..v).collect(), matrices)?;
    Ok(SimulatedPopulation {
        dataset,
        labels,
        latents,
    })
}
