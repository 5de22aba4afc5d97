//! Subject-population affinity learning and GCN adjacency normalization.
//!
//! Affinities come from a bank of adaptive-bandwidth Gaussian kernels whose
//! mixture weights are learned by alternating two steps: a row-normalized
//! similarity `S = rownorm(Σ_l w_l K_l)`, then entropy-regularized weights
//! `w_l ∝ exp(⟨K_l, S⟩ / ρ)`. The result is symmetrized and given a unit
//! diagonal.

use log::warn;
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AffinityError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid affinity: {0}")]
    Validation(String),
}

type Result<T> = std::result::Result<T, AffinityError>;

/// Non-fatal conditions reported alongside a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityWarning {
    /// A neighbourhood size was reduced to `n - 1`.
    KnnClamped { requested: usize, used: usize },
    /// All feature vectors coincide; the affinity is all ones.
    DegenerateFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MkmlConfig {
    pub num_kernels: usize,
    pub knn_values: Vec<usize>,
    pub sigma_multipliers: Vec<f64>,
    pub weight_iters: usize,
    /// Temperature of the kernel-weight update.
    pub rho: f64,
}

impl Default for MkmlConfig {
    fn default() -> Self {
        Self {
            num_kernels: 10,
            knn_values: vec![10, 15],
            sigma_multipliers: vec![1.0, 1.25, 1.5, 1.75, 2.0],
            weight_iters: 10,
            rho: 1.0,
        }
    }
}

impl MkmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_values.len() * self.sigma_multipliers.len() != self.num_kernels {
            return Err(AffinityError::Precondition(format!(
                "{} neighbourhood sizes × {} bandwidths != {} kernels",
                self.knn_values.len(),
                self.sigma_multipliers.len(),
                self.num_kernels
            )));
        }
        if self.knn_values.contains(&0) {
            return Err(AffinityError::Precondition("neighbourhood size 0".into()));
        }
        if self.sigma_multipliers.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(AffinityError::Precondition("bandwidth multipliers must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(AffinityError::Precondition(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Symmetric, nonnegative, finite `n × n` subject affinity.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix(Matrix);

impl AffinityMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(AffinityError::Validation(format!("{:?} is not square", m.shape())));
        }
        if !m.is_finite() {
            return Err(AffinityError::Validation("non-finite entry".into()));
        }
        if m.as_slice().iter().any(|&x| x < 0.0) {
            return Err(AffinityError::Validation("negative entry".into()));
        }
        if !m.is_symmetric(1e-12 * (1.0 + m.max_abs())) {
            return Err(AffinityError::Validation("not symmetric".into()));
        }
        Ok(Self(m))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the row sums of `A + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency(Matrix);

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Block-diagonal stacking of `copies` independent copies of this graph.
    pub fn block_diag(&self, copies: usize) -> NormalizedAdjacency {
        NormalizedAdjacency(self.0.block_diag(copies))
    }

    /// Identity propagation (no neighbour mixing).
    pub fn identity(n: usize) -> NormalizedAdjacency {
        NormalizedAdjacency(Matrix::identity(n))
    }
}

pub fn pairwise_distances(features: &Matrix) -> Matrix {
    let n = features.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let dist = features
                .row(i)
                .iter()
                .zip(features.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d.set(i, j, dist);
            d.set(j, i, dist);
        }
    }
    d
}

/// Kernels in (neighbourhood size, bandwidth) row-major order.
#[derive(Debug, Clone)]
pub struct KernelBank {
    pub kernels: Vec<Matrix>,
    pub warnings: Vec<AffinityWarning>,
}

pub fn gaussian_kernel_bank(features: &Matrix, cfg: &MkmlConfig) -> Result<KernelBank> {
    cfg.validate()?;
    let n = features.rows();
    if n < 2 {
        return Err(AffinityError::Precondition(format!("need at least 2 subjects, got {n}")));
    }
    if !features.is_finite() {
        return Err(AffinityError::Validation("non-finite feature".into()));
    }
    let dist = pairwise_distances(features);
    let sorted: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist.get(i, j)).collect();
            row.sort_by(f64::total_cmp);
            row
        })
        .collect();

    let mut warnings = Vec::new();
    let mut kernels = Vec::with_capacity(cfg.num_kernels);
    for &k in &cfg.knn_values {
        let used = k.min(n - 1);
        if used != k {
            warn!("neighbourhood size {k} clamped to {used} for {n} subjects");
            warnings.push(AffinityWarning::KnnClamped { requested: k, used });
        }
        let mu: Vec<f64> = sorted
            .iter()
            .map(|row| row[..used].iter().sum::<f64>() / used as f64)
            .collect();
        for &sigma in &cfg.sigma_multipliers {
            let mut kern = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let d = dist.get(i, j);
                    let eps = sigma * 0.5 * (mu[i] + mu[j]);
                    let v = if d == 0.0 {
                        1.0
                    } else if eps == 0.0 {
                        0.0
                    } else {
                        (-d * d / (2.0 * eps * eps)).exp()
                    };
                    kern.set(i, j, v);
                }
            }
            kernels.push(kern);
        }
    }
    Ok(KernelBank { kernels, warnings })
}

#[derive(Debug, Clone)]
pub struct LearnedAffinity {
    pub affinity: AffinityMatrix,
    /// Final kernel mixture weights.
    pub kernel_weights: Vec<f64>,
    /// Kernel weights after each update round.
    pub weight_history: Vec<Vec<f64>>,
    pub warnings: Vec<AffinityWarning>,
}

fn row_normalize(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
}

fn mixture(kernels: &[Matrix], weights: &[f64]) -> Matrix {
    let (n, _) = kernels[0].shape();
    let mut s = Matrix::zeros(n, n);
    for (k, &w) in kernels.iter().zip(weights) {
        for (dst, &x) in s.as_mut_slice().iter_mut().zip(k.as_slice()) {
            *dst += w * x;
        }
    }
    row_normalize(&mut s);
    s
}

/// Learns a subject affinity from an `n × f` feature matrix.
pub fn learn_affinity(features: &Matrix, cfg: &MkmlConfig) -> Result<LearnedAffinity> {
    let bank = gaussian_kernel_bank(features, cfg)?;
    let n = features.rows();
    let mut warnings = bank.warnings;
    let l = bank.kernels.len();
    let uniform = vec![1.0 / l as f64; l];

    let identical = (1..n).all(|i| features.row(i) == features.row(0));
    if identical {
        warn!("all {n} feature vectors are identical; affinity is all ones");
        warnings.push(AffinityWarning::DegenerateFeatures);
        return Ok(LearnedAffinity {
            affinity: AffinityMatrix(Matrix::filled(n, n, 1.0)),
            kernel_weights: uniform,
            weight_history: Vec::new(),
            warnings,
        });
    }

    let mut weights = uniform;
    let mut history = Vec::with_capacity(cfg.weight_iters);
    for _ in 0..cfg.weight_iters {
        let s = mixture(&bank.kernels, &weights);
        let logits: Vec<f64> = bank
            .kernels
            .iter()
            .map(|k| {
                k.as_slice()
                    .iter()
                    .zip(s.as_slice())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / cfg.rho
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        weights = exps.iter().map(|e| e / total).collect();
        history.push(weights.clone());
    }

    let s = mixture(&bank.kernels, &weights);
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, if i == j { 1.0 } else { 0.5 * (s.get(i, j) + s.get(j, i)) });
        }
    }
    Ok(LearnedAffinity {
        affinity: AffinityMatrix(a),
        kernel_weights: weights,
        weight_history: history,
        warnings,
    })
}

pub fn normalize_adjacency(a: &AffinityMatrix) -> NormalizedAdjacency {
    let n = a.n();
    let m = a.matrix();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| (m.row(i).iter().sum::<f64>() + 1.0).sqrt().recip())
        .collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let tilde = m.get(i, j) + if i == j { 1.0 } else { 0.0 };
            out.set(i, j, inv_sqrt[i] * tilde * inv_sqrt[j]);
        }
    }
    NormalizedAdjacency(out)
}

/// Validates a raw matrix and normalizes it.
pub fn normalize_matrix(m: &Matrix) -> Result<NormalizedAdjacency> {
    Ok(normalize_adjacency(&AffinityMatrix::new(m.clone())?))
}

/// Principal submatrix at distinct, in-range `indices`.
pub fn sub_affinity(a: &AffinityMatrix, indices: &[usize]) -> Result<AffinityMatrix> {
    let n = a.n();
    let mut seen = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(AffinityError::Precondition(format!("index {i} out of range for {n} subjects")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(AffinityError::Precondition(format!("duplicate index {i}")));
        }
    }
    Ok(AffinityMatrix(a.matrix().principal_submatrix(indices)))
}
