//! Grouping subjects by their source embeddings: affinity, spectral
//! projection to `c` dimensions, then k-means.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::affinity::{learn_affinity, normalize_adjacency, AffinityError, AffinityMatrix, MkmlConfig};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Affinity(#[from] AffinityError),
}

type Result<T> = std::result::Result<T, ClusterError>;

const EIGEN_MAX_ITERS: usize = 10_000;
const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// `c × dim` centroids in the clustered space.
    pub centroids: Matrix,
    pub c: usize,
}

impl ClusterAssignment {
    /// Member positions of each cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.c];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Top-`c` eigenvectors of the normalized affinity as an `n × c` matrix.
///
/// Columns are unit norm and signed so their largest-magnitude entry is positive.
pub fn spectral_embed(a: &AffinityMatrix, c: usize) -> Result<Matrix> {
    let n = a.n();
    if c == 0 || c >= n {
        return Err(ClusterError::Precondition(format!(
            "projection dimension {c} must lie in [1, {n})"
        )));
    }
    let norm = normalize_adjacency(a);
    let dm = DMatrix::from_row_slice(n, n, norm.matrix().as_slice());
    let eig = SymmetricEigen::try_new(dm, f64::EPSILON, EIGEN_MAX_ITERS).ok_or_else(|| {
        ClusterError::Numeric(format!("eigensolver did not converge in {EIGEN_MAX_ITERS} iterations"))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));

    let mut out = Matrix::zeros(n, c);
    for (col, &k) in order.iter().take(c).enumerate() {
        let v = eig.eigenvectors.column(k);
        let norm = v.norm();
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out.set(i, col, sign * v[i] / norm);
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    (0..centroids.rows())
        .map(|k| (k, sq_dist(point, centroids.row(k))))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn kmeans_pp_init(points: &Matrix, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(c, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for k in 1..c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(k).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// An emptied cluster is re-seeded at the point farthest from its assigned
/// centroid, so every returned cluster is nonempty.
pub fn kmeans(points: &Matrix, c: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = points.rows();
    if c == 0 || n < c {
        return Err(ClusterError::Precondition(format!("cannot form {c} clusters from {n} points")));
    }
    if !points.is_finite() {
        return Err(ClusterError::Numeric("non-finite point coordinates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, c, &mut rng);
    let dim = points.cols();
    let mut labels = vec![usize::MAX; n];

    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let (k, _) = nearest(points.row(i), &centroids);
            if *label != k {
                *label = k;
                changed = true;
            }
        }
        repair_empty_clusters(points, &mut centroids, &mut labels, c);
        let mut sums = Matrix::zeros(c, dim);
        let mut counts = vec![0usize; c];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &x) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for k in 0..c {
            let inv = 1.0 / counts[k] as f64;
            for (dst, &s) in centroids.row_mut(k).iter_mut().zip(sums.row(k)) {
                *dst = s * inv;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(ClusterAssignment { labels, centroids, c })
}

fn repair_empty_clusters(points: &Matrix, centroids: &mut Matrix, labels: &mut [usize], c: usize) {
    loop {
        let mut counts = vec![0usize; c];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&k| k == 0) else {
            return;
        };
        // Farthest point from its own centroid, taken only from clusters that can spare one.
        let far = (0..points.rows())
            .filter(|&i| counts[labels[i]] > 1)
            .map(|i| (i, sq_dist(points.row(i), centroids.row(labels[i]))))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        let Some((i, _)) = far else { return };
        centroids.row_mut(empty).copy_from_slice(points.row(i));
        labels[i] = empty;
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let comb2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&x| comb2(x)).sum();
    let sum_a: f64 = table.iter().map(|row| comb2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| comb2(table.iter().map(|row| row[j]).sum())).sum();
    let total = comb2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Affinity → spectral projection → k-means on an `n × d` embedding matrix.
pub fn cluster_source_embeddings(
    embeddings: &Matrix,
    mkml: &MkmlConfig,
    c: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let n = embeddings.rows();
    if c == 0 || n <= c {
        return Err(ClusterError::Precondition(format!("need more than {c} subjects, got {n}")));
    }
    if !embeddings.is_finite() {
        return Err(ClusterError::Numeric("non-finite embedding".into()));
    }
    let learned = learn_affinity(embeddings, mkml)?;
    let coords = spectral_embed(&learned.affinity, c)?;
    kmeans(&coords, c, seed)
}
