use super::DataError;
use crate::matrix::Matrix;

/// Number of strictly-upper-triangular entries of an `r × r` matrix.
#[inline]
pub fn feature_count(r: usize) -> usize {
    r * r.saturating_sub(1) / 2
}

/// Inverse of [`feature_count`], if `f` is a triangular number.
pub fn roi_count_for_features(f: usize) -> Option<usize> {
    let r = ((1.0 + (1.0 + 8.0 * f as f64).sqrt()) / 2.0).round() as usize;
    (feature_count(r) == f).then_some(r)
}

/// Symmetric, nonnegative, zero-diagonal weighted brain graph over `r` ROIs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    weights: Matrix,
}

const SYMMETRY_TOL: f64 = 1e-9;

impl ConnectivityMatrix {
    /// Validates `weights` against the connectivity invariants.
    ///
    /// Entries that are symmetric up to a relative `1e-9` are averaged;
    /// anything larger is rejected, as are negative or non-finite weights and
    /// a nonzero diagonal.
    pub fn new(weights: Matrix) -> Result<Self, DataError> {
        let (r, c) = weights.shape();
        if r != c {
            return Err(DataError::Validation(format!("matrix is {r}x{c}, expected square")));
        }
        let mut w = weights;
        for a in 0..r {
            let d = w.get(a, a);
            if !d.is_finite() {
                return Err(DataError::Validation(format!("non-finite weight at ({a},{a})")));
            }
            if d != 0.0 {
                return Err(DataError::Validation(format!(
                    "nonzero diagonal entry {d} at ({a},{a})"
                )));
            }
            for b in a + 1..r {
                let (x, y) = (w.get(a, b), w.get(b, a));
                if !x.is_finite() || !y.is_finite() {
                    return Err(DataError::Validation(format!("non-finite weight at ({a},{b})")));
                }
                if x < 0.0 || y < 0.0 {
                    return Err(DataError::Validation(format!("negative weight at ({a},{b})")));
                }
                if (x - y).abs() > SYMMETRY_TOL * (1.0 + x.abs().max(y.abs())) {
                    return Err(DataError::Validation(format!(
                        "asymmetric weights at ({a},{b}): {x} vs {y}"
                    )));
                }
                let m = 0.5 * (x + y);
                w.set(a, b, m);
                w.set(b, a, m);
            }
        }
        Ok(Self { weights: w })
    }

    pub fn zeros(r: usize) -> Self {
        Self {
            weights: Matrix::zeros(r, r),
        }
    }

    pub fn r(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.weights.get(a, b)
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            weights: self.weights.principal_submatrix(perm),
        }
    }
}

/// Strictly-upper-triangular entries in row-major order (`a < b`, `a` then `b` ascending).
pub fn vectorize_upper(c: &ConnectivityMatrix) -> Vec<f64> {
    let r = c.r();
    let mut out = Vec::with_capacity(feature_count(r));
    for a in 0..r {
        out.extend_from_slice(&c.weights.row(a)[a + 1..]);
    }
    out
}

/// Rebuilds a connectivity matrix from its upper-triangular vector.
///
/// Negative entries are clamped to zero so that generator outputs always
/// yield valid graphs.
pub fn devectorize(vec: &[f64], r: usize) -> Result<ConnectivityMatrix, DataError> {
    let f = feature_count(r);
    if vec.len() != f {
        return Err(DataError::Dimension(format!(
            "feature vector has length {}, expected {f} for r = {r}",
            vec.len()
        )));
    }
    if let Some(k) = vec.iter().position(|x| !x.is_finite()) {
        return Err(DataError::Validation(format!("non-finite feature at index {k}")));
    }
    let mut w = Matrix::zeros(r, r);
    let mut k = 0;
    for a in 0..r {
        for b in a + 1..r {
            let x = vec[k].max(0.0);
            w.set(a, b, x);
            w.set(b, a, x);
            k += 1;
        }
    }
    Ok(ConnectivityMatrix { weights: w })
}

/// For each flat index of an `r × r` matrix, the feature index it reads from
/// (`None` on the diagonal). Used to devectorize on an autodiff tape.
pub fn devectorize_index(r: usize) -> Vec<Option<usize>> {
    let mut pos = vec![None; r * r];
    let mut k = 0;
    for a in 0..r {
        for b in a + 1..r {
            pos[a * r + b] = Some(k);
            pos[b * r + a] = Some(k);
            k += 1;
        }
    }
    pos
}
