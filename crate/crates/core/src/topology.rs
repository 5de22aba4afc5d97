//! Node-level topology scores of weighted brain graphs.
//!
//! Path-based scores (closeness, betweenness) need edge lengths; how a
//! weight becomes a length is chosen by [`DistanceInterpretation`]. A zero
//! weight is always an absent edge.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Var};
use crate::data::ConnectivityMatrix;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("invalid graph: {0}")]
    Validation(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{0}: degenerate (all-zero) graph")]
    Degenerate(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, TopologyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DistanceInterpretation {
    /// Edge length equals the weight.
    #[default]
    WeightsAreDistances,
    /// Edge length is the reciprocal of the weight.
    InverseWeights,
}

impl FromStr for DistanceInterpretation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "distance" | "distances" | "weights_are_distances" => Ok(Self::WeightsAreDistances),
            "inverse" | "inverse_weights" => Ok(Self::InverseWeights),
            other => Err(format!("unknown weight interpretation {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CentralityMetric {
    Closeness,
    Betweenness,
    Eigenvector,
    PageRank,
    EffectiveSize,
    Clustering,
}

impl CentralityMetric {
    pub const ALL: [CentralityMetric; 6] = [
        Self::Closeness,
        Self::Betweenness,
        Self::Eigenvector,
        Self::PageRank,
        Self::EffectiveSize,
        Self::Clustering,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Self::Closeness => "cc",
            Self::Betweenness => "bc",
            Self::Eigenvector => "ec",
            Self::PageRank => "pc",
            Self::EffectiveSize => "eff",
            Self::Clustering => "clst",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Closeness => "CC",
            Self::Betweenness => "BC",
            Self::Eigenvector => "EC",
            Self::PageRank => "PC",
            Self::EffectiveSize => "EFF",
            Self::Clustering => "Clst",
        }
    }

    pub fn compute(self, c: &ConnectivityMatrix, interp: DistanceInterpretation) -> Result<CentralityVector> {
        match self {
            Self::Closeness => closeness(c, interp),
            Self::Betweenness => betweenness(c, interp),
            Self::Eigenvector => eigenvector(c),
            Self::PageRank => pagerank(c, 0.85),
            Self::EffectiveSize => effective_size(c),
            Self::Clustering => clustering_coefficient(c),
        }
    }
}

impl fmt::Display for CentralityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CentralityMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.short_name() == lower)
            .ok_or_else(|| format!("unknown centrality {s:?}"))
    }
}

/// One score per ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralityVector {
    pub metric: CentralityMetric,
    pub values: Vec<f64>,
}

fn check_weights(c: &ConnectivityMatrix) -> Result<()> {
    if c.weights().as_slice().iter().any(|x| x.is_nan()) {
        return Err(TopologyError::Validation("NaN weight".into()));
    }
    Ok(())
}

fn edge_length(w: f64, interp: DistanceInterpretation) -> Option<f64> {
    (w > 0.0).then(|| match interp {
        DistanceInterpretation::WeightsAreDistances => w,
        DistanceInterpretation::InverseWeights => 1.0 / w,
    })
}

#[inline]
fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Single-source Dijkstra on the dense graph. Returns the settle order,
/// distances, shortest-path counts and predecessor lists.
struct SourceSearch {
    order: Vec<usize>,
    dist: Vec<f64>,
    sigma: Vec<f64>,
    preds: Vec<Vec<usize>>,
}

fn dijkstra(c: &ConnectivityMatrix, interp: DistanceInterpretation, source: usize) -> SourceSearch {
    let r = c.r();
    let mut dist = vec![f64::INFINITY; r];
    let mut sigma = vec![0.0; r];
    let mut preds = vec![Vec::new(); r];
    let mut settled = vec![false; r];
    let mut order = Vec::with_capacity(r);
    dist[source] = 0.0;
    sigma[source] = 1.0;
    loop {
        let next = (0..r)
            .filter(|&v| !settled[v] && dist[v].is_finite())
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let Some(v) = next else { break };
        settled[v] = true;
        order.push(v);
        for w in 0..r {
            if settled[w] || w == v {
                continue;
            }
            let Some(len) = edge_length(c.get(v, w), interp) else {
                continue;
            };
            let alt = dist[v] + len;
            if dist[w].is_finite() && ties(alt, dist[w]) {
                sigma[w] += sigma[v];
                preds[w].push(v);
            } else if alt < dist[w] {
                dist[w] = alt;
                sigma[w] = sigma[v];
                preds[w] = vec![v];
            }
        }
    }
    SourceSearch {
        order,
        dist,
        sigma,
        preds,
    }
}

/// All-pairs shortest-path lengths; unreachable pairs are `+∞`.
pub fn shortest_paths(c: &ConnectivityMatrix, interp: DistanceInterpretation) -> Result<Matrix> {
    check_weights(c)?;
    let r = c.r();
    let mut out = Matrix::zeros(r, r);
    for s in 0..r {
        let search = dijkstra(c, interp, s);
        out.row_mut(s).copy_from_slice(&search.dist);
    }
    Ok(out)
}

/// `(r - 1) / Σ_b d(a, b)`; zero when some node is unreachable.
pub fn closeness(c: &ConnectivityMatrix, interp: DistanceInterpretation) -> Result<CentralityVector> {
    let r = c.r();
    if r < 2 {
        return Err(TopologyError::Precondition(format!("closeness needs r >= 2, got {r}")));
    }
    let d = shortest_paths(c, interp)?;
    let values = (0..r)
        .map(|a| {
            let total: f64 = d.row(a).iter().sum();
            if total.is_finite() && total > 0.0 {
                (r - 1) as f64 / total
            } else {
                0.0
            }
        })
        .collect();
    Ok(CentralityVector {
        metric: CentralityMetric::Closeness,
        values,
    })
}

/// Brandes' algorithm over weighted shortest paths, scaled by `2 / ((r-1)(r-2))`
/// over unordered endpoint pairs.
pub fn betweenness(c: &ConnectivityMatrix, interp: DistanceInterpretation) -> Result<CentralityVector> {
    check_weights(c)?;
    let r = c.r();
    if r < 3 {
        return Err(TopologyError::Precondition(format!("betweenness needs r >= 3, got {r}")));
    }
    let mut bc = vec![0.0; r];
    for s in 0..r {
        let search = dijkstra(c, interp, s);
        let mut delta = vec![0.0; r];
        for &w in search.order.iter().rev() {
            for &v in &search.preds[w] {
                delta[v] += search.sigma[v] / search.sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                bc[w] += delta[w];
            }
        }
    }
    // Each unordered pair is seen from both endpoints.
    let scale = 1.0 / ((r - 1) as f64 * (r - 2) as f64);
    Ok(CentralityVector {
        metric: CentralityMetric::Betweenness,
        values: bc.into_iter().map(|x| x * scale).collect(),
    })
}

const EIGEN_TOL: f64 = 1e-9;
const EIGEN_MAX_ITERS: usize = 1000;

/// Principal eigenvector of the weight matrix, unit L2 norm, nonnegative.
///
/// Iterates with `W + I`, which has the same eigenvectors as `W` but avoids
/// the oscillation plain power iteration shows on bipartite graphs.
pub fn eigenvector(c: &ConnectivityMatrix) -> Result<CentralityVector> {
    check_weights(c)?;
    let w = c.weights();
    if w.as_slice().iter().all(|&x| x == 0.0) {
        return Err(TopologyError::Degenerate("eigenvector"));
    }
    let r = c.r();
    let mut x = vec![1.0 / (r as f64).sqrt(); r];
    for _ in 0..EIGEN_MAX_ITERS {
        let mut y: Vec<f64> = (0..r)
            .map(|a| x[a] + w.row(a).iter().zip(&x).map(|(wv, xv)| wv * xv).sum::<f64>())
            .collect();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        y.iter_mut().for_each(|v| *v /= norm);
        let change = y.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        x = y;
        if change < EIGEN_TOL {
            break;
        }
    }
    Ok(CentralityVector {
        metric: CentralityMetric::Eigenvector,
        values: x,
    })
}

/// Weighted PageRank; rows without out-weight jump uniformly.
pub fn pagerank(c: &ConnectivityMatrix, damping: f64) -> Result<CentralityVector> {
    check_weights(c)?;
    if !(0.0..1.0).contains(&damping) {
        return Err(TopologyError::Precondition(format!("damping must lie in [0, 1), got {damping}")));
    }
    let r = c.r();
    let w = c.weights();
    let out_weight: Vec<f64> = (0..r).map(|a| w.row(a).iter().sum()).collect();
    let uniform = 1.0 / r as f64;
    let mut p = vec![uniform; r];
    for _ in 0..100_000 {
        let dangling: f64 = (0..r).filter(|&a| out_weight[a] <= 0.0).map(|a| p[a]).sum();
        let mut next = vec![(1.0 - damping) * uniform + damping * dangling * uniform; r];
        for a in 0..r {
            if out_weight[a] > 0.0 {
                let share = damping * p[a] / out_weight[a];
                for (b, nb) in next.iter_mut().enumerate() {
                    *nb += share * w.get(a, b);
                }
            }
        }
        let change: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        p = next;
        if change < 1e-10 {
            break;
        }
    }
    let total: f64 = p.iter().sum();
    Ok(CentralityVector {
        metric: CentralityMetric::PageRank,
        values: p.into_iter().map(|x| x / total).collect(),
    })
}

/// Burt's effective size of each ego network.
pub fn effective_size(c: &ConnectivityMatrix) -> Result<CentralityVector> {
    check_weights(c)?;
    let r = c.r();
    let w = c.weights();
    let row_max: Vec<f64> = (0..r).map(|j| w.row(j).iter().copied().fold(0.0, f64::max)).collect();
    let values = (0..r)
        .map(|i| {
            let nbrs: Vec<usize> = (0..r).filter(|&j| j != i && w.get(i, j) > 0.0).collect();
            let strength: f64 = nbrs.iter().map(|&j| w.get(i, j)).sum();
            nbrs.iter()
                .map(|&j| {
                    let redundancy: f64 = nbrs
                        .iter()
                        .filter(|&&q| q != j)
                        .map(|&q| {
                            let p_iq = w.get(i, q) / strength;
                            let m_jq = if row_max[j] > 0.0 { w.get(j, q) / row_max[j] } else { 0.0 };
                            p_iq * m_jq
                        })
                        .sum();
                    1.0 - redundancy
                })
                .sum()
        })
        .collect();
    Ok(CentralityVector {
        metric: CentralityMetric::EffectiveSize,
        values,
    })
}

/// Onnela's weighted clustering coefficient with weights scaled by the graph maximum.
pub fn clustering_coefficient(c: &ConnectivityMatrix) -> Result<CentralityVector> {
    check_weights(c)?;
    let r = c.r();
    let w = c.weights();
    let max = w.max_abs();
    let values = (0..r)
        .map(|i| {
            let nbrs: Vec<usize> = (0..r).filter(|&j| j != i && w.get(i, j) > 0.0).collect();
            let k = nbrs.len();
            if k < 2 || max == 0.0 {
                return 0.0;
            }
            let mut total = 0.0;
            for &j in &nbrs {
                for &q in &nbrs {
                    if j != q {
                        total += (w.get(i, j) * w.get(i, q) * w.get(j, q) / (max * max * max)).cbrt();
                    }
                }
            }
            total / (k * (k - 1)) as f64
        })
        .collect();
    Ok(CentralityVector {
        metric: CentralityMetric::Clustering,
        values,
    })
}

/// Stacks one metric over many graphs into an `n × r` matrix.
pub fn centrality_matrix(
    graphs: &[ConnectivityMatrix],
    metric: CentralityMetric,
    interp: DistanceInterpretation,
) -> Result<Matrix> {
    let Some(first) = graphs.first() else {
        return Ok(Matrix::zeros(0, 0));
    };
    let r = first.r();
    let mut out = Matrix::zeros(graphs.len(), r);
    for (i, g) in graphs.iter().enumerate() {
        if g.r() != r {
            return Err(TopologyError::Precondition(format!(
                "graph {i} has {} ROIs, expected {r}",
                g.r()
            )));
        }
        out.row_mut(i).copy_from_slice(&metric.compute(g, interp)?.values);
    }
    Ok(out)
}

pub const DIFFERENTIABLE_EIGEN_ITERS: usize = 50;

/// Fixed-length shifted power iteration recorded on the tape of `g`.
///
/// `g` is an `r × r` nonnegative weight tensor; the result is an `r × 1`
/// unit vector through which gradients flow back into `g`.
pub fn differentiable_eigenvector<'t>(g: Var<'t>, iters: usize) -> Result<Var<'t>> {
    let (r, c) = g.shape();
    if r != c || r == 0 {
        return Err(TopologyError::Precondition(format!("expected a square matrix, got {:?}", g.shape())));
    }
    if g.value().as_slice().iter().all(|&x| x == 0.0) {
        return Err(TopologyError::Degenerate("differentiable_eigenvector"));
    }
    let tape = g.tape();
    let shifted = g.add(tape.constant(Matrix::identity(r)))?;
    let mut x = tape.constant(Matrix::filled(r, 1, 1.0 / (r as f64).sqrt()));
    for _ in 0..iters {
        x = shifted.matmul(x)?.normalize()?;
    }
    Ok(x)
}

/// Devectorizes a `1 × f` feature row on the tape and clamps negative weights.
pub fn graph_from_feature_row<'t>(row: Var<'t>, r: usize, index: &Rc<[Option<usize>]>) -> Result<Var<'t>> {
    Ok(row.gather(r, r, Rc::clone(index))?.relu())
}
