//! Brute-force reference implementations used to cross-check the centrality code.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmgp::data::ConnectivityMatrix;
use tmgp::Matrix;

pub type Dense = Vec<Vec<f64>>;

pub fn dense(c: &ConnectivityMatrix) -> Dense {
    (0..c.r()).map(|a| (0..c.r()).map(|b| c.get(a, b)).collect()).collect()
}

pub fn connectivity(w: &Dense) -> ConnectivityMatrix {
    let r = w.len();
    let mut m = Matrix::zeros(r, r);
    for a in 0..r {
        for b in 0..r {
            m.set(a, b, w[a][b]);
        }
    }
    ConnectivityMatrix::new(m).unwrap()
}

/// Connected random graph: a shuffled spanning path plus random extra edges.
/// Odd seeds draw small integer weights so that tied shortest paths occur.
pub fn random_graph(seed: u64, max_r: usize) -> Dense {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(3..=max_r);
    let integer = seed % 2 == 1;
    let weight = |rng: &mut ChaCha8Rng| {
        if integer {
            rng.random_range(1..=3) as f64
        } else {
            rng.random_range(0.1..1.0)
        }
    };
    let mut w = vec![vec![0.0; r]; r];
    let mut order: Vec<usize> = (0..r).collect();
    for i in (1..r).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    for pair in order.windows(2) {
        let x = weight(&mut rng);
        w[pair[0]][pair[1]] = x;
        w[pair[1]][pair[0]] = x;
    }
    for a in 0..r {
        for b in a + 1..r {
            if w[a][b] == 0.0 && rng.random_bool(0.5) {
                let x = weight(&mut rng);
                w[a][b] = x;
                w[b][a] = x;
            }
        }
    }
    w
}

pub fn floyd_warshall(w: &Dense) -> Dense {
    let r = w.len();
    let mut d: Dense = (0..r)
        .map(|a| {
            (0..r)
                .map(|b| if a == b { 0.0 } else if w[a][b] > 0.0 { w[a][b] } else { f64::INFINITY })
                .collect()
        })
        .collect();
    for k in 0..r {
        for a in 0..r {
            for b in 0..r {
                if d[a][k] + d[k][b] < d[a][b] {
                    d[a][b] = d[a][k] + d[k][b];
                }
            }
        }
    }
    d
}

pub fn closeness(w: &Dense) -> Vec<f64> {
    let d = floyd_warshall(w);
    let r = w.len();
    d.iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s.is_finite() { (r - 1) as f64 / s } else { 0.0 }
        })
        .collect()
}

fn simple_paths(w: &Dense, at: usize, target: usize, path: &mut Vec<usize>, len: f64, out: &mut Vec<(Vec<usize>, f64)>) {
    if at == target {
        out.push((path.clone(), len));
        return;
    }
    for next in 0..w.len() {
        if w[at][next] > 0.0 && !path.contains(&next) {
            path.push(next);
            simple_paths(w, next, target, path, len + w[at][next], out);
            path.pop();
        }
    }
}

/// Enumerates every simple path between every pair and counts the shortest ones.
pub fn betweenness(w: &Dense) -> Vec<f64> {
    let r = w.len();
    let d = floyd_warshall(w);
    let mut bc = vec![0.0; r];
    for s in 0..r {
        for t in s + 1..r {
            if !d[s][t].is_finite() {
                continue;
            }
            let mut paths = Vec::new();
            simple_paths(w, s, t, &mut vec![s], 0.0, &mut paths);
            let shortest: Vec<_> = paths.iter().filter(|(_, l)| *l <= d[s][t] * (1.0 + 1e-12)).collect();
            for v in 0..r {
                if v == s || v == t {
                    continue;
                }
                let through = shortest.iter().filter(|(p, _)| p.contains(&v)).count();
                bc[v] += through as f64 / shortest.len() as f64;
            }
        }
    }
    let pairs = ((r - 1) * (r - 2)) as f64 / 2.0;
    bc.into_iter().map(|x| x / pairs).collect()
}

/// Principal eigenvector from a dense symmetric eigendecomposition.
pub fn eigenvector(w: &Dense) -> Vec<f64> {
    let r = w.len();
    let m = DMatrix::from_fn(r, r, |a, b| w[a][b]);
    let eig = m.symmetric_eigen();
    let top = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(top);
    let sign = if v.sum() < 0.0 { -1.0 } else { 1.0 };
    v.iter().map(|x| sign * x).collect()
}

/// Stationary distribution of the damped walk from one linear solve.
pub fn pagerank(w: &Dense, damping: f64) -> Vec<f64> {
    let r = w.len();
    let uniform = 1.0 / r as f64;
    // Transition P[a][b]; dangling rows jump uniformly.
    let p = DMatrix::from_fn(r, r, |a, b| {
        let out: f64 = w[a].iter().sum();
        if out > 0.0 { w[a][b] / out } else { uniform }
    });
    let system = DMatrix::identity(r, r) - p.transpose() * damping;
    let rhs = DVector::from_element(r, (1.0 - damping) * uniform);
    let x = system.lu().solve(&rhs).unwrap();
    let total = x.sum();
    x.iter().map(|v| v / total).collect()
}

/// Burt's effective size from the symmetric-tie definition.
pub fn effective_size(w: &Dense) -> Vec<f64> {
    let r = w.len();
    let tie = |a: usize, b: usize| w[a][b] + w[b][a];
    (0..r)
        .map(|i| {
            let total: f64 = (0..r).map(|k| tie(i, k)).sum();
            let mut eff = 0.0;
            for j in 0..r {
                if j == i || tie(i, j) == 0.0 {
                    continue;
                }
                let max_j = (0..r).map(|k| tie(j, k)).fold(0.0, f64::max);
                let mut redundancy = 0.0;
                for q in 0..r {
                    if q != i && q != j {
                        redundancy += tie(i, q) / total * tie(j, q) / max_j;
                    }
                }
                eff += 1.0 - redundancy;
            }
            eff
        })
        .collect()
}

/// Onnela's geometric-mean triangle intensity, summed over all ordered neighbor pairs.
pub fn clustering(w: &Dense) -> Vec<f64> {
    let r = w.len();
    let max = w.iter().flatten().copied().fold(0.0, f64::max);
    (0..r)
        .map(|i| {
            let deg = (0..r).filter(|&j| w[i][j] > 0.0).count();
            if deg < 2 {
                return 0.0;
            }
            let mut s = 0.0;
            for j in 0..r {
                for k in 0..r {
                    s += (w[i][j] / max * w[i][k] / max * w[j][k] / max).cbrt();
                }
            }
            s / (deg * (deg - 1)) as f64
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
