use ndarray::{Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pca::{pca_fit, pca_for_variance, pca_transform};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub total_iters: usize,
    /// Defaults to `n / exaggeration`.
    pub learning_rate: Option<f64>,
    /// Variance share kept by the PCA reduction the affinities are built on.
    pub pca_variance: f64,
    /// Only used to fill a second initial axis for one-dimensional inputs.
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            total_iters: 1000,
            learning_rate: None,
            pca_variance: 0.99,
            seed: 0,
        }
    }
}

pub const MAX_TSNE_POINTS: usize = 10_000;
const ENTROPY_TOL: f64 = 1e-5;
const MAX_SEARCH: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TsneResult {
    /// n x 2 layout.
    pub layout: Array2<f64>,
    /// KL(P || Q) after every iteration, against the unexaggerated P.
    pub kl_trace: Vec<f64>,
    /// Achieved Shannon entropy (nats) of each conditional distribution.
    pub entropies: Vec<f64>,
    pub pca_dims: usize,
}

fn squared_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    d.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for j in 0..n {
                row[j] = x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        });
    d
}

/// Row `i` of the conditional affinities for precision `beta`, returning
/// the row and its entropy in nats.
fn conditional_row(dist: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let d_min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            if j == i {
                0.0
            } else {
                (-beta * (d - d_min)).exp()
            }
        })
        .collect();
    let sum: f64 = p.iter().sum();
    let mut weighted = 0.0;
    for (j, v) in p.iter_mut().enumerate() {
        *v /= sum;
        if j != i {
            weighted += *v * (dist[j] - d_min);
        }
    }
    (p, sum.ln() + beta * weighted)
}

/// Conditional affinities `p_{j|i}` with each row's precision found by
/// bisection so its entropy equals `ln(perplexity)`.
pub fn conditional_affinities(dist: &Array2<f64>, perplexity: f64) -> (Array2<f64>, Vec<f64>) {
    let n = dist.nrows();
    let target = perplexity.ln();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = dist.row(i).to_vec();
            let mean = d.iter().sum::<f64>() / (n - 1).max(1) as f64;
            let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
            let (mut lo, mut hi) = (0.0, f64::INFINITY);
            let mut best = conditional_row(&d, i, beta);
            for _ in 0..MAX_SEARCH {
                let diff = best.1 - target;
                if diff.abs() <= ENTROPY_TOL {
                    break;
                }
                if diff > 0.0 {
                    lo = beta;
                    beta = if hi.is_finite() {
                        (beta + hi) / 2.0
                    } else {
                        beta * 2.0
                    };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                best = conditional_row(&d, i, beta);
            }
            best
        })
        .collect();
    let mut p = Array2::zeros((n, n));
    let mut entropies = Vec::with_capacity(n);
    for (i, (row, h)) in rows.into_iter().enumerate() {
        p.row_mut(i).assign(&ndarray::Array1::from(row));
        entropies.push(h);
    }
    (p, entropies)
}

/// `(P + Pᵀ) / 2n`, which sums to one.
pub fn joint_affinities(conditional: &Array2<f64>) -> Array2<f64> {
    let n = conditional.nrows() as f64;
    (conditional + &conditional.t()) / (2.0 * n)
}

fn kl_divergence(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = y.nrows();
    let (num, z) = student_kernel(y);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[[i, j]];
            if i != j && pij > 0.0 {
                let q = (num[[i, j]] / z).max(1e-300);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

/// Unnormalized kernel `1 / (1 + |y_i - y_j|²)` with zero diagonal, and its sum.
fn student_kernel(y: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = y.nrows();
    let mut num = Array2::zeros((n, n));
    num.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for j in 0..n {
                if i != j {
                    let dx = y[[i, 0]] - y[[j, 0]];
                    let dy = y[[i, 1]] - y[[j, 1]];
                    row[j] = 1.0 / (1.0 + dx * dx + dy * dy);
                }
            }
        });
    let z = num.sum();
    (num, z)
}

fn gradient(p: &Array2<f64>, y: &Array2<f64>, exaggeration: f64) -> Array2<f64> {
    let n = y.nrows();
    let (num, z) = student_kernel(y);
    let mut grad = Array2::zeros((n, 2));
    grad.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut g)| {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i != j {
                    let w = (exaggeration * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
                    gx += w * (y[[i, 0]] - y[[j, 0]]);
                    gy += w * (y[[i, 1]] - y[[j, 1]]);
                }
            }
            g[0] = 4.0 * gx;
            g[1] = 4.0 * gy;
        });
    grad
}

/// Exact t-SNE. Affinities are built on a PCA reduction keeping
/// `pca_variance` of the variance; the layout starts from the first two
/// PCA scores scaled to a standard deviation of 1e-4.
pub fn tsne(features: ArrayView2<f64>, config: &TsneConfig) -> Result<TsneResult> {
    let n = features.nrows();
    if n > MAX_TSNE_POINTS {
        return Err(Error::Parameter(format!(
            "exact t-SNE limited to {MAX_TSNE_POINTS} points, got {n}"
        )));
    }
    if !(config.perplexity > 1.0) || (n as f64) < 3.0 * config.perplexity + 1.0 {
        return Err(Error::Parameter(format!(
            "perplexity {} infeasible for {n} points",
            config.perplexity
        )));
    }
    if !(config.exaggeration >= 1.0) || config.exaggeration_iters > config.total_iters {
        return Err(Error::Parameter("invalid exaggeration schedule".into()));
    }
    let reduced_model = pca_for_variance(features, config.pca_variance)?;
    let reduced = pca_transform(&reduced_model, features)?;
    let dist = squared_distances(reduced.view());
    let (cond, entropies) = conditional_affinities(&dist, config.perplexity);
    let p = joint_affinities(&cond);

    let init_model = pca_fit(features, 2.min(features.ncols()).min(n - 1))?;
    let scores = pca_transform(&init_model, features)?;
    let mut y = Array2::zeros((n, 2));
    y.column_mut(0).assign(&scores.column(0));
    if scores.ncols() > 1 {
        y.column_mut(1).assign(&scores.column(1));
    } else {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut r = rng::seeded(config.seed);
        y.column_mut(1).mapv_inplace(|_| normal.sample(&mut r));
    }
    let sd = y.column(0).std(0.0);
    let scale = if sd > 0.0 { 1e-4 / sd } else { 1e-4 };
    y.mapv_inplace(|v| v * scale);

    let lr = config
        .learning_rate
        .unwrap_or(n as f64 / config.exaggeration);
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut kl_trace = Vec::with_capacity(config.total_iters);
    for it in 0..config.total_iters {
        let (alpha, momentum) = if it < config.exaggeration_iters {
            (config.exaggeration, 0.5)
        } else {
            (1.0, 0.8)
        };
        let g = gradient(&p, &y, alpha);
        for ((gain, &gv), &vel) in gains.iter_mut().zip(g.iter()).zip(velocity.iter()) {
            *gain = if (gv > 0.0) != (vel > 0.0) {
                *gain + 0.2
            } else {
                (*gain * 0.8).max(0.01)
            };
        }
        velocity = &velocity * momentum - &(&gains * &g * lr);
        y += &velocity;
        let mean = y.mean_axis(Axis(0)).unwrap();
        y -= &mean;
        kl_trace.push(kl_divergence(&p, &y));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimization {
            message: "t-SNE layout diverged".into(),
            trace: kl_trace[kl_trace.len().saturating_sub(10)..].to_vec(),
        });
    }
    Ok(TsneResult {
        layout: y,
        kl_trace,
        entropies,
        pca_dims: reduced_model.n_components(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut r = rng::seeded(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = Array2::from_shape_fn((n, 5), |(i, j)| {
            normal.sample(&mut r) + if j == labels[i] { 8.0 } else { 0.0 }
        });
        (x, labels)
    }

    #[test]
    fn affinities_normalized_and_symmetric() {
        let (x, _) = clusters(120, 1);
        let d = squared_distances(x.view());
        let (cond, h) = conditional_affinities(&d, 20.0);
        for row in cond.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        for hi in h {
            assert!((hi - 20f64.ln()).abs() <= ENTROPY_TOL);
        }
        let p = joint_affinities(&cond);
        assert!((p.sum() - 1.0).abs() < 1e-9);
        assert!((&p - &p.t()).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn infeasible_perplexity() {
        let (x, _) = clusters(30, 2);
        assert!(matches!(
            tsne(x.view(), &TsneConfig::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn clusters_preserved() {
        let (x, labels) = clusters(150, 3);
        let cfg = TsneConfig {
            perplexity: 15.0,
            total_iters: 400,
            ..Default::default()
        };
        let r = tsne(x.view(), &cfg).unwrap();
        let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0, 0.0, 0);
        for i in 0..150 {
            for j in i + 1..150 {
                let d = (&r.layout.row(i) - &r.layout.row(j))
                    .mapv(|v| v * v)
                    .sum()
                    .sqrt();
                if labels[i] == labels[j] {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    ne += 1;
                }
            }
        }
        assert!(intra / (ni as f64) < inter / (ne as f64));
        let post = r.kl_trace[cfg.exaggeration_iters];
        assert!(*r.kl_trace.last().unwrap() <= post);
    }
}
