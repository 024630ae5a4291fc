//! k-means clustering followed by one factor analyzer per Voronoi cell.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::Result;
use crate::init::{check_convergence, init_params, step_key};
use crate::model::{build_caches, exact_log_likelihood, Counter, MfaParams, VarianceFloor};
use crate::mstep::{accumulate_suffstats, update_params};

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansState {
    /// `C x D` row-major centers.
    pub centers: Vec<f64>,
    pub assignments: Vec<u32>,
    /// Sum of squared distances to the assigned centers after the last
    /// assignment pass.
    pub inertia: f64,
    /// Inertia after every assignment pass.
    pub inertia_history: Vec<f64>,
    /// Center updates performed.
    pub iterations: usize,
    pub converged: bool,
}

impl KmeansState {
    pub fn cell_sizes(&self, n_clusters: usize) -> Vec<usize> {
        let mut sizes = vec![0; n_clusters];
        for &a in &self.assignments {
            sizes[a as usize] += 1;
        }
        sizes
    }
}

#[inline]
fn sq_dist(x: &[f32], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum()
}

fn assign(data: &Dataset, centers: &[f64], d: usize, counter: &Counter) -> (Vec<u32>, Vec<f64>) {
    let k = centers.len() / d;
    let pairs: Vec<(u32, f64)> = (0..data.n())
        .into_par_iter()
        .map(|n| {
            let x = data.row(n);
            let mut best = (0u32, f64::INFINITY);
            for c in 0..k {
                let dist = sq_dist(x, &centers[c * d..(c + 1) * d]);
                if dist < best.1 {
                    best = (c as u32, dist);
                }
            }
            best
        })
        .collect();
    counter.add((data.n() * k) as u64);
    pairs.into_iter().unzip()
}

/// Lloyd iterations from `init_centers` (`C x D` row-major) until the largest
/// center movement is at most `tol` or `max_iters` updates were made.
///
/// Every point-to-center squared distance is added to `counter`, i.e.
/// exactly `N * C` per assignment pass. A cluster that loses all its points
/// is moved onto the point farthest from its own center.
pub fn kmeans_lloyd(
    data: &Dataset,
    init_centers: &[f64],
    max_iters: usize,
    tol: f64,
    counter: &Counter,
) -> KmeansState {
    let d = data.dim();
    let k = init_centers.len() / d;
    let mut centers = init_centers.to_vec();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let (assignments, dists) = assign(data, &centers, d, counter);
        let inertia: f64 = dists.iter().sum();
        history.push(inertia);
        if converged || iterations >= max_iters {
            return KmeansState {
                centers,
                assignments,
                inertia,
                inertia_history: history,
                iterations,
                converged,
            };
        }

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (n, &a) in assignments.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1;
            for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(data.row(n)) {
                *s += x as f64;
            }
        }
        let mut next = centers.clone();
        let mut taken = vec![false; data.n()];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..d {
                    next[c * d + j] = sums[c * d + j] * inv;
                }
            } else {
                let far =
                    (0..data.n())
                        .filter(|&n| !taken[n])
                        .fold(None, |best: Option<usize>, n| match best {
                            Some(b) if dists[b] >= dists[n] => Some(b),
                            _ => Some(n),
                        });
                if let Some(n) = far {
                    taken[n] = true;
                    for (j, &x) in data.row(n).iter().enumerate() {
                        next[c * d + j] = x as f64;
                    }
                }
            }
        }
        let shift = (0..k)
            .map(|c| {
                let a = &centers[c * d..(c + 1) * d];
                let b = &next[c * d..(c + 1) * d];
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        centers = next;
        iterations += 1;
        converged = shift <= tol;
    }
}

/// Settings of the per-cell factor-analyzer fits.
#[derive(Debug, Clone)]
pub struct FaFitConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub lambda_scale: f64,
}

impl Default for FaFitConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_iters: 200,
            seed: 0,
            lambda_scale: 1.0,
        }
    }
}

/// Assembled k-means + FA model.
#[derive(Debug, Clone)]
pub struct FaFit {
    pub params: MfaParams,
    /// Cells with fewer than two points; they received the cell mean, floored
    /// variances and zero loadings instead of a fit.
    pub tiny_clusters: Vec<usize>,
    /// EM iterations used per cell (zero for tiny cells).
    pub iterations: Vec<usize>,
}

/// Fits one factor analyzer with `latent` factors to the points of each
/// k-means cell by EM and weights the cells by their relative size.
pub fn fit_fa_per_cluster(
    data: &Dataset,
    state: &KmeansState,
    latent: usize,
    floor: &VarianceFloor,
    config: &FaFitConfig,
) -> Result<FaFit> {
    let d = data.dim();
    let k = state.centers.len() / d;
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (n, &a) in state.assignments.iter().enumerate() {
        cells[a as usize].push(n);
    }
    type CellFit = (Vec<f64>, Vec<f64>, Vec<f64>, usize, bool);
    let fits: Vec<CellFit> = cells
        .par_iter()
        .enumerate()
        .map(|(c, cell)| -> Result<CellFit> {
            if cell.len() < 2 {
                let mean = match cell.first() {
                    Some(&n) => data.row(n).iter().map(|&v| v as f64).collect(),
                    None => state.centers[c * d..(c + 1) * d].to_vec(),
                };
                return Ok((mean, vec![0.0; d * latent], floor.0.clone(), 0, true));
            }
            let sub = data.select(cell)?;
            let (mean, _) = sub.mean_and_variance();
            let mut rng = ChaCha8Rng::seed_from_u64(step_key(config.seed, c as u64));
            let mut params = init_params(&sub, latent, &[0], floor, config.lambda_scale, &mut rng)?;
            params.mu.copy_from_slice(&mean);
            let (p, iters) = fit_single_fa(&sub, params, floor, config)?;
            Ok((p.mu, p.lambda, p.dnoise, iters, false))
        })
        .collect::<Result<_>>()?;

    let n = data.n() as f64;
    let mut pi = Vec::with_capacity(k);
    let (mut mu, mut lambda, mut dnoise) = (Vec::new(), Vec::new(), Vec::new());
    let mut tiny = Vec::new();
    let mut iterations = Vec::with_capacity(k);
    for (c, (m, l, v, it, is_tiny)) in fits.into_iter().enumerate() {
        pi.push(cells[c].len() as f64 / n);
        mu.extend(m);
        lambda.extend(l);
        dnoise.extend(v);
        iterations.push(it);
        if is_tiny {
            tiny.push(c);
        }
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    let params = MfaParams::new(k, d, latent, pi, mu, lambda, dnoise)?;
    Ok(FaFit {
        params,
        tiny_clusters: tiny,
        iterations,
    })
}

/// EM for a single factor analyzer on all rows of `data`, stopping on the
/// relative change of the log-likelihood.
pub fn fit_single_fa(
    data: &Dataset,
    mut params: MfaParams,
    floor: &VarianceFloor,
    config: &FaFitConfig,
) -> Result<(MfaParams, usize)> {
    let k_table = vec![0u32; data.n()];
    let q = vec![1.0; data.n()];
    let scratch = Counter::new();
    let mut caches = build_caches(&params)?;
    let mut prev = exact_log_likelihood(&params, &caches, data, &scratch);
    for it in 1..=config.max_iters {
        let stats = accumulate_suffstats(&params, &caches, data, &k_table, &q, 1)?;
        params = update_params(&params, &stats, floor)?.params;
        caches = build_caches(&params)?;
        let ll = exact_log_likelihood(&params, &caches, data, &scratch);
        if check_convergence(prev, ll, config.epsilon, false) {
            return Ok((params, it));
        }
        prev = ll;
    }
    Ok((params, config.max_iters))
}
