//! Seeding of component means, initial parameters, initial truncation and
//! neighborhood sets, and the warm-up loop.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{MfaError, Result};
use crate::estep::{variational_e_step, DistanceMode, VarState};
use crate::model::{ComponentCache, Counter, MfaParams, VarianceFloor};

/// How the initial means are picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMethod {
    /// Markov-chain approximation of k-means++ seeding.
    #[default]
    Afkmc2,
    /// Distinct data points drawn uniformly without replacement.
    RandomPoints,
}

/// Proposal steps beyond the chain length allowed while the chain sits on a
/// point that coincides with a chosen center.
const MAX_EXTENSION: usize = 10_000;

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest_sq(data: &Dataset, centers: &[usize], x: usize, counter: &Counter) -> f64 {
    counter.add(centers.len() as u64);
    let row = data.row(x);
    centers
        .iter()
        .map(|&c| sq_dist(row, data.row(c)))
        .fold(f64::INFINITY, f64::min)
}

/// AFK-MC² seeding. Returns `n_components` distinct point indices; every
/// squared-distance evaluation is added to `counter`.
///
/// The proposal mixes the squared distance to the first center with a
/// uniform term, `q(x) = d²(x, c1) / (2 sum d²) + 1 / (2N)`. A proposed `y`
/// replaces the current `x` iff `d²(y) q(x) > u d²(x) q(y)`. When a chain
/// ends on a point at distance zero from the chosen centers it keeps
/// proposing until it leaves; if that fails the farthest point is used.
pub fn afkmc2_seed<R: Rng + ?Sized>(
    data: &Dataset,
    n_components: usize,
    chain_length: usize,
    rng: &mut R,
    counter: &Counter,
) -> Result<Vec<usize>> {
    let n = data.n();
    if chain_length == 0 {
        return Err(MfaError::InvalidConfig("chain length must be >= 1".into()));
    }
    if n_components == 0 || n_components > n {
        return Err(MfaError::DegenerateData {
            distinct: n,
            required: n_components,
        });
    }
    let first = rng.random_range(0..n);
    let mut centers = vec![first];
    if n_components == 1 {
        return Ok(centers);
    }
    let c1 = data.row(first);
    let d1: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(data.row(i), c1))
        .collect();
    counter.add(n as u64);
    let total: f64 = d1.iter().sum();
    let q: Vec<f64> = if total > 0.0 {
        d1.iter()
            .map(|&d| 0.5 * d / total + 0.5 / n as f64)
            .collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    let proposal = WeightedIndex::new(&q).map_err(|e| MfaError::InvalidConfig(e.to_string()))?;

    while centers.len() < n_components {
        let mut x = proposal.sample(rng);
        let mut dx = nearest_sq(data, &centers, x, counter);
        let mut steps = 1;
        while steps < chain_length || (dx == 0.0 && steps < chain_length + MAX_EXTENSION) {
            let y = proposal.sample(rng);
            let dy = nearest_sq(data, &centers, y, counter);
            let u: f64 = rng.random();
            if dy * q[x] > u * dx * q[y] {
                x = y;
                dx = dy;
            }
            steps += 1;
        }
        if dx == 0.0 {
            let dists: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| {
                    centers
                        .iter()
                        .map(|&c| sq_dist(data.row(i), data.row(c)))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            counter.add((n * centers.len()) as u64);
            let (best, &bd) = dists
                .iter()
                .enumerate()
                .fold(
                    (0, &dists[0]),
                    |acc, (i, d)| if *d > *acc.1 { (i, d) } else { acc },
                );
            if bd == 0.0 {
                return Err(MfaError::DegenerateData {
                    distinct: centers.len(),
                    required: n_components,
                });
            }
            x = best;
        }
        centers.push(x);
    }
    Ok(centers)
}

/// Distinct point indices drawn uniformly without replacement.
pub fn random_points_seed<R: Rng + ?Sized>(
    data: &Dataset,
    n_components: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n_components == 0 || n_components > data.n() {
        return Err(MfaError::DegenerateData {
            distinct: data.n(),
            required: n_components,
        });
    }
    Ok(index::sample(rng, data.n(), n_components).into_vec())
}

/// Means at the seed rows, every noise variance at the (floored) data
/// variance of its dimension, loadings uniform in `[0, lambda_scale)`,
/// uniform mixing weights.
pub fn init_params<R: Rng + ?Sized>(
    data: &Dataset,
    latent: usize,
    seeds: &[usize],
    floor: &VarianceFloor,
    lambda_scale: f64,
    rng: &mut R,
) -> Result<MfaParams> {
    let (c, d) = (seeds.len(), data.dim());
    let (_, var) = data.mean_and_variance();
    let noise: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(k, &v)| floor.apply(k, v))
        .collect();
    let mut mu = Vec::with_capacity(c * d);
    for &s in seeds {
        mu.extend(data.row(s).iter().map(|&v| v as f64));
    }
    let lambda: Vec<f64> = (0..c * d * latent)
        .map(|_| rng.random::<f64>() * lambda_scale)
        .collect();
    let dnoise = noise.repeat(c);
    MfaParams::new(c, d, latent, vec![1.0 / c as f64; c], mu, lambda, dnoise)
}

/// Initial truncation and neighborhood sets. The seed point of component
/// `c` (`seeds[c]`) gets `c` in its K set; remaining slots are filled with
/// distinct uniform draws, and every `g_c` holds `c` plus `G - 1` distinct
/// uniform draws.
pub fn init_varstate<R: Rng + ?Sized>(
    n_points: usize,
    n_components: usize,
    cprime: usize,
    gsize: usize,
    seeds: &[usize],
    rng: &mut R,
) -> Result<VarState> {
    if cprime == 0 || cprime > n_components || gsize == 0 || gsize > n_components {
        return Err(MfaError::InvalidConfig(format!(
            "need 1 <= C' <= C and 1 <= G <= C; got C={n_components}, C'={cprime}, G={gsize}"
        )));
    }
    let mut seed_of = vec![u32::MAX; n_points];
    for (c, &s) in seeds.iter().enumerate() {
        seed_of[s] = c as u32;
    }
    let mut k_sets = Vec::with_capacity(n_points * cprime);
    for &own in &seed_of {
        let draw = index::sample(rng, n_components, cprime);
        if own == u32::MAX {
            k_sets.extend(draw.iter().map(|i| i as u32));
        } else {
            k_sets.push(own);
            k_sets.extend(
                draw.iter()
                    .map(|i| i as u32)
                    .filter(|&i| i != own)
                    .take(cprime - 1),
            );
        }
    }
    let g_sets = (0..n_components)
        .map(|c| {
            let c32 = c as u32;
            let mut g = vec![c32];
            let draw = index::sample(rng, n_components, gsize);
            g.extend(
                draw.iter()
                    .map(|i| i as u32)
                    .filter(|&i| i != c32)
                    .take(gsize - 1),
            );
            g
        })
        .collect();
    VarState::new(n_components, cprime, gsize, k_sets, g_sets)
}

/// Mixes a run seed with a step number into an independent 64-bit key.
pub fn step_key(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Relative-change stopping rule.
///
/// The default compares the magnitude `|F_t - F_{t-1}| / |F_{t-1}|`; with
/// `literal` the signed ratio `(F_t - F_{t-1}) / F_{t-1}` is used, which for
/// negative free energies fires on any improvement.
pub fn check_convergence(prev: f64, curr: f64, epsilon: f64, literal: bool) -> bool {
    if literal {
        (curr - prev) / prev < epsilon
    } else if curr == prev {
        true
    } else {
        ((curr - prev) / prev).abs() < epsilon
    }
}

/// One warm-up E-step as seen by the instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupStep {
    pub free_energy_before: f64,
    pub free_energy: f64,
    pub joint_evals: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct WarmupSettings {
    pub epsilon: f64,
    pub literal: bool,
    pub max_iters: usize,
    pub mode: DistanceMode,
    pub seed: u64,
    /// Step number of the first warm-up E-step, for key derivation.
    pub first_step: u64,
}

/// Repeats E-steps at fixed parameters until the truncated free energy
/// converges. `params` and `caches` are never modified.
pub fn warmup(
    params: &MfaParams,
    caches: &[ComponentCache],
    data: &Dataset,
    state: &mut VarState,
    settings: &WarmupSettings,
    counter: &Counter,
) -> Result<Vec<WarmupStep>> {
    if settings.epsilon <= 0.0 {
        return Err(MfaError::InvalidConfig(
            "warm-up epsilon must be > 0".into(),
        ));
    }
    let mut steps = Vec::new();
    for it in 0..settings.max_iters {
        let start = Instant::now();
        let key = step_key(settings.seed, settings.first_step + it as u64);
        let out = variational_e_step(params, caches, data, state, key, settings.mode, counter)?;
        let step = WarmupStep {
            free_energy_before: out.free_energy_before,
            free_energy: out.free_energy,
            joint_evals: out.joint_evals,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        let done = check_convergence(
            step.free_energy_before,
            step.free_energy,
            settings.epsilon,
            settings.literal,
        );
        steps.push(step);
        if done {
            return Ok(steps);
        }
    }
    Err(MfaError::MaxIterExceeded {
        iterations: settings.max_iters,
    })
}
