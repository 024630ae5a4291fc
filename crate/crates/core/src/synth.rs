//! Sampling from mixtures of factor analyzers, used to build ground-truth
//! datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{MfaError, Result};
use crate::init::step_key;
use crate::model::MfaParams;

/// Recipe for a random ground-truth model and a sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_components: usize,
    pub dim: usize,
    pub latent: usize,
    pub n: usize,
    /// Typical distance between means relative to the spread of a component.
    pub separation: f64,
    /// Standard deviation of the loading entries.
    pub loading_scale: f64,
    /// Typical per-dimension noise standard deviation.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_components: 5,
            dim: 8,
            latent: 2,
            n: 5000,
            separation: 4.0,
            loading_scale: 1.0,
            noise_scale: 0.3,
            seed: 0,
        }
    }
}

/// A drawn dataset together with the generating model and the component of
/// every row.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub data: Dataset,
    pub truth: MfaParams,
    pub labels: Vec<u32>,
}

const TRUTH_STREAM: u64 = 0x0074_7275_7468;

/// Random ground-truth model: mean entries `N(0, (sep * s / sqrt 2)^2)` with
/// `s^2 = loading^2 H + noise^2`, loadings `N(0, loading^2)`, variances
/// `noise^2 * U(0.5, 1.5)` and weights proportional to `U(0.5, 1.5)`.
pub fn random_truth(spec: &SyntheticSpec) -> Result<MfaParams> {
    let (c, d, h) = (spec.n_components, spec.dim, spec.latent);
    if c == 0 || d == 0 || h == 0 || h > d {
        return Err(MfaError::InvalidConfig(format!(
            "need C, D, H >= 1 and H <= D; got C={c}, D={d}, H={h}"
        )));
    }
    for (name, v) in [
        ("separation", spec.separation),
        ("loading scale", spec.loading_scale),
        ("noise scale", spec.noise_scale),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(MfaError::InvalidConfig(format!(
                "{name} must be finite and >= 0"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(step_key(spec.seed, TRUTH_STREAM));
    let scale = (spec.loading_scale.powi(2) * h as f64 + spec.noise_scale.powi(2)).sqrt();
    let mean_sd = spec.separation * scale / std::f64::consts::SQRT_2;
    let mut normal = |sd: f64| sd * rng.sample::<f64, _>(StandardNormal);
    let mu: Vec<f64> = (0..c * d).map(|_| normal(mean_sd)).collect();
    let lambda: Vec<f64> = (0..c * d * h).map(|_| normal(spec.loading_scale)).collect();
    let dnoise: Vec<f64> = (0..c * d)
        .map(|_| (spec.noise_scale.powi(2) * rng.random_range(0.5..1.5)).max(f64::MIN_POSITIVE))
        .collect();
    let mut pi: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    MfaParams::new(c, d, h, pi, mu, lambda, dnoise)
}

/// Draws `n` rows from the generative process `c ~ pi`, `z ~ N(0, I)`,
/// `x = Lambda_c z + mu_c + e` with `e ~ N(0, D_c)`. Row `i` uses its own
/// random stream keyed by `(seed, i)`.
pub fn sample_dataset(params: &MfaParams, n: usize, seed: u64) -> Result<(Dataset, Vec<u32>)> {
    let (d, h) = (params.dim(), params.latent());
    let mut cdf = Vec::with_capacity(params.n_components());
    let mut acc = 0.0;
    for &p in &params.pi {
        acc += p;
        cdf.push(acc);
    }
    let mut values = vec![0f32; n * d];
    let labels: Vec<u32> = values
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(step_key(seed, i as u64));
            let u: f64 = rng.random::<f64>() * acc;
            let c = cdf.iter().position(|&v| u < v).unwrap_or(cdf.len() - 1);
            let z: Vec<f64> = (0..h).map(|_| rng.sample(StandardNormal)).collect();
            let (mu, lam, var) = (params.mean(c), params.loading(c), params.noise(c));
            for k in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                let lz: f64 = (0..h).map(|j| lam[k * h + j] * z[j]).sum();
                row[k] = (mu[k] + lz + var[k].sqrt() * e) as f32;
            }
            c as u32
        })
        .collect();
    Ok((Dataset::new(n, d, values)?, labels))
}

/// Ground-truth model from `spec` and `spec.n` rows sampled from it.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSample> {
    let truth = random_truth(spec)?;
    let (data, labels) = sample_dataset(&truth, spec.n, spec.seed)?;
    Ok(SyntheticSample {
        data,
        truth,
        labels,
    })
}
