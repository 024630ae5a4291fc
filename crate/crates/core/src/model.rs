//! MFA parameters, per-component caches and all probability evaluations.
//!
//! Component covariances are never stored densely. Every evaluation goes
//! through `Sigma_c^-1 = D_c^-1 - U_c V_c` and
//! `log|Sigma_c| = log|L_c| + sum_d log sigma^2_{c,d}`, which keeps a single
//! log-joint at `O(DH)`.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{MfaError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3; // ln(2 pi)
const CHOLESKY_JITTER: f64 = 1e-10;

/// Thread-safe tally of joint (or distance) evaluations.
#[derive(Debug, Default)]
pub struct Counter(AtomicU64);

impl Counter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&self, k: u64) {
        self.0.fetch_add(k, Ordering::Relaxed);
    }

    #[inline]
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty or
/// all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Per-dimension lower bound on every noise variance:
/// `max(1e-8, 1e-6 * var_d)` of the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceFloor(pub Vec<f64>);

impl VarianceFloor {
    pub const ABSOLUTE: f64 = 1e-8;
    pub const RELATIVE: f64 = 1e-6;

    pub fn from_data(data: &Dataset) -> Self {
        let (_, var) = data.mean_and_variance();
        Self::from_variances(&var)
    }

    pub fn from_variances(var: &[f64]) -> Self {
        Self(
            var.iter()
                .map(|&v| (Self::RELATIVE * v).max(Self::ABSOLUTE))
                .collect(),
        )
    }

    pub fn uniform(d: usize, value: f64) -> Self {
        Self(vec![value; d])
    }

    #[inline]
    pub fn apply(&self, d: usize, value: f64) -> f64 {
        value.max(self.0[d])
    }
}

/// Number of trainable scalars of an MFA model: `C(D(H+2)+1) - 1`.
///
/// Computed in 128-bit integers so large configurations never overflow
/// and no parameter storage is needed.
pub fn trainable_parameter_count(c: u64, d: u64, h: u64) -> u128 {
    let (c, d, h) = (c as u128, d as u128, h as u128);
    c * (d * (h + 2) + 1) - 1
}

/// All model parameters of a mixture of factor analyzers.
///
/// Layout: `mu` and `dnoise` are `C x D` row-major, `lambda` stores one
/// `D x H` row-major block per component. A component with `pi_c == 0` is
/// treated as removed (empty).
#[derive(Debug, Clone, PartialEq)]
pub struct MfaParams {
    n_components: usize,
    dim: usize,
    latent: usize,
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub dnoise: Vec<f64>,
}

impl MfaParams {
    pub fn new(
        n_components: usize,
        dim: usize,
        latent: usize,
        pi: Vec<f64>,
        mu: Vec<f64>,
        lambda: Vec<f64>,
        dnoise: Vec<f64>,
    ) -> Result<Self> {
        if n_components == 0 || dim == 0 || latent == 0 || latent > dim {
            return Err(MfaError::InvalidParams(format!(
                "need C >= 1, D >= 1, 1 <= H <= D; got C={n_components}, D={dim}, H={latent}"
            )));
        }
        let check = |name: &str, len: usize, want: usize| {
            if len != want {
                Err(MfaError::InvalidParams(format!(
                    "{name} has {len} entries, expected {want}"
                )))
            } else {
                Ok(())
            }
        };
        check("pi", pi.len(), n_components)?;
        check("mu", mu.len(), n_components * dim)?;
        check("lambda", lambda.len(), n_components * dim * latent)?;
        check("dnoise", dnoise.len(), n_components * dim)?;
        let p = Self {
            n_components,
            dim,
            latent,
            pi,
            mu,
            lambda,
            dnoise,
        };
        p.validate(None)?;
        Ok(p)
    }

    /// Checks the structural invariants: finite entries, normalized
    /// non-negative weights, positive variances (at or above `floor` if given).
    pub fn validate(&self, floor: Option<&VarianceFloor>) -> Result<()> {
        let all = self
            .pi
            .iter()
            .chain(&self.mu)
            .chain(&self.lambda)
            .chain(&self.dnoise);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(MfaError::InvalidParams("non-finite parameter".into()));
        }
        if self.pi.iter().any(|&p| p < 0.0) {
            return Err(MfaError::InvalidParams("negative mixing weight".into()));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MfaError::InvalidParams(format!(
                "mixing weights sum to {total}"
            )));
        }
        for (i, &s) in self.dnoise.iter().enumerate() {
            let min = floor.map(|f| f.0[i % self.dim]).unwrap_or(0.0);
            if s <= 0.0 || s < min {
                return Err(MfaError::InvalidParams(format!(
                    "variance {s} of component {} dimension {} below floor",
                    i / self.dim,
                    i % self.dim
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n_components(&self) -> usize {
        self.n_components
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn latent(&self) -> usize {
        self.latent
    }

    #[inline]
    pub fn mean(&self, c: usize) -> &[f64] {
        &self.mu[c * self.dim..(c + 1) * self.dim]
    }

    /// `D x H` row-major loading block of component `c`.
    #[inline]
    pub fn loading(&self, c: usize) -> &[f64] {
        let s = self.dim * self.latent;
        &self.lambda[c * s..(c + 1) * s]
    }

    #[inline]
    pub fn noise(&self, c: usize) -> &[f64] {
        &self.dnoise[c * self.dim..(c + 1) * self.dim]
    }

    #[inline]
    pub fn is_active(&self, c: usize) -> bool {
        self.pi[c] > 0.0
    }

    pub fn empty_components(&self) -> usize {
        self.pi.iter().filter(|&&p| p <= 0.0).count()
    }

    /// Dense `Lambda_c Lambda_c^T + D_c`. Only meant for small-D checks.
    pub fn dense_covariance(&self, c: usize) -> DMatrix<f64> {
        let (d, h) = (self.dim, self.latent);
        let l = DMatrix::from_row_slice(d, h, self.loading(c));
        let mut s = &l * l.transpose();
        for (i, &v) in self.noise(c).iter().enumerate() {
            s[(i, i)] += v;
        }
        s
    }
}

/// Derived per-component quantities for `O(DH)` joint evaluation.
#[derive(Debug, Clone)]
pub struct ComponentCache {
    /// `U_c = D_c^-1 Lambda_c`, `D x H` row-major.
    pub u: Vec<f64>,
    /// `L_c = I + Lambda_c^T D_c^-1 Lambda_c`, `H x H`.
    pub lmat: Vec<f64>,
    /// `V_c = L_c^-1 U_c^T`, `H x D` row-major.
    pub v: Vec<f64>,
    /// `L_c^-1`, the latent posterior covariance.
    pub latent_cov: Vec<f64>,
    pub logdet_sigma: f64,
    pub inv_dnoise: Vec<f64>,
    pub log_pi: f64,
    dim: usize,
    latent: usize,
    log_norm: f64,
}

impl ComponentCache {
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn latent(&self) -> usize {
        self.latent
    }

    /// `v^T Sigma_c^-1 v` for `v = x - mu` via the Woodbury form.
    #[inline]
    pub fn mahalanobis(&self, mu: &[f64], x: &[f32]) -> f64 {
        let (d, h) = (self.dim, self.latent);
        let mut quad = 0.0;
        for k in 0..d {
            let dv = x[k] as f64 - mu[k];
            quad += dv * dv * self.inv_dnoise[k];
        }
        for j in 0..h {
            let vrow = &self.v[j * d..(j + 1) * d];
            let (mut ut_v, mut v_v) = (0.0, 0.0);
            for k in 0..d {
                let dv = x[k] as f64 - mu[k];
                ut_v += self.u[k * h + j] * dv;
                v_v += vrow[k] * dv;
            }
            quad -= ut_v * v_v;
        }
        quad
    }

    /// Uncounted `log p(c, x | Theta)`. Everything that should show up in the
    /// evaluation tally goes through [`log_joint`] or adds to a [`Counter`].
    #[inline]
    pub(crate) fn log_joint_raw(&self, mu: &[f64], x: &[f32]) -> f64 {
        if self.log_pi == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        self.log_norm - 0.5 * self.mahalanobis(mu, x)
    }
}

fn cholesky_with_jitter(m: &DMatrix<f64>, jitter: f64) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).or_else(|| {
        let n = m.nrows();
        Cholesky::new(m + DMatrix::identity(n, n) * jitter)
    })
}

/// Builds the cache of component `c`: `O(DH^2 + H^3)`.
pub fn precompute_component(params: &MfaParams, c: usize) -> Result<ComponentCache> {
    let (d, h) = (params.dim, params.latent);
    let lambda = params.loading(c);
    let inv_dnoise: Vec<f64> = params.noise(c).iter().map(|&s| 1.0 / s).collect();

    let mut u = vec![0.0; d * h];
    for k in 0..d {
        for j in 0..h {
            u[k * h + j] = lambda[k * h + j] * inv_dnoise[k];
        }
    }
    let mut lmat = DMatrix::<f64>::identity(h, h);
    for a in 0..h {
        for b in a..h {
            let s: f64 = (0..d).map(|k| u[k * h + a] * lambda[k * h + b]).sum();
            lmat[(a, b)] += s;
            if a != b {
                lmat[(b, a)] += s;
            }
        }
    }
    let chol = cholesky_with_jitter(&lmat, CHOLESKY_JITTER)
        .ok_or(MfaError::CholeskyFailure { component: c })?;
    let logdet_l: f64 = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .take(h)
            .map(|x| x.ln())
            .sum::<f64>();

    let ut = DMatrix::from_fn(h, d, |j, k| u[k * h + j]);
    let vmat = chol.solve(&ut);
    let mut v = vec![0.0; h * d];
    for j in 0..h {
        for k in 0..d {
            v[j * d + k] = vmat[(j, k)];
        }
    }
    let linv = chol.inverse();
    let latent_cov: Vec<f64> = (0..h * h).map(|i| linv[(i / h, i % h)]).collect();
    let logdet_sigma = logdet_l + params.noise(c).iter().map(|s| s.ln()).sum::<f64>();
    let log_pi = params.pi[c].ln();
    let log_norm = log_pi - 0.5 * d as f64 * LN_2PI - 0.5 * logdet_sigma;

    Ok(ComponentCache {
        u,
        lmat: lmat.as_slice().to_vec(),
        v,
        latent_cov,
        logdet_sigma,
        inv_dnoise,
        log_pi,
        dim: d,
        latent: h,
        log_norm,
    })
}

/// Caches for every component, built in parallel.
pub fn build_caches(params: &MfaParams) -> Result<Vec<ComponentCache>> {
    (0..params.n_components)
        .into_par_iter()
        .map(|c| precompute_component(params, c))
        .collect()
}

/// `log p(c, x | Theta) = log pi_c - D/2 log 2pi - 1/2 log|Sigma_c| - 1/2 v^T Sigma_c^-1 v`.
///
/// Increments `counter` by exactly one.
#[inline]
pub fn log_joint(cache: &ComponentCache, mu_c: &[f64], x: &[f32], counter: &Counter) -> f64 {
    counter.add(1);
    cache.log_joint_raw(mu_c, x)
}

/// Full log-likelihood `sum_n log sum_c p(c, x_n | Theta)`. Adds exactly
/// `N * C` to `counter`.
pub fn exact_log_likelihood(
    params: &MfaParams,
    caches: &[ComponentCache],
    data: &Dataset,
    counter: &Counter,
) -> f64 {
    let c_count = params.n_components;
    let per_point: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map_init(
            || vec![0.0; c_count],
            |buf, n| {
                let x = data.row(n);
                for (c, slot) in buf.iter_mut().enumerate() {
                    *slot = caches[c].log_joint_raw(params.mean(c), x);
                }
                log_sum_exp(buf)
            },
        )
        .collect();
    counter.add((data.n() * c_count) as u64);
    per_point.iter().sum()
}

/// Mean negative log-likelihood per data point; evaluation-only, uncounted.
pub fn nll_per_point(params: &MfaParams, caches: &[ComponentCache], data: &Dataset) -> f64 {
    -exact_log_likelihood(params, caches, data, &Counter::new()) / data.n() as f64
}

/// Truncated free energy `sum_n log sum_{c in K_n} p(c, x_n | Theta)`.
/// Adds `sum_n |K_n|` to `counter`.
pub fn truncated_free_energy<K: AsRef<[u32]> + Sync>(
    params: &MfaParams,
    caches: &[ComponentCache],
    data: &Dataset,
    k_sets: &[K],
    counter: &Counter,
) -> Result<f64> {
    if k_sets.len() != data.n() {
        return Err(MfaError::DimensionMismatch {
            expected: data.n(),
            found: k_sets.len(),
        });
    }
    if let Some(n) = k_sets.iter().position(|k| k.as_ref().is_empty()) {
        return Err(MfaError::EmptyKSet(n));
    }
    let per_point: Vec<f64> = k_sets
        .par_iter()
        .enumerate()
        .map_init(Vec::new, |buf: &mut Vec<f64>, (n, k)| {
            let x = data.row(n);
            buf.clear();
            buf.extend(
                k.as_ref()
                    .iter()
                    .map(|&c| caches[c as usize].log_joint_raw(params.mean(c as usize), x)),
            );
            log_sum_exp(buf)
        })
        .collect();
    let total: usize = k_sets.iter().map(|k| k.as_ref().len()).sum();
    counter.add(total as u64);
    Ok(per_point.iter().sum())
}

/// Dense `log N(x; mu_c, Sigma_c) + log pi_c` through an explicit `D x D`
/// covariance. Reference path for small dimensions.
pub fn dense_log_joint(params: &MfaParams, c: usize, x: &[f32]) -> f64 {
    let d = params.dim;
    let sigma = params.dense_covariance(c);
    let chol = Cholesky::new(sigma).expect("dense covariance is positive definite");
    let diff = nalgebra::DVector::from_fn(d, |k, _| x[k] as f64 - params.mean(c)[k]);
    let sol = chol.solve(&diff);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    params.pi[c].ln() - 0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * diff.dot(&sol)
}
