//! Closed-form parameter updates from truncated responsibilities.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{MfaError, Result};
use crate::model::{ComponentCache, MfaParams, VarianceFloor};

/// Effective counts below this mark a component as empty.
pub const EMPTY_THRESHOLD: f64 = 1e-10;

/// Sufficient statistics of one component, with `Hp = H + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStats {
    /// Effective count `N_c = sum_n q_n(c)`.
    pub count: f64,
    /// `sum_n q_n(c) x_n E[z^]^T`, `D x Hp` row-major.
    pub y: Vec<f64>,
    /// `sum_n q_n(c) E[z^ z^T]`, `Hp x Hp` row-major.
    pub e: Vec<f64>,
    /// `sum_n q_n(c) x_n^2` per dimension.
    pub sq_sum: Vec<f64>,
}

impl ComponentStats {
    fn zeros(d: usize, hp: usize) -> Self {
        Self {
            count: 0.0,
            y: vec![0.0; d * hp],
            e: vec![0.0; hp * hp],
            sq_sum: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub dim: usize,
    pub latent: usize,
    pub components: Vec<ComponentStats>,
}

impl SuffStats {
    pub fn total_count(&self) -> f64 {
        self.components.iter().map(|s| s.count).sum()
    }
}

/// Accumulates statistics under the variational parameters `params`.
///
/// `k_table` and `q` are flat `N x stride` tables: point `n` contributes to
/// component `k_table[n * stride + i]` with weight `q[n * stride + i]`.
/// Each component is summed over its points in ascending order, so the
/// result does not depend on the thread count.
pub fn accumulate_suffstats(
    params: &MfaParams,
    caches: &[ComponentCache],
    data: &Dataset,
    k_table: &[u32],
    q: &[f64],
    stride: usize,
) -> Result<SuffStats> {
    let (d, h, c_count) = (params.dim(), params.latent(), params.n_components());
    data.check_dim(d)?;
    if k_table.len() != data.n() * stride || q.len() != k_table.len() {
        return Err(MfaError::DimensionMismatch {
            expected: data.n() * stride,
            found: k_table.len().min(q.len()),
        });
    }
    let mut members: Vec<Vec<(u32, f64)>> = vec![Vec::new(); c_count];
    for (n, (ks, qs)) in k_table
        .chunks_exact(stride)
        .zip(q.chunks_exact(stride))
        .enumerate()
    {
        for (&c, &w) in ks.iter().zip(qs) {
            if w > 0.0 {
                members[c as usize].push((n as u32, w));
            }
        }
    }
    let hp = h + 1;
    let components = members
        .par_iter()
        .enumerate()
        .map(|(c, list)| {
            let mut st = ComponentStats::zeros(d, hp);
            if list.is_empty() {
                return st;
            }
            let cache = &caches[c];
            let mu = params.mean(c);
            let mut ez = vec![0.0; hp];
            ez[h] = 1.0;
            let mut diff = vec![0.0; d];
            for &(n, w) in list {
                let x = data.row(n as usize);
                for k in 0..d {
                    diff[k] = x[k] as f64 - mu[k];
                }
                for j in 0..h {
                    let row = &cache.v[j * d..(j + 1) * d];
                    ez[j] = row.iter().zip(&diff).map(|(a, b)| a * b).sum();
                }
                st.count += w;
                for a in 0..hp {
                    let wa = w * ez[a];
                    for b in a..hp {
                        st.e[a * hp + b] += wa * ez[b];
                    }
                }
                for k in 0..d {
                    let wx = w * x[k] as f64;
                    st.sq_sum[k] += wx * x[k] as f64;
                    let yrow = &mut st.y[k * hp..(k + 1) * hp];
                    for (yv, &z) in yrow.iter_mut().zip(&ez) {
                        *yv += wx * z;
                    }
                }
            }
            // posterior covariance term and symmetric fill
            for a in 0..h {
                for b in a..h {
                    st.e[a * hp + b] += st.count * cache.latent_cov[a * h + b];
                }
            }
            for a in 0..hp {
                for b in 0..a {
                    st.e[a * hp + b] = st.e[b * hp + a];
                }
            }
            st
        })
        .collect();
    Ok(SuffStats {
        dim: d,
        latent: h,
        components,
    })
}

/// `A^ = Y E^-1` (`D x (H+1)` row-major) via Cholesky of `E`, with one
/// jittered retry.
pub fn solve_loadings(stats: &ComponentStats, d: usize, h: usize, c: usize) -> Result<Vec<f64>> {
    let hp = h + 1;
    let e = DMatrix::from_row_slice(hp, hp, &stats.e);
    let chol = Cholesky::new(e.clone())
        .or_else(|| {
            let jitter = 1e-10 * e.trace() / hp as f64;
            Cholesky::new(&e + DMatrix::identity(hp, hp) * jitter)
        })
        .ok_or(MfaError::SingularEc(c))?;
    // E A^T = Y^T
    let yt = DMatrix::from_fn(hp, d, |a, k| stats.y[k * hp + a]);
    let at = chol.solve(&yt);
    if at.iter().any(|v| !v.is_finite()) {
        return Err(MfaError::SingularEc(c));
    }
    let mut a_hat = vec![0.0; d * hp];
    for k in 0..d {
        for a in 0..hp {
            a_hat[k * hp + a] = at[(a, k)];
        }
    }
    Ok(a_hat)
}

/// Result of a parameter update.
#[derive(Debug, Clone)]
pub struct MStepResult {
    pub params: MfaParams,
    /// Components that became empty in this update.
    pub newly_empty: Vec<usize>,
}

/// New parameters from the statistics. Components that are already empty or
/// whose effective count falls below [`EMPTY_THRESHOLD`] keep their previous
/// parameters and get weight zero; the remaining weights are renormalized.
pub fn update_params(
    prev: &MfaParams,
    stats: &SuffStats,
    floor: &VarianceFloor,
) -> Result<MStepResult> {
    let (d, h, c_count) = (prev.dim(), prev.latent(), prev.n_components());
    let hp = h + 1;
    // (mean, loadings, variances) of every component that stays active
    type Update = Option<(Vec<f64>, Vec<f64>, Vec<f64>)>;
    let updates: Vec<Update> = stats
        .components
        .par_iter()
        .enumerate()
        .map(|(c, st)| {
            if !prev.is_active(c) || st.count < EMPTY_THRESHOLD {
                return Ok(None);
            }
            let a_hat = solve_loadings(st, d, h, c)?;
            let mut lambda = vec![0.0; d * h];
            let mut mu = vec![0.0; d];
            let mut var = vec![0.0; d];
            for k in 0..d {
                let row = &a_hat[k * hp..(k + 1) * hp];
                lambda[k * h..(k + 1) * h].copy_from_slice(&row[..h]);
                mu[k] = row[h];
                let proj: f64 = st.y[k * hp..(k + 1) * hp]
                    .iter()
                    .zip(row)
                    .map(|(y, a)| y * a)
                    .sum();
                let v = (st.sq_sum[k] - proj) / st.count;
                var[k] = floor.apply(k, if v.is_finite() { v } else { 0.0 });
            }
            Ok(Some((mu, lambda, var)))
        })
        .collect::<Result<_>>()?;

    let mut next = prev.clone();
    let mut newly_empty = Vec::new();
    let mut live_total = 0.0;
    for (c, upd) in updates.into_iter().enumerate() {
        match upd {
            Some((mu, lambda, var)) => {
                next.mu[c * d..(c + 1) * d].copy_from_slice(&mu);
                next.lambda[c * d * h..(c + 1) * d * h].copy_from_slice(&lambda);
                next.dnoise[c * d..(c + 1) * d].copy_from_slice(&var);
                next.pi[c] = stats.components[c].count;
                live_total += stats.components[c].count;
            }
            None => {
                if prev.is_active(c) {
                    newly_empty.push(c);
                }
                next.pi[c] = 0.0;
            }
        }
    }
    if live_total <= 0.0 {
        return Err(MfaError::InvalidParams("every component is empty".into()));
    }
    for p in next.pi.iter_mut() {
        *p /= live_total;
    }
    debug_assert_eq!(next.pi.len(), c_count);
    Ok(MStepResult {
        params: next,
        newly_empty,
    })
}

/// Expected complete-data free energy term
/// `sum_n sum_c q_n(c) E_z[log p(c, z, x_n | Theta)]` written through the
/// statistics, without the entropy (which does not depend on `Theta`).
///
/// `a_hat` and `inv_var` are per-component blocks; used to verify that the
/// update is a stationary point.
pub fn expected_complete_loglik(
    stats: &SuffStats,
    pi: &[f64],
    a_hat: &[Vec<f64>],
    inv_var: &[Vec<f64>],
) -> f64 {
    let (d, h) = (stats.dim, stats.latent);
    let hp = h + 1;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for (c, st) in stats.components.iter().enumerate() {
        if st.count == 0.0 {
            continue;
        }
        let a = &a_hat[c];
        let iv = &inv_var[c];
        let mut term = st.count * (pi[c].ln() - 0.5 * d as f64 * ln2pi)
            + 0.5 * st.count * iv.iter().map(|v| v.ln()).sum::<f64>();
        // z^T z term of the latent prior is parameter free and omitted
        for k in 0..d {
            let row = &a[k * hp..(k + 1) * hp];
            let cross: f64 = st.y[k * hp..(k + 1) * hp]
                .iter()
                .zip(row)
                .map(|(y, a)| y * a)
                .sum();
            let mut quad = 0.0;
            for i in 0..hp {
                for j in 0..hp {
                    quad += row[i] * st.e[i * hp + j] * row[j];
                }
            }
            term += iv[k] * (-0.5 * st.sq_sum[k] + cross - 0.5 * quad);
        }
        total += term;
    }
    total
}
