//! Reference implementations shared by the integration tests. Everything here
//! goes through dense matrices or plain enumeration and is only meant for
//! small dimensions.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use vmfa_core::synth::{gen_synthetic, SyntheticSample, SyntheticSpec};
use vmfa_core::{Dataset, MfaParams};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Random parameters with weights in `[0.2, 1)`, means in `[-2, 2)`,
/// loadings in `[-1, 1)` and variances in `[0.1, 2)`.
pub fn random_params(rng: &mut ChaCha8Rng, c: usize, d: usize, h: usize) -> MfaParams {
    let mut pi: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);
    let mu = (0..c * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lambda = (0..c * d * h)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let dnoise = (0..c * d).map(|_| rng.random_range(0.1..2.0)).collect();
    MfaParams::new(c, d, h, pi, mu, lambda, dnoise).unwrap()
}

pub fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> Dataset {
    let values = (0..n * d)
        .map(|_| rng.random_range(-spread..spread) as f32)
        .collect();
    Dataset::new(n, d, values).unwrap()
}

/// Dense covariance `Lambda Lambda^T + D` of component `c`.
pub fn covariance(p: &MfaParams, c: usize) -> DMatrix<f64> {
    let (d, h) = (p.dim(), p.latent());
    let l = DMatrix::from_row_slice(d, h, p.loading(c));
    let mut s = &l * l.transpose();
    for (i, &v) in p.noise(c).iter().enumerate() {
        s[(i, i)] += v;
    }
    s
}

/// `log pi_c + log N(x; mu_c, Sigma_c)` with an explicit covariance.
pub fn dense_log_joint(p: &MfaParams, c: usize, x: &[f32]) -> f64 {
    if p.pi[c] == 0.0 {
        return f64::NEG_INFINITY;
    }
    let d = p.dim();
    let chol = covariance(p, c).cholesky().expect("positive definite");
    let diff = DVector::from_fn(d, |k, _| x[k] as f64 - p.mean(c)[k]);
    let maha = diff.dot(&chol.solve(&diff));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    p.pi[c].ln() - 0.5 * d as f64 * LN_2PI - 0.5 * logdet - 0.5 * maha
}

pub fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Truncated free energy with dense joints and any K sets.
pub fn naive_free_energy(p: &MfaParams, data: &Dataset, k: &[Vec<u32>]) -> f64 {
    k.iter()
        .enumerate()
        .map(|(n, ks)| {
            let j: Vec<f64> = ks
                .iter()
                .map(|&c| dense_log_joint(p, c as usize, data.row(n)))
                .collect();
            lse(&j)
        })
        .sum()
}

pub fn naive_log_likelihood(p: &MfaParams, data: &Dataset) -> f64 {
    let all: Vec<u32> = (0..p.n_components() as u32).collect();
    naive_free_energy(p, data, &vec![all; data.n()])
}

/// Latent posterior of component `c` under `p`: `(E[z], Cov[z])` with the
/// covariance `(I + Lambda^T D^-1 Lambda)^-1` inverted densely.
pub fn latent_posterior(p: &MfaParams, c: usize, x: &[f32]) -> (DVector<f64>, DMatrix<f64>) {
    let (d, h) = (p.dim(), p.latent());
    let l = DMatrix::from_row_slice(d, h, p.loading(c));
    let dinv = DMatrix::from_diagonal(&DVector::from_iterator(
        d,
        p.noise(c).iter().map(|v| 1.0 / v),
    ));
    let prec = DMatrix::identity(h, h) + l.transpose() * &dinv * &l;
    let cov = prec.try_inverse().expect("invertible");
    let diff = DVector::from_fn(d, |k, _| x[k] as f64 - p.mean(c)[k]);
    let mean = &cov * l.transpose() * dinv * diff;
    (mean, cov)
}

/// Expected complete-data log-likelihood
/// `sum_n sum_c q_nc E[log pi_c + log N(x_n; A_c z^, Psi_c)]`, with the
/// expectation over the latent posterior under `old` and the new parameters
/// given as `a_hat[c]` (`D x (H+1)` row-major, last column the mean),
/// `inv_var[c]` and `pi`. The latent prior term is parameter free and left
/// out. Summed point by point.
pub fn naive_expected_loglik(
    old: &MfaParams,
    data: &Dataset,
    resp: &[Vec<(u32, f64)>],
    pi: &[f64],
    a_hat: &[Vec<f64>],
    inv_var: &[Vec<f64>],
) -> f64 {
    let (d, h) = (old.dim(), old.latent());
    let hp = h + 1;
    let mut total = 0.0;
    for (n, list) in resp.iter().enumerate() {
        let x = data.row(n);
        for &(c, q) in list {
            let c = c as usize;
            if q == 0.0 {
                continue;
            }
            let (m, cov) = latent_posterior(old, c, x);
            let mut ez = DVector::zeros(hp);
            ez.rows_mut(0, h).copy_from(&m);
            ez[h] = 1.0;
            let mut ezz = &ez * ez.transpose();
            for i in 0..h {
                for j in 0..h {
                    ezz[(i, j)] += cov[(i, j)];
                }
            }
            let mut term = pi[c].ln() - 0.5 * d as f64 * LN_2PI;
            for k in 0..d {
                let a = DVector::from_row_slice(&a_hat[c][k * hp..(k + 1) * hp]);
                let xk = x[k] as f64;
                let sq = xk * xk - 2.0 * xk * a.dot(&ez) + (a.transpose() * &ezz * &a)[(0, 0)];
                term += 0.5 * inv_var[c][k].ln() - 0.5 * inv_var[c][k] * sq;
            }
            total += q * term;
        }
    }
    total
}

/// Closed-form `KL(N(mu_a, S_a) || N(mu_b, S_b))` between the component
/// densities (weights excluded).
pub fn gaussian_kl(p: &MfaParams, a: usize, b: usize) -> f64 {
    let d = p.dim();
    let sa = covariance(p, a);
    let cb = covariance(p, b).cholesky().expect("positive definite");
    let diff = DVector::from_fn(d, |k, _| p.mean(b)[k] - p.mean(a)[k]);
    let trace = cb.solve(&sa).trace();
    let maha = diff.dot(&cb.solve(&diff));
    let ld_a = 2.0
        * sa.cholesky()
            .unwrap()
            .l()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>();
    let ld_b = 2.0 * cb.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    0.5 * (trace + maha - d as f64 + ld_b - ld_a)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Train and test sets drawn from one ground-truth model; the test rows use
/// an independent seed.
pub fn train_test(spec: &SyntheticSpec, n_test: usize) -> (SyntheticSample, Dataset) {
    let sample = gen_synthetic(spec).unwrap();
    let (test, _) =
        vmfa_core::synth::sample_dataset(&sample.truth, n_test, spec.seed ^ 0x5eed_7e57).unwrap();
    (sample, test)
}
