//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits with a
//! nonzero status if any fails. Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 4 10`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use vmfa_core::bench::{run_scaling_suite, ScalingResult, ScalingSuiteSpec};
use vmfa_core::estep::{build_search_space, draw_extra, variational_e_step};
use vmfa_core::init::{afkmc2_seed, init_varstate, step_key, warmup, WarmupSettings};
use vmfa_core::io::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, stored_scalar_count,
    CHECKPOINT_HEADER_LEN, DATASET_HEADER_LEN,
};
use vmfa_core::model::{
    build_caches, exact_log_likelihood, log_joint, trainable_parameter_count, truncated_free_energy,
};
use vmfa_core::mstep::{accumulate_suffstats, update_params};
use vmfa_core::synth::{gen_synthetic, SyntheticSpec};
use vmfa_core::trainer::{
    train_emmfa, train_kmeansfa, train_vmfa, Initialization, Phase, TrainOutcome,
};
use vmfa_core::{
    Algo, Counter, Dataset, DistanceMode, MfaParams, TrainConfig, VarState, VarianceFloor,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Verdict;

fn main() -> ExitCode {
    let criteria: [(usize, &str, u64, Check); 12] = [
        (1, "woodbury log-joint vs dense covariance", 10, woodbury),
        (
            2,
            "variational EM equals exact EM without truncation",
            30,
            no_truncation_limit,
        ),
        (3, "free energy monotonicity", 120, monotonicity),
        (4, "single-swap free energy sign", 30, swap_sign),
        (
            5,
            "m-step stationarity and gradient",
            60,
            mstep_stationarity,
        ),
        (
            6,
            "joint evaluation bound and exact counting",
            60,
            joint_counting,
        ),
        (
            7,
            "sublinear scaling on the desk-scale ladder",
            600,
            scaling,
        ),
        (8, "quality parity", 300, quality_parity),
        (9, "divergence estimate fidelity", 120, kl_fidelity),
        (10, "seeding distribution and distinctness", 60, seeding),
        (11, "serialization and parameter count", 5, serialization),
        (12, "determinism", 60, determinism),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (id, name, limit, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let limit = Duration::from_secs(limit);
        let (mut pass, mut detail) = match result {
            Ok(v) => (v.pass, v.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if elapsed > limit {
            pass = false;
            detail.push_str("; over time limit");
        }
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {name}: {} ({detail}; {:.1} s of {} s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}

fn woodbury() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let counter = Counter::new();
    let cases = 1200;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = rng.random_range(2..=16);
        let h = rng.random_range(1..=4usize).min(d);
        let p = common::random_params(&mut rng, 1, d, h);
        let caches = build_caches(&p).unwrap();
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-4.0..4.0) as f32).collect();
        let got = log_joint(&caches[0], p.mean(0), &x, &counter);
        let want = common::dense_log_joint(&p, 0, &x);
        worst = worst.max((got - want).abs());
    }
    let pass = worst <= 1e-8 && counter.get() == cases;
    verdict(pass, format!("{cases} cases, max abs error {worst:.2e}"))
}

fn no_truncation_limit() -> Verdict {
    let spec = SyntheticSpec {
        n_components: 8,
        dim: 10,
        latent: 2,
        n: 2000,
        separation: 3.0,
        seed: 2,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap().data;
    let config = TrainConfig {
        n_components: 8,
        latent_dim: 2,
        cprime: 8,
        gsize: 8,
        epsilon: 1e-12,
        max_iters: 12,
        seed: 2,
        ..TrainConfig::default()
    };
    let v = train_vmfa(&config, &data, None).unwrap();
    let e = train_emmfa(
        &TrainConfig {
            algo: Algo::Emmfa,
            ..config
        },
        &data,
        None,
    )
    .unwrap();
    let fv: Vec<f64> = v.report.main_records().map(|r| r.free_energy).collect();
    let fe: Vec<f64> = e.report.records.iter().map(|r| r.free_energy).collect();
    let compared = fv.len().min(fe.len());
    let worst = fv
        .iter()
        .zip(&fe)
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max);
    verdict(
        compared >= 10 && worst <= 1e-8,
        format!("{compared} iterations, max relative difference {worst:.2e}"),
    )
}

fn random_config(rng: &mut ChaCha8Rng, seed: u64) -> (TrainConfig, Dataset) {
    let c = rng.random_range(5..=15);
    let d = rng.random_range(3..=8);
    let h = rng.random_range(1..=3usize).min(d);
    let spec = SyntheticSpec {
        n_components: c,
        dim: d,
        latent: h,
        n: rng.random_range(300..=800),
        separation: rng.random_range(1.5..4.0),
        seed,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap().data;
    let config = TrainConfig {
        n_components: c,
        latent_dim: h,
        cprime: rng.random_range(1..=3),
        gsize: rng.random_range(2..=c),
        max_iters: 100,
        seed,
        distance_mode: if rng.random_bool(0.5) {
            DistanceMode::Kl
        } else {
            DistanceMode::Euclid
        },
        ..TrainConfig::default()
    };
    (config, data)
}

fn monotonicity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    let mut violations = Vec::new();
    let below = |lo: f64, hi: f64| hi < lo - 1e-9 * lo.abs();
    for run in 0..20u64 {
        let (config, data) = random_config(&mut rng, 300 + run);
        // warm-up, with the free energy before and after each step
        let init = Initialization::new(&config, &data).unwrap();
        let mut state = init.varstate(&config, data.n()).unwrap();
        let caches = build_caches(&init.params).unwrap();
        let steps = warmup(
            &init.params,
            &caches,
            &data,
            &mut state,
            &WarmupSettings {
                epsilon: config.warmup_epsilon,
                literal: false,
                max_iters: config.warmup_max_iters,
                mode: config.distance_mode,
                seed: config.seed,
                first_step: 0,
            },
            &Counter::new(),
        )
        .unwrap();
        for (i, s) in steps.iter().enumerate() {
            checked += 1;
            if below(s.free_energy_before, s.free_energy) {
                violations.push(format!("run {run} warm-up {i}"));
            }
        }

        let out = train_vmfa(&config, &data, None).unwrap();
        let mut prev = f64::NAN;
        for r in &out.report.records {
            match r.phase {
                Phase::Warmup => {
                    checked += 1;
                    if prev.is_finite() && below(prev, r.free_energy) {
                        violations.push(format!("run {run} warm-up record {}", r.iteration));
                    }
                }
                Phase::Main => {
                    let fe = r.free_energy_estep.unwrap();
                    checked += 2;
                    if below(prev, fe) {
                        violations.push(format!("run {run} e-step {}", r.iteration));
                    }
                    if below(fe, r.free_energy) {
                        violations.push(format!("run {run} m-step {}", r.iteration));
                    }
                }
            }
            prev = r.free_energy;
        }
    }
    verdict(
        violations.is_empty(),
        format!("{checked} steps over 20 runs, violations {violations:?}"),
    )
}

fn swap_params(rng: &mut ChaCha8Rng, c: usize) -> MfaParams {
    let mut pi: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);
    let mu = (0..c * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lambda = (0..c * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dnoise = (0..c * 2).map(|_| rng.random_range(0.5..2.0)).collect();
    MfaParams::new(c, 2, 1, pi, mu, lambda, dnoise).unwrap()
}

fn swap_sign() -> Verdict {
    let (c, n, cp) = (10usize, 20usize, 3usize);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = common::random_data(&mut rng, n, 2, 1.0);
    let counter = Counter::new();
    let mut params = swap_params(&mut rng, c);
    let mut caches = build_caches(&params).unwrap();
    let mut k: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            rand::seq::index::sample(&mut rng, c, cp)
                .iter()
                .map(|i| i as u32)
                .collect()
        })
        .collect();
    let trials = 10_000;
    let mut mismatches = 0;
    let mut smallest: f64 = f64::INFINITY;
    for t in 0..trials {
        if t % 500 == 0 && t > 0 {
            params = swap_params(&mut rng, c);
            caches = build_caches(&params).unwrap();
        }
        let p = rng.random_range(0..n);
        let slot = rng.random_range(0..cp);
        let out_c = k[p][slot];
        let in_c = loop {
            let cand = rng.random_range(0..c as u32);
            if !k[p].contains(&cand) {
                break cand;
            }
        };
        let before = truncated_free_energy(&params, &caches, &data, &k, &counter).unwrap();
        let mut swapped = k.clone();
        swapped[p][slot] = in_c;
        let after = truncated_free_energy(&params, &caches, &data, &swapped, &counter).unwrap();
        let x = data.row(p);
        let diff = log_joint(
            &caches[in_c as usize],
            params.mean(in_c as usize),
            x,
            &counter,
        ) - log_joint(
            &caches[out_c as usize],
            params.mean(out_c as usize),
            x,
            &counter,
        );
        let delta = after - before;
        smallest = smallest.min(delta.abs());
        if delta.partial_cmp(&0.0) != diff.partial_cmp(&0.0) {
            mismatches += 1;
        }
        if rng.random_bool(0.5) {
            k = swapped;
        }
    }
    verdict(
        mismatches == 0,
        format!("{trials} swaps, {mismatches} sign mismatches, smallest |dF| {smallest:.2e}"),
    )
}

fn mstep_stationarity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_resid: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    let mut worst_pi: f64 = 0.0;
    for inst in 0..20u64 {
        let d = rng.random_range(2..=8);
        let h = rng.random_range(1..=3usize).min(d);
        let c = 3;
        let truth = common::random_params(&mut rng, c, d, h);
        let (data, _) = vmfa_core::synth::sample_dataset(&truth, 80, 500 + inst).unwrap();
        let old = common::random_params(&mut rng, c, d, h);
        let caches = build_caches(&old).unwrap();
        let mut state = init_varstate(data.n(), c, 2, c, &[], &mut rng).unwrap();
        let out = variational_e_step(
            &old,
            &caches,
            &data,
            &mut state,
            inst,
            DistanceMode::Kl,
            &Counter::new(),
        )
        .unwrap();
        let stats = accumulate_suffstats(&old, &caches, &data, state.k_table(), &out.q, 2).unwrap();
        let floor = VarianceFloor::uniform(d, 1e-12);
        let new = update_params(&old, &stats, &floor).unwrap().params;

        let hp = h + 1;
        let mut a_hat = Vec::new();
        let mut inv_var = Vec::new();
        for cc in 0..c {
            let mut a = vec![0.0; d * hp];
            for k in 0..d {
                a[k * hp..k * hp + h].copy_from_slice(&new.loading(cc)[k * h..(k + 1) * h]);
                a[k * hp + h] = new.mean(cc)[k];
            }
            a_hat.push(a);
            inv_var.push(new.noise(cc).iter().map(|v| 1.0 / v).collect::<Vec<f64>>());
        }

        for (cc, st) in stats.components.iter().enumerate() {
            let a = &a_hat[cc];
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for k in 0..d {
                for j in 0..hp {
                    let ae: f64 = (0..hp).map(|i| a[k * hp + i] * st.e[i * hp + j]).sum();
                    num += (st.y[k * hp + j] - ae).powi(2);
                    den += st.y[k * hp + j].powi(2);
                }
            }
            worst_resid = worst_resid.max(num.sqrt() / den.sqrt());
            let total = stats.total_count();
            worst_pi = worst_pi.max((st.count / new.pi[cc] - total).abs() / total);
        }

        let resp: Vec<Vec<(u32, f64)>> = (0..data.n())
            .map(|n| {
                state
                    .k_set(n)
                    .iter()
                    .zip(&out.q[n * 2..n * 2 + 2])
                    .map(|(&k, &q)| (k, q))
                    .collect()
            })
            .collect();
        let f = |a: &[Vec<f64>], iv: &[Vec<f64>]| {
            common::naive_expected_loglik(&old, &data, &resp, &new.pi, a, iv)
        };
        for cc in 0..c {
            let scale = stats.components[cc].count.max(1.0);
            for i in 0..d * hp {
                let theta = a_hat[cc][i];
                let step = 1e-5 * theta.abs().max(1.0);
                let mut plus = a_hat.clone();
                plus[cc][i] += step;
                let mut minus = a_hat.clone();
                minus[cc][i] -= step;
                let g = (f(&plus, &inv_var) - f(&minus, &inv_var)) / (2.0 * step);
                worst_grad = worst_grad.max(g.abs() * theta.abs().max(1.0) / scale);
            }
            for k in 0..d {
                let theta = inv_var[cc][k];
                let step = 1e-5 * theta.abs().max(1.0);
                let mut plus = inv_var.clone();
                plus[cc][k] += step;
                let mut minus = inv_var.clone();
                minus[cc][k] -= step;
                let g = (f(&a_hat, &plus) - f(&a_hat, &minus)) / (2.0 * step);
                worst_grad = worst_grad.max(g.abs() * theta.abs().max(1.0) / scale);
            }
        }
    }
    verdict(
        worst_resid <= 1e-8 && worst_grad <= 1e-4 && worst_pi <= 1e-8,
        format!(
            "20 instances, residual {worst_resid:.2e}, scaled gradient {worst_grad:.2e}, weight gradient spread {worst_pi:.2e}"
        ),
    )
}

fn joint_counting() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut problems = Vec::new();
    let mut steps = 0;
    for run in 0..8u64 {
        let (config, data) = random_config(&mut rng, 600 + run);
        let n = data.n() as u64;
        let bound = n * (config.cprime * config.gsize + 1) as u64;
        let v = train_vmfa(&config, &data, None).unwrap();
        let mut cumulative = 0;
        for r in &v.report.records {
            steps += 1;
            cumulative += r.step_joint_evals;
            if r.step_joint_evals > bound || r.joint_evals != cumulative {
                problems.push(format!("vmfa run {run} {:?} {}", r.phase, r.iteration));
            }
        }
        let cfg = TrainConfig {
            algo: Algo::Emmfa,
            max_iters: 30,
            ..config.clone()
        };
        let e = train_emmfa(&cfg, &data, None).unwrap();
        let nc = n * config.n_components as u64;
        for (t, r) in e.report.records.iter().enumerate() {
            steps += 1;
            if r.step_joint_evals != nc || r.joint_evals != (t as u64 + 1) * nc {
                problems.push(format!("emmfa run {run} iteration {}", r.iteration));
            }
        }

        // the counter matches the search spaces rebuilt independently
        let init = Initialization::new(&config, &data).unwrap();
        let mut state = init.varstate(&config, data.n()).unwrap();
        let caches = build_caches(&init.params).unwrap();
        for step in 0..3u64 {
            let key = step_key(config.seed, step);
            let before: VarState = state.clone();
            let expected: u64 = (0..data.n())
                .map(|i| {
                    let extra = draw_extra(key, i, config.n_components);
                    build_search_space(&before, i, extra).len() as u64
                })
                .sum();
            let counter = Counter::new();
            variational_e_step(
                &init.params,
                &caches,
                &data,
                &mut state,
                key,
                config.distance_mode,
                &counter,
            )
            .unwrap();
            steps += 1;
            if counter.get() != expected || expected > bound {
                problems.push(format!("run {run} direct step {step}"));
            }
        }
    }
    verdict(
        problems.is_empty(),
        format!("{steps} steps checked, problems {problems:?}"),
    )
}

struct Ladder {
    result: ScalingResult,
    largest: usize,
}

fn ladder() -> &'static Ladder {
    static LADDER: OnceLock<Ladder> = OnceLock::new();
    LADDER.get_or_init(|| {
        let spec = SyntheticSpec {
            n_components: 160,
            dim: 10,
            latent: 3,
            n: 16_000,
            separation: 8.0,
            loading_scale: 1.0,
            noise_scale: 0.5,
            seed: 3,
        };
        let (sample, test) = common::train_test(&spec, 4000);
        let suite = ScalingSuiteSpec::default();
        let largest = *suite.c_list.last().unwrap();
        let result = run_scaling_suite(&suite, &sample.data, Some(&test)).unwrap();
        Ladder { result, largest }
    })
}

fn scaling() -> Verdict {
    let l = ladder();
    let av = l.result.exponent(Algo::Vmfa).unwrap();
    let ae = l.result.exponent(Algo::Emmfa).unwrap();
    let mut per_c = String::new();
    for algo in [Algo::Vmfa, Algo::Emmfa] {
        let rows: Vec<_> = l.result.rows.iter().filter(|r| r.algo == algo).collect();
        let mut cs: Vec<usize> = rows.iter().map(|r| r.n_components).collect();
        cs.dedup();
        let means: Vec<String> = cs
            .iter()
            .map(|&c| {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.n_components == c)
                    .map(|r| r.joints_per_point)
                    .collect();
                format!("{c}:{:.0}", v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        per_c.push_str(&format!(" {} [{}]", algo.name(), means.join(" ")));
    }
    verdict(
        av < ae - 0.25 && av < 0.7,
        format!("exponent vmfa {av:.3}, emmfa {ae:.3}; joints/point{per_c}"),
    )
}

fn correlated_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_components: 20,
        dim: 10,
        latent: 3,
        n: 4000,
        separation: 2.5,
        loading_scale: 1.5,
        noise_scale: 0.2,
        seed,
    }
}

fn quality_parity() -> Verdict {
    let l = ladder();
    let rel: Vec<f64> = l
        .result
        .rows
        .iter()
        .filter(|r| r.algo == Algo::Vmfa && r.n_components == l.largest)
        .map(|r| r.rel_nll)
        .collect();
    let parity = !rel.is_empty() && rel.iter().all(|r| r.abs() <= 0.01);

    let (sample, test) = common::train_test(&correlated_spec(8), 2000);
    let config = TrainConfig {
        n_components: 20,
        latent_dim: 3,
        cprime: 3,
        gsize: 15,
        seed: 8,
        ..TrainConfig::default()
    };
    let v = train_vmfa(&config, &sample.data, Some(&test)).unwrap();
    let k = train_kmeansfa(
        &TrainConfig {
            algo: Algo::Kmeansfa,
            ..config
        },
        &sample.data,
        Some(&test),
    )
    .unwrap();
    let nv = v.report.summary.nll_test.unwrap();
    let nk = k.report.summary.nll_test.unwrap();
    let rels: Vec<String> = rel.iter().map(|r| format!("{r:.4}")).collect();
    verdict(
        parity && nk >= nv,
        format!(
            "relative test NLL at C={} [{}]; test NLL kmeans+FA {nk:.4} vs vmfa {nv:.4}",
            l.largest,
            rels.join(", ")
        ),
    )
}

fn kl_fidelity() -> Verdict {
    let spec = SyntheticSpec {
        n_components: 10,
        dim: 6,
        latent: 2,
        n: 3000,
        separation: 6.0,
        seed: 9,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap().data;
    let config = TrainConfig {
        n_components: 10,
        latent_dim: 2,
        cprime: 3,
        gsize: 5,
        epsilon: 1e-5,
        seed: 9,
        ..TrainConfig::default()
    };
    let out = train_vmfa(&config, &data, None).unwrap();
    let converged = out.report.summary.converged;
    let params = out.params;
    let caches = build_caches(&params).unwrap();
    let mut state = out.state.unwrap();
    let step = variational_e_step(
        &params,
        &caches,
        &data,
        &mut state,
        step_key(9, 1 << 40),
        DistanceMode::Kl,
        &Counter::new(),
    )
    .unwrap();
    let (mut est, mut exact) = (Vec::new(), Vec::new());
    for (c, map) in step.accumulator.maps.iter().enumerate() {
        for (&other, &(s, k)) in map {
            if params.is_active(c) && params.is_active(other as usize) {
                est.push(s / k as f64);
                exact.push(common::gaussian_kl(&params, c, other as usize));
            }
        }
    }
    let rho = common::spearman(&est, &exact);

    // kl against euclid neighborhoods, averaged over three training seeds
    let (sample, _) = common::train_test(&correlated_spec(10), 1);
    let mut sums = [0.0; 2];
    for seed in 0..3u64 {
        for (i, mode) in [DistanceMode::Kl, DistanceMode::Euclid]
            .into_iter()
            .enumerate()
        {
            let cfg = TrainConfig {
                n_components: 20,
                latent_dim: 3,
                cprime: 3,
                gsize: 5,
                seed: 100 + seed,
                distance_mode: mode,
                ..TrainConfig::default()
            };
            sums[i] += train_vmfa(&cfg, &sample.data, None)
                .unwrap()
                .report
                .summary
                .nll_train
                / 3.0;
        }
    }
    let [kl, eu] = sums;
    verdict(
        converged && rho >= 0.9 && kl <= eu + 1e-3 * eu.abs(),
        format!(
            "spearman {rho:.3} over {} pairs (converged {converged}); mean NLL kl {kl:.4} vs euclid {eu:.4}",
            est.len()
        ),
    )
}

/// Exact probability of each `(first, second)` center pair for two centers
/// on one-dimensional points with a chain of `m` steps.
fn exact_pair_probabilities(points: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut out = vec![vec![0.0; n]; n];
    for f in 0..n {
        let d: Vec<f64> = points.iter().map(|x| (x - points[f]).powi(2)).collect();
        let total: f64 = d.iter().sum();
        let q: Vec<f64> = d.iter().map(|v| 0.5 * v / total + 0.5 / n as f64).collect();
        let mut p = vec![vec![0.0; n]; n];
        for x in 0..n {
            for y in 0..n {
                if y == x || d[y] == 0.0 {
                    continue;
                }
                p[x][y] = if d[x] > 0.0 {
                    q[y] * (d[y] * q[x] / (d[x] * q[y])).min(1.0)
                } else {
                    q[y]
                };
            }
            p[x][x] = 1.0 - p[x].iter().sum::<f64>();
        }
        let mut dist = q.clone();
        for _ in 1..m {
            dist = (0..n)
                .map(|y| (0..n).map(|x| dist[x] * p[x][y]).sum())
                .collect();
        }
        let positive: f64 = (0..n).filter(|&y| d[y] > 0.0).map(|y| q[y]).sum();
        for y in 0..n {
            if d[y] > 0.0 {
                out[f][y] = (dist[y] + dist[f] * q[y] / positive) / n as f64;
            }
        }
    }
    out
}

fn seeding() -> Verdict {
    let points = [0.0, 1.0, 2.0, 100.0];
    let data = Dataset::from_rows(&points.map(|v| [v as f32])).unwrap();
    let m = 3;
    let exact = exact_pair_probabilities(&points, m);
    let trials = 10_000;
    let mut counts = vec![vec![0usize; 4]; 4];
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(step_key(10, t));
        let s = afkmc2_seed(&data, 2, m, &mut rng, &Counter::new()).unwrap();
        counts[s[0]][s[1]] += 1;
    }
    let mut worst_z: f64 = 0.0;
    let mut ok = true;
    for f in 0..4 {
        for y in 0..4 {
            let p = exact[f][y];
            let freq = counts[f][y] as f64 / trials as f64;
            if p == 0.0 {
                ok &= counts[f][y] == 0;
                continue;
            }
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            worst_z = worst_z.max((freq - p).abs() / se);
        }
    }
    ok &= worst_z <= 3.0;

    // distinct indices and rows on data with many duplicate rows
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut duplicates = 0;
    for run in 0..300 {
        let n = rng.random_range(10..60);
        let levels = rng.random_range(2..5);
        let rows: Vec<[f32; 2]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(0..levels) as f32,
                    rng.random_range(0..levels) as f32,
                ]
            })
            .collect();
        let ds = Dataset::from_rows(&rows).unwrap();
        let mut distinct = rows.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let c = rng.random_range(1..=distinct.len());
        let mut crng = ChaCha8Rng::seed_from_u64(run);
        let s = afkmc2_seed(&ds, c, 5, &mut crng, &Counter::new()).unwrap();
        let mut idx = s.clone();
        idx.sort_unstable();
        idx.dedup();
        let mut chosen: Vec<[f32; 2]> = s.iter().map(|&i| rows[i]).collect();
        chosen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        chosen.dedup();
        if idx.len() != c || chosen.len() != c {
            duplicates += 1;
        }
    }
    ok &= duplicates == 0;
    verdict(
        ok,
        format!("max |z| {worst_z:.2} over {trials} trials; {duplicates} of 300 runs with repeated centers"),
    )
}

fn bits(p: &MfaParams) -> Vec<u64> {
    p.pi.iter()
        .chain(&p.mu)
        .chain(&p.lambda)
        .chain(&p.dnoise)
        .map(|v| v.to_bits())
        .collect()
}

fn serialization() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n: 500,
        ..SyntheticSpec::default()
    };
    let sample = gen_synthetic(&spec).unwrap();
    let mut ok = true;

    let dpath = dir.path().join("data.mfad");
    save_dataset(&sample.data, &dpath).unwrap();
    let back = load_dataset(&dpath).unwrap();
    let same_values = back
        .values()
        .iter()
        .zip(sample.data.values())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ok &= back.n() == sample.data.n() && back.dim() == sample.data.dim() && same_values;
    let dpath2 = dir.path().join("again.mfad");
    save_dataset(&back, &dpath2).unwrap();
    let bytes = std::fs::read(&dpath).unwrap();
    ok &= bytes == std::fs::read(&dpath2).unwrap();
    ok &= bytes.len() == DATASET_HEADER_LEN + 4 * 500 * spec.dim;

    let config = TrainConfig {
        n_components: 5,
        latent_dim: 2,
        cprime: 2,
        gsize: 3,
        max_iters: 5,
        ..TrainConfig::default()
    };
    let params = train_vmfa(&config, &sample.data, None).unwrap().params;
    let cpath = dir.path().join("model.mfam");
    save_checkpoint(&params, &cpath).unwrap();
    let loaded = load_checkpoint(&cpath).unwrap();
    ok &= bits(&loaded) == bits(&params);
    let ll = |p: &MfaParams| {
        exact_log_likelihood(p, &build_caches(p).unwrap(), &sample.data, &Counter::new())
    };
    let (a, b) = (ll(&params), ll(&loaded));
    ok &= a.to_bits() == b.to_bits();
    let file_len = std::fs::metadata(&cpath).unwrap().len() as u128;
    let scalars = stored_scalar_count(5, spec.dim as u64, 2);
    ok &= file_len == CHECKPOINT_HEADER_LEN as u128 + 8 * scalars;

    let big = trainable_parameter_count(500_000, 3072, 5);
    ok &= big == 10_752_499_999 && big > 10_000_000_000;
    for (c, d, h) in [(1u64, 1u64, 1u64), (3, 7, 2), (160, 10, 3)] {
        let by_parts = (c - 1) + c * d + c * d * h + c * d;
        ok &= trainable_parameter_count(c, d, h) == by_parts as u128;
        ok &= stored_scalar_count(c, d, h) == by_parts as u128 + 1;
    }
    verdict(
        ok,
        format!("round trips bit-exact, log-likelihood {a}, count {big}"),
    )
}

fn stripped_json(out: &TrainOutcome, drop: &[&str]) -> Vec<Value> {
    out.report
        .to_json_lines()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            let obj = v.as_object_mut().unwrap();
            for k in drop {
                obj.remove(*k);
            }
            v
        })
        .collect()
}

fn determinism() -> Verdict {
    let spec = SyntheticSpec {
        n_components: 8,
        n: 2000,
        seed: 12,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap().data;
    let config = TrainConfig {
        n_components: 8,
        latent_dim: 2,
        cprime: 3,
        gsize: 5,
        seed: 12,
        deterministic: true,
        eval_nll_every: 2,
        ..TrainConfig::default()
    };
    let a = train_vmfa(&config, &data, None).unwrap();
    let b = train_vmfa(&config, &data, None).unwrap();
    let same = |x: &TrainOutcome, y: &TrainOutcome, drop: &[&str]| {
        bits(&x.params) == bits(&y.params)
            && x.state == y.state
            && stripped_json(x, drop) == stripped_json(y, drop)
    };
    let repeat = same(&a, &b, &["wall_ms"]);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap();
    let c = pool.install(|| train_vmfa(&config, &data, None).unwrap());
    let threads = same(&a, &c, &["wall_ms", "threads"]);
    verdict(
        repeat && threads,
        format!(
            "{} iterations; identical repeat {repeat}, identical with 3 threads {threads}",
            a.report.summary.total_iterations
        ),
    )
}
