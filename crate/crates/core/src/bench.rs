//! Experiment harness: scaling with the number of components and quality
//! against exact EM, written out as tidy CSV.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{MfaError, Result};
use crate::init::step_key;
use crate::trainer::{
    train_emmfa, train_emmfa_matched, train_kmeansfa, train_vmfa, Algo, TrainConfig, TrainOutcome,
};

/// Least-squares fit of `y = b x^a` on the log-log scale; returns `(a, b)`.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(MfaError::InvalidConfig(
            "power-law fit needs at least two points".into(),
        ));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(MfaError::InvalidConfig(
            "power-law fit needs positive values".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(MfaError::InvalidConfig(
            "power-law fit needs distinct x values".into(),
        ));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let a = sxy / sxx;
    Ok((a, (my - a * mx).exp()))
}

/// `(NLL_algo - NLL_ref) / NLL_ref`.
pub fn relative_nll(nll_algo: f64, nll_ref: f64) -> f64 {
    (nll_algo - nll_ref) / nll_ref
}

/// One result row of a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n_components: usize,
    pub algo: Algo,
    pub cprime: usize,
    pub gsize: usize,
    pub repeat: usize,
    pub n_points: usize,
    /// Joint evaluations until convergence (warm-up included) per point.
    pub joints_per_point: f64,
    /// Iterations including warm-up.
    pub iterations: usize,
    pub wall_ms: f64,
    pub nll_train: f64,
    pub nll_test: Option<f64>,
    /// Relative NLL against exact EM from the same initialization.
    pub rel_nll: f64,
    /// Exact-EM wall time divided by this row's wall time.
    pub speedup: Option<f64>,
}

impl BenchRow {
    fn from_outcome(out: &TrainOutcome, repeat: usize) -> Self {
        let s = &out.report.summary;
        Self {
            n_components: s.n_components,
            algo: s.algo,
            cprime: s.cprime,
            gsize: s.gsize,
            repeat,
            n_points: s.n_points,
            joints_per_point: s.joint_evals as f64 / s.n_points as f64,
            iterations: s.total_iterations,
            wall_ms: s.wall_ms,
            nll_train: s.nll_train,
            nll_test: s.nll_test,
            rel_nll: 0.0,
            speedup: None,
        }
    }

    /// Test NLL when available, otherwise training NLL.
    pub fn quality(&self) -> f64 {
        self.nll_test.unwrap_or(self.nll_train)
    }
}

pub const CSV_HEADER: &str =
    "C,algo,cprime,gsize,joints_per_point,iterations,wall_ms,nll_train,nll_test,rel_nll";

/// Writes rows as CSV. `with_speedup` appends a `speedup` column.
pub fn write_csv<W: Write>(rows: &[BenchRow], mut w: W, with_speedup: bool) -> std::io::Result<()> {
    write!(w, "{CSV_HEADER}")?;
    if with_speedup {
        write!(w, ",speedup")?;
    }
    writeln!(w)?;
    for r in rows {
        let test = r.nll_test.map(|v| v.to_string()).unwrap_or_default();
        write!(
            w,
            "{},{},{},{},{},{},{:.3},{},{},{}",
            r.n_components,
            r.algo.name(),
            r.cprime,
            r.gsize,
            r.joints_per_point,
            r.iterations,
            r.wall_ms,
            r.nll_train,
            test,
            r.rel_nll
        )?;
        if with_speedup {
            let s = r.speedup.map(|v| v.to_string()).unwrap_or_default();
            write!(w, ",{s}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ScalingSuiteSpec {
    /// Ascending component counts.
    pub c_list: Vec<usize>,
    /// Points used for the largest component count; smaller counts use a
    /// uniform subsample of `N_total * C / C_max` points.
    pub n_total: usize,
    pub repeats: usize,
    pub latent: usize,
    pub cprime: usize,
    pub gsize: usize,
    pub epsilon: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Also run exact EM stopped at the variational run's test NLL.
    pub quality_matched: bool,
    /// Independent runs executed concurrently; more than one contaminates
    /// wall-clock timings.
    pub parallel_jobs: usize,
}

impl Default for ScalingSuiteSpec {
    fn default() -> Self {
        Self {
            c_list: vec![20, 40, 80, 160],
            n_total: 16_000,
            repeats: 5,
            latent: 3,
            cprime: 3,
            gsize: 15,
            epsilon: 1e-4,
            max_iters: 1000,
            seed: 0,
            quality_matched: false,
            parallel_jobs: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScalingResult {
    pub rows: Vec<BenchRow>,
    /// Fitted exponents of joints per point against C, per algorithm.
    pub exponents: Vec<(Algo, f64)>,
    pub timing_contaminated: bool,
    pub threads: usize,
}

impl ScalingResult {
    pub fn exponent(&self, algo: Algo) -> Option<f64> {
        self.exponents
            .iter()
            .find(|(a, _)| *a == algo)
            .map(|&(_, e)| e)
    }
}

fn scaling_job(
    spec: &ScalingSuiteSpec,
    data: &Dataset,
    test: Option<&Dataset>,
    c: usize,
    repeat: usize,
) -> Result<Vec<BenchRow>> {
    let c_max = *spec.c_list.last().expect("non-empty ladder");
    let n_sub = ((spec.n_total as u128 * c as u128) / c_max as u128) as usize;
    let job_seed = step_key(spec.seed, (repeat as u64) << 32 | c as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(job_seed);
    let mut picks = index::sample(&mut rng, data.n().min(spec.n_total), n_sub).into_vec();
    picks.sort_unstable();
    let sub = data.select(&picks)?;
    let config = TrainConfig {
        algo: Algo::Vmfa,
        n_components: c,
        latent_dim: spec.latent,
        cprime: spec.cprime.min(c),
        gsize: spec.gsize.min(c),
        epsilon: spec.epsilon,
        warmup_epsilon: spec.epsilon,
        max_iters: spec.max_iters,
        seed: job_seed,
        deterministic: true,
        ..TrainConfig::default()
    };
    let v = train_vmfa(&config, &sub, test)?;
    let em = train_emmfa(
        &TrainConfig {
            algo: Algo::Emmfa,
            ..config.clone()
        },
        &sub,
        test,
    )?;
    let mut rows = vec![
        BenchRow::from_outcome(&v, repeat),
        BenchRow::from_outcome(&em, repeat),
    ];
    let reference = rows[1].quality();
    rows[0].rel_nll = relative_nll(rows[0].quality(), reference);
    if spec.quality_matched {
        let monitor = test.unwrap_or(&sub);
        let target = v
            .report
            .summary
            .nll_test
            .unwrap_or(v.report.summary.nll_train);
        let m = train_emmfa_matched(
            &TrainConfig {
                algo: Algo::EmmfaMatched,
                ..config
            },
            &sub,
            monitor,
            target,
        )?;
        let mut row = BenchRow::from_outcome(&m, repeat);
        row.rel_nll = relative_nll(row.quality(), reference);
        rows.push(row);
    }
    Ok(rows)
}

/// For every component count and repeat, trains the variational and exact
/// algorithms from the same initialization on a subsample keeping `N / C`
/// constant, then fits the scaling exponent of joints per point.
pub fn run_scaling_suite(
    spec: &ScalingSuiteSpec,
    data: &Dataset,
    test: Option<&Dataset>,
) -> Result<ScalingResult> {
    if spec.c_list.is_empty() || spec.repeats == 0 {
        return Err(MfaError::InvalidConfig(
            "need a non-empty ladder and repeats >= 1".into(),
        ));
    }
    if spec.c_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MfaError::InvalidConfig(
            "component counts must be ascending".into(),
        ));
    }
    if data.n() < spec.n_total {
        return Err(MfaError::InvalidConfig(format!(
            "dataset has {} points, the suite needs {}",
            data.n(),
            spec.n_total
        )));
    }
    let jobs: Vec<(usize, usize)> = spec
        .c_list
        .iter()
        .flat_map(|&c| (0..spec.repeats).map(move |r| (c, r)))
        .collect();
    let run = |&(c, r): &(usize, usize)| scaling_job(spec, data, test, c, r);
    let nested: Vec<Vec<BenchRow>> = if spec.parallel_jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.parallel_jobs)
            .build()
            .map_err(|e| MfaError::InvalidConfig(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let rows: Vec<BenchRow> = nested.into_iter().flatten().collect();

    let mut exponents = Vec::new();
    for algo in [Algo::Vmfa, Algo::Emmfa, Algo::EmmfaMatched] {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.algo == algo)
            .map(|r| (r.n_components as f64, r.joints_per_point))
            .unzip();
        if xs.len() >= 2 && spec.c_list.len() >= 2 {
            exponents.push((algo, fit_power_law(&xs, &ys)?.0));
        }
    }
    Ok(ScalingResult {
        rows,
        exponents,
        timing_contaminated: spec.parallel_jobs > 1,
        threads: rayon::current_num_threads(),
    })
}

#[derive(Debug, Clone)]
pub struct QualitySuiteSpec {
    pub n_components: usize,
    pub latent: usize,
    /// `(C', G)` combinations for the variational runs.
    pub grid: Vec<(usize, usize)>,
    pub epsilon: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub include_kmeansfa: bool,
}

impl Default for QualitySuiteSpec {
    fn default() -> Self {
        let grid = [3, 5, 7]
            .iter()
            .flat_map(|&c| [5, 15, 30].map(move |g| (c, g)))
            .collect();
        Self {
            n_components: 100,
            latent: 3,
            grid,
            epsilon: 1e-4,
            max_iters: 1000,
            seed: 0,
            include_kmeansfa: true,
        }
    }
}

/// Exact EM as reference, every `(C', G)` of the grid and optionally the
/// k-means + FA baseline, all from the same seeds. Relative NLL and speed-up
/// are measured against the exact run.
pub fn run_quality_suite(
    spec: &QualitySuiteSpec,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<Vec<BenchRow>> {
    let base = TrainConfig {
        n_components: spec.n_components,
        latent_dim: spec.latent,
        epsilon: spec.epsilon,
        warmup_epsilon: spec.epsilon,
        max_iters: spec.max_iters,
        seed: spec.seed,
        deterministic: true,
        ..TrainConfig::default()
    };
    let em = train_emmfa(
        &TrainConfig {
            algo: Algo::Emmfa,
            ..base.clone()
        },
        train,
        test,
    )?;
    let mut reference = BenchRow::from_outcome(&em, 0);
    reference.speedup = Some(1.0);
    let (ref_q, ref_ms) = (reference.quality(), reference.wall_ms);
    let mut rows = vec![reference];
    for &(cprime, gsize) in &spec.grid {
        let cfg = TrainConfig {
            algo: Algo::Vmfa,
            cprime: cprime.min(spec.n_components),
            gsize: gsize.min(spec.n_components),
            ..base.clone()
        };
        let v = train_vmfa(&cfg, train, test)?;
        let mut row = BenchRow::from_outcome(&v, 0);
        row.rel_nll = relative_nll(row.quality(), ref_q);
        row.speedup = Some(ref_ms / row.wall_ms.max(1e-9));
        rows.push(row);
    }
    if spec.include_kmeansfa {
        let k = train_kmeansfa(
            &TrainConfig {
                algo: Algo::Kmeansfa,
                ..base
            },
            train,
            test,
        )?;
        let mut row = BenchRow::from_outcome(&k, 0);
        row.rel_nll = relative_nll(row.quality(), ref_q);
        row.speedup = Some(ref_ms / row.wall_ms.max(1e-9));
        rows.push(row);
    }
    Ok(rows)
}
