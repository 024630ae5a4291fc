//! Training loops: truncated variational EM, exact EM, exact EM stopped at a
//! target quality, and the k-means + FA baseline, with per-iteration metrics.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{fit_fa_per_cluster, kmeans_lloyd, FaFitConfig};
use crate::dataset::Dataset;
use crate::error::{MfaError, Result};
use crate::estep::{full_e_step, variational_e_step, DistanceMode, VarState};
use crate::init::{
    afkmc2_seed, check_convergence, init_params, init_varstate, random_points_seed, step_key,
    warmup, InitMethod, WarmupSettings,
};
use crate::model::{
    build_caches, nll_per_point, truncated_free_energy, ComponentCache, Counter, MfaParams,
    VarianceFloor,
};
use crate::mstep::{accumulate_suffstats, update_params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Vmfa,
    Emmfa,
    EmmfaMatched,
    Kmeansfa,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Vmfa => "vmfa",
            Algo::Emmfa => "emmfa",
            Algo::EmmfaMatched => "emmfa-matched",
            Algo::Kmeansfa => "kmeansfa",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub algo: Algo,
    pub n_components: usize,
    pub latent_dim: usize,
    pub cprime: usize,
    pub gsize: usize,
    pub epsilon: f64,
    pub warmup_epsilon: f64,
    pub max_iters: usize,
    pub warmup_max_iters: usize,
    pub distance_mode: DistanceMode,
    /// Recorded in the report. Every reduction runs in a fixed order, so runs
    /// are reproducible regardless of this flag.
    pub deterministic: bool,
    pub seed: u64,
    /// Exact NLL is evaluated every this many main iterations; 0 means only
    /// at the end.
    pub eval_nll_every: usize,
    pub init: InitMethod,
    pub chain_length: usize,
    /// Use the signed relative change in the stopping rule.
    pub literal_convergence: bool,
    /// Initial loadings are drawn from `[0, lambda_scale)`.
    pub lambda_scale: f64,
    /// Target test NLL for the quality-matched exact EM.
    pub target_nll: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Vmfa,
            n_components: 10,
            latent_dim: 2,
            cprime: 3,
            gsize: 15,
            epsilon: 1e-4,
            warmup_epsilon: 1e-4,
            max_iters: 1000,
            warmup_max_iters: 1000,
            distance_mode: DistanceMode::Kl,
            deterministic: false,
            seed: 0,
            eval_nll_every: 0,
            init: InitMethod::Afkmc2,
            chain_length: 10,
            literal_convergence: false,
            lambda_scale: 1.0,
            target_nll: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let c = self.n_components;
        let bad = |m: String| Err(MfaError::InvalidConfig(m));
        if c == 0 || c > data.n() {
            return bad(format!("need 1 <= C <= N, got C={c}, N={}", data.n()));
        }
        if self.latent_dim == 0 || self.latent_dim > data.dim() {
            return bad(format!(
                "need 1 <= H <= D, got H={}, D={}",
                self.latent_dim,
                data.dim()
            ));
        }
        if !(self.epsilon > 0.0) || !(self.warmup_epsilon > 0.0) {
            return bad("convergence thresholds must be > 0".into());
        }
        if self.chain_length == 0 {
            return bad("chain length must be >= 1".into());
        }
        if self.algo == Algo::Vmfa {
            if self.cprime == 0 || self.cprime > c {
                return bad(format!("need 1 <= C' <= C, got C'={}", self.cprime));
            }
            if self.gsize == 0 || self.gsize > c {
                return bad(format!("need 1 <= G <= C, got G={}", self.gsize));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Main,
}

/// Metrics of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub phase: Phase,
    /// 1-based within the phase.
    pub iteration: usize,
    /// Free energy after the iteration (log-likelihood for exact EM).
    pub free_energy: f64,
    /// Free energy right after the E-step of a main iteration.
    pub free_energy_estep: Option<f64>,
    /// Cumulative joint evaluations.
    pub joint_evals: u64,
    pub step_joint_evals: u64,
    /// Distance evaluations spent on seeding (and clustering for k-means).
    pub distance_evals: u64,
    pub wall_ms: f64,
    pub empty_components: usize,
    pub nll_train: Option<f64>,
    pub nll_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub algo: Algo,
    pub n_points: usize,
    pub n_components: usize,
    pub latent_dim: usize,
    pub cprime: usize,
    pub gsize: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub threads: usize,
    pub warmup_iterations: usize,
    pub iterations: usize,
    pub total_iterations: usize,
    pub converged: bool,
    pub free_energy: f64,
    pub joint_evals: u64,
    pub distance_evals: u64,
    pub wall_ms: f64,
    pub empty_components: usize,
    pub nll_train: f64,
    pub nll_test: Option<f64>,
    /// Quality-matched exact EM: whether the target was surpassed.
    pub target_reached: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    pub summary: TrainSummary,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line<'a> {
    Iteration(&'a IterationRecord),
    Summary(&'a TrainSummary),
}

impl TrainReport {
    /// One JSON object per iteration followed by the summary object.
    pub fn write_json_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, &Line::Iteration(r))?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &Line::Summary(&self.summary))?;
        w.write_all(b"\n")
    }

    pub fn to_json_lines(&self) -> String {
        let mut buf = Vec::new();
        self.write_json_lines(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn main_records(&self) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Main)
    }
}

/// Seeds, initial parameters and initial variational state. Both exact and
/// variational training start from the same values for a given seed.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub seeds: Vec<usize>,
    pub params: MfaParams,
    pub floor: VarianceFloor,
    pub distance_evals: u64,
    rng: ChaCha8Rng,
}

impl Initialization {
    pub fn new(config: &TrainConfig, data: &Dataset) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let counter = Counter::new();
        let seeds = match config.init {
            InitMethod::Afkmc2 => afkmc2_seed(
                data,
                config.n_components,
                config.chain_length,
                &mut rng,
                &counter,
            )?,
            InitMethod::RandomPoints => random_points_seed(data, config.n_components, &mut rng)?,
        };
        let floor = VarianceFloor::from_data(data);
        let params = init_params(
            data,
            config.latent_dim,
            &seeds,
            &floor,
            config.lambda_scale,
            &mut rng,
        )?;
        Ok(Self {
            seeds,
            params,
            floor,
            distance_evals: counter.get(),
            rng,
        })
    }

    /// Initial truncation and neighborhood sets.
    pub fn varstate(&self, config: &TrainConfig, n_points: usize) -> Result<VarState> {
        let mut rng = self.rng.clone();
        init_varstate(
            n_points,
            config.n_components,
            config.cprime,
            config.gsize,
            &self.seeds,
            &mut rng,
        )
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn nll_pair(
    params: &MfaParams,
    caches: &[ComponentCache],
    data: &Dataset,
    test: Option<&Dataset>,
) -> (f64, Option<f64>) {
    (
        nll_per_point(params, caches, data),
        test.map(|t| nll_per_point(params, caches, t)),
    )
}

fn wants_nll(config: &TrainConfig, t: usize) -> bool {
    config.eval_nll_every > 0 && t.is_multiple_of(config.eval_nll_every)
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MfaParams,
    /// Variational state, for truncated variational EM only.
    pub state: Option<VarState>,
    pub report: TrainReport,
}

/// Truncated variational EM: warm-up E-steps at fixed parameters, then
/// alternating E- and M-steps until the truncated free energy converges.
///
/// Reaching `max_iters` in the main loop ends training with
/// `converged = false`; exhausting the warm-up cap is an error.
pub fn train_vmfa(
    config: &TrainConfig,
    data: &Dataset,
    test: Option<&Dataset>,
) -> Result<TrainOutcome> {
    config.validate(data)?;
    let start = Instant::now();
    let init = Initialization::new(config, data)?;
    let mut state = init.varstate(config, data.n())?;
    let mut params = init.params.clone();
    let floor = init.floor.clone();
    let mut caches = build_caches(&params)?;
    let counter = Counter::new();
    let mut records = Vec::new();

    let warm = warmup(
        &params,
        &caches,
        data,
        &mut state,
        &WarmupSettings {
            epsilon: config.warmup_epsilon,
            literal: config.literal_convergence,
            max_iters: config.warmup_max_iters,
            mode: config.distance_mode,
            seed: config.seed,
            first_step: 0,
        },
        &counter,
    )?;
    let mut cumulative = 0;
    for (i, w) in warm.iter().enumerate() {
        cumulative += w.joint_evals;
        records.push(IterationRecord {
            phase: Phase::Warmup,
            iteration: i + 1,
            free_energy: w.free_energy,
            free_energy_estep: None,
            joint_evals: cumulative,
            step_joint_evals: w.joint_evals,
            distance_evals: init.distance_evals,
            wall_ms: w.wall_ms,
            empty_components: 0,
            nll_train: None,
            nll_test: None,
        });
    }
    let mut prev = warm.last().map(|w| w.free_energy).unwrap_or(f64::NAN);
    let mut step = warm.len() as u64;
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=config.max_iters {
        let it_start = Instant::now();
        let key = step_key(config.seed, step);
        step += 1;
        let out = variational_e_step(
            &params,
            &caches,
            data,
            &mut state,
            key,
            config.distance_mode,
            &counter,
        )?;
        let stats = accumulate_suffstats(
            &params,
            &caches,
            data,
            state.k_table(),
            &out.q,
            state.cprime(),
        )?;
        params = update_params(&params, &stats, &floor)?.params;
        caches = build_caches(&params)?;
        let wall_ms = ms_since(it_start);
        let free_energy =
            truncated_free_energy(&params, &caches, data, &state.k_lists(), &Counter::new())?;
        let (nll_train, nll_test) = if wants_nll(config, t) {
            let (a, b) = nll_pair(&params, &caches, data, test);
            (Some(a), b)
        } else {
            (None, None)
        };
        records.push(IterationRecord {
            phase: Phase::Main,
            iteration: t,
            free_energy,
            free_energy_estep: Some(out.free_energy),
            joint_evals: counter.get(),
            step_joint_evals: out.joint_evals,
            distance_evals: init.distance_evals,
            wall_ms,
            empty_components: params.empty_components(),
            nll_train,
            nll_test,
        });
        iterations = t;
        log::debug!("vmfa iteration {t}: F = {free_energy}");
        if check_convergence(
            prev,
            free_energy,
            config.epsilon,
            config.literal_convergence,
        ) {
            converged = true;
            break;
        }
        prev = free_energy;
    }
    if !converged {
        log::warn!(
            "v-MFA stopped at the iteration cap ({}) before converging",
            config.max_iters
        );
    }

    let wall_ms = ms_since(start);
    let (nll_train, nll_test) = nll_pair(&params, &caches, data, test);
    let free_energy = records.last().map(|r| r.free_energy).unwrap_or(prev);
    let summary = TrainSummary {
        algo: Algo::Vmfa,
        n_points: data.n(),
        n_components: config.n_components,
        latent_dim: config.latent_dim,
        cprime: config.cprime,
        gsize: config.gsize,
        seed: config.seed,
        deterministic: config.deterministic,
        threads: rayon::current_num_threads(),
        warmup_iterations: warm.len(),
        iterations,
        total_iterations: warm.len() + iterations,
        converged,
        free_energy,
        joint_evals: counter.get(),
        distance_evals: init.distance_evals,
        wall_ms,
        empty_components: params.empty_components(),
        nll_train,
        nll_test,
        target_reached: None,
    };
    Ok(TrainOutcome {
        params,
        state: Some(state),
        report: TrainReport { records, summary },
    })
}

/// Exact EM with full posteriors. Each iteration counts exactly `N * C`
/// joint evaluations: the likelihood pass after an M-step doubles as the
/// E-step of the next iteration.
pub fn train_emmfa(
    config: &TrainConfig,
    data: &Dataset,
    test: Option<&Dataset>,
) -> Result<TrainOutcome> {
    run_exact_em(config, data, test, None)
}

/// Exact EM that watches the test NLL after every iteration and, on first
/// falling below `target_nll`, returns the parameters of the previous
/// iteration. Converging normally first returns the converged parameters.
pub fn train_emmfa_matched(
    config: &TrainConfig,
    data: &Dataset,
    test: &Dataset,
    target_nll: f64,
) -> Result<TrainOutcome> {
    run_exact_em(config, data, Some(test), Some(target_nll))
}

fn run_exact_em(
    config: &TrainConfig,
    data: &Dataset,
    test: Option<&Dataset>,
    target: Option<f64>,
) -> Result<TrainOutcome> {
    config.validate(data)?;
    let start = Instant::now();
    let init = Initialization::new(config, data)?;
    let floor = init.floor.clone();
    let mut params = init.params.clone();
    let mut caches = build_caches(&params)?;
    let counter = Counter::new();
    let (n, c) = (data.n(), config.n_components);
    let k_table: Vec<u32> = (0..n).flat_map(|_| 0..c as u32).collect();

    let (mut q, mut loglik) = full_e_step(&params, &caches, data, &counter);
    let mut records = Vec::new();
    let mut converged = false;
    let mut reached = false;
    let mut iterations = 0;

    for t in 1..=config.max_iters {
        let it_start = Instant::now();
        if t > 1 {
            counter.add((n * c) as u64);
        }
        let stats = accumulate_suffstats(&params, &caches, data, &k_table, &q, c)?;
        let next = update_params(&params, &stats, &floor)?.params;
        let next_caches = build_caches(&next)?;
        let (q_next, ll_next) = full_e_step(&next, &next_caches, data, &Counter::new());
        let wall_ms = ms_since(it_start);

        let (mut nll_train, mut nll_test) = (None, None);
        if target.is_some() || wants_nll(config, t) {
            let (a, b) = nll_pair(&next, &next_caches, data, test);
            nll_train = Some(a);
            nll_test = b;
        }
        records.push(IterationRecord {
            phase: Phase::Main,
            iteration: t,
            free_energy: ll_next,
            free_energy_estep: Some(loglik),
            joint_evals: counter.get(),
            step_joint_evals: (n * c) as u64,
            distance_evals: init.distance_evals,
            wall_ms,
            empty_components: next.empty_components(),
            nll_train,
            nll_test,
        });
        iterations = t;
        let prev_ll = loglik;
        let previous = std::mem::replace(&mut params, next);
        let previous_caches = std::mem::replace(&mut caches, next_caches);
        q = q_next;
        loglik = ll_next;

        if let (Some(goal), Some(nll)) = (target, nll_test) {
            if nll < goal {
                params = previous;
                caches = previous_caches;
                loglik = prev_ll;
                reached = true;
                break;
            }
        }
        if check_convergence(prev_ll, loglik, config.epsilon, config.literal_convergence) {
            converged = true;
            break;
        }
    }
    if target.is_some() && !reached && !converged {
        let best = records
            .iter()
            .filter_map(|r| r.nll_test)
            .fold(f64::INFINITY, f64::min);
        return Err(MfaError::TargetUnreachable {
            target: target.unwrap_or(f64::NAN),
            best,
            iterations,
        });
    }

    let wall_ms = ms_since(start);
    let (nll_train, nll_test) = nll_pair(&params, &caches, data, test);
    let summary = TrainSummary {
        algo: if target.is_some() {
            Algo::EmmfaMatched
        } else {
            Algo::Emmfa
        },
        n_points: n,
        n_components: c,
        latent_dim: config.latent_dim,
        cprime: c,
        gsize: c,
        seed: config.seed,
        deterministic: config.deterministic,
        threads: rayon::current_num_threads(),
        warmup_iterations: 0,
        iterations,
        total_iterations: iterations,
        converged,
        free_energy: loglik,
        joint_evals: counter.get(),
        distance_evals: init.distance_evals,
        wall_ms,
        empty_components: params.empty_components(),
        nll_train,
        nll_test,
        target_reached: target.map(|_| reached),
    };
    Ok(TrainOutcome {
        params,
        state: None,
        report: TrainReport { records, summary },
    })
}

/// k-means from the same seeds as the mixture trainers, then one factor
/// analyzer per cell. Distances are reported as distance evaluations; no
/// joints are counted.
pub fn train_kmeansfa(
    config: &TrainConfig,
    data: &Dataset,
    test: Option<&Dataset>,
) -> Result<TrainOutcome> {
    config.validate(data)?;
    let start = Instant::now();
    let init = Initialization::new(config, data)?;
    let counter = Counter::new();
    let (_, var) = data.mean_and_variance();
    let tol = 1e-6 * var.iter().sum::<f64>().sqrt();
    let km = kmeans_lloyd(data, &init.params.mu, config.max_iters, tol, &counter);
    let fit = fit_fa_per_cluster(
        data,
        &km,
        config.latent_dim,
        &init.floor,
        &FaFitConfig {
            seed: config.seed,
            lambda_scale: config.lambda_scale,
            ..FaFitConfig::default()
        },
    )?;
    if !fit.tiny_clusters.is_empty() {
        log::warn!(
            "{} k-means cells hold fewer than two points and got a fallback fit",
            fit.tiny_clusters.len()
        );
    }
    let params = fit.params;
    let caches = build_caches(&params)?;
    let distance_evals = init.distance_evals + counter.get();
    let records: Vec<IterationRecord> = km
        .inertia_history
        .iter()
        .enumerate()
        .map(|(i, &inertia)| IterationRecord {
            phase: Phase::Main,
            iteration: i + 1,
            free_energy: -inertia,
            free_energy_estep: None,
            joint_evals: 0,
            step_joint_evals: 0,
            distance_evals,
            wall_ms: 0.0,
            empty_components: 0,
            nll_train: None,
            nll_test: None,
        })
        .collect();
    let (nll_train, nll_test) = nll_pair(&params, &caches, data, test);
    let summary = TrainSummary {
        algo: Algo::Kmeansfa,
        n_points: data.n(),
        n_components: config.n_components,
        latent_dim: config.latent_dim,
        cprime: 1,
        gsize: 1,
        seed: config.seed,
        deterministic: config.deterministic,
        threads: rayon::current_num_threads(),
        warmup_iterations: 0,
        iterations: km.iterations,
        total_iterations: km.iterations,
        converged: km.converged,
        free_energy: -nll_train * data.n() as f64,
        joint_evals: 0,
        distance_evals,
        wall_ms: ms_since(start),
        empty_components: params.empty_components(),
        nll_train,
        nll_test,
        target_reached: None,
    };
    Ok(TrainOutcome {
        params,
        state: None,
        report: TrainReport { records, summary },
    })
}

/// Dispatches on `config.algo`. The quality-matched variant needs a test
/// set and `config.target_nll`.
pub fn train(config: &TrainConfig, data: &Dataset, test: Option<&Dataset>) -> Result<TrainOutcome> {
    match config.algo {
        Algo::Vmfa => train_vmfa(config, data, test),
        Algo::Emmfa => train_emmfa(config, data, test),
        Algo::Kmeansfa => train_kmeansfa(config, data, test),
        Algo::EmmfaMatched => {
            let test = test.ok_or_else(|| {
                MfaError::InvalidConfig("the quality-matched run needs a test set".into())
            })?;
            let target = config.target_nll.ok_or_else(|| {
                MfaError::InvalidConfig("the quality-matched run needs a target NLL".into())
            })?;
            train_emmfa_matched(config, data, test, target)
        }
    }
}
