//! `vmfa` command-line interface: training, evaluation, seeding, synthetic
//! data and the benchmark suites.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use serde_json::json;

use vmfa_core::bench::{
    run_quality_suite, run_scaling_suite, write_csv, QualitySuiteSpec, ScalingSuiteSpec,
};
use vmfa_core::init::{afkmc2_seed, random_points_seed};
use vmfa_core::io::{import_csv, load_checkpoint, load_dataset, save_checkpoint, save_dataset};
use vmfa_core::model::{build_caches, nll_per_point};
use vmfa_core::synth::{gen_synthetic, sample_dataset, SyntheticSpec};
use vmfa_core::{train, Algo, Counter, Dataset, DistanceMode, InitMethod, MfaError, TrainConfig};

#[derive(Parser)]
#[command(
    name = "vmfa",
    version,
    about = "Mixtures of factor analyzers with truncated variational EM"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Per-point negative log-likelihood of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Pick initial centers and print their row indices.
    Seed(SeedArgs),
    /// Sample a dataset from a random ground-truth mixture.
    Synth(SynthArgs),
    /// Joint evaluations against the number of components.
    BenchScaling(ScalingArgs),
    /// Quality and speed of a (C', G) grid against exact EM.
    BenchQuality(QualityArgs),
    /// Convert a numeric CSV file into the binary dataset format.
    ConvertCsv(ConvertArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Vmfa,
    Emmfa,
    EmmfaMatched,
    Kmeansfa,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Vmfa => Algo::Vmfa,
            AlgoArg::Emmfa => Algo::Emmfa,
            AlgoArg::EmmfaMatched => Algo::EmmfaMatched,
            AlgoArg::Kmeansfa => Algo::Kmeansfa,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Afkmc2,
    Random,
}

impl From<InitArg> for InitMethod {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Afkmc2 => InitMethod::Afkmc2,
            InitArg::Random => InitMethod::RandomPoints,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Kl,
    Euclid,
}

impl From<DistanceArg> for DistanceMode {
    fn from(a: DistanceArg) -> Self {
        match a {
            DistanceArg::Kl => DistanceMode::Kl,
            DistanceArg::Euclid => DistanceMode::Euclid,
        }
    }
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "vmfa")]
    algo: AlgoArg,
    /// Number of components C.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    components: u32,
    /// Latent dimension H.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    latent_dim: u32,
    /// Truncation size C'.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    cprime: u32,
    /// Neighborhood size G.
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u32).range(1..))]
    gsize: u32,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    warmup_epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, value_enum, default_value = "afkmc2")]
    init: InitArg,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    chain_length: u32,
    #[arg(long, value_enum, default_value = "kl")]
    distance: DistanceArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record the run as deterministic; every reduction already runs in a
    /// fixed order.
    #[arg(long)]
    deterministic: bool,
    /// Stop on the signed relative change instead of its magnitude.
    #[arg(long)]
    literal_convergence: bool,
}

impl ModelArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            algo: self.algo.into(),
            n_components: self.components as usize,
            latent_dim: self.latent_dim as usize,
            cprime: self.cprime as usize,
            gsize: self.gsize as usize,
            epsilon: self.epsilon,
            warmup_epsilon: self.warmup_epsilon,
            max_iters: self.max_iters,
            distance_mode: self.distance.into(),
            deterministic: self.deterministic,
            seed: self.seed,
            init: self.init.into(),
            chain_length: self.chain_length as usize,
            literal_convergence: self.literal_convergence,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training data (binary dataset or .csv).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Exact NLL every this many iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    eval_nll_every: usize,
    /// Test NLL at which the quality-matched exact EM stops.
    #[arg(long)]
    target_nll: Option<f64>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    /// JSON-lines metrics file.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct SeedArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    components: u32,
    #[arg(long, value_enum, default_value = "afkmc2")]
    init: InitArg,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    chain_length: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    components: u32,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    dim: u32,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    latent: u32,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Rows of an independent test sample written to --out-test.
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    loading_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    out_test: Option<PathBuf>,
    /// Checkpoint of the generating model.
    #[arg(long)]
    out_truth: Option<PathBuf>,
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Ascending component counts, comma separated.
    #[arg(long, default_value = "20,40,80,160", value_delimiter = ',')]
    c_list: Vec<usize>,
    /// Points at the largest component count (default: all rows).
    #[arg(long)]
    n_total: Option<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    latent_dim: usize,
    #[arg(long, default_value_t = 3)]
    cprime: usize,
    #[arg(long, default_value_t = 15)]
    gsize: usize,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run exact EM stopped at the variational test NLL.
    #[arg(long)]
    quality_matched: bool,
    /// Independent runs executed concurrently (timings become unreliable).
    #[arg(long, default_value_t = 1)]
    parallel_jobs: usize,
    /// CSV output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .trim()
        .split_once('x')
        .ok_or_else(|| format!("`{s}` is not of the form C'xG"))?;
    let a = a.parse::<usize>().map_err(|e| e.to_string())?;
    let b = b.parse::<usize>().map_err(|e| e.to_string())?;
    Ok((a, b))
}

#[derive(Args)]
struct QualityArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    components: usize,
    #[arg(long, default_value_t = 3)]
    latent_dim: usize,
    /// Comma separated C'xG pairs.
    #[arg(
        long,
        default_value = "3x5,3x15,3x30,5x5,5x15,5x30,7x5,7x15,7x30",
        value_delimiter = ',',
        value_parser = parse_pair
    )]
    grid: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the k-means + FA baseline.
    #[arg(long)]
    no_kmeansfa: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn read_data(path: &Path) -> Result<Dataset> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let data = if is_csv {
        import_csv(path)
    } else {
        load_dataset(path)
    };
    data.with_context(|| format!("reading {}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let data = read_data(&args.data)?;
    let test = args.test_data.as_deref().map(read_data).transpose()?;
    let config = TrainConfig {
        eval_nll_every: args.eval_nll_every,
        target_nll: args.target_nll,
        ..args.model.config()
    };
    let out = train(&config, &data, test.as_ref())?;
    if let Some(p) = &args.metrics {
        let w =
            BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        out.report.write_json_lines(w)?;
    }
    if let Some(p) = &args.out_model {
        save_checkpoint(&out.params, p)?;
    }
    println!("{}", serde_json::to_string(&out.report.summary)?);
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let params = load_checkpoint(&args.model)
        .with_context(|| format!("reading {}", args.model.display()))?;
    let data = read_data(&args.data)?;
    if data.dim() != params.dim() {
        bail!(
            "model has dimension {}, data has {}",
            params.dim(),
            data.dim()
        );
    }
    let caches = build_caches(&params)?;
    let nll = nll_per_point(&params, &caches, &data);
    println!("{}", json!({ "n_points": data.n(), "nll": nll }));
    Ok(())
}

fn run_seed(args: &SeedArgs) -> Result<()> {
    let data = read_data(&args.data)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let counter = Counter::new();
    let c = args.components as usize;
    let seeds = match args.init {
        InitArg::Afkmc2 => afkmc2_seed(&data, c, args.chain_length as usize, &mut rng, &counter)?,
        InitArg::Random => random_points_seed(&data, c, &mut rng)?,
    };
    println!(
        "{}",
        json!({ "indices": seeds, "distance_evals": counter.get() })
    );
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_components: args.components as usize,
        dim: args.dim as usize,
        latent: args.latent as usize,
        n: args.n,
        separation: args.separation,
        loading_scale: args.loading_scale,
        noise_scale: args.noise_scale,
        seed: args.seed,
    };
    let sample = gen_synthetic(&spec)?;
    save_dataset(&sample.data, &args.out)?;
    if let Some(p) = &args.out_test {
        if args.n_test == 0 {
            return Err(MfaError::InvalidConfig("--out-test needs --n-test > 0".into()).into());
        }
        let (test, _) = sample_dataset(&sample.truth, args.n_test, args.seed ^ 0x5eed_7e57)?;
        save_dataset(&test, p)?;
    }
    if let Some(p) = &args.out_truth {
        save_checkpoint(&sample.truth, p)?;
    }
    Ok(())
}

fn run_scaling(args: &ScalingArgs) -> Result<()> {
    let data = read_data(&args.data)?;
    let test = args.test_data.as_deref().map(read_data).transpose()?;
    let spec = ScalingSuiteSpec {
        c_list: args.c_list.clone(),
        n_total: args.n_total.unwrap_or(data.n()),
        repeats: args.repeats,
        latent: args.latent_dim,
        cprime: args.cprime,
        gsize: args.gsize,
        epsilon: args.epsilon,
        max_iters: args.max_iters,
        seed: args.seed,
        quality_matched: args.quality_matched,
        parallel_jobs: args.parallel_jobs,
    };
    let result = run_scaling_suite(&spec, &data, test.as_ref())?;
    write_csv(&result.rows, output(args.out.as_deref())?, false)?;
    let exponents: serde_json::Map<String, serde_json::Value> = result
        .exponents
        .iter()
        .map(|(a, e)| (a.name().to_string(), json!(e)))
        .collect();
    eprintln!(
        "{}",
        json!({
            "exponents": exponents,
            "threads": result.threads,
            "timing_contaminated": result.timing_contaminated,
        })
    );
    Ok(())
}

fn run_quality(args: &QualityArgs) -> Result<()> {
    let data = read_data(&args.data)?;
    let test = args.test_data.as_deref().map(read_data).transpose()?;
    let spec = QualitySuiteSpec {
        n_components: args.components,
        latent: args.latent_dim,
        grid: args.grid.clone(),
        epsilon: args.epsilon,
        max_iters: args.max_iters,
        seed: args.seed,
        include_kmeansfa: !args.no_kmeansfa,
    };
    let rows = run_quality_suite(&spec, &data, test.as_ref())?;
    write_csv(&rows, output(args.out.as_deref())?, true)?;
    Ok(())
}

fn run_convert(args: &ConvertArgs) -> Result<()> {
    let data =
        import_csv(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    save_dataset(&data, &args.out)?;
    eprintln!("{} rows x {} columns", data.n(), data.dim());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t as usize)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Seed(a) => run_seed(a),
        Command::Synth(a) => run_synth(a),
        Command::BenchScaling(a) => run_scaling(a),
        Command::BenchQuality(a) => run_quality(a),
        Command::ConvertCsv(a) => run_convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            // settings that violate a model invariant are usage errors
            if matches!(
                e.downcast_ref::<MfaError>(),
                Some(MfaError::InvalidConfig(_))
            ) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
