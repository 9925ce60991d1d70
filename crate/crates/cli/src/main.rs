//! Command-line driver: dataset synthesis, variational calibration, the
//! Metropolis-Hastings baseline, posterior prediction, and the drop-model
//! least-squares workflow, wired together through one flat configuration
//! format. Exit codes: 0 success, 1 usage error, 2 runtime error.

mod config;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vinecal::data::{
    read_observations_csv, read_runs_csv, write_observations_csv, write_runs_csv, Dataset,
    Observation,
};
use vinecal::ldm;
use vinecal::mh::{read_chain_csv, run_chain, write_chain_csv, KohPosterior, MhConfig};
use vinecal::model::{FMean, GpSpec, Grouping, KohModel, LatentLayout};
use vinecal::optimizer::{
    run_calibration, select_truncation_level, write_trace_csv, Diagnostics, EstimatorVariant,
    RunConfig,
};
use vinecal::predict::{mse, posterior_mean_predictions, rmse, write_predictions_csv, PhiSource};
use vinecal::sim::{self, SimulationScenario};
use vinecal::variational::{
    init_params, kinds_for_layout, FactorKind, InitMode, PriorSpec, VariationalParams,
};
use vinecal::vine::VineKind;
use vinecal::{Error, Result};

use config::{FileConfig, TruncChoice};

/// Init draws use their own stream so changing iteration counts or
/// estimator settings never shifts the starting point.
const INIT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Parser)]
#[command(
    name = "vinecal",
    version,
    about = "Bayesian calibration of expensive computer models with truncated vine likelihoods"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic calibration study and a fitting config
    Simulate(SimulateArgs),
    /// Fit the variational posterior by stochastic gradient ascent
    Calibrate(CalibrateArgs),
    /// Sample the posterior with random-walk Metropolis-Hastings
    Mh(MhArgs),
    /// Posterior-mean predictions and test metrics
    Predict(PredictArgs),
    /// Least-squares fit of the binding-energy formula
    LdmLs(LdmLsArgs),
    /// Build a binding-energy calibration dataset
    LdmBuild(LdmBuildArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total grid size; must split into two square grids (e.g. 225 = 12^2 + 9^2)
    #[arg(long, conflicts_with_all = ["obs_side", "run_side"])]
    n: Option<usize>,
    /// Observation grid side length
    #[arg(long, default_value_t = 12)]
    obs_side: usize,
    /// Model-run grid side length
    #[arg(long, default_value_t = 9)]
    run_side: usize,
    /// Held-out test points
    #[arg(long, default_value_t = 50)]
    test_count: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Observations CSV (x1..xd,y)
    #[arg(long)]
    obs: PathBuf,
    /// Model-run CSV (x1..xd,t1..tk,z)
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Output directory for trace.csv and posterior.json
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Flat key=value configuration file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in model structure and priors: sim or ldm
    #[arg(long)]
    preset: Option<String>,
    /// Vine decomposition: d or c
    #[arg(long)]
    vine: Option<String>,
    /// Truncation level, or 'auto' to select one by refit stability
    #[arg(long, value_parser = config::parse_trunc)]
    trunc: Option<TruncChoice>,
    /// Gradient estimator: plain, rb, rbcv, rbcvis
    #[arg(long)]
    variant: Option<String>,
    /// Monte Carlo draws per gradient estimate
    #[arg(long)]
    samples: Option<usize>,
    /// Fresh draws for the control-variate coefficient fit
    #[arg(long)]
    cv_samples: Option<usize>,
    /// Proposal overdispersion for the importance-sampling variant
    #[arg(long)]
    tau: Option<f64>,
    /// AdaGrad base learning rate
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Starting point: prior_match or prior_sample
    #[arg(long)]
    init: Option<String>,
}

#[derive(Args)]
struct MhArgs {
    /// Observations CSV (x1..xd,y)
    #[arg(long)]
    obs: PathBuf,
    /// Model-run CSV (x1..xd,t1..tk,z)
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Output directory for chain.csv and mh_summary.json
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Flat key=value configuration file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in model structure and priors: sim or ldm
    #[arg(long)]
    preset: Option<String>,
    /// Post-burn-in iterations
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial proposal scale before adaptation
    #[arg(long)]
    init_scale: Option<f64>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["posterior", "chain"]))]
struct PredictArgs {
    /// Observations CSV (x1..xd,y)
    #[arg(long)]
    obs: PathBuf,
    /// Model-run CSV (x1..xd,t1..tk,z)
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Test points CSV (x1..xd,y with reference values)
    #[arg(long)]
    test: PathBuf,
    /// Fitted posterior summary JSON from `calibrate`
    #[arg(long)]
    posterior: Option<PathBuf>,
    /// Chain CSV from `mh`
    #[arg(long)]
    chain: Option<PathBuf>,
    /// Output directory for predictions.csv and metrics.json
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Flat key=value configuration file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in model structure: sim or ldm
    #[arg(long)]
    preset: Option<String>,
    /// Latent draws averaged for variational predictions
    #[arg(long)]
    draws: Option<usize>,
    /// Seed for variational prediction draws
    #[arg(long)]
    seed: Option<u64>,
    /// Chain rows to discard before averaging
    #[arg(long, default_value_t = 0)]
    burn_in: usize,
    /// Keep every thin-th post-burn-in chain row
    #[arg(long, default_value_t = 1)]
    thin: usize,
}

#[derive(Args)]
struct LdmLsArgs {
    /// Nuclide CSV (Z,N,y)
    #[arg(long)]
    records: PathBuf,
    /// Optional JSON report path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["records", "synthetic"]))]
struct LdmBuildArgs {
    /// Nuclide CSV (Z,N,y)
    #[arg(long)]
    records: Option<PathBuf>,
    /// Generate this many synthetic nuclides instead of reading a file
    #[arg(long)]
    synthetic: Option<usize>,
    /// Model runs over the coefficient space
    #[arg(long, default_value_t = 2000)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    // Die quietly when a downstream pipe closes, the way any filter does,
    // instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Mh(a) => cmd_mh(a),
        Command::Predict(a) => cmd_predict(a),
        Command::LdmLs(a) => cmd_ldm_ls(a),
        Command::LdmBuild(a) => cmd_ldm_build(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}

/// Everything a run needs beyond the datasets, with defaults suitable for
/// small problems. A config file overwrites fields first, then flags.
#[derive(Debug, Clone)]
struct Settings {
    preset: Option<String>,
    vine: VineKind,
    trunc: TruncChoice,
    trunc_max: usize,
    trunc_tol: f64,
    variant_name: String,
    samples: usize,
    cv_samples: usize,
    tau: f64,
    eta: f64,
    eps_div: f64,
    max_iters: usize,
    conv_eps: f64,
    conv_window: usize,
    seed: u64,
    trace_stride: usize,
    init: InitMode,
    delta_mean: Option<f64>,
    f_grouping: Option<Grouping>,
    delta_grouping: Option<Grouping>,
    prior_overrides: Vec<(String, PriorSpec)>,
    mh_iterations: usize,
    mh_burn_in: usize,
    mh_thin: usize,
    mh_init_scale: f64,
    pred_draws: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            preset: None,
            vine: VineKind::D,
            trunc: TruncChoice::Level(3),
            trunc_max: 5,
            trunc_tol: 0.1,
            variant_name: "rbcv".to_string(),
            samples: 50,
            cv_samples: 10,
            tau: 2.0,
            eta: 1.0,
            eps_div: 1e-6,
            max_iters: 5000,
            conv_eps: 1e-4,
            conv_window: 50,
            seed: 0,
            trace_stride: 1,
            init: InitMode::PriorMatch,
            delta_mean: None,
            f_grouping: None,
            delta_grouping: None,
            prior_overrides: Vec::new(),
            mh_iterations: 10000,
            mh_burn_in: 1000,
            mh_thin: 1,
            mh_init_scale: 0.1,
            pred_draws: 50,
        }
    }
}

impl Settings {
    fn resolve(config: Option<&PathBuf>) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = config {
            let file = FileConfig::load(path)?;
            s.apply_file(&file)?;
        }
        Ok(s)
    }

    fn apply_file(&mut self, file: &FileConfig) -> Result<()> {
        if let Some(v) = file.get("preset") {
            self.preset = Some(v.to_string());
        }
        if let Some(v) = file.get("vine") {
            self.vine = config::parse_vine(v)?;
        }
        if let Some(v) = file.get("trunc") {
            self.trunc = config::parse_trunc(v).map_err(Error::config)?;
        }
        if let Some(v) = file.parse_value("trunc_max")? {
            self.trunc_max = v;
        }
        if let Some(v) = file.parse_value("trunc_tol")? {
            self.trunc_tol = v;
        }
        if let Some(v) = file.get("variant") {
            self.variant_name = v.to_string();
        }
        if let Some(v) = file.parse_value("samples")? {
            self.samples = v;
        }
        if let Some(v) = file.parse_value("cv_samples")? {
            self.cv_samples = v;
        }
        if let Some(v) = file.parse_value("tau")? {
            self.tau = v;
        }
        if let Some(v) = file.parse_value("eta")? {
            self.eta = v;
        }
        if let Some(v) = file.parse_value("eps_div")? {
            self.eps_div = v;
        }
        if let Some(v) = file.parse_value("max_iters")? {
            self.max_iters = v;
        }
        if let Some(v) = file.parse_value("conv_eps")? {
            self.conv_eps = v;
        }
        if let Some(v) = file.parse_value("conv_window")? {
            self.conv_window = v;
        }
        if let Some(v) = file.parse_value("seed")? {
            self.seed = v;
        }
        if let Some(v) = file.parse_value("trace_stride")? {
            self.trace_stride = v;
        }
        if let Some(v) = file.get("init") {
            self.init = config::parse_init(v)?;
        }
        if let Some(v) = file.parse_value("delta_mean")? {
            self.delta_mean = Some(v);
        }
        if let Some(v) = file.get("f_grouping") {
            self.f_grouping = Some(parse_grouping(v)?);
        }
        if let Some(v) = file.get("delta_grouping") {
            self.delta_grouping = Some(parse_grouping(v)?);
        }
        if let Some(v) = file.parse_value("mh_iterations")? {
            self.mh_iterations = v;
        }
        if let Some(v) = file.parse_value("mh_burn_in")? {
            self.mh_burn_in = v;
        }
        if let Some(v) = file.parse_value("mh_thin")? {
            self.mh_thin = v;
        }
        if let Some(v) = file.parse_value("mh_init_scale")? {
            self.mh_init_scale = v;
        }
        if let Some(v) = file.parse_value("pred_draws")? {
            self.pred_draws = v;
        }
        self.prior_overrides.extend(file.prior_overrides()?);
        Ok(())
    }

    fn spec(&self) -> Result<GpSpec> {
        let mut spec = match self.preset.as_deref() {
            None => GpSpec::new(FMean::Zero, 0.0, Grouping::Shared, Grouping::Shared),
            Some("sim") => sim::gp_spec(),
            Some("ldm") => ldm::ldm_spec(),
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown preset '{other}': expected 'sim' or 'ldm'"
                )))
            }
        };
        if let Some(dm) = self.delta_mean {
            spec.delta_mean = dm;
        }
        if let Some(g) = self.f_grouping {
            spec.f_grouping = g;
        }
        if let Some(g) = self.delta_grouping {
            spec.delta_grouping = g;
        }
        Ok(spec)
    }

    fn priors(&self, layout: &LatentLayout) -> Result<Vec<PriorSpec>> {
        let mut priors = match self.preset.as_deref() {
            None => layout_default_priors(layout),
            Some("sim") => sim::default_priors(),
            Some("ldm") => ldm::ldm_priors(),
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown preset '{other}': expected 'sim' or 'ldm'"
                )))
            }
        };
        let names = layout.names();
        if priors.len() != names.len() {
            return Err(Error::config(format!(
                "preset priors cover {} coordinates but the model layout has {} ({})",
                priors.len(),
                names.len(),
                names.join(", ")
            )));
        }
        for (name, prior) in &self.prior_overrides {
            let j = names.iter().position(|n| n == name).ok_or_else(|| {
                Error::config(format!(
                    "unknown prior coordinate '{name}'; model coordinates: {}",
                    names.join(", ")
                ))
            })?;
            priors[j] = *prior;
        }
        let kinds = kinds_for_layout(layout);
        for (j, (p, &k)) in priors.iter().zip(&kinds).enumerate() {
            if !p.matches(k) {
                let family = match k {
                    FactorKind::Gaussian => "normal",
                    FactorKind::Gamma => "gamma",
                };
                return Err(Error::config(format!(
                    "prior for '{}' must be a {family} family",
                    names[j]
                )));
            }
        }
        Ok(priors)
    }

    fn variant(&self) -> Result<EstimatorVariant> {
        match self.variant_name.as_str() {
            "plain" => Ok(EstimatorVariant::Plain),
            "rb" => Ok(EstimatorVariant::Rb),
            "rbcv" => Ok(EstimatorVariant::RbCv { cv_samples: self.cv_samples }),
            "rbcvis" => Ok(EstimatorVariant::RbCvIs { cv_samples: self.cv_samples, tau: self.tau }),
            other => Err(Error::config(format!(
                "unknown variant '{other}': expected plain, rb, rbcv, or rbcvis"
            ))),
        }
    }

    fn run_config(&self, level: usize) -> Result<RunConfig> {
        let mut cfg = RunConfig::new(self.vine, level, self.variant()?);
        cfg.samples = self.samples;
        cfg.eta = self.eta;
        cfg.eps_div = self.eps_div;
        cfg.max_iters = self.max_iters;
        cfg.conv_eps = self.conv_eps;
        cfg.conv_window = self.conv_window;
        cfg.seed = self.seed;
        cfg.trace_stride = self.trace_stride;
        Ok(cfg)
    }
}

fn parse_grouping(text: &str) -> Result<Grouping> {
    match text {
        "shared" => Ok(Grouping::Shared),
        "per_dim" => Ok(Grouping::PerDim),
        other => Err(Error::config(format!(
            "bad grouping '{other}': expected 'shared' or 'per_dim'"
        ))),
    }
}

/// Weakly informative fallbacks when no preset supplies priors.
fn layout_default_priors(layout: &LatentLayout) -> Vec<PriorSpec> {
    (0..layout.dim())
        .map(|j| match layout.domain(j) {
            vinecal::model::Domain::Real => PriorSpec::Normal { mean: 0.0, sd: 1.0 },
            vinecal::model::Domain::Positive => PriorSpec::Gamma { shape: 2.0, rate: 2.0 },
        })
        .collect()
}

fn load_dataset(obs: &Path, runs: Option<&PathBuf>) -> Result<Dataset> {
    let obs = read_observations_csv(obs)?;
    let runs = match runs {
        Some(p) => read_runs_csv(p)?,
        None => Vec::new(),
    };
    Dataset::new(obs, runs)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// One fitted coordinate in posterior.json.
#[derive(serde::Serialize, serde::Deserialize)]
struct CoordinateSummary {
    name: String,
    family: FactorKind,
    mean: f64,
    sd: f64,
}

/// Contents of posterior.json, sufficient to rebuild the fitted family.
#[derive(serde::Serialize, serde::Deserialize)]
struct PosteriorSummary {
    coordinates: Vec<CoordinateSummary>,
    iterations: usize,
    converged: bool,
    wall_seconds: f64,
    level: usize,
    level_hit_max: bool,
    vine: VineKind,
    variant: EstimatorVariant,
    seed: u64,
    diagnostics: Diagnostics,
}

#[derive(serde::Serialize)]
struct ChainCoordinate {
    name: String,
    mean: f64,
    sd: f64,
}

#[derive(serde::Serialize)]
struct MhSummary {
    coordinates: Vec<ChainCoordinate>,
    acceptance_rate: f64,
    wall_seconds: f64,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
    seconds_per_iteration: f64,
}

#[derive(serde::Serialize)]
struct Metrics {
    mse: f64,
    rmse: f64,
    wall_seconds: f64,
    iterations: usize,
}

#[derive(serde::Serialize)]
struct LsCoefficient {
    name: String,
    value: f64,
    se: f64,
}

#[derive(serde::Serialize)]
struct LsReport {
    coefficients: Vec<LsCoefficient>,
    rmse: f64,
    records: usize,
}

/// Splits a total grid size into observation and run sides a >= b >= 2
/// with a^2 + b^2 = n, preferring the split closest to the reference
/// 144 + 81 design (side ratio 4:3).
fn grid_split(n: usize) -> Result<(usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    let mut a = 2;
    while a * a + 4 <= n {
        let rem = n - a * a;
        let b = (rem as f64).sqrt().round() as usize;
        if b >= 2 && b * b == rem && a >= b {
            let score = (3 * a as isize - 4 * b as isize).unsigned_abs();
            let better = match best {
                None => true,
                Some((s, ba, _)) => score < s || (score == s && a > ba),
            };
            if better {
                best = Some((score, a, b));
            }
        }
        a += 1;
    }
    match best {
        Some((_, a, b)) => Ok((a, b)),
        None => Err(Error::config(format!(
            "cannot split {n} into two square grids; pass --obs-side and --run-side instead"
        ))),
    }
}

fn sim_conf(seed: u64) -> String {
    format!(
        "# fitting settings for this synthetic study\n\
         preset = sim\n\
         vine = d\n\
         trunc = 3\n\
         variant = rbcvis\n\
         samples = 50\n\
         cv_samples = 10\n\
         tau = 2\n\
         eta = 0.1\n\
         seed = {seed}\n\
         max_iters = 5000\n\
         mh_iterations = 80000\n\
         mh_burn_in = 20000\n\
         mh_thin = 40\n\
         pred_draws = 100\n"
    )
}

fn ldm_conf(seed: u64) -> String {
    format!(
        "# fitting settings for the binding-energy study\n\
         preset = ldm\n\
         vine = d\n\
         trunc = 3\n\
         variant = rbcvis\n\
         samples = 50\n\
         cv_samples = 10\n\
         tau = 2\n\
         eta = 1\n\
         seed = {seed}\n\
         max_iters = 3000\n\
         pred_draws = 100\n\
         # prior overrides use layout coordinate names, e.g.\n\
         # prior.theta1 = normal(15.42, 0.2025)\n\
         # prior.sigma = gamma(2, 1)\n"
    )
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let (obs_side, run_side) = match args.n {
        Some(n) => grid_split(n)?,
        None => (args.obs_side, args.run_side),
    };
    let scenario = SimulationScenario {
        obs_side,
        run_side,
        n_test: args.test_count,
        seed: args.seed,
    };
    let data = sim::simulate(&scenario)?;
    fs::create_dir_all(&args.out)?;
    write_observations_csv(args.out.join("obs.csv"), data.dataset.observations())?;
    write_runs_csv(args.out.join("runs.csv"), data.dataset.runs())?;
    let test: Vec<Observation> = data
        .test_x
        .iter()
        .zip(&data.test_truth)
        .map(|(x, &y)| Observation { x: x.clone(), y })
        .collect();
    write_observations_csv(args.out.join("test.csv"), &test)?;
    write_json(&args.out.join("truth.json"), &data.truth)?;
    fs::write(args.out.join("sim.conf"), sim_conf(args.seed))?;
    println!(
        "{} observations, {} runs, {} test points -> {}",
        data.dataset.n_obs(),
        data.dataset.n_runs(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let mut s = Settings::resolve(args.config.as_ref())?;
    if let Some(v) = &args.preset {
        s.preset = Some(v.clone());
    }
    if let Some(v) = &args.vine {
        s.vine = config::parse_vine(v)?;
    }
    if let Some(v) = args.trunc {
        s.trunc = v;
    }
    if let Some(v) = &args.variant {
        s.variant_name = v.clone();
    }
    if let Some(v) = args.samples {
        s.samples = v;
    }
    if let Some(v) = args.cv_samples {
        s.cv_samples = v;
    }
    if let Some(v) = args.tau {
        s.tau = v;
    }
    if let Some(v) = args.eta {
        s.eta = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.max_iters {
        s.max_iters = v;
    }
    if let Some(v) = &args.init {
        s.init = config::parse_init(v)?;
    }

    let dataset = load_dataset(&args.obs, args.runs.as_ref())?;
    let model = KohModel::new(dataset, s.spec()?)?;
    let priors = s.priors(model.layout())?;
    let kinds = kinds_for_layout(model.layout());
    let mut init_rng = ChaCha8Rng::seed_from_u64(s.seed ^ INIT_SEED_SALT);
    let init = init_params(s.init, kinds, &priors, &mut init_rng)?;

    let (level, hit_max, result) = match s.trunc {
        TruncChoice::Level(l) => {
            let cfg = s.run_config(l)?;
            (l, false, run_calibration(&model, &priors, init, &cfg)?)
        }
        TruncChoice::Auto => {
            let cfg = s.run_config(1)?;
            let d = select_truncation_level(&model, &priors, &init, &cfg, s.trunc_max, s.trunc_tol)?;
            if d.hit_max {
                eprintln!(
                    "warning: refit stability not reached by level {}; using it anyway",
                    d.level
                );
            }
            (d.level, d.hit_max, d.result)
        }
    };

    fs::create_dir_all(&args.out)?;
    let names = model.layout().names();
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &names, &result.trace)?;
    fs::write(args.out.join("trace.csv"), buf)?;

    let summary = PosteriorSummary {
        coordinates: names
            .iter()
            .enumerate()
            .map(|(j, n)| CoordinateSummary {
                name: n.clone(),
                family: result.params.kinds()[j],
                mean: result.params.mean(j),
                sd: result.params.sd(j),
            })
            .collect(),
        iterations: result.iterations,
        converged: result.converged,
        wall_seconds: result.wall_seconds,
        level,
        level_hit_max: hit_max,
        vine: s.vine,
        variant: s.variant()?,
        seed: s.seed,
        diagnostics: result.diagnostics.clone(),
    };
    write_json(&args.out.join("posterior.json"), &summary)?;

    println!(
        "level {level}: {} after {} iterations ({:.1} s)",
        if result.converged { "converged" } else { "stopped" },
        result.iterations,
        result.wall_seconds
    );
    for c in &summary.coordinates {
        println!("  {:<8} {:>10.4} +- {:.4}", c.name, c.mean, c.sd);
    }
    let d = &result.diagnostics;
    if d.resampled_draws + d.cv_disabled + d.clamp_events > 0 {
        println!(
            "  ({} resampled draws, {} cv fits disabled, {} clamps)",
            d.resampled_draws, d.cv_disabled, d.clamp_events
        );
    }
    println!("wrote {} and {}", args.out.join("trace.csv").display(), args.out.join("posterior.json").display());
    Ok(())
}

fn cmd_mh(args: MhArgs) -> Result<()> {
    let mut s = Settings::resolve(args.config.as_ref())?;
    if let Some(v) = &args.preset {
        s.preset = Some(v.clone());
    }
    if let Some(v) = args.iterations {
        s.mh_iterations = v;
    }
    if let Some(v) = args.burn_in {
        s.mh_burn_in = v;
    }
    if let Some(v) = args.thin {
        s.mh_thin = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.init_scale {
        s.mh_init_scale = v;
    }

    let dataset = load_dataset(&args.obs, args.runs.as_ref())?;
    let model = KohModel::new(dataset, s.spec()?)?;
    let priors = s.priors(model.layout())?;
    let init: Vec<f64> = priors.iter().map(|p| p.mean()).collect();
    let mut cfg = MhConfig::new(s.mh_iterations, s.mh_burn_in);
    cfg.thin = s.mh_thin;
    cfg.seed = s.seed;
    cfg.init_scale = s.mh_init_scale;
    let target = KohPosterior::new(&model, priors)?;
    let run = run_chain(&target, &init, &cfg)?;

    fs::create_dir_all(&args.out)?;
    let names = model.layout().names();
    let mut buf = Vec::new();
    write_chain_csv(&mut buf, &names, &run)?;
    fs::write(args.out.join("chain.csv"), buf)?;

    let (means, sds) = run.moments();
    let summary = MhSummary {
        coordinates: names
            .iter()
            .zip(means.iter().zip(&sds))
            .map(|(n, (&mean, &sd))| ChainCoordinate { name: n.clone(), mean, sd })
            .collect(),
        acceptance_rate: run.acceptance_rate,
        wall_seconds: run.wall_seconds,
        iterations: run.rows.len(),
        burn_in: run.burn_in,
        thin: run.thin,
        seed: s.seed,
        seconds_per_iteration: run.seconds_per_iteration(),
    };
    write_json(&args.out.join("mh_summary.json"), &summary)?;

    println!(
        "{} iterations, acceptance {:.3} ({:.1} s)",
        run.rows.len(),
        run.acceptance_rate,
        run.wall_seconds
    );
    for c in &summary.coordinates {
        println!("  {:<8} {:>10.4} +- {:.4}", c.name, c.mean, c.sd);
    }
    println!("wrote {} and {}", args.out.join("chain.csv").display(), args.out.join("mh_summary.json").display());
    Ok(())
}

/// Rebuilds the fitted family from posterior.json, refusing summaries
/// whose coordinates disagree with the model.
fn load_posterior(path: &Path, model: &KohModel) -> Result<VariationalParams> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::config(format!("no posterior summary found at {}", path.display())))?;
    let summary: PosteriorSummary = serde_json::from_str(&text)?;
    let names = model.layout().names();
    let kinds = kinds_for_layout(model.layout());
    if summary.coordinates.len() != names.len() {
        return Err(Error::config(format!(
            "posterior summary does not match the model layout: {} coordinates vs {}",
            summary.coordinates.len(),
            names.len()
        )));
    }
    for (j, c) in summary.coordinates.iter().enumerate() {
        if c.name != names[j] || c.family != kinds[j] {
            return Err(Error::config(format!(
                "posterior summary does not match the model layout at coordinate {j}: \
                 summary has {} ({:?}), model expects {} ({:?})",
                c.name, c.family, names[j], kinds[j]
            )));
        }
    }
    let means: Vec<f64> = summary.coordinates.iter().map(|c| c.mean).collect();
    let sds: Vec<f64> = summary.coordinates.iter().map(|c| c.sd).collect();
    VariationalParams::from_moments(kinds, &means, &sds)
}

/// Thinned post-burn-in latent draws from a chain CSV.
fn load_chain_draws(
    path: &Path,
    model: &KohModel,
    burn_in: usize,
    thin: usize,
) -> Result<Vec<Vec<f64>>> {
    if thin == 0 {
        return Err(Error::config("thin must be positive"));
    }
    let file = fs::File::open(path)
        .map_err(|_| Error::config(format!("no chain found at {}", path.display())))?;
    let data = read_chain_csv(BufReader::new(file), &path.display().to_string())?;
    if data.names != model.layout().names() {
        return Err(Error::config(format!(
            "chain does not match the model layout: header has ({}), model expects ({})",
            data.names.join(", "),
            model.layout().names().join(", ")
        )));
    }
    let draws: Vec<Vec<f64>> = data
        .rows
        .into_iter()
        .filter(|r| r.iteration > burn_in && (r.iteration - burn_in) % thin == 0)
        .map(|r| r.phi)
        .collect();
    if draws.is_empty() {
        return Err(Error::config(format!(
            "no chain rows left after burn-in {burn_in} with thin {thin}"
        )));
    }
    Ok(draws)
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut s = Settings::resolve(args.config.as_ref())?;
    if let Some(v) = &args.preset {
        s.preset = Some(v.clone());
    }
    if let Some(v) = args.draws {
        s.pred_draws = v;
    }
    let seed = args.seed.unwrap_or(s.seed);

    let dataset = load_dataset(&args.obs, args.runs.as_ref())?;
    let model = KohModel::new(dataset, s.spec()?)?;
    let test = read_observations_csv(&args.test)?;
    let xstars: Vec<Vec<f64>> = test.iter().map(|o| o.x.clone()).collect();
    let truth: Vec<f64> = test.iter().map(|o| o.y).collect();

    let start = std::time::Instant::now();
    let (pred, used) = if let Some(p) = &args.posterior {
        let params = load_posterior(p, &model)?;
        let source = PhiSource::Variational { params: &params, draws: s.pred_draws, seed };
        (posterior_mean_predictions(&model, source, &xstars)?, s.pred_draws)
    } else {
        let path = args.chain.as_ref().expect("clap guarantees one source");
        let draws = load_chain_draws(path, &model, args.burn_in, args.thin)?;
        let n = draws.len();
        (posterior_mean_predictions(&model, PhiSource::Chain(&draws), &xstars)?, n)
    };
    let wall = start.elapsed().as_secs_f64();

    let mse = mse(&pred, &truth)?;
    let rmse = rmse(&pred, &truth)?;
    fs::create_dir_all(&args.out)?;
    let mut buf = Vec::new();
    write_predictions_csv(&mut buf, &xstars, &truth, &pred)?;
    fs::write(args.out.join("predictions.csv"), buf)?;
    write_json(
        &args.out.join("metrics.json"),
        &Metrics { mse, rmse, wall_seconds: wall, iterations: used },
    )?;
    println!(
        "mse {mse:.6e}, rmse {rmse:.6e} over {} test points ({used} draws)",
        xstars.len()
    );
    println!("wrote {} and {}", args.out.join("predictions.csv").display(), args.out.join("metrics.json").display());
    Ok(())
}

fn cmd_ldm_ls(args: LdmLsArgs) -> Result<()> {
    let file = fs::File::open(&args.records)
        .map_err(|e| Error::config(format!("cannot open {}: {e}", args.records.display())))?;
    let records = ldm::read_nuclide_csv(BufReader::new(file), &args.records.display().to_string())?;
    let fit = ldm::ls_fit(&records)?;
    for (name, (value, se)) in ldm::COEFF_NAMES.iter().zip(fit.coeffs.iter().zip(&fit.ses)) {
        println!("{name:<7} {value:>9.4} ({se:.4})");
    }
    println!("rmse    {:>9.4} MeV over {} nuclides", fit.rmse, records.len());
    if let Some(out) = &args.out {
        let report = LsReport {
            coefficients: ldm::COEFF_NAMES
                .iter()
                .zip(fit.coeffs.iter().zip(&fit.ses))
                .map(|(n, (&value, &se))| LsCoefficient { name: n.to_string(), value, se })
                .collect(),
            rmse: fit.rmse,
            records: records.len(),
        };
        write_json(out, &report)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_ldm_build(args: LdmBuildArgs) -> Result<()> {
    let records = match (&args.records, args.synthetic) {
        (Some(path), None) => {
            let file = fs::File::open(path)
                .map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?;
            ldm::read_nuclide_csv(BufReader::new(file), &path.display().to_string())?
        }
        (None, Some(count)) => ldm::synthetic_records(count, args.seed),
        _ => unreachable!("clap guarantees exactly one source"),
    };
    let dataset = ldm::build_ldm_dataset(&records, args.runs, args.seed)?;
    fs::create_dir_all(&args.out)?;
    write_observations_csv(args.out.join("obs.csv"), dataset.observations())?;
    write_runs_csv(args.out.join("runs.csv"), dataset.runs())?;
    if args.synthetic.is_some() {
        let mut buf = Vec::new();
        ldm::write_nuclide_csv(&mut buf, &records)?;
        fs::write(args.out.join("nuclides.csv"), buf)?;
    }
    fs::write(args.out.join("ldm.conf"), ldm_conf(args.seed))?;
    println!(
        "{} nuclides, {} formula runs -> {}",
        records.len(),
        dataset.n_runs(),
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::grid_split;

    #[test]
    fn grid_split_matches_reference_design() {
        assert_eq!(grid_split(225).unwrap(), (12, 9));
        assert_eq!(grid_split(100).unwrap(), (8, 6));
        assert_eq!(grid_split(50).unwrap(), (5, 5));
        assert!(grid_split(7).is_err());
        assert!(grid_split(3).is_err());
    }
}
