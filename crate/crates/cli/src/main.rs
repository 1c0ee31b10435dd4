use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rnncap_core::capacity::{self, BoundOptions, BoundReport, BoundSelection, Flavor, NormProfile};
use rnncap_core::empirical::{self, AscentOptions, ClassConstraints, ErcOptions, Perturbation, VerifyDims};
use rnncap_core::harness::{self, ExperimentConfig, TrainConfig};
use rnncap_core::{Activation, Checkpoint, LossSpec};
use serde::Serialize;

#[derive(Parser, Serialize)]
#[command(name = "rnncap", version, about = "Norm-based capacity bounds for vanilla RNNs")]
struct Cli {
    /// Seed for every random choice; overrides the seed in a training config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (written atomically); standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "lowercase", tag = "subcommand")]
enum Command {
    /// Train a model (TrainConfig) or run a sweep (ExperimentConfig).
    Train(TrainArgs),
    /// Norm profile of a checkpoint.
    Norms(NormsArgs),
    /// Evaluate the bounds for a norm profile.
    Bounds(BoundsArgs),
    /// Randomized checks of the norm and Lipschitz inequalities.
    Verify(VerifyArgs),
    /// Monte-Carlo estimate of the empirical Rademacher complexity of an RNN loss class.
    Erc(ErcArgs),
    /// Bound table for several norm profiles, with improvement columns.
    Compare(CompareArgs),
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// JSONL run log, one event per epoch.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory for per-epoch (or per-sweep-point) checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct NormsArgs {
    model: PathBuf,
    /// Training config whose dataset supplies the input norms.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input norm bound used when no config is given.
    #[arg(long, default_value_t = 1.0)]
    b_x: f64,
}

#[derive(Args, Serialize)]
struct LossArgs {
    #[arg(long, default_value = "ramp")]
    loss: String,
    #[arg(long)]
    gamma: Option<f64>,
}

impl LossArgs {
    /// Ramp loss defaults to `gamma = 1`.
    fn resolve(&mut self) {
        if self.loss == "ramp" && self.gamma.is_none() {
            self.gamma = Some(1.0);
        }
    }

    fn spec(&self) -> rnncap_core::Result<LossSpec> {
        LossSpec::from_name(&self.loss, self.gamma)
    }
}

#[derive(Args, Serialize)]
struct BoundArgs {
    #[arg(long)]
    t: usize,
    #[arg(long)]
    n: usize,
    #[command(flatten)]
    loss: LossArgs,
    /// `all` or a comma list such as `1,2,4star`.
    #[arg(long, default_value = "all")]
    which: String,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 0.0)]
    empirical_risk: f64,
    /// Output bound for unbounded losses.
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long, default_value = "frobenius")]
    flavor: Flavor,
}

impl BoundArgs {
    fn options(&self) -> rnncap_core::Result<(LossSpec, BoundOptions)> {
        let opts = BoundOptions {
            delta: self.delta,
            empirical_risk: self.empirical_risk,
            omega: self.omega,
            flavor: self.flavor,
            which: BoundSelection::parse(&self.which)?,
        };
        Ok((self.loss.spec()?, opts))
    }
}

#[derive(Args, Serialize)]
struct BoundsArgs {
    #[arg(long)]
    norms: PathBuf,
    #[command(flatten)]
    bounds: BoundArgs,
    /// Append the improvement-percentage columns.
    #[arg(long)]
    imp_per: bool,
}

#[derive(Args, Serialize)]
struct CompareArgs {
    /// Norm-profile JSON files; each file stem labels its row.
    #[arg(required = true)]
    profiles: Vec<PathBuf>,
    #[command(flatten)]
    bounds: BoundArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Suite {
    /// Every suite below.
    Lemmas,
    Hidden,
    Output,
    Loss,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "lemmas")]
    suite: Suite,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 8)]
    max_d: usize,
    #[arg(long, default_value_t = 12)]
    max_t: usize,
}

#[derive(Args, Serialize)]
struct ErcArgs {
    #[arg(long)]
    b_u: f64,
    #[arg(long)]
    b_v: f64,
    #[arg(long)]
    b_w: f64,
    #[arg(long)]
    m_u: Option<f64>,
    #[arg(long, default_value = "tanh")]
    activation: Activation,
    #[arg(long, default_value_t = 3)]
    d_h: usize,
    /// Training config supplying the sample; otherwise a random batch is drawn.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    t: usize,
    #[arg(long, default_value_t = 2)]
    d_x: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long, default_value_t = 64)]
    draws: usize,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<rnncap_core::Error> for Failure {
    fn from(e: rnncap_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Validation(anyhow!(msg.into())))
}

fn read_input(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::Validation)
}

fn write_atomic(path: &Path, text: &str) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write in {}", dir.display()))?;
    tmp.write_all(text.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_atomic(p, text).map_err(Failure::Runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Runtime(e.into()))
}

fn reports_out(reports: &[BoundReport], format: Format, imp_per: bool) -> CliResult<String> {
    match format {
        Format::Csv => Ok(capacity::csv_string(reports, imp_per)?),
        Format::Json => to_json(&reports),
    }
}

fn read_profile(path: &Path) -> CliResult<NormProfile> {
    let p: NormProfile = serde_json::from_str(&read_input(path)?)
        .with_context(|| format!("{} is not a norm profile", path.display()))
        .map_err(Failure::Validation)?;
    p.validate()?;
    Ok(p)
}

fn label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("RNNCAP_THREADS") else {
        return Ok(());
    };
    let Ok(n) = v.trim().parse::<usize>() else {
        return invalid(format!("RNNCAP_THREADS must be a nonnegative integer, got {v:?}"));
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn announce<T: Serialize>(what: &str, v: &T) {
    if let Ok(s) = serde_json::to_string(v) {
        eprintln!("{what}: {s}");
    }
}

fn train(cli: &Cli, args: &TrainArgs) -> CliResult<()> {
    let text = read_input(&args.config)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Failure::Validation(e.into()))?;
    if value.get("t_values").is_some() {
        return sweep(cli, args, &text);
    }
    let mut cfg = TrainConfig::from_json(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    announce("train config", &cfg);
    let mut log = String::new();
    let result = harness::train(&cfg, |ev| {
        let line = serde_json::to_string(ev).unwrap_or_default();
        if args.log.is_none() {
            eprintln!("{line}");
        }
        log.push_str(&line);
        log.push('\n');
    })?;
    if let Some(path) = &args.log {
        write_atomic(path, &log).map_err(Failure::Runtime)?;
    }
    if let Some(dir) = &args.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
        for c in &result.checkpoints {
            write_atomic(&dir.join(format!("epoch_{:03}.json", c.epoch)), &c.to_json()?).map_err(Failure::Runtime)?;
        }
    }
    let last = result
        .checkpoints
        .last()
        .ok_or_else(|| Failure::Runtime(anyhow!("no checkpoint produced")))?;
    emit(cli.out.as_deref(), &(last.to_json()? + "\n"))
}

fn sweep(cli: &Cli, args: &TrainArgs, text: &str) -> CliResult<()> {
    let mut cfg = ExperimentConfig::from_json(text)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    announce("experiment config", &cfg);
    let points = harness::run_experiment(&cfg)?;
    if let Some(dir) = args.checkpoint_dir.as_ref().or(cfg.checkpoint_dir.as_ref()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
        for p in &points {
            let name = format!("{}_t{}_n{}.json", p.config.activation, p.config.t, p.config.n);
            let ckpt = Checkpoint::from_params(&p.result.params, p.config.seed, p.config.epochs);
            write_atomic(&dir.join(name), &ckpt.to_json()?).map_err(Failure::Runtime)?;
        }
    }
    let reports: Vec<BoundReport> = points.into_iter().map(|p| p.report).collect();
    let text = reports_out(&reports, cli.format.unwrap_or(Format::Csv), cfg.imp_per)?;
    emit(cli.out.as_deref().or(cfg.output_csv.as_deref()), &text)
}

fn norms(cli: &Cli, args: &NormsArgs) -> CliResult<()> {
    if cli.format == Some(Format::Csv) {
        return invalid("norms writes JSON only");
    }
    let ckpt = Checkpoint::from_json(&read_input(&args.model)?)?;
    let params = ckpt.params()?;
    let profile = match &args.config {
        Some(path) => {
            let cfg = TrainConfig::from_json(&read_input(path)?)?;
            empirical::extract_norm_profile(&params, &cfg.dataset()?)?
        }
        None => {
            if !(args.b_x >= 0.0 && args.b_x.is_finite()) {
                return invalid(format!("--b-x must be finite and nonnegative, got {}", args.b_x));
            }
            // a vector of Euclidean norm b_x has 1-norm at most √d_x·b_x
            empirical::norm_profile(&params, args.b_x, (params.d_x() as f64).sqrt() * args.b_x)?
        }
    };
    emit(cli.out.as_deref(), &to_json(&profile)?)
}

fn bounds(cli: &Cli, args: &BoundsArgs) -> CliResult<()> {
    let profile = read_profile(&args.norms)?;
    let (loss, opts) = args.bounds.options()?;
    let report = BoundReport::compute(
        &label(&args.norms),
        &profile,
        args.bounds.t,
        args.bounds.n,
        &loss,
        &opts,
    )?;
    let text = reports_out(&[report], cli.format.unwrap_or(Format::Csv), args.imp_per)?;
    emit(cli.out.as_deref(), &text)
}

fn compare(cli: &Cli, args: &CompareArgs) -> CliResult<()> {
    let profiles = args
        .profiles
        .iter()
        .map(|p| Ok((label(p), read_profile(p)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let (loss, opts) = args.bounds.options()?;
    let reports = harness::compare_profiles(&profiles, args.bounds.t, args.bounds.n, &loss, &opts)?;
    let text = reports_out(&reports, cli.format.unwrap_or(Format::Csv), true)?;
    emit(cli.out.as_deref(), &text)
}

fn verify(cli: &Cli, args: &VerifyArgs) -> CliResult<()> {
    if cli.format == Some(Format::Csv) {
        return invalid("verify writes JSON only");
    }
    if args.trials == 0 || args.max_d == 0 || args.max_t == 0 {
        return invalid("trials, max-d and max-t must be positive");
    }
    let seed = cli.seed.unwrap_or(0);
    let dims = VerifyDims {
        max_d: args.max_d,
        max_t: args.max_t,
    };
    let (hidden, output, loss) = match args.suite {
        Suite::Lemmas => (true, true, true),
        Suite::Hidden => (true, false, false),
        Suite::Output => (false, true, false),
        Suite::Loss => (false, false, true),
    };
    let mut reports = Vec::new();
    if hidden {
        reports.push(empirical::verify_hidden_norm(args.trials, dims, seed)?);
    }
    if output {
        for flavor in [Flavor::Frobenius, Flavor::Spectral] {
            reports.push(empirical::verify_output_lipschitz(
                args.trials,
                dims,
                Perturbation::All,
                flavor,
                seed,
            )?);
        }
        reports.push(empirical::verify_output_lipschitz(
            args.trials,
            dims,
            Perturbation::OnlyV,
            Flavor::Frobenius,
            seed,
        )?);
    }
    if loss {
        for l in [LossSpec::CrossEntropy, LossSpec::Hinge, LossSpec::Ramp { gamma: 1.0 }] {
            reports.push(empirical::verify_loss_lipschitz(
                &l,
                args.trials,
                args.max_d.max(2),
                seed,
            )?);
        }
    }
    emit(cli.out.as_deref(), &to_json(&reports)?)?;
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    if violations > 0 {
        return Err(Failure::Runtime(anyhow!("{violations} violations")));
    }
    Ok(())
}

#[derive(Serialize)]
struct ErcOutput {
    estimate: empirical::ErcEstimate,
    rademacher_exact: f64,
    profile_hash: String,
}

fn erc(cli: &Cli, args: &ErcArgs) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    let constraints = ClassConstraints {
        b_u: args.b_u,
        b_v: args.b_v,
        b_w: args.b_w,
        m_u: args.m_u,
        activation: args.activation,
    };
    let (data, d_y) = match &args.config {
        Some(path) => {
            let cfg = TrainConfig::from_json(&read_input(path)?)?;
            (cfg.dataset()?, cfg.k)
        }
        None => (
            empirical::random_batch(args.n, args.t, args.d_x, args.classes, 1.0, seed)?,
            args.classes,
        ),
    };
    let loss = args.loss.spec()?;
    let opts = ErcOptions {
        draws: args.draws,
        ascent: AscentOptions {
            restarts: args.restarts,
            steps: args.steps,
            lr: args.lr,
        },
        seed,
    };
    let estimate = empirical::estimate_erc_mc(&constraints, args.d_h, d_y, &data, &loss, &opts)?;
    let profile = constraints.profile(args.d_h, d_y, &data);
    let rho = loss.rho();
    let bound = capacity::rademacher_exact(&profile, data.t(), data.n(), rho, Flavor::Frobenius)?;
    let out = ErcOutput {
        estimate,
        rademacher_exact: bound.value,
        profile_hash: profile.hash(),
    };
    let text = match cli.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&out)?,
        Format::Csv => format!(
            "mean,std_error,draws,restarts,discarded_restarts,rademacher_exact\n{},{},{},{},{},{}\n",
            out.estimate.mean,
            out.estimate.std_error,
            out.estimate.draws,
            out.estimate.restarts,
            out.estimate.discarded_restarts,
            out.rademacher_exact
        ),
    };
    emit(cli.out.as_deref(), &text)
}

fn run(cli: &mut Cli) -> CliResult<()> {
    configure_threads()?;
    match &mut cli.command {
        Command::Bounds(a) => a.bounds.loss.resolve(),
        Command::Compare(a) => a.bounds.loss.resolve(),
        Command::Erc(a) => a.loss.resolve(),
        _ => {}
    }
    let cli = &*cli;
    announce("resolved config", cli);
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Norms(a) => norms(cli, a),
        Command::Bounds(a) => bounds(cli, a),
        Command::Verify(a) => verify(cli, a),
        Command::Erc(a) => erc(cli, a),
        Command::Compare(a) => compare(cli, a),
    }
}

fn main() -> ExitCode {
    let mut cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&mut cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
