//! Command-line front end.
//!
//! Exit codes: 0 success, 1 a `verify` check failed, 2 usage error, 3 config,
//! 4 I/O (including refusing to overwrite an artifact), 5 invariant violation,
//! 6 divergence.

use crate::config::{parse_range, ExperimentConfig};
use crate::denoisers::{EpsilonModel, Mlp, MlpShape, DenoiserModel, Checkpoint};
use crate::diagnostics::{
    coupling_matrix, metrics_csv, moment_error, mse_by_step, sliced_wasserstein, variance_density, CouplingConfig,
    MseConfig, VarianceSource,
};
use crate::error::{Error, ErrorCategory, Result};
use crate::io::{samples_csv, write_artifact};
use crate::rng::{Purpose, Streams};
use crate::samplers::{run_sampler, SamplerConfig, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::theory::{run_theorem_experiment, TheoremExperiment};
use crate::timeshift::run_time_shift_sampler;
use crate::training::{loss_curve_csv, train};
use crate::{verify, SampleBatch};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "tsdiff", version, about = "Diffusion sampling with variance-matched time shifting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Existing files are never overwritten.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inspect the noise schedule.
    Schedule {
        #[command(subcommand)]
        action: ScheduleAction,
    },
    /// Train an MLP ε-predictor on the configured dataset.
    Train(TrainArgs),
    /// Draw samples.
    Sample(SampleArgs),
    /// Exposure-bias diagnostics.
    Diagnose {
        kind: DiagnoseKind,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Numerical checks with a JSON report.
    Verify {
        kind: VerifyKind,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Time-shift sampling over a window × cutoff grid.
    Sweep(SweepArgs),
}

#[derive(Subcommand, Debug)]
enum ScheduleAction {
    /// Per-timestep β, α, ᾱ and 1−ᾱ as CSV.
    Dump {
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long)]
        beta_start: Option<f64>,
        #[arg(long)]
        beta_end: Option<f64>,
    },
}

#[derive(Args, Debug, Default)]
struct SamplerFlags {
    /// ddpm, ddim, s-pndm, f-pndm, or a ts- variant.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// uniform or quadratic.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    /// Number of chains.
    #[arg(long)]
    n: Option<usize>,
    /// Injected per-step state error.
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    cutoff: Option<usize>,
    /// Select a shifted timestep per chain.
    #[arg(long)]
    per_chain: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    sampler: SamplerFlags,
    /// start:end:step
    #[arg(long)]
    window: Option<String>,
    /// start:end:step
    #[arg(long)]
    cutoff: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DiagnoseKind {
    Variance,
    Mse,
    Coupling,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum VerifyKind {
    Theorem,
    Window,
    Order,
    Equivalence,
}

fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Config => 3,
        ErrorCategory::Io => 4,
        ErrorCategory::Invariant => 5,
        ErrorCategory::Diverged => 6,
    }
}

/// Runs one command line; returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.category())
        }
    }
}

type Overrides = Vec<(String, toml::Value)>;

fn put<V: Into<toml::Value>>(o: &mut Overrides, key: &str, v: Option<V>) {
    if let Some(v) = v {
        o.push((key.to_string(), v.into()));
    }
}

fn sampler_overrides(o: &mut Overrides, f: &SamplerFlags) {
    put(o, "sampler.method", f.method.clone());
    put(o, "sampler.steps", f.steps.map(|v| v as i64));
    put(o, "sampler.grid", f.grid.clone());
    put(o, "sampler.eta", f.eta);
    put(o, "sampler.n", f.n.map(|v| v as i64));
    put(o, "model.phi", f.phi);
    put(o, "model.checkpoint", f.checkpoint.as_ref().map(|p| p.display().to_string()));
}

fn load(common: &Common, mut overrides: Overrides) -> Result<ExperimentConfig> {
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config("seed must fit in 63 bits".into()))?;
        overrides.insert(0, ("seed".into(), seed.into()));
    }
    ExperimentConfig::load(common.config.as_deref(), &overrides)
}

fn out_dir(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

/// Writes every artifact plus the resolved config.
fn persist(dir: &Path, cfg: &ExperimentConfig, files: &[(&str, String)]) -> Result<()> {
    for (name, _) in files.iter().chain([&("config.toml", String::new())]) {
        if dir.join(name).exists() {
            return Err(Error::ArtifactExists(dir.join(name).display().to_string()));
        }
    }
    for (name, body) in files {
        write_artifact(&dir.join(name), body.as_bytes())?;
    }
    write_artifact(&dir.join("config.toml"), cfg.to_toml().as_bytes())
}

/// Writes to stdout; a closed pipe is not an error.
fn stdout(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn dispatch(cli: Cli) -> Result<bool> {
    let common = cli.common;
    match cli.command {
        Command::Schedule { action: ScheduleAction::Dump { timesteps, beta_start, beta_end } } => {
            let mut o = Overrides::new();
            put(&mut o, "schedule.steps", timesteps.map(|v| v as i64));
            put(&mut o, "schedule.beta_start", beta_start);
            put(&mut o, "schedule.beta_end", beta_end);
            if common.seed.is_none() && common.config.is_none() {
                o.insert(0, ("seed".into(), 0i64.into()));
            }
            let cfg = load(&common, o)?;
            let csv = cfg.schedule()?.to_csv();
            match &common.out {
                Some(dir) => persist(dir, &cfg, &[("schedule.csv", csv)])?,
                None => stdout(&csv),
            }
            Ok(true)
        }
        Command::Train(args) => {
            let mut o = Overrides::new();
            put(&mut o, "train.epochs", args.epochs.map(|v| v as i64));
            put(&mut o, "train.batch_size", args.batch_size.map(|v| v as i64));
            put(&mut o, "train.learning_rate", args.lr);
            let cfg = load(&common, o)?;
            let dir = out_dir(&common)?;
            cmd_train(&cfg, dir)
        }
        Command::Sample(args) => {
            let mut o = Overrides::new();
            sampler_overrides(&mut o, &args.sampler);
            let mut cfg = load(&common, o)?;
            if args.window.is_some() || args.cutoff.is_some() || args.per_chain {
                let mut shift = cfg.shift.or_else(|| crate::timeshift::ShiftConfig::preset(cfg.sampler.steps)).unwrap_or(crate::timeshift::ShiftConfig::new(0, 0));
                shift.window = args.window.unwrap_or(shift.window);
                shift.cutoff = args.cutoff.unwrap_or(shift.cutoff);
                shift.per_chain |= args.per_chain;
                cfg.shift = Some(shift);
            }
            let dir = out_dir(&common)?;
            cmd_sample(&cfg, dir)
        }
        Command::Diagnose { kind, sampler } => {
            let mut o = Overrides::new();
            sampler_overrides(&mut o, &sampler);
            let cfg = load(&common, o)?;
            let dir = out_dir(&common)?;
            cmd_diagnose(&cfg, kind, dir)
        }
        Command::Verify { kind, trials } => {
            let mut o = Overrides::new();
            put(&mut o, "verify.trials", trials.map(|v| v as i64));
            if common.seed.is_none() && common.config.is_none() {
                o.insert(0, ("seed".into(), 0i64.into()));
            }
            let cfg = load(&common, o)?;
            cmd_verify(&cfg, kind, common.out.as_deref())
        }
        Command::Sweep(args) => {
            let mut o = Overrides::new();
            sampler_overrides(&mut o, &args.sampler);
            put(&mut o, "sweep.window", args.window);
            put(&mut o, "sweep.cutoff", args.cutoff);
            let mut cfg = load(&common, o)?;
            if args.sampler.method.is_none() && !cfg.sampler.method.starts_with("ts-") {
                cfg.sampler.method = format!("ts-{}", cfg.sampler.method);
            }
            let dir = out_dir(&common)?;
            cmd_sweep(&cfg, dir)
        }
    }
}

fn dataset(cfg: &ExperimentConfig) -> Result<SampleBatch> {
    cfg.dataset.generate(&mut Streams::new(cfg.seed).stream(Purpose::Data, 0))
}

fn cmd_train(cfg: &ExperimentConfig, dir: &Path) -> Result<bool> {
    let schedule = cfg.schedule()?;
    let data = dataset(cfg)?;
    let shape = MlpShape { dim: data.d(), hidden: cfg.train.hidden.clone(), time_dim: cfg.train.time_dim };
    let mut mlp = Mlp::new(shape, &mut Streams::new(cfg.seed).stream(Purpose::Init, 0))?;
    let tc = cfg.train_config();
    let losses = train(&mut mlp, &data, &tc, &schedule)?;
    let echo = serde_json::to_value(&tc).expect("train config serializes");
    let ck = Checkpoint::new(&DenoiserModel::Mlp(mlp), &schedule, Some(echo));
    persist(dir, cfg, &[("checkpoint.json", ck.to_json()), ("loss.csv", loss_curve_csv(&losses))])?;
    eprintln!("trained {} steps, final loss {}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
    Ok(true)
}

fn run_configured(
    cfg: &ExperimentConfig,
    sampler: &SamplerConfig,
    model: &dyn EpsilonModel,
    schedule: &NoiseSchedule,
) -> Result<(SampleBatch, Trajectory)> {
    if cfg.sampler_choice()?.time_shift {
        run_time_shift_sampler(sampler, &cfg.shift_config()?, model, schedule)
    } else {
        run_sampler(sampler, model, schedule)
    }
}

/// Quality of `x` against fresh dataset draws and, when known, the exact moments.
fn quality(cfg: &ExperimentConfig, x: &SampleBatch, n_proj: usize) -> Result<Vec<(String, f64)>> {
    let mut spec = cfg.dataset.clone();
    let reference = {
        let size = x.n();
        match &mut spec {
            crate::training::DatasetSpec::Gaussian { size: s, .. }
            | crate::training::DatasetSpec::Gmm { size: s, .. }
            | crate::training::DatasetSpec::SwissRoll { size: s, .. }
            | crate::training::DatasetSpec::Heterogeneous { size: s, .. } => *s = size,
        }
        spec.generate(&mut Streams::new(cfg.seed).stream(Purpose::Diagnostics, 1))?
    };
    let mut rng = Streams::new(cfg.seed).stream(Purpose::Diagnostics, 2);
    let mut metrics = vec![("sliced_wasserstein".to_string(), sliced_wasserstein(x, &reference, n_proj.max(32), &mut rng)?)];
    if let Some(mix) = cfg.dataset.mixture()? {
        let m = moment_error(x, &mix)?;
        metrics.push(("mean_error".into(), m.mean_error));
        metrics.push(("cov_error".into(), m.cov_error));
    }
    Ok(metrics)
}

fn cmd_sample(cfg: &ExperimentConfig, dir: &Path) -> Result<bool> {
    let schedule = cfg.schedule()?;
    let model = cfg.model(&schedule)?;
    let sampler = cfg.sampler_config(&schedule)?;
    let (x, traj) = run_configured(cfg, &sampler, &model, &schedule)?;
    let metrics = quality(cfg, &x, cfg.sweep.n_proj)?;
    for w in &traj.warnings {
        eprintln!("warning: step {}: {}", w.step, w.message);
    }
    persist(
        dir,
        cfg,
        &[("samples.csv", samples_csv(&x)), ("trajectory.jsonl", traj.to_jsonl()), ("metrics.csv", metrics_csv(&metrics))],
    )?;
    Ok(true)
}

fn cmd_diagnose(cfg: &ExperimentConfig, kind: DiagnoseKind, dir: &Path) -> Result<bool> {
    let schedule = cfg.schedule()?;
    let data = dataset(cfg)?;
    let dg = &cfg.diagnose;
    let files = match kind {
        DiagnoseKind::Variance => {
            let mut rng = Streams::new(cfg.seed).stream(Purpose::Diagnostics, 0);
            let model;
            let source = if dg.backward {
                model = cfg.model(&schedule)?;
                VarianceSource::Backward { model: &model, config: cfg.sampler_config(&schedule)? }
            } else {
                VarianceSource::Forward
            };
            let dens = variance_density(&data, &dg.timesteps, source, &schedule, &mut rng)?;
            vec![("variance.csv", dens.to_csv()), ("histogram.csv", dens.histogram_csv())]
        }
        DiagnoseKind::Mse => {
            let model = cfg.model(&schedule)?;
            let mut mc = MseConfig::new(cfg.sampler_config(&schedule)?, &schedule);
            if let Some(ts) = dg.t_split {
                mc.t_split = ts;
            }
            vec![("mse.csv", mse_by_step(&model, &data, &mc, &schedule)?.to_csv())]
        }
        DiagnoseKind::Coupling => {
            let model = cfg.model(&schedule)?;
            let mut cc = CouplingConfig::new(cfg.sampler_config(&schedule)?);
            cc.offsets = (dg.offset_lo..=dg.offset_hi).collect();
            cc.batch_mean = dg.batch_mean;
            vec![("coupling.csv", coupling_matrix(&model, &data, &cc, &schedule)?.to_csv())]
        }
    };
    persist(dir, cfg, &files)?;
    Ok(true)
}

#[derive(Serialize)]
struct VerifyOutput<R: Serialize> {
    experiment: &'static str,
    pass: bool,
    tolerance: String,
    report: R,
}

fn emit<R: Serialize>(out: Option<&Path>, cfg: &ExperimentConfig, v: VerifyOutput<R>) -> Result<bool> {
    let json = serde_json::to_string_pretty(&v).expect("report serializes");
    stdout(&format!("{json}\n"));
    if let Some(dir) = out {
        persist(dir, cfg, &[("report.json", json)])?;
    }
    Ok(v.pass)
}

fn cmd_verify(cfg: &ExperimentConfig, kind: VerifyKind, out: Option<&Path>) -> Result<bool> {
    let schedule = cfg.schedule()?;
    let v = &cfg.verify;
    match kind {
        VerifyKind::Theorem => {
            let exp = TheoremExperiment {
                d: v.dim,
                timesteps: v.timesteps.clone(),
                err_norms: v.err_norms.clone(),
                trials: v.trials,
                window: v.window,
                seed: cfg.seed,
                ..TheoremExperiment::default()
            };
            let report = run_theorem_experiment(&exp, &schedule)?;
            let pass = report.min_cell_rate >= 0.95;
            emit(out, cfg, VerifyOutput { experiment: "theorem", pass, tolerance: format!("agreement within ±{} in >= 95% of trials per cell", exp.tolerance), report })
        }
        VerifyKind::Window => {
            let report = verify::window_sanity(&schedule)?;
            emit(out, cfg, VerifyOutput { experiment: "window", pass: report.pass, tolerance: "exact; endpoints to one ladder step".into(), report })
        }
        VerifyKind::Order => {
            let start = (schedule.len() * 24 / 25 / 80 * 80).max(v.order_steps.iter().copied().max().unwrap_or(1));
            let report = verify::solver_order(&v.order_steps, start, &schedule)?;
            emit(out, cfg, VerifyOutput { experiment: "order", pass: report.pass, tolerance: "slope <= -1.7 (s-pndm), <= -3.0 (f-pndm)".into(), report })
        }
        VerifyKind::Equivalence => {
            let report = verify::equivalence(v.chains, &[cfg.seed, cfg.seed + 1, cfg.seed + 2], &schedule)?;
            emit(out, cfg, VerifyOutput { experiment: "equivalence", pass: report.pass, tolerance: "bitwise".into(), report })
        }
    }
}

fn cmd_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<bool> {
    let schedule = cfg.schedule()?;
    let windows = parse_range(&cfg.sweep.window)?;
    let cutoffs = parse_range(&cfg.sweep.cutoff)?;
    let model = cfg.model(&schedule)?;
    let sampler = cfg.sampler_config(&schedule)?;
    let choice = cfg.sampler_choice()?;
    if !choice.time_shift {
        return Err(Error::Config(format!("sweep needs a time-shift method, got {choice}")));
    }
    let cells: Vec<(usize, usize)> = windows.iter().flat_map(|w| cutoffs.iter().map(move |c| (*w, *c))).collect();
    let cell_dir = dir.join("cells");
    let rows: Vec<Result<String>> = cells
        .par_iter()
        .map(|&(w, c)| {
            let mut shift = crate::timeshift::ShiftConfig::new(w, c);
            shift.per_chain = cfg.shift.is_some_and(|s| s.per_chain);
            let (x, _) = run_time_shift_sampler(&sampler, &shift, &model, &schedule)?;
            write_artifact(&cell_dir.join(format!("w{w}_c{c}.csv")), samples_csv(&x).as_bytes())?;
            let metrics = quality(cfg, &x, cfg.sweep.n_proj)?;
            let values: Vec<String> = metrics.iter().map(|(_, v)| crate::io::fmt17(*v)).collect();
            Ok(format!("{w},{c},{}\n", values.join(",")))
        })
        .collect();
    let mut header = String::from("window,cutoff,sliced_wasserstein");
    if cfg.dataset.mixture()?.is_some() {
        header.push_str(",mean_error,cov_error");
    }
    let mut csv = header + "\n";
    for r in rows {
        csv.push_str(&r?);
    }
    persist(dir, cfg, &[("sweep.csv", csv)])?;
    Ok(true)
}
