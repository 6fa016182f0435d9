//! Command-line pipeline for the winged-blimp model: simulate trajectories,
//! extract steady-state wrenches, select regime thresholds, train the hybrid
//! model, evaluate mixing modes, and export plot data.
//!
//! Every subcommand that produces files writes them under `--out` together
//! with a `manifest.json` recording the resolved arguments and a byte-for-byte
//! snapshot of the config, so a run can be reproduced bit-identically from its
//! manifest. Input files are never modified.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config, or data),
//! 2 runtime or numeric failure. Set `BLIMP_LOG` for progress logging.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use blimp_core::dataio::{
    format_lambda_surface, load_config, load_dir, load_trajectory, mirror_trajectory,
    partition_dataset, record_from_rollout, save_trajectory, split, Config, DataError, SplitSpec,
    StepSample, TrajectoryRecord,
};
use blimp_core::dynamics::{rollout, DynamicsError, MixingMode};
use blimp_core::ident::{
    evaluate, extract_steady_samples, gradient_check, ols_fit, three_phase_train, threshold_scan,
    BasisKind, FitReport, Horizon, IdentError, LossConfig, OlsFit, Phase,
};
use blimp_core::mixer::{lambda_surface, MixerError, MixerParams};
use blimp_core::synth;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("BLIMP_LOG"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::FitSteady(a) => cmd_fit_steady(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportLambda(a) => cmd_export_lambda(a),
        Command::Mirror(a) => cmd_mirror(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

#[derive(Parser)]
#[command(name = "blimp", version, about = "Winged-blimp simulation and identification pipeline")]
struct Cli {
    /// Cap the worker thread count (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the hybrid dynamics under the inputs of a trajectory file.
    Simulate(SimulateArgs),
    /// Extract steady-state wrench samples and fit both regression bases.
    FitSteady(FitSteadyArgs),
    /// Select regime thresholds from binned regression diagnostics.
    Partition(PartitionArgs),
    /// Run the three-phase identification and save the fitted model.
    Train(TrainArgs),
    /// Compare mixing modes on a dataset.
    Evaluate(EvaluateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export the mixing surface and the per-configuration loss table.
    ExportLambda(ExportLambdaArgs),
    /// Write left-right mirrored copies of every trajectory.
    Mirror(MirrorArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trajectory CSV supplying the initial state and control inputs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Mixer weights (JSON); required for neural mode.
    #[arg(long)]
    mixer: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitSteadyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of trajectory CSVs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Bins per axis for the regression diagnostics.
    #[arg(long, default_value_t = 8)]
    bins: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed for the split, batching, and mixer init.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Mixer weights (JSON); enables neural mode.
    #[arg(long)]
    mixer: Option<PathBuf>,
    /// Single mode to evaluate (default: every applicable mode).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Prediction horizon: 1 re-anchors at each measurement, free does not.
    #[arg(long, value_parser = parse_horizon, default_value = "1")]
    horizon: HorizonArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trajectory directory for the probe batch (default: synthetic batch).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probe points per phase.
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Optional run directory for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportLambdaArgs {
    #[arg(long)]
    mixer: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// When given, also writes the per-configuration loss table.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MirrorArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum ModeArg {
    Acm,
    Gdm,
    Hard,
    Sigmoid,
    Neural,
}

impl From<ModeArg> for MixingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Acm => MixingMode::AcmOnly,
            ModeArg::Gdm => MixingMode::GdmOnly,
            ModeArg::Hard => MixingMode::Hard,
            ModeArg::Sigmoid => MixingMode::SigmoidFixed,
            ModeArg::Neural => MixingMode::Neural,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum HorizonArg {
    One,
    Free,
}

impl From<HorizonArg> for Horizon {
    fn from(h: HorizonArg) -> Self {
        match h {
            HorizonArg::One => Horizon::OneStep,
            HorizonArg::Free => Horizon::Free,
        }
    }
}

fn parse_horizon(s: &str) -> Result<HorizonArg, String> {
    match s {
        "1" => Ok(HorizonArg::One),
        "free" => Ok(HorizonArg::Free),
        _ => Err(String::from("expected `1` or `free`")),
    }
}

/// Failures mapped to exit codes: validation 1, runtime 2.
#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MixerError> for CliError {
    fn from(e: MixerError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::MissingMixer
            | DynamicsError::MissingPartition
            | DynamicsError::BadPartition(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<IdentError> for CliError {
    fn from(e: IdentError) -> Self {
        match e {
            IdentError::BadConfig(_)
            | IdentError::EmptyRegion(_)
            | IdentError::InsufficientCoverage { .. }
            | IdentError::RankDeficient { .. }
            | IdentError::Mixer(_) => CliError::Validation(e.to_string()),
            // Keep the inner distinction: a scan that lands on an unusable
            // partition is a data problem, not a numeric one.
            IdentError::Dynamics(inner) => inner.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// A run directory: collects output files and finishes with a manifest that
/// records the resolved arguments and the config snapshot.
struct Run {
    dir: PathBuf,
    command: &'static str,
    args: serde_json::Map<String, Value>,
    config_snapshot: Option<String>,
    outputs: Vec<String>,
}

impl Run {
    fn create(out: &Path, command: &'static str) -> Result<Self, CliError> {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self {
            dir: out.to_path_buf(),
            command,
            args: serde_json::Map::new(),
            config_snapshot: None,
            outputs: Vec::new(),
        })
    }

    fn arg(&mut self, key: &str, value: Value) {
        self.args.insert(key.to_string(), value);
    }

    /// Copy the config into the run directory so the manifest reproduces the
    /// run even if the original file later changes.
    fn snapshot_config(&mut self, path: Option<&Path>) -> Result<(), CliError> {
        if let Some(path) = path {
            std::fs::copy(path, self.dir.join("config.toml"))
                .map_err(|e| CliError::Runtime(format!("config snapshot: {e}")))?;
            self.config_snapshot = Some(String::from("config.toml"));
            self.outputs.push(String::from("config.toml"));
        }
        Ok(())
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), text)
            .map_err(|e| CliError::Runtime(format!("writing {name}: {e}")))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.outputs.sort();
        let manifest = json!({
            "tool": format!("blimp {}", env!("CARGO_PKG_VERSION")),
            "command": self.command,
            "args": Value::Object(self.args),
            "config_snapshot": self.config_snapshot,
            "outputs": self.outputs,
        });
        let text = format!("{:#}\n", manifest);
        std::fs::write(self.dir.join("manifest.json"), text)
            .map_err(|e| CliError::Runtime(format!("writing manifest.json: {e}")))?;
        Ok(())
    }
}

fn load_config_or_default(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => Ok(Config::default()),
    }
}

fn path_value(p: Option<&Path>) -> Value {
    p.map_or(Value::Null, |p| Value::String(p.display().to_string()))
}

/// Writing into the directory being read would break the no-mutation
/// contract and corrupt later loads.
fn ensure_distinct(out: &Path, data: &Path) -> Result<(), CliError> {
    let a = std::fs::canonicalize(out).ok();
    let b = std::fs::canonicalize(data).ok();
    if a.is_some() && a == b {
        return Err(CliError::Validation(format!(
            "--out must differ from the input directory {}",
            data.display()
        )));
    }
    Ok(())
}

fn load_mixer(path: Option<&Path>, mode_needs_it: bool) -> Result<Option<MixerParams>, CliError> {
    match path {
        Some(p) => Ok(Some(MixerParams::load(p)?)),
        None if mode_needs_it => Err(CliError::Validation(String::from(
            "neural mode requires --mixer",
        ))),
        None => Ok(None),
    }
}

/// Mixer scales matching the regularizer lattice extent.
fn mixer_scales(loss: &LossConfig) -> (f64, f64) {
    let a = loss.reg.alphas.last().copied().unwrap_or(1.0);
    let v = loss.reg.speeds.last().copied().unwrap_or(1.0);
    (a, v)
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let cfg = load_config_or_default(a.config.as_deref())?;
    let rec = load_trajectory(&a.input)?;
    if rec.samples.len() < 2 {
        return Err(CliError::Validation(format!(
            "{} has {} samples, need at least 2",
            a.input.display(),
            rec.samples.len()
        )));
    }
    let xi = load_mixer(a.mixer.as_deref(), a.mode == ModeArg::Neural)?;
    let inputs: Vec<_> = rec.samples[..rec.samples.len() - 1].iter().map(|s| s.input()).collect();
    let x0 = rec.samples[0].state();
    log::info!("integrating {} steps at {} Hz", inputs.len(), rec.rate);
    let traj = rollout(
        &x0,
        &inputs,
        &cfg.physical,
        a.mode.into(),
        xi.as_ref(),
        Some(&cfg.partition),
        rec.dt(),
    )?;
    let mut out_rec = record_from_rollout(&rec.id, rec.rate, &traj, &inputs);
    out_rec.level_l = rec.level_l;
    out_rec.level_r = rec.level_r;
    out_rec.dr_x_cm = rec.dr_x_cm;

    let mut run = Run::create(&a.out, "simulate")?;
    run.arg("config", path_value(a.config.as_deref()));
    run.arg("input", path_value(Some(&a.input)));
    run.arg("mode", json!(format!("{:?}", a.mode)));
    run.arg("mixer", path_value(a.mixer.as_deref()));
    run.snapshot_config(a.config.as_deref())?;
    save_trajectory(&run.dir.join("trajectory.csv"), &out_rec)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    run.outputs.push(String::from("trajectory.csv"));
    run.finish()?;
    println!(
        "simulated {} steps ({:?}) -> {}",
        inputs.len(),
        MixingMode::from(a.mode),
        a.out.join("trajectory.csv").display()
    );
    Ok(())
}

fn steady_samples_csv(samples: &[blimp_core::ident::SteadySample]) -> String {
    let mut out = String::from("alpha,beta,V,u,v,w,p,q,r,Fx,Fy,Fz,Mx,My,Mz\n");
    use std::fmt::Write as _;
    for s in samples {
        let _ = write!(out, "{},{},{}", s.flow.alpha, s.flow.beta, s.flow.speed);
        for i in 0..6 {
            let _ = write!(out, ",{}", s.nu[i]);
        }
        for i in 0..3 {
            let _ = write!(out, ",{}", s.wrench.force[i]);
        }
        for i in 0..3 {
            let _ = write!(out, ",{}", s.wrench.moment[i]);
        }
        out.push('\n');
    }
    out
}

fn fit_json(fit: &OlsFit, names: &[String]) -> Value {
    let coeffs: Vec<Value> = names
        .iter()
        .zip(&fit.coeffs)
        .map(|(n, c)| json!({"name": n, "value": c}))
        .collect();
    json!({
        "r_squared": fit.r_squared,
        "residual_rms": fit.residual_rms,
        "coefficients": coeffs,
    })
}

fn cmd_fit_steady(a: FitSteadyArgs) -> Result<(), CliError> {
    let cfg = load_config_or_default(a.config.as_deref())?;
    let records = load_dir(&a.data)?;
    let samples = extract_steady_samples(&records, &cfg.physical);
    log::info!("{} trajectories, {} steady windows", records.len(), samples.len());
    if samples.is_empty() {
        return Err(CliError::Validation(String::from(
            "no steady-state windows found in the dataset",
        )));
    }
    let acm = ols_fit(&samples, BasisKind::Acm)?;
    let gdm = ols_fit(&samples, BasisKind::Gdm)?;

    let mut run = Run::create(&a.out, "fit-steady")?;
    ensure_distinct(&run.dir, &a.data)?;
    run.arg("config", path_value(a.config.as_deref()));
    run.arg("data", path_value(Some(&a.data)));
    run.snapshot_config(a.config.as_deref())?;
    run.write("steady-samples.csv", &steady_samples_csv(&samples))?;
    let fits = json!({
        "n_samples": samples.len(),
        "acm": fit_json(&acm, &cfg.physical.acm.param_names()),
        "gdm": fit_json(&gdm, &cfg.physical.gdm.param_names()),
    });
    run.write("fit.json", &format!("{:#}\n", fits))?;
    run.finish()?;
    println!(
        "{} steady samples; R-squared acm {:.4} gdm {:.4}",
        samples.len(),
        acm.r_squared,
        gdm.r_squared
    );
    Ok(())
}

fn cmd_partition(a: PartitionArgs) -> Result<(), CliError> {
    let cfg = load_config_or_default(a.config.as_deref())?;
    let records = load_dir(&a.data)?;
    let samples = extract_steady_samples(&records, &cfg.physical);
    if samples.is_empty() {
        return Err(CliError::Validation(String::from(
            "no steady-state windows found in the dataset",
        )));
    }
    let (part, fit, diag) = threshold_scan(&samples, a.bins)?;
    let pools = partition_dataset(&records, &part);

    let mut run = Run::create(&a.out, "partition")?;
    ensure_distinct(&run.dir, &a.data)?;
    run.arg("config", path_value(a.config.as_deref()));
    run.arg("data", path_value(Some(&a.data)));
    run.arg("bins", json!(a.bins));
    run.snapshot_config(a.config.as_deref())?;
    let part_json = json!({
        "alpha_star": part.alpha_star,
        "v_star": part.v_star,
        "alpha_band": [part.alpha1, part.alpha2],
        "v_band": [part.v1, part.v2],
        "corner_fit": {"r_squared": fit.r_squared, "residual_rms": fit.residual_rms},
        "pool_steps": {
            "acm": pools.acm.len(),
            "transition": pools.transition.len(),
            "gdm": pools.gdm.len(),
        },
    });
    run.write("partition.json", &format!("{:#}\n", part_json))?;
    let mut csv = String::from("axis,lo,hi,n,r_squared\n");
    use std::fmt::Write as _;
    for (axis, bins) in [("alpha", &diag.alpha_bins), ("V", &diag.v_bins)] {
        for b in bins {
            let _ = writeln!(csv, "{axis},{},{},{},{}", b.lo, b.hi, b.n, b.r_squared);
        }
    }
    run.write("diagnostics.csv", &csv)?;
    run.finish()?;
    println!(
        "alpha* {:.4} (band {:.4}..{:.4})  V* {:.4} (band {:.4}..{:.4})",
        part.alpha_star, part.alpha1, part.alpha2, part.v_star, part.v1, part.v2
    );
    println!(
        "pools: acm {} transition {} gdm {}",
        pools.acm.len(),
        pools.transition.len(),
        pools.gdm.len()
    );
    Ok(())
}

fn cumulative_csv(report: &FitReport) -> String {
    let mut out = String::from("mode,id,step,rmse\n");
    use std::fmt::Write as _;
    for c in &report.cumulative {
        for (i, r) in c.rmse.iter().enumerate() {
            let _ = writeln!(out, "{:?},{},{},{}", c.mode, c.id, i, r);
        }
    }
    out
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config_or_default(a.config.as_deref())?;
    let records = load_dir(&a.data)?;
    let seed = a.seed.unwrap_or(cfg.loss.seed);
    let mut loss = cfg.loss.clone();
    loss.seed = seed;

    let outcome = split(&records, &SplitSpec { seed, ..SplitSpec::default() })?;
    let train_recs: Vec<TrajectoryRecord> =
        outcome.train.iter().map(|&i| records[i].clone()).collect();
    let test_recs: Vec<TrajectoryRecord> =
        outcome.test.iter().map(|&i| records[i].clone()).collect();
    let pools = partition_dataset(&train_recs, &cfg.partition);
    log::info!(
        "split {} train / {} test; pools acm {} transition {} gdm {}",
        train_recs.len(),
        test_recs.len(),
        pools.acm.len(),
        pools.transition.len(),
        pools.gdm.len()
    );

    let (a_scale, v_scale) = mixer_scales(&loss);
    let xi0 = MixerParams::init(seed, a_scale, v_scale);
    let (phi, xi, report) = three_phase_train(&pools, &cfg.physical, &xi0, &loss)?;

    let mut run = Run::create(&a.out, "train")?;
    ensure_distinct(&run.dir, &a.data)?;
    run.arg("config", path_value(a.config.as_deref()));
    run.arg("data", path_value(Some(&a.data)));
    run.arg("seed", json!(seed));
    run.snapshot_config(a.config.as_deref())?;
    xi.save(&run.dir.join("mixer.json"))
        .map_err(|e| CliError::Runtime(format!("writing mixer.json: {e}")))?;
    run.outputs.push(String::from("mixer.json"));
    run.write("params.csv", &report.params_csv())?;
    run.write("curves.csv", &report.curves_csv())?;
    let split_json = json!({
        "stratified": outcome.stratified,
        "train": train_recs.iter().map(|r| r.id.clone()).collect::<Vec<_>>(),
        "test": test_recs.iter().map(|r| r.id.clone()).collect::<Vec<_>>(),
    });
    run.write("split.json", &format!("{:#}\n", split_json))?;

    let finals: Vec<f64> =
        report.loss_curves.iter().map(|c| c.last().copied().unwrap_or(f64::NAN)).collect();
    println!(
        "final phase losses: acm {:.6e} gdm {:.6e} mixer {:.6e}",
        finals[0], finals[1], finals[2]
    );
    if test_recs.is_empty() {
        log::warn!("test split is empty, skipping held-out evaluation");
    } else {
        let modes = [
            MixingMode::Neural,
            MixingMode::SigmoidFixed,
            MixingMode::Hard,
            MixingMode::AcmOnly,
            MixingMode::GdmOnly,
        ];
        let eval = evaluate(
            &test_recs,
            &modes,
            &phi,
            Some(&xi),
            &cfg.partition,
            &loss.w,
            Horizon::OneStep,
        )?;
        run.write("rmse.csv", &eval.rmse_csv())?;
        run.write("heatmap.csv", &eval.heatmap_csv())?;
        print!("{}", eval.rmse_csv());
    }
    run.finish()?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let cfg = load_config_or_default(a.config.as_deref())?;
    let records = load_dir(&a.data)?;
    let xi = load_mixer(a.mixer.as_deref(), a.mode == Some(ModeArg::Neural))?;
    let modes: Vec<MixingMode> = match a.mode {
        Some(m) => vec![m.into()],
        None => {
            let mut all = vec![
                MixingMode::AcmOnly,
                MixingMode::GdmOnly,
                MixingMode::Hard,
                MixingMode::SigmoidFixed,
            ];
            if xi.is_some() {
                all.push(MixingMode::Neural);
            }
            all
        }
    };
    let report = evaluate(
        &records,
        &modes,
        &cfg.physical,
        xi.as_ref(),
        &cfg.partition,
        &cfg.loss.w,
        Horizon::from(a.horizon),
    )?;

    let mut run = Run::create(&a.out, "evaluate")?;
    ensure_distinct(&run.dir, &a.data)?;
    run.arg("config", path_value(a.config.as_deref()));
    run.arg("data", path_value(Some(&a.data)));
    run.arg("mixer", path_value(a.mixer.as_deref()));
    run.arg("mode", a.mode.map_or(Value::Null, |m| json!(format!("{m:?}"))));
    run.arg("horizon", json!(format!("{:?}", a.horizon)));
    run.snapshot_config(a.config.as_deref())?;
    run.write("rmse.csv", &report.rmse_csv())?;
    run.write("heatmap.csv", &report.heatmap_csv())?;
    run.write("cumulative.csv", &cumulative_csv(&report))?;
    run.finish()?;
    print!("{}", report.rmse_csv());
    Ok(())
}

/// Deterministic cap: every trajectory contributes, order preserved.
fn subsample_steps(records: &[TrajectoryRecord], cap: usize) -> Vec<StepSample> {
    let steps: Vec<StepSample> = records.iter().flat_map(|r| r.steps()).collect();
    let stride = steps.len().div_ceil(cap).max(1);
    steps.into_iter().step_by(stride).collect()
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let cfg = load_config_or_default(a.config.as_deref())?;
    let records = match &a.data {
        Some(dir) => load_dir(dir)?,
        None => {
            // No data needed to exercise the gradients: a short synthetic
            // batch under the configured physics covers all three phases.
            let spec = synth::SynthSpec {
                duration_s: (2.0, 3.0),
                seed: a.seed,
                ..synth::SynthSpec::default()
            };
            synth::generate_dataset(
                &synth::config_grid(12),
                1,
                &cfg.physical,
                &cfg.partition,
                &spec,
            )?
        }
    };
    let batch = subsample_steps(&records, 128);
    if batch.is_empty() {
        return Err(CliError::Validation(String::from("no step samples in the batch")));
    }
    let (a_scale, v_scale) = mixer_scales(&cfg.loss);
    let xi = MixerParams::init(a.seed, a_scale, v_scale);

    let mut reports = Vec::new();
    let mut failures = 0;
    for phase in [Phase::AcmFit, Phase::GdmFit, Phase::MixerFit] {
        let rep = gradient_check(phase, &cfg.physical, &xi, &batch, &cfg.loss, a.points, a.seed)?;
        println!(
            "{:?}: {} points, {} failures, max violation {:.3}",
            rep.phase, rep.points, rep.failures, rep.max_violation
        );
        failures += rep.failures;
        reports.push(json!({
            "phase": format!("{:?}", rep.phase),
            "points": rep.points,
            "failures": rep.failures,
            "max_violation": rep.max_violation,
        }));
    }
    if let Some(out) = &a.out {
        let mut run = Run::create(out, "gradcheck")?;
        run.arg("config", path_value(a.config.as_deref()));
        run.arg("data", path_value(a.data.as_deref()));
        run.arg("seed", json!(a.seed));
        run.arg("points", json!(a.points));
        run.snapshot_config(a.config.as_deref())?;
        run.write("gradcheck.json", &format!("{:#}\n", Value::Array(reports)))?;
        run.finish()?;
    }
    if failures > 0 {
        return Err(CliError::Runtime(format!(
            "{failures} gradient probe(s) violated the finite-difference contract"
        )));
    }
    Ok(())
}

fn cmd_export_lambda(a: ExportLambdaArgs) -> Result<(), CliError> {
    let cfg = load_config_or_default(a.config.as_deref())?;
    let xi = MixerParams::load(&a.mixer)?;
    let rows = lambda_surface(&xi, (0.0, xi.alpha_scale), (0.0, xi.v_scale), 61, 61);

    let mut run = Run::create(&a.out, "export-lambda")?;
    run.arg("config", path_value(a.config.as_deref()));
    run.arg("mixer", path_value(Some(&a.mixer)));
    run.arg("data", path_value(a.data.as_deref()));
    run.snapshot_config(a.config.as_deref())?;
    run.write("lambda-surface.csv", &format_lambda_surface(&rows))?;
    if let Some(dir) = &a.data {
        ensure_distinct(&run.dir, dir)?;
        let records = load_dir(dir)?;
        let report = evaluate(
            &records,
            &[MixingMode::Neural],
            &cfg.physical,
            Some(&xi),
            &cfg.partition,
            &cfg.loss.w,
            Horizon::OneStep,
        )?;
        run.write("loss-heatmap.csv", &report.heatmap_csv())?;
    }
    run.finish()?;
    println!("lambda surface (61x61) -> {}", a.out.join("lambda-surface.csv").display());
    Ok(())
}

fn cmd_mirror(a: MirrorArgs) -> Result<(), CliError> {
    let records = load_dir(&a.data)?;
    let mut run = Run::create(&a.out, "mirror")?;
    ensure_distinct(&run.dir, &a.data)?;
    run.arg("data", path_value(Some(&a.data)));
    for rec in &records {
        let m = mirror_trajectory(rec);
        let name = format!("{}.csv", m.id);
        save_trajectory(&run.dir.join(&name), &m)
            .map_err(|e| CliError::Runtime(format!("writing {name}: {e}")))?;
        run.outputs.push(name);
    }
    run.finish()?;
    println!("mirrored {} trajectories -> {}", records.len(), a.out.display());
    Ok(())
}
