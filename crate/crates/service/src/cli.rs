//! `fdvv` command line: one subcommand per pipeline stage plus `serve`.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error, 64 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fdvv_core::actuation::{interpolate_velocities, ActuationTable};
use fdvv_core::capture::CaptureSession;
use fdvv_core::compensation::{compensate_model, CompensationError, CompensationOptions, FINALIZE_SIGMA_MM};
use fdvv_core::model::{BuildOptions, FdvvModel, DEFAULT_PENALTY};
use fdvv_core::optimizer::{optimize_with, params_to_actuation, Difficulty, RunConfig, SimulatedUser};
use fdvv_core::pipeline::{fit_presses, ingest, IngestError, IngestOptions, PressesFile};
use fdvv_core::plant::VirtualPlant;
use fdvv_core::render::{run_press, PressTrajectory, RenderError, SimConfig};
use fdvv_core::vibration::{generate_templates, synthesize, write_wav, BurstFeatures};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::press::{PressProfile, PressParams};
use crate::server::{router, AppState};
use crate::store::{builtin_plant, ModelStore, WORKSPACE_ENV};

pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<RenderError> for Failure {
    fn from(e: RenderError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<CompensationError> for Failure {
    fn from(e: CompensationError) -> Self {
        match e {
            CompensationError::Alpha(_) | CompensationError::Render(_) | CompensationError::Plant(_) => {
                Failure::Invalid(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "fdvv", version, about = "FDVV button capture, modeling, compensation and simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Capture files -> averaged per-velocity presses.
    Ingest(IngestArgs),
    /// Presses -> FDVV model with order selection.
    Fit(FitArgs),
    /// Model -> actuation table through iterative compensation.
    Compensate(CompensateArgs),
    /// Actuation (+ model) -> per-tick trace of a simulated press.
    Simulate(SimulateArgs),
    /// Bayesian optimization of a button design against a simulated user.
    Optimize(OptimizeArgs),
    /// Vibration template bank -> WAV files.
    ExportWave(ExportWaveArgs),
    /// HTTP + WebSocket service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// One capture file per press velocity.
    #[arg(long = "capture", required = true, num_args = 1..)]
    pub captures: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.2)]
    pub sigma_force_mm: f64,
    #[arg(long, default_value_t = 1.2)]
    pub sigma_disp_mm: f64,
    #[arg(long, default_value_t = 0.8)]
    pub sigma_smooth_mm: f64,
    #[arg(long)]
    pub include_release: bool,
    #[arg(long)]
    pub onset_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub presses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PENALTY)]
    pub penalty: f64,
    #[arg(long, default_value_t = 4)]
    pub k_min: usize,
    #[arg(long, default_value_t = 30)]
    pub k_max: usize,
    /// Fixed control-point count (skips selection).
    #[arg(long, conflicts_with_all = ["k_min", "k_max"])]
    pub k: Option<usize>,
    #[arg(long)]
    pub activation_mm: Option<f64>,
    /// Also write the order-selection report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompensateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `default`, `identity` or a plant JSON file.
    #[arg(long, default_value = "default")]
    pub plant: String,
    /// Comma-separated; the model velocities when absent.
    #[arg(long, value_delimiter = ',')]
    pub velocities: Option<Vec<f64>>,
    #[arg(long, default_value_t = 4)]
    pub runs: usize,
    #[arg(long, default_value_t = 12)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    #[arg(long, default_value_t = FINALIZE_SIGMA_MM)]
    pub finalize_sigma_mm: f64,
    /// Densify to this many evenly spaced velocities.
    #[arg(long)]
    pub interpolate: Option<usize>,
    /// Per-iteration error traces.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub actuation: PathBuf,
    /// Target model for the error summary.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON-lines trace, one tick per line.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "default")]
    pub plant: String,
    /// Recorded trajectory file; overrides the synthetic press flags.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    pub velocity: f64,
    #[arg(long)]
    pub depth: Option<f64>,
    #[arg(long, value_enum, default_value_t = PressProfile::ConstantVelocity)]
    pub profile: PressProfile,
    #[arg(long = "return")]
    pub with_return: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DifficultyArg {
    Easy,
    Hard,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// JSON-lines history.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub budget: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, value_enum, default_value_t = DifficultyArg::Easy)]
    pub difficulty: DifficultyArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub user_seed: Option<u64>,
    /// Actuation table of the best design.
    #[arg(long)]
    pub best_actuation: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportWaveArgs {
    /// Output directory; one WAV per template.
    #[arg(long)]
    pub out: PathBuf,
    /// Take features from this model's vibration descriptor.
    #[arg(long, required_unless_present_all = ["frequency_hz", "duration_ms"])]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub frequency_hz: Option<f64>,
    #[arg(long)]
    pub duration_ms: Option<f64>,
    /// Export only this template.
    #[arg(long)]
    pub template_id: Option<String>,
    #[arg(long, default_value_t = 44_100)]
    pub sample_rate: u32,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = WORKSPACE_ENV, default_value = "fdvv-workspace")]
    pub workspace: PathBuf,
}

/// Parses `argv` and runs the command, mapping failures to exit codes.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

pub fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Ingest(a) => run_ingest(a),
        Command::Fit(a) => run_fit(a),
        Command::Compensate(a) => run_compensate(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Optimize(a) => run_optimize(a),
        Command::ExportWave(a) => run_export_wave(a),
        Command::Serve(a) => run_serve(a),
    }
}

fn read(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn parse<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    serde_json::from_str(&read(path)?).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("outputs serialize")
}

fn load_model(path: &Path) -> Outcome<FdvvModel> {
    FdvvModel::from_json(&read(path)?).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn load_table(path: &Path) -> Outcome<ActuationTable> {
    let t: ActuationTable = parse(path)?;
    t.validate().map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    Ok(t)
}

fn load_plant(name: &str) -> Outcome<VirtualPlant> {
    if let Some(p) = builtin_plant(name) {
        return Ok(p);
    }
    let p: VirtualPlant = parse(Path::new(name))?;
    p.validate().map_err(|errs| {
        Failure::Invalid(
            errs.iter()
                .map(|e| format!("{}: {}", e.field, e.message))
                .collect::<Vec<_>>()
                .join("; "),
        )
    })?;
    Ok(p)
}

fn run_ingest(a: IngestArgs) -> Outcome {
    let sessions = a
        .captures
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", p.display())))?;
            CaptureSession::parse(&bytes).map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))
        })
        .collect::<Outcome<Vec<_>>>()?;
    let defaults = IngestOptions::default();
    let opts = IngestOptions {
        sigma_force_mm: a.sigma_force_mm,
        sigma_disp_mm: a.sigma_disp_mm,
        sigma_smooth_mm: a.sigma_smooth_mm,
        include_release: a.include_release,
        onset_threshold: a.onset_threshold.unwrap_or(defaults.onset_threshold),
    };
    let file = ingest(&sessions, &opts)?;
    write(&a.out, &pretty(&file))?;
    println!("{}", json!({ "button_id": file.button_id, "counts": file.counts, "vibration": file.vibration }));
    Ok(())
}

fn run_fit(a: FitArgs) -> Outcome {
    let presses: PressesFile = parse(&a.presses)?;
    let k_range = a.k.map(|k| (k, k)).unwrap_or((a.k_min, a.k_max));
    let opts = BuildOptions {
        k_range,
        penalty: a.penalty,
        ..Default::default()
    };
    if !(a.penalty.is_finite() && a.penalty >= 0.0) || k_range.0 > k_range.1 {
        return Err(Failure::Invalid("penalty must be non-negative and k-min <= k-max".into()));
    }
    let built = fit_presses(&presses, a.activation_mm, opts)?;
    write(&a.out, &built.model.to_json())?;
    let report = json!({
        "button_id": built.model.button_id,
        "penalty": a.penalty,
        "selections": built.selections.iter().map(|(v, s)| json!({
            "velocity_mm_s": v,
            "best_k": s.best_k,
            "rmse": s.best().rmse,
            "bic_star": s.best().bic_star,
        })).collect::<Vec<_>>(),
    });
    if let Some(p) = &a.report {
        let full = json!({ "summary": report, "reports": built.selections });
        write(p, &pretty(&full))?;
    }
    println!("{report}");
    Ok(())
}

fn run_compensate(a: CompensateArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let plant = load_plant(&a.plant)?;
    let velocities = a.velocities.clone().unwrap_or_else(|| model.velocities());
    if velocities.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Failure::Invalid("velocities must be positive".into()));
    }
    if !(a.finalize_sigma_mm.is_finite() && a.finalize_sigma_mm >= 0.0) {
        return Err(Failure::Invalid("finalize-sigma-mm must be non-negative".into()));
    }
    let opts = CompensationOptions {
        max_iters: a.max_iters,
        tol_cn: a.tol,
        alpha: a.alpha,
        finalize_sigma_mm: a.finalize_sigma_mm,
        ..Default::default()
    };
    let (mut table, reports) = compensate_model(&model, &plant, &velocities, a.runs, &opts)?;
    if let Some(n) = a.interpolate {
        table.curves = interpolate_velocities(&table.curves, n).map_err(|e| Failure::Invalid(e.to_string()))?;
        table.interpolated = true;
    }
    write(&a.out, &pretty(&table))?;
    if let Some(p) = &a.report {
        write(p, &pretty(&reports))?;
    }
    let summary: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "velocity_mm_s": r.velocity_mm_s,
                "final_errors": r.runs.iter().map(|x| x.errors[x.best_iteration]).collect::<Vec<_>>(),
                "iterations": r.runs.iter().map(|x| x.errors.len()).collect::<Vec<_>>(),
            })
        })
        .collect();
    println!("{}", json!({ "button_id": table.button_id, "plant_id": table.plant_id, "velocities": summary }));
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> Outcome {
    let table = load_table(&a.actuation)?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    if let Some(m) = &model {
        if (m.travel_range_mm - table.travel_range_mm).abs() > 1e-9 {
            return Err(Failure::Invalid(format!(
                "travel range mismatch: actuation {} mm, model {} mm",
                table.travel_range_mm, m.travel_range_mm
            )));
        }
    }
    let plant = load_plant(&a.plant)?;
    let config = match &model {
        Some(m) => SimConfig::for_model(m),
        None => SimConfig::for_table(&table),
    };
    let trajectory = match &a.trajectory {
        Some(p) => PressTrajectory::from_json(&read(p)?)?,
        None => PressParams {
            velocity_mm_s: a.velocity,
            depth_mm: a.depth,
            profile: a.profile,
            with_return: a.with_return,
            ..PressParams::new(a.velocity)
        }
        .trajectory(table.travel_range_mm)
        .map_err(Failure::Invalid)?,
    };
    let trace = run_press(&table.curves, model.as_ref(), &trajectory, &config, &plant)?;
    write(&a.out, &trace.to_json_lines())?;
    let events: Vec<_> = trace.events().map(|(t, e)| json!({ "t": t, "event": e })).collect();
    println!("{}", json!({ "ticks": trace.records.len(), "summary": trace.summary, "events": events }));
    Ok(())
}

fn run_optimize(a: OptimizeArgs) -> Outcome {
    let config = RunConfig {
        budget: a.budget,
        trials_per_eval: a.trials,
        difficulty: match a.difficulty {
            DifficultyArg::Easy => Difficulty::Easy,
            DifficultyArg::Hard => Difficulty::Hard,
        },
        user: SimulatedUser {
            seed: a.user_seed.unwrap_or(a.seed),
            ..Default::default()
        },
        seed: a.seed,
        ..Default::default()
    };
    let result = optimize_with(&config, |h| log::info!("iteration {}: {:.2} ms", h.iteration, h.mean_asynchrony))
        .map_err(|e| Failure::Invalid(e.to_string()))?;
    write(&a.out, &result.history_json_lines())?;
    if let Some(p) = &a.best_actuation {
        let table = params_to_actuation(&result.best).map_err(|e| Failure::Runtime(e.to_string()))?;
        write(p, &pretty(&table))?;
    }
    println!("{}", json!({ "best": result.best, "best_value": result.best_value }));
    Ok(())
}

fn run_export_wave(a: ExportWaveArgs) -> Outcome {
    let features = match (&a.model, a.frequency_hz, a.duration_ms) {
        (_, Some(f), Some(d)) => BurstFeatures {
            frequency_hz: f,
            duration_ms: d,
        },
        (Some(p), _, _) => {
            let v = load_model(p)?
                .vibration
                .ok_or_else(|| Failure::Invalid(format!("{}: model has no vibration descriptor", p.display())))?;
            BurstFeatures {
                frequency_hz: v.frequency_hz,
                duration_ms: v.duration_ms,
            }
        }
        _ => return Err(Failure::Invalid("give --model or both --frequency-hz and --duration-ms".into())),
    };
    let bank: Vec<_> = generate_templates(features)
        .into_iter()
        .filter(|t| a.template_id.as_ref().is_none_or(|id| &t.id == id))
        .collect();
    if bank.is_empty() {
        return Err(Failure::Invalid(format!("no template {:?}", a.template_id.unwrap_or_default())));
    }
    fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", a.out.display())))?;
    for t in &bank {
        let samples = synthesize(t, a.sample_rate as f64).map_err(|e| Failure::Invalid(e.to_string()))?;
        let path = a.out.join(format!("{}.wav", t.id));
        let file = fs::File::create(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        write_wav(std::io::BufWriter::new(file), &samples, a.sample_rate)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_serve(a: ServeArgs) -> Outcome {
    let store = ModelStore::open(&a.workspace)
        .map_err(|e| Failure::Runtime(format!("workspace {}: {e}", a.workspace.display())))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| Failure::Runtime(format!("bind {}:{}: {e}", a.host, a.port)))?;
        let addr = listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
        log::info!("serving {} on http://{addr}", a.workspace.display());
        println!("listening on http://{addr}");
        axum::serve(listener, router(AppState::new(store)))
            .await
            .map_err(|e| Failure::Runtime(e.to_string()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let code = run(["fdvv", "fit", "--bogus"]);
        assert_eq!(code, ExitCode::from(EXIT_USAGE));
    }

    #[test]
    fn fixed_order_conflicts_with_a_range() {
        let r = Cli::try_parse_from(["fdvv", "fit", "--presses", "p", "--out", "m", "--k", "15", "--k-min", "4"]);
        assert!(r.is_err());
    }

    #[test]
    fn velocities_split_on_commas() {
        let c = Cli::try_parse_from(["fdvv", "compensate", "--model", "m", "--out", "a", "--velocities", "50,100"]).unwrap();
        match c.command {
            Command::Compensate(a) => assert_eq!(a.velocities, Some(vec![50.0, 100.0])),
            _ => unreachable!(),
        }
    }

    #[test]
    fn missing_input_is_a_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run([
            "fdvv".into(),
            "fit".into(),
            "--presses".into(),
            dir.path().join("nope.json").into_os_string(),
            "--out".into(),
            dir.path().join("m.json").into_os_string(),
        ]);
        assert_eq!(code, ExitCode::from(EXIT_RUNTIME));
    }
}
