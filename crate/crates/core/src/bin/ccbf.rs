use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use conformal_cbf::config::{corridor_config_text, load_config, RunConfig};
use conformal_cbf::engine::{run_traced, sweep, ParamGrid, RunError};
use conformal_cbf::report::{metrics_csv, sweep_csv, trace_line};
use conformal_cbf::scenario::{
    parse_annotations, parse_annotations_report, read_scene_text, synth_scene, LabelFilter,
    RobotSpec, ScenarioFrameSet, SceneSpec,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_IO: u8 = 1;

/// Conformal barrier-function safety filter simulator.
#[derive(Debug, Parser)]
#[command(name = "ccbf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one closed-loop simulation and write a one-row metrics CSV.
    Run {
        #[command(flatten)]
        input: Input,
        /// Metrics CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-frame trace, one JSON object per line.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a parameter grid and write one CSV row per cell, in grid order.
    Sweep {
        #[command(flatten)]
        input: Input,
        /// `key=v1,v2,...`; repeat for more axes. Keys: eps, eta, tau, a,
        /// k_acc, k_rep, k_att, rho0, delta, lambda_initial.
        #[arg(long, required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to $CCBF_WORKERS or the number of CPUs.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Check an annotation file and report malformed rows by line number.
    ValidateAnnotations {
        #[arg(long)]
        annotations: PathBuf,
        /// Comma-separated labels to keep; all labels when omitted.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
    /// Write the built-in three-pedestrian crossing scene.
    MakeScene {
        /// Scene spec (TOML) to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write a matching run configuration here.
        #[arg(long)]
        config_out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Input {
    /// Flat TOML configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Annotation file to replay.
    #[arg(long, conflicts_with = "scene")]
    annotations: Option<PathBuf>,
    /// Scripted scene spec (TOML).
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Predictor seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` configuration override; repeatable.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { input, out, trace } => {
            check_parent(&out)?;
            if let Some(t) = &trace {
                check_parent(t)?;
            }
            let (config, scene, robot) = load_input(&input)?;
            let task = config
                .task(robot.as_ref())
                .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            let mut trace_out = match &trace {
                Some(p) => Some(BufWriter::new(create(p)?)),
                None => None,
            };
            let mut write_error = None;
            let result = run_traced(&config.sim, &scene, &task, |record| {
                if let Some(w) = trace_out.as_mut() {
                    if let Err(e) = writeln!(w, "{}", trace_line(record)) {
                        write_error.get_or_insert(e);
                    }
                }
            });
            if let Some(mut w) = trace_out {
                if let Some(e) = write_error.or_else(|| w.flush().err()) {
                    return Err(Failure::new(EXIT_IO, format!("writing trace: {e}")));
                }
            }
            let metrics = result.map_err(run_failure)?;
            write_file(&out, &metrics_csv([(&config.sim, Ok(&metrics))]))
        }
        Command::Sweep {
            input,
            grid,
            out,
            workers,
        } => {
            check_parent(&out)?;
            let (config, scene, robot) = load_input(&input)?;
            let task = config
                .task(robot.as_ref())
                .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            let grid = ParamGrid::parse(&grid).map_err(|e| Failure::new(EXIT_CONFIG, e))?;
            let workers = match workers {
                Some(w) => w,
                None => default_workers()?,
            };
            let rows = sweep(&config.sim, &grid, &scene, &task, workers.max(1));
            for row in &rows {
                if let Err(e) = &row.outcome {
                    eprintln!("warning: run {:?} failed: {e}", row.parameters);
                }
            }
            write_file(&out, &sweep_csv(&rows))
        }
        Command::ValidateAnnotations {
            annotations,
            labels,
        } => {
            let text = read_scene_text(&annotations).map_err(|e| Failure::new(EXIT_DATA, e))?;
            let report =
                parse_annotations_report(&text, &LabelFilter::only(labels), "annotations", 30.0)
                    .map_err(|e| Failure::new(EXIT_DATA, e))?;
            let fs = &report.frame_set;
            println!(
                "{} rows read, {} kept in {} frames across {} agents, {} lost, {} filtered by label",
                report.rows_read,
                fs.observation_count(),
                fs.frame_count(),
                fs.agent_ids().count(),
                report.dropped_lost,
                report.dropped_label
            );
            for issue in &report.issues {
                eprintln!(
                    "{}:{}: {}",
                    annotations.display(),
                    issue.line,
                    issue.message
                );
            }
            if !report.issues.is_empty() {
                return Err(Failure::new(
                    EXIT_DATA,
                    format!("{} malformed rows", report.issues.len()),
                ));
            }
            if fs.is_empty() {
                eprintln!("warning: no observations kept");
            }
            Ok(())
        }
        Command::MakeScene { out, config_out } => {
            check_parent(&out)?;
            if let Some(c) = &config_out {
                check_parent(c)?;
            }
            write_file(&out, &SceneSpec::three_pedestrian_crossing().to_toml())?;
            if let Some(c) = &config_out {
                write_file(c, &corridor_config_text())?;
            }
            Ok(())
        }
    }
}

fn run_failure(e: RunError) -> Failure {
    let code = match e {
        RunError::Config(_) => EXIT_CONFIG,
        RunError::Scene(_) => EXIT_DATA,
        RunError::Infeasible { .. } | RunError::Numerical { .. } => EXIT_INFEASIBLE,
    };
    Failure::new(code, e)
}

fn load_input(input: &Input) -> Result<(RunConfig, ScenarioFrameSet, Option<RobotSpec>), Failure> {
    let mut overrides = input.overrides.clone();
    if let Some(seed) = input.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = load_config(input.config.as_deref(), &overrides)
        .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let fps = 1.0 / config.sim.dt;
    let (scene, robot) = match (&input.annotations, &input.scene) {
        (Some(path), None) => {
            let text = read_scene_text(path).map_err(|e| Failure::new(EXIT_DATA, e))?;
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
            let scene = parse_annotations(&text, &config.labels, name, fps)
                .map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))?;
            (scene, None)
        }
        (None, Some(path)) => {
            let text = read_scene_text(path).map_err(|e| Failure::new(EXIT_DATA, e))?;
            let spec = SceneSpec::from_toml(&text)
                .map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", path.display())))?;
            let scene = synth_scene(&spec).map_err(|e| Failure::new(EXIT_DATA, e))?;
            (scene, spec.robot)
        }
        _ => {
            return Err(Failure::new(
                EXIT_CONFIG,
                "give exactly one of --annotations or --scene",
            ))
        }
    };
    if scene.frame_count() == 0 {
        return Err(Failure::new(EXIT_DATA, "scene has no frames"));
    }
    if scene.is_empty() {
        eprintln!("warning: scene has no agents");
    }
    Ok((config, scene, robot))
}

fn default_workers() -> Result<usize, Failure> {
    match std::env::var("CCBF_WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&w| w > 0)
            .ok_or_else(|| {
                Failure::new(
                    EXIT_CONFIG,
                    format!("CCBF_WORKERS must be a positive integer, got '{v}'"),
                )
            }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn check_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Failure::new(
            EXIT_CONFIG,
            format!("output directory {} does not exist", p.display()),
        )),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<File, Failure> {
    File::create(path)
        .map_err(|e| Failure::new(EXIT_IO, format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents)
        .map_err(|e| Failure::new(EXIT_IO, format!("cannot write {}: {e}", path.display())))
}
