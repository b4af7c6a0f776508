//! `perpetua`: decide whether perpetual integrals of a diffusion are finite.

mod config;
mod job;
mod table;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use perpetua::catalogue;
use perpetua::diffusion::{Diffusion, Side};
use perpetua::expr::{Bindings, Expression};
use serde::{Deserialize, Serialize};

use config::Config;
use job::{exit_code, Job, ModelInput, Task, EXIT_FAILURE, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "perpetua", version, about = "Almost-sure finiteness of perpetual integrals of 1-d diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Decide finiteness of A = ∫ f(Y_s) ds by both routes
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "f", allow_hyphen_values = true)]
        f: String,
        /// Starting point for the mean (defaults to the model's x0)
        #[arg(long, allow_negative_numbers = true)]
        x: Option<f64>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Feller classification of an endpoint
    Classify {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "right")]
        end: End,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Export the time change g and the drift of Z
    Transform {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "f", allow_hyphen_values = true)]
        f: String,
        #[arg(long, default_value_t = 201)]
        samples: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte Carlo check of the time change and of the growth of A_t
    Validate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "f", allow_hyphen_values = true)]
        f: String,
        /// Start of the paths (defaults to the model's x0)
        #[arg(long, allow_negative_numbers = true)]
        x: Option<f64>,
        /// Level whose hitting time ends the functional (defaults to x + 1)
        #[arg(long, allow_negative_numbers = true)]
        target: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// E_x[A] from the Green kernel
    Mean {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "f", allow_hyphen_values = true)]
        f: String,
        #[arg(long, allow_negative_numbers = true)]
        x: Option<f64>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// List built-in model families and reference answers
    Catalogue {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-run the job recorded in a manifest
    Replay {
        manifest: PathBuf,
        /// Write the report here instead of the recorded path
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Model JSON: {"l", "r", "b", "sigma", "x0", "params"}
    #[arg(long, conflicts_with = "family", required_unless_present = "family")]
    model: Option<PathBuf>,
    /// Built-in family (see `perpetua catalogue`)
    #[arg(long)]
    family: Option<String>,
    /// Parameter binding, repeatable
    #[arg(long = "param", value_name = "K=V", value_parser = parse_binding)]
    params: Vec<(String, f64)>,
}

#[derive(Args)]
struct CommonArgs {
    /// Report path; a manifest is written next to it
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an SVG plot
    #[arg(long)]
    plot: bool,
    /// TOML file overriding tolerances and simulation settings
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum End {
    Left,
    Right,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    command: String,
    seed: Option<u64>,
    job: Job,
    outputs: Vec<PathBuf>,
    exit_code: u8,
    wall_clock_seconds: f64,
}

fn parse_binding(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected K=V, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("`{v}` is not a number: {e}"))?;
    Ok((k.trim().to_string(), v))
}

enum Failure {
    /// Bad input: exit 64.
    Usage(anyhow::Error),
    /// Outputs could not be written.
    Output(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.into())
    }
}

fn parse_f(text: &str) -> Result<Expression, Failure> {
    Expression::parse(text).map_err(|e| {
        let offset = match &e {
            perpetua::expr::ParseError::Syntax { offset, .. } => *offset,
            perpetua::expr::ParseError::UnknownIdentifier { offset, .. } => *offset,
        };
        Failure::Usage(anyhow!("in --f: {e}\n  {text}\n  {}^", " ".repeat(offset)))
    })
}

fn load_model(args: &ModelArgs) -> Result<ModelInput, Failure> {
    let params: Bindings = args.params.iter().cloned().collect();
    if let Some(name) = &args.family {
        let diffusion = catalogue::get(name, &params).map_err(|e| Failure::Usage(anyhow!(e)))?;
        return Ok(ModelInput { family: Some(name.clone()), diffusion });
    }
    let path = args.model.as_ref().expect("clap requires --model or --family");
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let d: Diffusion = serde_json::from_str(&text).with_context(|| format!("parsing model {}", path.display()))?;
    let diffusion = job::with_params(&d, &params).map_err(|e| Failure::Usage(anyhow!(e)))?;
    Ok(ModelInput { family: None, diffusion })
}

fn load_config(common: &CommonArgs) -> Result<Config, Failure> {
    Ok(match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

/// Turn the command line into a job and the place its report goes.
fn build(cmd: Cmd) -> Result<(Job, Option<PathBuf>), Failure> {
    let (task, model, common, sim) = match cmd {
        Cmd::Analyze { model, f, x, common } => {
            let m = load_model(&model)?;
            let x = x.unwrap_or(m.diffusion.x0);
            (Task::Analyze { f: parse_f(&f)?, x }, Some(m), common, None)
        }
        Cmd::Classify { model, end, common } => {
            let end = match end {
                End::Left => Side::Left,
                End::Right => Side::Right,
            };
            (Task::Classify { end }, Some(load_model(&model)?), common, None)
        }
        Cmd::Transform { model, f, samples, common } => {
            (Task::Transform { f: parse_f(&f)?, samples }, Some(load_model(&model)?), common, None)
        }
        Cmd::Validate { model, f, x, target, seed, paths, dt, common } => {
            let m = load_model(&model)?;
            let x = x.unwrap_or(m.diffusion.x0);
            let target = target.unwrap_or(x + 1.0);
            (Task::Validate { f: parse_f(&f)?, x, target }, Some(m), common, Some((seed, paths, dt)))
        }
        Cmd::Mean { model, f, x, common } => {
            let m = load_model(&model)?;
            let x = x.unwrap_or(m.diffusion.x0);
            (Task::Mean { f: parse_f(&f)?, x }, Some(m), common, None)
        }
        Cmd::Catalogue { common } => (Task::Catalogue, None, common, None),
        Cmd::Replay { .. } => unreachable!("replay is handled before building a job"),
    };
    let mut config = load_config(&common)?;
    if let Some((seed, paths, dt)) = sim {
        if let Some(s) = seed {
            config.sim.seed = s;
        }
        if let Some(p) = paths {
            config.sim.paths = p;
        }
        if let Some(d) = dt {
            config.sim.dt = d;
        }
    }
    Ok((Job { task, model, config, plot: common.plot }, common.out))
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Run a job and write its outputs.
fn execute(job: &Job, out: Option<&Path>) -> anyhow::Result<u8> {
    let start = Instant::now();
    let outcome = match job.run() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(exit_code(&e));
        }
    };
    print!("{}", outcome.table);
    let mut outputs = Vec::new();
    if let Some(out) = out {
        let mut text = serde_json::to_string_pretty(&outcome.report)?;
        text.push('\n');
        write(out, &text)?;
        outputs.push(out.to_path_buf());
    }
    if let Some(svg) = &outcome.svg {
        let path = match out {
            Some(o) => o.with_extension("svg"),
            None => PathBuf::from(format!("{}.svg", job.task.name())),
        };
        write(&path, svg)?;
        outputs.push(path);
    }
    if let Some(out) = out {
        let manifest_file = manifest_path(out);
        outputs.push(manifest_file.clone());
        let manifest = Manifest {
            tool: "perpetua".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: job.task.name().into(),
            seed: matches!(job.task, Task::Validate { .. }).then_some(job.config.sim.seed),
            job: job.clone(),
            outputs,
            exit_code: outcome.code,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        };
        write(&manifest_file, &serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(outcome.code)
}

fn replay(manifest: &Path, out: Option<PathBuf>) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", manifest.display()))?;
    if m.version != env!("CARGO_PKG_VERSION") {
        eprintln!("warning: manifest written by version {}, replaying with {}", m.version, env!("CARGO_PKG_VERSION"));
    }
    let report = m.outputs.iter().find(|p| {
        let name = p.to_string_lossy();
        name.ends_with(".json") && !name.ends_with(".manifest.json")
    });
    let out = out
        .or_else(|| report.cloned())
        .ok_or_else(|| anyhow!("manifest lists no report; pass --out"))?;
    execute(&m.job, Some(&out)).map_err(Failure::Output)
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PERPETUA_THREADS") {
        let n: usize = v.parse().with_context(|| format!("PERPETUA_THREADS = `{v}` is not a thread count"))?;
        if n == 0 {
            bail!("PERPETUA_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match cli.command {
        Cmd::Replay { manifest, out } => replay(&manifest, out),
        cmd => build(cmd).and_then(|(job, out)| execute(&job, out.as_deref()).map_err(Failure::Output)),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Output(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
