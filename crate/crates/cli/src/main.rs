//! `mixdro` command-line interface.
//!
//! Every command reads a JSON run config, prints its JSON result on stdout
//! and, with `--out`, also writes it to `<out>/<command>.json`. Each flag
//! can be set through a `MIXDRO_*` environment variable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mixdro::commands::{self, CommandError};
use mixdro::config::RunConfig;
use mixdro::model::ModelFile;
use mixdro::solve::Route;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "mixdro", version, about = "Distributionally robust logistic regression on mixed features")]
struct Cli {
    /// Run config (JSON).
    #[arg(long, env = "MIXDRO_CONFIG", global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, env = "MIXDRO_SEED", global = true)]
    seed: Option<u64>,
    /// Worker thread cap; defaults to all cores.
    #[arg(long, env = "MIXDRO_THREADS", global = true)]
    threads: Option<usize>,
    /// Directory for result files.
    #[arg(long, env = "MIXDRO_OUT", global = true)]
    out: Option<PathBuf>,
    /// Overrides the solver route: monolithic, cutting-plane, graph or subgradient.
    #[arg(long, env = "MIXDRO_ROUTE", global = true, value_parser = parse_route)]
    route: Option<Route>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute ambiguity-set and shift-model parameters.
    Calibrate,
    /// Calibrate and train a model.
    Train,
    /// Score a model on perturbed test sets.
    Evaluate {
        /// Model file written by `train`; trains one when omitted.
        #[arg(long, env = "MIXDRO_MODEL")]
        model: Option<PathBuf>,
    },
    /// Time the configured routes against each other.
    Bench,
    /// Write the perturbed test sets used by `evaluate`.
    Perturb,
    /// Print the JSON schema of the config or of a command's output.
    Schema {
        #[arg(default_value = "config")]
        name: String,
    },
}

fn parse_route(s: &str) -> Result<Route, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown route {s:?} (expected monolithic, cutting-plane, graph or subgradient)"))
}

/// Exit codes.
const OK: u8 = 0;
const INVALID: u8 = 2;
const DISAGREEMENT: u8 = 4;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<CommandError> for Failure {
    fn from(e: CommandError) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure { code: INVALID, message: message.into() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| invalid(e.to_string()))?;
    }
    if let Command::Schema { name } = &cli.command {
        let schema = commands::schemas()
            .into_iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| invalid(format!("no schema named {name:?}")))?;
        return emit(&cli.out, "schema", &schema.1).map(|_| OK);
    }

    let cfg = load_config(&cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Calibrate => emit(out, "calibrate", &commands::cmd_calibrate(&cfg)?)?,
        Command::Train => {
            let result = commands::cmd_train(&cfg)?;
            if let Some(dir) = out {
                write_json(&dir.join("model.json"), &result.model)?;
            }
            emit(out, "train", &result)?;
        }
        Command::Evaluate { model } => {
            let model = model.as_deref().map(read_model).transpose()?;
            let result = commands::cmd_evaluate(&cfg, model.as_ref())?;
            if let (Some(dir), true) = (out, cfg.evaluation.per_set_csv) {
                for (s, report) in result.reports.iter().enumerate() {
                    let path = dir.join(format!("per-set-{s}.csv"));
                    let file = create(&path)?;
                    report.write_csv(file).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
                }
            }
            emit(out, "evaluate", &result)?;
        }
        Command::Bench => {
            let result = commands::cmd_bench(&cfg)?;
            eprint!("{}", result.table());
            emit(out, "bench", &result)?;
            if result.disagreement {
                eprintln!("error: routes disagree beyond the relative tolerance {}", result.tolerance);
                return Ok(DISAGREEMENT);
            }
        }
        Command::Perturb => {
            let dir = out.as_deref().ok_or_else(|| invalid("perturb needs --out"))?;
            emit(out, "perturb", &commands::cmd_perturb(&cfg, dir)?)?;
        }
        Command::Schema { .. } => unreachable!("handled above"),
    }
    Ok(OK)
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli.config.as_deref().ok_or_else(|| invalid("--config is required"))?;
    let mut cfg = RunConfig::load(path).map_err(|e| invalid(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(route) = cli.route {
        cfg.solver.route = route;
    }
    Ok(cfg)
}

fn read_model(path: &Path) -> Result<ModelFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    // accept either a bare model or the full `train` output
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let value = value.get("model").cloned().unwrap_or(value);
    serde_json::from_value(value).map_err(|e| invalid(format!("{}: not a model file: {e}", path.display())))
}

fn create(path: &Path) -> Result<std::fs::File, Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| invalid(format!("{}: {e}", parent.display())))?;
    }
    std::fs::File::create(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
    text.push('\n');
    use std::io::Write;
    create(path)?.write_all(text.as_bytes()).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Prints `value` and mirrors it into `<out>/<name>.json`.
fn emit<T: Serialize>(out: &Option<PathBuf>, name: &str, value: &T) -> Result<(), Failure> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("outputs serialize");
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed pipe (`| head`) is not an error
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(invalid(format!("stdout: {e}"))),
        _ => {}
    }
    if let Some(dir) = out {
        write_json(&dir.join(format!("{name}.json")), value)?;
    }
    Ok(())
}
