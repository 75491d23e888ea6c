//! `neuroevo`: runs neuroevolution/gradient-descent experiments and writes
//! CSV, JSON and SVG outputs.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numerical
//! divergence, 4 failed check (with `--check`).

mod config;
mod plot;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde_json::{json, Value};

use config::{ConfigError, ExperimentConfig, Overrides, Preset, Scale};
use run::{RunOutput, Table};

#[derive(Debug, Parser)]
#[command(name = "neuroevo", version, about = "Neuroevolution versus gradient descent experiments")]
struct Cli {
    /// Experiment preset; overrides the `preset` field of --config.
    #[arg(long, value_enum)]
    preset: Option<Preset>,

    /// JSON config (partial or complete); a previous manifest.json also works.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Run size for the preset defaults.
    #[arg(long, value_enum)]
    scale: Option<Scale>,

    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads (default: all hardware threads).
    #[arg(long)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long, default_value = "neuroevo-out")]
    out: PathBuf,

    /// Also write SVG plots.
    #[arg(long)]
    plot: bool,

    /// Exit with status 4 if any check fails.
    #[arg(long)]
    check: bool,
}

#[derive(Debug, thiserror::Error)]
enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Io(String),
    #[error("{0} check(s) failed")]
    Check(usize),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            Self::Io(_) => 1,
            Self::Config(_) => 2,
            Self::Divergence(_) => 3,
            Self::Check(_) => 4,
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<neuroevo_core::Error> for AppError {
    fn from(e: neuroevo_core::Error) -> Self {
        match e {
            neuroevo_core::Error::Divergence { .. } => Self::Divergence(format!("numerical divergence: {e}")),
            other => Self::Config(other.to_string()),
        }
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> AppError {
    AppError::Io(format!("{}: {e}", path.display()))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, AppError> {
    let text = cli
        .config
        .as_ref()
        .map(|p| fs::read_to_string(p).map_err(|e| AppError::Config(format!("{}: {e}", p.display()))))
        .transpose()?;
    // accept a manifest by unwrapping its `config` entry
    let text = match &text {
        Some(t) => match serde_json::from_str::<Value>(t) {
            Ok(v) if v.get("config").is_some() && v.get("files").is_some() => Some(v["config"].to_string()),
            _ => Some(t.clone()),
        },
        None => None,
    };
    let flags = Overrides { preset: cli.preset, scale: cli.scale, seed: cli.seed };
    Ok(config::resolve(text.as_deref(), &flags)?)
}

fn write_table(path: &Path, table: &Table) -> Result<(), AppError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
    w.write_record(&table.header).map_err(|e| io(path, e))?;
    for row in &table.rows {
        w.write_record(row).map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), AppError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io(path, e))
}

fn execute(cli: &Cli) -> Result<(), AppError> {
    let config = load_config(cli)?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(AppError::Config("--workers: must be at least 1".into()));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()
        .map_err(|e| AppError::Io(format!("thread pool: {e}")))?;

    fs::create_dir_all(&cli.out).map_err(|e| io(&cli.out, e))?;
    let mut files = Vec::new();
    let config_path = cli.out.join("config.json");
    write_json(&config_path, &config)?;
    files.push("config.json".to_string());

    let start = Instant::now();
    eprintln!("running preset {} ({:?} scale, seed {})", config.preset, config.scale, config.seed);
    let RunOutput { tables, summary, checks, plots } = pool.install(|| run::execute(&config))?;
    let duration = start.elapsed().as_secs_f64();

    for (name, table) in &tables {
        write_table(&cli.out.join(name), table)?;
        files.push(name.clone());
    }
    let mut summary = summary;
    summary["preset"] = json!(config.preset);
    summary["checks"] = json!(checks);
    write_json(&cli.out.join("summary.json"), &summary)?;
    files.push("summary.json".into());

    if cli.plot {
        for p in &plots {
            let out = cli.out.join(&p.file);
            plot::emit_plot(&cli.out.join(&p.csv), &p.spec, &out).map_err(|e| AppError::Io(e.to_string()))?;
            files.push(p.file.clone());
        }
    }

    let inventory: Vec<Value> = files
        .iter()
        .map(|f| {
            let bytes = fs::metadata(cli.out.join(f)).map(|m| m.len()).unwrap_or(0);
            json!({ "name": f, "bytes": bytes })
        })
        .collect();
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "seed": config.seed,
        "workers": pool.current_num_threads(),
        "finished_unix": started,
        "duration_seconds": duration,
        "files": inventory,
    });
    write_json(&cli.out.join("manifest.json"), &manifest)?;

    let mut failed = 0;
    for c in &checks {
        eprintln!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += (!c.pass) as usize;
    }
    eprintln!("wrote {} files to {} in {duration:.1}s", files.len() + 1, cli.out.display());
    if cli.check && failed > 0 {
        return Err(AppError::Check(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
