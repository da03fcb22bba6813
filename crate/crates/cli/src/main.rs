use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sabre_core::config::RecordFormat;
use sabre_core::{presets, summarize, verify, EngineOptions, ResolvedRun, RunConfig, RunRecord, SabreError, Simulation};

const OUT_ENV: &str = "SABRE_OUT_DIR";
const DEFAULT_OUT: &str = "sabre-out";

#[derive(Parser)]
#[command(name = "sabre", version, about = "Robust Bayesian peer-to-peer federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write records, summary and resolved config.
    Run(ScenarioArgs),
    /// Check the scenario's assumptions without running it.
    Verify(ScenarioArgs),
    /// List built-in presets.
    Presets,
    /// Recompute the summary of an earlier run from its output directory.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ScenarioArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset; combined with --config, replaces its preset.
    #[arg(long)]
    preset: Option<String>,
    /// Scenario override as dotted.path=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $SABRE_OUT_DIR, else ./sabre-out].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Record format (repeatable).
    #[arg(long, value_enum)]
    format: Vec<Format>,
    /// Print progress to stderr.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args)]
struct ReplayArgs {
    /// Directory written by `sabre run`.
    dir: PathBuf,
    /// Also write the recomputed summary here instead of printing it.
    #[arg(long)]
    write: Option<PathBuf>,
}

fn exit_code(e: &SabreError) -> u8 {
    match e {
        SabreError::Config(_) | SabreError::UnknownClient(_) => 2,
        SabreError::InvariantBreach { .. } | SabreError::Degenerate { .. } | SabreError::Dimension { .. } => 3,
        SabreError::Io(_) | SabreError::Analysis(_) => 4,
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> SabreError + '_ {
    move |e| SabreError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn build_config(args: &ScenarioArgs) -> Result<RunConfig, SabreError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_json(&fs::read_to_string(path).map_err(io_at(path))?)?,
        None => match &args.preset {
            Some(name) => RunConfig::from_preset(name),
            None => return Err(SabreError::config("pass --config or --preset")),
        },
    };
    if args.config.is_some() {
        if let Some(name) = &args.preset {
            cfg.preset = Some(name.clone());
        }
    }
    for o in &args.overrides {
        cfg.set(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.overrides.insert("seed".into(), seed.into());
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if !args.format.is_empty() {
        cfg.output.formats = args
            .format
            .iter()
            .map(|f| match f {
                Format::Csv => RecordFormat::Csv,
                Format::Json => RecordFormat::Json,
            })
            .collect();
        cfg.output.formats.dedup();
    }
    cfg.verbosity = cfg.verbosity.max(args.verbose);
    let dir = args
        .out
        .clone()
        .or(cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    cfg.output.dir = Some(dir);
    Ok(cfg)
}

/// Prints to stdout, treating a closed pipe (`sabre verify | head`) as success.
fn emit(text: &str) -> Result<(), SabreError> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(SabreError::Io(e)),
        _ => Ok(()),
    }
}

fn pretty<T: serde::Serialize>(value: &T) -> Result<String, SabreError> {
    serde_json::to_string_pretty(value).map_err(|e| SabreError::Io(e.into()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), SabreError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_at(path))?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| SabreError::Io(e.into()))?;
    writeln!(w).map_err(io_at(path))?;
    w.flush().map_err(io_at(path))
}

fn write_records(dir: &Path, record: &RunRecord, formats: &[RecordFormat]) -> Result<(), SabreError> {
    for f in formats {
        let path = dir.join(f.file_name());
        let w = BufWriter::new(File::create(&path).map_err(io_at(&path))?);
        match f {
            RecordFormat::Csv => record.write_csv(w)?,
            RecordFormat::Json => record.write_json(w)?,
        }
    }
    Ok(())
}

fn cmd_run(args: &ScenarioArgs) -> Result<(), SabreError> {
    let resolved = build_config(args)?.resolve()?;
    let dir = resolved.output.dir.clone().expect("set by build_config");
    fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    write_json(&dir.join("resolved_config.json"), &resolved.to_config())?;

    let scenario = &resolved.scenario;
    let mut record = RunRecord::new(scenario.task.dim());
    let mut sim = Simulation::new(scenario, EngineOptions { workers: resolved.workers })?;
    let verbose = resolved.verbosity > 0;
    let step = (scenario.t_max / 10).max(1);
    let outcome = sim.run_with(|row| {
        if verbose && row.client.0 == 1 && row.cycle % step == 0 {
            eprintln!("cycle {} / {}", row.cycle, scenario.t_max);
        }
        record.rows.push(row);
    });
    // partial records are kept for inspection after a breach
    write_records(&dir, &record, &resolved.output.formats)?;
    outcome?;

    let summary = summarize(scenario, &record, &resolved.analysis)?;
    write_json(&dir.join("summary.json"), &summary)?;
    emit(&format!(
        "{}: {} rows, max benign |error|_inf = {:.3e}, clean test MSE = {:.3e} -> {}",
        scenario.name,
        record.rows.len(),
        summary.max_benign_linf_error,
        summary.clean_test_mse,
        dir.display()
    ))
}

fn cmd_verify(args: &ScenarioArgs) -> Result<(), SabreError> {
    let resolved = build_config(args)?.resolve()?;
    let report = verify(&resolved.scenario)?;
    emit(&pretty(&report)?)
}

fn cmd_presets() -> Result<(), SabreError> {
    let lines: Vec<String> = presets::list()
        .into_iter()
        .map(|p| {
            let tag = if p.expected_fail { " [expected-fail]" } else { "" };
            format!("{:<28} {}{tag}", p.name, p.description)
        })
        .collect();
    emit(&lines.join("\n"))
}

fn load_record(dir: &Path) -> Result<RunRecord, SabreError> {
    let csv = dir.join(RecordFormat::Csv.file_name());
    if csv.exists() {
        return RunRecord::read_csv(BufReader::new(File::open(&csv).map_err(io_at(&csv))?));
    }
    let json = dir.join(RecordFormat::Json.file_name());
    RunRecord::read_json(BufReader::new(File::open(&json).map_err(io_at(&json))?))
}

fn cmd_replay(args: &ReplayArgs) -> Result<(), SabreError> {
    let cfg_path = args.dir.join("resolved_config.json");
    let text = fs::read_to_string(&cfg_path).map_err(io_at(&cfg_path))?;
    let resolved: ResolvedRun = RunConfig::from_json(&text)?.resolve()?;
    let record = load_record(&args.dir)?;
    let summary = summarize(&resolved.scenario, &record, &resolved.analysis)?;
    match &args.write {
        Some(path) => write_json(path, &summary),
        None => emit(&pretty(&summary)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Presets => cmd_presets(),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
