//! Command-line surface: CSV ingestion, monitoring runs, threshold
//! calibration and the rejection-rate table.
//!
//! Output is machine-first: one JSON object per tick plus a JSON summary,
//! and CSV for tables and plot trajectories. Exit codes: 0 completed,
//! 2 configuration error, 3 data error.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{RelmonError, Result};
use crate::lrv;
use crate::monitor::{self, Checkpoint, Monitor};
use crate::simlab::{self, NoiseModel, ScenarioKind, TableCell, TableSettings};
use crate::stream_core::{CpConstant, DecisionEvent, MonitorConfig, QuantileMode};
use crate::cpe;

#[derive(Debug, Parser)]
#[command(name = "relmon", about = "Monitor a univariate stream for relevant mean changes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the sequential monitor over a CSV file or standard input.
    Monitor(MonitorArgs),
    /// Reproduce the rejection-rate table on synthetic scenarios.
    Table1(TableArgs),
    /// Calibrate the change-point constant from a training CSV.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonConfigArgs {
    /// Training sample size N.
    #[arg(long, default_value_t = 100)]
    pub train_size: usize,
    /// Weight exponent in (0, 0.5).
    #[arg(long, default_value_t = 0.45)]
    pub beta: f64,
    /// Nominal level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Change-point constant: a number, or "auto" to calibrate.
    #[arg(long, default_value = "auto")]
    pub ccp: String,
    /// Monte-Carlo replications for quantiles and calibration.
    #[arg(long, default_value_t = 100)]
    pub mc_reps: usize,
    /// Rescaled time bound for the worst-case future supremum.
    #[arg(long, default_value_t = 20.0)]
    pub horizon: f64,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// Input CSV path, or "-" for standard input.
    #[arg(long, default_value = "-")]
    pub input: String,
    #[command(flatten)]
    pub config: CommonConfigArgs,
    /// Relevance threshold(s); repeat for a nested list. The first is the
    /// headline threshold.
    #[arg(long = "delta", required = true)]
    pub deltas: Vec<f64>,
    /// Stop at the first rejection.
    #[arg(long, default_value_t = false)]
    pub stop_on_reject: bool,
    /// Relevance-set flavor behind the decision quantile.
    #[arg(long, default_value = "delta-free")]
    pub quantile_mode: String,
    /// Value column (name or 0-based index). Defaults to a column named
    /// "value", else the last column.
    #[arg(long)]
    pub value_col: Option<String>,
    /// Write per-tick events (JSONL) here instead of standard output.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Write a plot-ready trajectory CSV here.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Write a checkpoint here when the run ends (or at --checkpoint-at).
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    /// Stop and checkpoint once the stream index reaches this value.
    #[arg(long)]
    pub checkpoint_at: Option<usize>,
    /// Resume from a checkpoint file; training rows are skipped.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[command(flatten)]
    pub config: CommonConfigArgs,
    /// Replications per cell.
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// Relevance threshold.
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    /// Noise models to include.
    #[arg(long, value_delimiter = ',', default_value = "IID,MA,AR")]
    pub noise: Vec<String>,
    /// Training sizes to include.
    #[arg(long = "n", value_delimiter = ',', default_value = "50,100,200")]
    pub sizes: Vec<usize>,
    /// Weight exponents to include.
    #[arg(long = "betas", value_delimiter = ',', default_value = "0.1,0.3,0.45")]
    pub betas: Vec<f64>,
    /// Scenarios to include.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "Interior,Boundary,AltI,AltII,AltIII"
    )]
    pub scenarios: Vec<String>,
    /// Output CSV path (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Training CSV path, or "-" for standard input.
    #[arg(long, default_value = "-")]
    pub input: String,
    #[command(flatten)]
    pub config: CommonConfigArgs,
    /// False-detection budget over the calibration horizon.
    #[arg(long, default_value_t = 0.05)]
    pub budget: f64,
    /// Value column (name or 0-based index).
    #[arg(long)]
    pub value_col: Option<String>,
}

/// One parsed input row.
#[derive(Debug, Clone, PartialEq)]
pub struct InputRow {
    pub timestamp: Option<String>,
    pub value: f64,
}

/// One JSONL event as emitted per tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub x: f64,
    pub gamma_stat: f64,
    pub quantile: f64,
    pub rejected: bool,
    pub delta_max: f64,
    pub deviation_sign: i8,
    pub new_detection: bool,
}

impl EventRecord {
    fn new(ev: DecisionEvent, timestamp: Option<String>, x: f64) -> EventRecord {
        EventRecord {
            k: ev.k,
            timestamp,
            x,
            gamma_stat: ev.gamma_stat,
            quantile: ev.quantile,
            rejected: ev.rejected,
            delta_max: ev.delta_max,
            deviation_sign: ev.deviation_sign,
            new_detection: ev.new_detection,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub k: usize,
    pub theta_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaRejection {
    pub delta: f64,
    pub first_rejection_k: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub n_observations: usize,
    pub sigma2_hat: f64,
    pub cp_constant: f64,
    pub sigma_warning: bool,
    pub detections: Vec<DetectionSummary>,
    pub first_rejection: Vec<DeltaRejection>,
    pub final_delta_max: f64,
}

/// Full result of a monitoring run.
#[derive(Debug)]
pub struct MonitorRun {
    pub events: Vec<EventRecord>,
    pub summary: Summary,
    pub checkpoint: Option<Checkpoint>,
}

/// Resolve column indices from the CSV header.
fn resolve_columns(
    header: &[String],
    value_col: Option<&str>,
) -> Result<(usize, Option<usize>)> {
    let lower: Vec<String> = header.iter().map(|h| h.trim().to_lowercase()).collect();
    let value_idx = match value_col {
        Some(spec) => {
            if let Ok(idx) = spec.parse::<usize>() {
                if idx >= header.len() {
                    return Err(RelmonError::Config(format!(
                        "value column index {idx} out of range for {} columns",
                        header.len()
                    )));
                }
                idx
            } else {
                lower
                    .iter()
                    .position(|h| h == &spec.trim().to_lowercase())
                    .ok_or_else(|| {
                        RelmonError::Config(format!("value column '{spec}' not found"))
                    })?
            }
        }
        None => lower
            .iter()
            .position(|h| h == "value")
            .unwrap_or(header.len() - 1),
    };
    let ts_idx = lower
        .iter()
        .position(|h| h == "timestamp" || h == "date" || h == "time")
        .filter(|&i| i != value_idx);
    Ok((value_idx, ts_idx))
}

/// Parse CSV rows (header expected) from a reader.
pub fn parse_rows<R: io::Read>(reader: R, value_col: Option<&str>) -> Result<Vec<InputRow>> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = csv_reader
        .headers()
        .map_err(|e| RelmonError::Data { row: 0, msg: e.to_string() })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.is_empty() {
        return Err(RelmonError::Data { row: 0, msg: "empty header".into() });
    }
    let (value_idx, ts_idx) = resolve_columns(&header, value_col)?;
    let mut rows = Vec::new();
    for (i, record) in csv_reader.records().enumerate() {
        let row_no = i + 2; // header is row 1
        let record = record.map_err(|e| RelmonError::Data { row: row_no, msg: e.to_string() })?;
        let raw = record.get(value_idx).ok_or_else(|| RelmonError::Data {
            row: row_no,
            msg: format!("missing value column {value_idx}"),
        })?;
        let value: f64 = raw.parse().map_err(|_| RelmonError::Data {
            row: row_no,
            msg: format!("non-numeric value cell '{raw}'"),
        })?;
        let timestamp = ts_idx.and_then(|j| record.get(j)).map(|s| s.to_string());
        rows.push(InputRow { timestamp, value });
    }
    Ok(rows)
}

fn read_rows(input: &str, value_col: Option<&str>) -> Result<Vec<InputRow>> {
    if input == "-" {
        parse_rows(io::stdin().lock(), value_col)
    } else {
        parse_rows(fs::File::open(input)?, value_col)
    }
}

fn parse_ccp(spec: &str) -> Result<CpConstant> {
    if spec.eq_ignore_ascii_case("auto") {
        Ok(CpConstant::Auto { budget: 0.05 })
    } else {
        spec.parse::<f64>()
            .map(CpConstant::Fixed)
            .map_err(|_| RelmonError::Config(format!("--ccp must be a number or 'auto', got '{spec}'")))
    }
}

fn parse_quantile_mode(spec: &str) -> Result<QuantileMode> {
    match spec.to_lowercase().as_str() {
        "delta-free" => Ok(QuantileMode::DeltaFree),
        "delta-specific" => Ok(QuantileMode::DeltaSpecific),
        other => Err(RelmonError::Config(format!(
            "--quantile-mode must be 'delta-free' or 'delta-specific', got '{other}'"
        ))),
    }
}

fn build_config(args: &MonitorArgs) -> Result<MonitorConfig> {
    let mut cfg = MonitorConfig::new(args.config.train_size, args.config.beta, args.deltas[0]);
    cfg.alpha = args.config.alpha;
    cfg.cp_constant = parse_ccp(&args.config.ccp)?;
    cfg.mc_reps = args.config.mc_reps;
    cfg.horizon = args.config.horizon;
    cfg.seed = args.config.seed;
    cfg.quantile_mode = parse_quantile_mode(&args.quantile_mode)?;
    cfg.stop_on_reject = args.stop_on_reject;
    cfg.validate()?;
    Ok(cfg)
}

/// Run the monitor over parsed rows. With `resume`, rows up to the
/// checkpointed index are skipped; with `checkpoint_at`, the run stops once
/// that stream index is reached and the checkpoint is returned.
pub fn run_monitor_rows(
    config: MonitorConfig,
    rows: &[InputRow],
    deltas: &[f64],
    resume: Option<Checkpoint>,
    checkpoint_at: Option<usize>,
) -> Result<MonitorRun> {
    let n = config.train_size;
    let mut mon = match resume {
        Some(cp) => Monitor::from_checkpoint(cp)?,
        None => {
            if rows.len() < n {
                return Err(RelmonError::Config(format!(
                    "input has {} rows but train_size is {n}",
                    rows.len()
                )));
            }
            let training: Vec<f64> = rows[..n].iter().map(|r| r.value).collect();
            Monitor::new(config, &training)?
        }
    };
    let start = mon.state().k;
    let mut events = Vec::new();
    for row in rows.iter().skip(start) {
        let ev = mon.process_observation(row.value);
        events.push(EventRecord::new(ev, row.timestamp.clone(), row.value));
        if mon.config().stop_on_reject && ev.rejected {
            break;
        }
        if checkpoint_at.is_some_and(|k| mon.state().k >= k) {
            break;
        }
    }
    let state = mon.state();
    let detections = state
        .records
        .iter()
        .map(|r| DetectionSummary {
            k: r.detect_time,
            theta_hat: r.theta_hat,
            timestamp: rows
                .get(r.boundary().saturating_sub(1))
                .and_then(|row| row.timestamp.clone()),
        })
        .collect();
    let first_rejection = deltas
        .iter()
        .map(|&d| DeltaRejection {
            delta: d,
            first_rejection_k: events
                .iter()
                .find(|e| e.delta_max > d || (d == mon.config().delta && e.rejected))
                .map(|e| e.k),
        })
        .collect();
    let final_delta_max = events.last().map(|e| e.delta_max).unwrap_or(0.0);
    let summary = Summary {
        n_observations: state.k,
        sigma2_hat: state.sigma2_hat,
        cp_constant: state.cp_constant,
        sigma_warning: mon.sigma_warning(),
        detections,
        first_rejection,
        final_delta_max,
    };
    let checkpoint = checkpoint_at.map(|_| mon.checkpoint());
    Ok(MonitorRun {
        events,
        summary,
        checkpoint,
    })
}

/// Serialize events as JSON lines.
pub fn events_to_jsonl(events: &[EventRecord]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serialization"));
        out.push('\n');
    }
    out
}

/// Plot-ready trajectory: signed maximal deviation per tick.
pub fn trajectory_csv(events: &[EventRecord]) -> String {
    let mut out = String::from("k,timestamp,value,delta_max_signed,detection_flag\n");
    for e in events {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.k,
            e.timestamp.as_deref().unwrap_or(""),
            e.x,
            e.delta_max * e.deviation_sign as f64,
            u8::from(e.new_detection)
        ));
    }
    out
}

fn write_or_stdout(path: Option<&PathBuf>, content: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, content)?,
        None => io::stdout().write_all(content.as_bytes())?,
    }
    Ok(())
}

fn cmd_monitor(args: &MonitorArgs) -> Result<()> {
    let config = build_config(args)?;
    let rows = read_rows(&args.input, args.value_col.as_deref())?;
    let resume = match &args.resume {
        Some(p) => Some(monitor::checkpoint_from_json(&fs::read_to_string(p)?)?),
        None => None,
    };
    let run = run_monitor_rows(config, &rows, &args.deltas, resume, args.checkpoint_at)?;
    write_or_stdout(args.events.as_ref(), &events_to_jsonl(&run.events))?;
    if let Some(path) = &args.trajectory {
        fs::write(path, trajectory_csv(&run.events))?;
    }
    if let Some(path) = &args.checkpoint_out {
        let cp = run
            .checkpoint
            .clone()
            .ok_or_else(|| RelmonError::Config("--checkpoint-out requires --checkpoint-at".into()))?;
        fs::write(path, monitor::checkpoint_to_json(&cp)?)?;
    }
    eprintln!("{}", serde_json::to_string_pretty(&run.summary).expect("summary serialization"));
    Ok(())
}

fn parse_noise(s: &str) -> Result<NoiseModel> {
    match s.to_uppercase().as_str() {
        "IID" => Ok(NoiseModel::Iid),
        "MA" => Ok(NoiseModel::Ma),
        "AR" => Ok(NoiseModel::Ar),
        other => Err(RelmonError::Config(format!("unknown noise model '{other}'"))),
    }
}

fn parse_scenario(s: &str) -> Result<ScenarioKind> {
    match s.to_lowercase().as_str() {
        "interior" => Ok(ScenarioKind::Interior),
        "boundary" => Ok(ScenarioKind::Boundary),
        "alti" | "alt1" => Ok(ScenarioKind::AltI),
        "altii" | "alt2" => Ok(ScenarioKind::AltII),
        "altiii" | "alt3" => Ok(ScenarioKind::AltIII),
        other => Err(RelmonError::Config(format!("unknown scenario '{other}'"))),
    }
}

fn cmd_table1(args: &TableArgs) -> Result<()> {
    let mut cells = Vec::new();
    for noise in &args.noise {
        let noise = parse_noise(noise)?;
        for &n in &args.sizes {
            for &beta in &args.betas {
                for kind in &args.scenarios {
                    cells.push(TableCell::new(noise, n, beta, parse_scenario(kind)?));
                }
            }
        }
    }
    let settings = TableSettings {
        delta: args.delta,
        alpha: args.config.alpha,
        mc_reps: args.config.mc_reps,
        horizon: args.config.horizon,
        master_seed: args.config.seed,
        ..TableSettings::default()
    };
    let rows = simlab::run_table(&cells, args.reps, &settings)?;
    write_or_stdout(args.out.as_ref(), &simlab::table_to_csv(&rows))?;
    Ok(())
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let rows = read_rows(&args.input, args.value_col.as_deref())?;
    let n = args.config.train_size;
    if rows.len() < n {
        return Err(RelmonError::Config(format!(
            "input has {} rows but train_size is {n}",
            rows.len()
        )));
    }
    let training: Vec<f64> = rows[..n].iter().map(|r| r.value).collect();
    let est = lrv::long_run_variance(&training)?;
    let mut cfg = MonitorConfig::new(n, args.config.beta, 0.0);
    cfg.mc_reps = args.config.mc_reps;
    cfg.horizon = args.config.horizon;
    cfg.seed = args.config.seed;
    cfg.validate()?;
    let sigma_hat = est.sigma2.sqrt();
    let cp_constant = if sigma_hat == 0.0 {
        eprintln!("warning: zero variance estimate from constant training data");
        0.0
    } else {
        cpe::calibrate_cp_constant(sigma_hat, &cfg, args.budget)?
    };
    println!("C_cp = {cp_constant}");
    println!("sigma2_hat = {}", est.sigma2);
    println!("m_N = {}", est.block_length);
    Ok(())
}

/// Dispatch a parsed command; the binary maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Monitor(args) => cmd_monitor(&args),
        Command::Table1(args) => cmd_table1(&args),
        Command::Calibrate(args) => cmd_calibrate(&args),
    }
}

/// Exit code contract: 2 for configuration problems, 3 for data problems.
pub fn exit_code(err: &RelmonError) -> i32 {
    match err {
        RelmonError::Data { .. } => 3,
        _ => 2,
    }
}
