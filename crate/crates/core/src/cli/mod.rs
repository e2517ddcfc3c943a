//! The `burst-sim` command line.

pub mod config;
pub mod run;
pub mod sweep;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cost::{self, ClusterSpec, ComputeTimes, ModelSpec};
use crate::gao::{run_ring_pass, Cluster, PassInput};
use crate::sim::engine::Overlap;
use crate::sim::schedule::LinearDurations;
use config::{ConfigError, ExecutorKind, MaskSpec, Mode, Precision, RunConfig};
use run::{Verdict, Workload};

pub const EXIT_PASS: u8 = 0;
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "burst-sim", version, about = "Simulated ring attention: verification, sweeps and cost tables")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run forward and backward once and compare with the dense oracle.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Verify every point of a (gpus, seq) grid and tabulate traffic.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        grid: sweep::GridArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Evaluate the analytical cost models for every method.
    Cost {
        #[command(flatten)]
        model: CostArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Dump the virtual-time schedule of one pass as NDJSON.
    Trace {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = TracePass::Forward)]
        pass: TracePass,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TracePass {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

/// Overrides on top of `--config`; flags win.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub gpus: Option<usize>,
    #[arg(long)]
    pub seq: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// none, causal, or a block-mask JSON file.
    #[arg(long)]
    pub mask: Option<MaskSpec>,
    #[arg(long, value_enum)]
    pub overlap: Option<Overlap>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long, value_enum)]
    pub executor: Option<ExecutorKind>,
    /// Square tile length (mode burst only).
    #[arg(long)]
    pub tiles: Option<usize>,
    #[arg(long)]
    pub sram_bytes: Option<usize>,
    #[arg(long)]
    pub pad: bool,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub compute_rate: Option<f64>,
}

impl RunArgs {
    /// The config file (or defaults) with every given flag applied.
    pub fn overlay(&self) -> Result<RunConfig, ConfigError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => {$( if let Some(v) = self.$f.clone() { c.$f = v; } )*};
        }
        over!(mode, gpus, seq, dim, heads, batch, seed, mask, overlap, precision, executor, sram_bytes, bandwidth, compute_rate);
        if self.tiles.is_some() {
            c.tiles = self.tiles;
        }
        c.pad |= self.pad;
        Ok(c)
    }

    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let c = self.overlay()?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// JSON `ModelSpec`; flags override its fields.
    #[arg(long = "config")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub gpus: Option<u64>,
    #[arg(long)]
    pub seq: Option<u64>,
    #[arg(long)]
    pub dim: Option<u64>,
    #[arg(long)]
    pub heads: Option<u64>,
    #[arg(long)]
    pub batch: Option<u64>,
    #[arg(long)]
    pub hidden: Option<u64>,
    #[arg(long)]
    pub heads_per_device: Option<f64>,
    #[arg(long)]
    pub ffn_dim: Option<u64>,
    #[arg(long)]
    pub bits_per_element: Option<u64>,
    #[arg(long)]
    pub sram_bytes: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    pub bandwidth: f64,
    #[arg(long, default_value_t = 0.0)]
    pub t_attn_f: f64,
    #[arg(long, default_value_t = 0.0)]
    pub t_attn_b: f64,
    #[arg(long, default_value_t = 0.0)]
    pub t_ffn: f64,
}

impl CostArgs {
    pub fn resolve(&self) -> Result<(ModelSpec, ClusterSpec, ComputeTimes), ConfigError> {
        let mut m = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| ConfigError(format!("config {}: {e}", p.display())))?
            }
            None => ModelSpec::default(),
        };
        macro_rules! over {
            ($($f:ident => $g:ident),*) => {$( if let Some(v) = self.$f { m.$g = v; } )*};
        }
        over!(seq => seq_len, dim => head_dim, heads => heads, batch => batch, ffn_dim => ffn_dim,
              bits_per_element => bits_per_element, sram_bytes => sram_bytes);
        if self.hidden.is_some() {
            m.hidden = self.hidden;
        }
        if self.heads_per_device.is_some() {
            m.heads_per_device = self.heads_per_device;
        }
        let c = ClusterSpec {
            devices: self.gpus.unwrap_or(4),
            bandwidth: self.bandwidth,
        };
        let t = ComputeTimes {
            t_attn_f: self.t_attn_f,
            t_attn_b: self.t_attn_b,
            t_ffn: self.t_ffn,
        };
        m.validate().map_err(|e| ConfigError(e.to_string()))?;
        c.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok((m, c, t))
    }
}

/// Failure of a command, classified for the exit status.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        use crate::Error::*;
        match e {
            InvalidArgument(_) | Partition { .. } | Shape(_) => CliError::Config(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Config(format!("--out {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json(out: &OutArgs, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut w = open_out(out.out.as_deref())?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Run(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn csv_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn cmd_verify(run: &RunArgs, out: &OutArgs) -> Result<Verdict, CliError> {
    let cfg = run.resolve()?;
    log::info!("verify {:?} G={} N={} d={}", cfg.mode, cfg.gpus, cfg.seq, cfg.dim);
    let report = run::verify(&cfg)?;
    match out.format {
        Format::Json => write_json(out, &report)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(open_out(out.out.as_deref())?);
            let e = &report.errors;
            w.write_record(["mode", "gpus", "seq", "dim", "err_o", "err_lse", "err_dq", "err_dk", "err_dv", "verdict"])
                .map_err(csv_err)?;
            w.write_record([
                format!("{:?}", cfg.mode).to_lowercase(),
                cfg.gpus.to_string(),
                cfg.seq.to_string(),
                cfg.dim.to_string(),
                e.forward_o.to_string(),
                e.forward_lse.to_string(),
                e.dq.to_string(),
                e.dk.to_string(),
                e.dv.to_string(),
                format!("{:?}", report.verdict).to_lowercase(),
            ])
            .map_err(csv_err)?;
            w.flush()?;
        }
    }
    if report.verdict == Verdict::Fail {
        log::warn!("verification failed: {:?}", report.errors);
    }
    Ok(report.verdict)
}

fn cmd_sweep(run: &RunArgs, grid: &sweep::GridArgs, out: &OutArgs) -> Result<Verdict, CliError> {
    let base = run.overlay()?;
    let rows = sweep::sweep(&base, grid)?;
    let verdict = if rows.iter().all(|r| r.pass) { Verdict::Pass } else { Verdict::Fail };
    match out.format {
        Format::Json => write_json(out, &rows)?,
        Format::Csv => sweep::write_csv(&rows, open_out(out.out.as_deref())?)?,
    }
    Ok(verdict)
}

fn cmd_cost(args: &CostArgs, out: &OutArgs) -> Result<Verdict, CliError> {
    let (m, c, t) = args.resolve()?;
    let report = cost::cost_report(&m, &c, &t)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    match out.format {
        Format::Json => write_json(out, &report)?,
        Format::Csv => cost::write_csv(&report.rows, open_out(out.out.as_deref())?)?,
    }
    Ok(Verdict::Pass)
}

fn cmd_trace(run: &RunArgs, pass: TracePass, out: Option<&Path>) -> Result<Verdict, CliError> {
    let cfg = run.resolve()?;
    if matches!(cfg.mode, Mode::Dense | Mode::RingReference) {
        return Err(CliError::Config("trace needs mode burst or burst_no_lao".into()));
    }
    if cfg.precision == Precision::Single {
        log::info!("trace runs in double precision; the schedule does not depend on it");
    }
    let work = Workload::generate(&cfg);
    let opts = run::gao_options::<f64>(&cfg)?;
    let durations = LinearDurations {
        bandwidth: cfg.bandwidth,
        compute_rate: cfg.compute_rate,
        bytes_per_element: cfg.bytes_per_element() as u64,
    };
    let mut cluster = Cluster::partition(&work.heads, cfg.gpus, cfg.pad)?;
    let (_, fwd) = run_ring_pass(&mut cluster, PassInput::Forward, &opts, &durations)?;
    let trace = match pass {
        TracePass::Forward => fwd,
        TracePass::Backward => run_ring_pass(&mut cluster, PassInput::Backward { d_o: &work.d_o }, &opts, &durations)?.1,
    };
    let mut w = open_out(out)?;
    trace.write_ndjson(&mut w)?;
    w.flush()?;
    Ok(Verdict::Pass)
}

/// Parses the process arguments, runs the command and maps the outcome to
/// the exit status: 0 pass, 1 verification failure, 2 configuration error.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BURST_SIM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(run(&cli))
}

/// Runs a parsed command line and returns the exit status.
pub fn run(cli: &Cli) -> u8 {
    let result = match &cli.command {
        Command::Verify { run, out } => cmd_verify(run, out),
        Command::Sweep { run, grid, out } => cmd_sweep(run, grid, out),
        Command::Cost { model, out } => cmd_cost(model, out),
        Command::Trace { run, pass, out } => cmd_trace(run, *pass, out.as_deref()),
    };
    match result {
        Ok(Verdict::Pass) => EXIT_PASS,
        Ok(Verdict::Fail) => EXIT_FAIL,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `burst-sim --help` for usage");
            EXIT_CONFIG
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            EXIT_FAIL
        }
    }
}
