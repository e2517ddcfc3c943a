//! Grid sweeps over device count and sequence length.

use std::io::Write;

use clap::Args;
use serde::Serialize;

use super::config::{ConfigError, Mode, RunConfig};
use super::run::{self, Verdict};
use super::CliError;
use crate::cost::{self, ClusterSpec, Method};

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Device counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4])]
    pub grid_gpus: Vec<usize>,
    /// Sequence lengths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32])]
    pub grid_seq: Vec<usize>,
    /// Refuse grids with more points than this.
    #[arg(long, default_value_t = 256)]
    pub max_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub gpus: usize,
    pub seq: usize,
    pub dim: usize,
    pub mode: Mode,
    pub pass: bool,
    pub err_forward: f64,
    pub err_backward: f64,
    pub measured_forward: u64,
    pub measured_backward: u64,
    pub modeled_forward: u64,
    pub modeled_backward: u64,
    pub forward_match: bool,
    pub backward_match: bool,
    /// Modeled ring-attention backward traffic at the same point.
    pub ring_backward: u64,
    /// Burst over ring backward traffic; `(3d + 2) / (6d)` whenever G > 1.
    pub burst_ring_backward_ratio: Option<f64>,
    pub makespan_forward_none: Option<f64>,
    pub makespan_forward_double_buffer: Option<f64>,
    pub makespan_backward_none: Option<f64>,
    pub makespan_backward_double_buffer: Option<f64>,
}

pub const CSV_HEADER: [&str; 19] = [
    "gpus",
    "seq",
    "dim",
    "mode",
    "pass",
    "err_forward",
    "err_backward",
    "measured_forward",
    "measured_backward",
    "modeled_forward",
    "modeled_backward",
    "forward_match",
    "backward_match",
    "ring_backward",
    "burst_ring_backward_ratio",
    "makespan_forward_none",
    "makespan_forward_double_buffer",
    "makespan_backward_none",
    "makespan_backward_double_buffer",
];

/// Runs `base` at every grid point. Points are validated up front so a bad
/// grid fails before any simulation.
pub fn sweep(base: &RunConfig, grid: &GridArgs) -> Result<Vec<SweepRow>, CliError> {
    let points = grid.grid_gpus.len() * grid.grid_seq.len();
    if points > grid.max_points {
        return Err(ConfigError(format!(
            "grid has {points} points, more than max_points ({})",
            grid.max_points
        ))
        .into());
    }
    if points == 0 {
        return Err(ConfigError("grid is empty".into()).into());
    }
    let mut configs = Vec::with_capacity(points);
    for &g in &grid.grid_gpus {
        for &n in &grid.grid_seq {
            let cfg = RunConfig {
                gpus: g,
                seq: n,
                ..base.clone()
            };
            cfg.validate()
                .map_err(|e| ConfigError(format!("grid point gpus={g} seq={n}: {e}")))?;
            configs.push(cfg);
        }
    }
    configs.iter().map(row).collect()
}

fn row(cfg: &RunConfig) -> Result<SweepRow, CliError> {
    log::info!("sweep point G={} N={}", cfg.gpus, cfg.seq);
    let r = run::verify(cfg)?;
    let measured_forward = r.ledger["elements_sent_forward"].as_u64().unwrap_or(0);
    let measured_backward = r.ledger["elements_sent_backward"].as_u64().unwrap_or(0);
    let (modeled_forward, modeled_backward) = r.modeled.as_ref().map_or((0, 0), |m| (m.forward, m.backward));
    let cluster = ClusterSpec {
        devices: cfg.gpus as u64,
        bandwidth: cfg.bandwidth,
    };
    let spec = run::model_spec(cfg);
    let (_, ring_backward) = cost::communication_overheads(&spec, &cluster, Method::RingAttention)?;
    let (_, burst_backward) = cost::communication_overheads(&spec, &cluster, Method::BurstAttention)?;
    let ms = r.makespan;
    Ok(SweepRow {
        gpus: cfg.gpus,
        seq: cfg.seq,
        dim: cfg.dim,
        mode: cfg.mode,
        pass: r.verdict == Verdict::Pass,
        err_forward: r.errors.forward(),
        err_backward: r.errors.backward(),
        measured_forward,
        measured_backward,
        modeled_forward,
        modeled_backward,
        forward_match: measured_forward == modeled_forward,
        backward_match: measured_backward == modeled_backward,
        ring_backward,
        burst_ring_backward_ratio: (ring_backward > 0).then(|| burst_backward as f64 / ring_backward as f64),
        makespan_forward_none: ms.map(|m| m.none.forward),
        makespan_forward_double_buffer: ms.map(|m| m.double_buffer.forward),
        makespan_backward_none: ms.map(|m| m.none.backward),
        makespan_backward_double_buffer: ms.map(|m| m.double_buffer.backward),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv(rows: &[SweepRow], out: impl Write) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Run(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.gpus.to_string(),
            r.seq.to_string(),
            r.dim.to_string(),
            serde_json::to_value(r.mode).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            r.pass.to_string(),
            r.err_forward.to_string(),
            r.err_backward.to_string(),
            r.measured_forward.to_string(),
            r.measured_backward.to_string(),
            r.modeled_forward.to_string(),
            r.modeled_backward.to_string(),
            r.forward_match.to_string(),
            r.backward_match.to_string(),
            r.ring_backward.to_string(),
            opt(r.burst_ring_backward_ratio),
            opt(r.makespan_forward_none),
            opt(r.makespan_forward_double_buffer),
            opt(r.makespan_backward_none),
            opt(r.makespan_backward_double_buffer),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CliError::Run(e.to_string()))?;
    Ok(())
}
