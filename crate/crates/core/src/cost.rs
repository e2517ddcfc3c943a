//! Closed-form overheads of distributed attention strategies: memory,
//! communication, HBM access counts and the per-block runtime models.
//!
//! Memory and I/O values are element counts in "model units": asymptotic
//! expressions are evaluated with leading constant 1. Runtimes are in
//! whatever time unit the bandwidth is given in.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention family. Flash/LAO tiling is a separate flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    RingAttention,
    TensorParallel,
    BurstAttention,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::RingAttention => "ring_attention",
            Method::TensorParallel => "tensor_parallel",
            Method::BurstAttention => "burst_attention",
        })
    }
}

/// Every `(method, tiled)` combination with an analytical row.
pub const METHOD_ROWS: [(Method, bool); 5] = [
    (Method::RingAttention, false),
    (Method::TensorParallel, false),
    (Method::TensorParallel, true),
    (Method::BurstAttention, false),
    (Method::BurstAttention, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub batch: u64,
    pub seq_len: u64,
    pub heads: u64,
    /// Heads held by one device under tensor parallelism; defaults to `Z / G`.
    #[serde(default)]
    pub heads_per_device: Option<f64>,
    pub head_dim: u64,
    /// Model dimension `H`; defaults to `Z · d`.
    #[serde(default)]
    pub hidden: Option<u64>,
    pub ffn_dim: u64,
    /// Width of one element in bits (the runtime models' `M`).
    pub bits_per_element: u64,
    /// On-chip memory size in bytes (the tiling `M`), converted to elements
    /// with `bits_per_element`.
    pub sram_bytes: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            batch: 1,
            seq_len: 16,
            heads: 2,
            heads_per_device: None,
            head_dim: 4,
            hidden: None,
            ffn_dim: 32,
            bits_per_element: 32,
            sram_bytes: 192 * 1024,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("batch", self.batch),
            ("seq_len", self.seq_len),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("bits_per_element", self.bits_per_element),
            ("sram_bytes", self.sram_bytes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.hidden == Some(0) {
            return Err(Error::InvalidArgument("hidden must be positive".into()));
        }
        if let Some(z) = self.heads_per_device {
            if !(z.is_finite() && z > 0.0) {
                return Err(Error::InvalidArgument("heads_per_device must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn hidden(&self) -> u64 {
        self.hidden.unwrap_or(self.heads * self.head_dim)
    }

    /// Present when `H` was given and differs from `Z · d`.
    pub fn hidden_warning(&self) -> Option<String> {
        match self.hidden {
            Some(h) if h != self.heads * self.head_dim => Some(format!(
                "hidden {h} differs from heads x head_dim = {}",
                self.heads * self.head_dim
            )),
            _ => None,
        }
    }

    /// SRAM capacity in elements.
    pub fn sram_elements(&self) -> f64 {
        self.sram_bytes as f64 * 8.0 / self.bits_per_element as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub devices: u64,
    /// Bits per unit of time.
    pub bandwidth: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::InvalidArgument("devices must be at least 1".into()));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::InvalidArgument("bandwidth must be positive".into()));
        }
        Ok(())
    }
}

fn check(m: &ModelSpec, c: &ClusterSpec) -> Result<()> {
    m.validate()?;
    c.validate()
}

fn lao_unsupported(method: Method) -> Error {
    Error::InvalidArgument(format!("{method} has no tiled (FlashAttention/LAO) variant"))
}

/// `(parameter, activation)` memory per device in elements.
pub fn memory_overheads(m: &ModelSpec, c: &ClusterSpec, method: Method, lao: bool) -> Result<(f64, f64)> {
    check(m, c)?;
    let (b, n, z, d) = (m.batch as f64, m.seq_len as f64, m.heads as f64, m.head_dim as f64);
    let (h, g) = (m.hidden() as f64, c.devices as f64);
    let tile = m.sram_elements() / (4.0 * d);
    let qkvo = 4.0 * b * z * n * d / g;
    let params = 4.0 * h * z * d;
    Ok(match (method, lao) {
        (Method::RingAttention, false) => (params, qkvo + b * z * n * n / g + b * n * h / g),
        (Method::RingAttention, true) => return Err(lao_unsupported(method)),
        (Method::TensorParallel, false) => (params / g, qkvo + b * z * n * n / g + b * n * h),
        (Method::TensorParallel, true) => (params / g, qkvo + b * z * n * n / (tile * tile * g) + b * n * h),
        (Method::BurstAttention, false) => (params, qkvo + b * z * n * n / (g * g) + b * n * h / g),
        (Method::BurstAttention, true) => (params, qkvo + b * z * n * n / (tile * tile * g * g) + b * n * h / g),
    })
}

/// `(forward, backward)` elements sent per device. Zero on one device.
pub fn communication_overheads(m: &ModelSpec, c: &ClusterSpec, method: Method) -> Result<(u64, u64)> {
    check(m, c)?;
    if c.devices == 1 {
        return Ok((0, 0));
    }
    let bzn = m.batch * m.heads * m.seq_len;
    let bznd = bzn * m.head_dim;
    Ok(match method {
        Method::RingAttention => (2 * bznd, 6 * bznd),
        Method::TensorParallel => (4 * bznd, 4 * bznd),
        Method::BurstAttention => (2 * bznd, 3 * bznd + 2 * bzn),
    })
}

/// HBM accesses per device.
pub fn io_accesses(m: &ModelSpec, c: &ClusterSpec, method: Method) -> Result<f64> {
    check(m, c)?;
    let (b, n, z, d) = (m.batch as f64, m.seq_len as f64, m.heads as f64, m.head_dim as f64);
    let g = c.devices as f64;
    Ok(match method {
        Method::RingAttention => b * z * n * n / g + b * z * n * d,
        Method::TensorParallel | Method::BurstAttention => b * z * n * n / ((m.sram_elements() / (d * d)) * g),
    })
}

fn ring_factor(m: &ModelSpec, c: &ClusterSpec) -> f64 {
    let g = c.devices as f64;
    m.bits_per_element as f64 * (g - 1.0) / (c.bandwidth * g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpRuntime {
    /// One all-gather or reduce-scatter.
    pub t_comm: f64,
    pub total: f64,
}

/// Tensor-parallel block: two all-gathers and two reduce-scatters plus
/// the sharded compute.
pub fn runtime_tp(m: &ModelSpec, c: &ClusterSpec, t_attn: f64, t_ffn: f64) -> Result<TpRuntime> {
    check(m, c)?;
    let g = c.devices as f64;
    let z = m.heads_per_device.unwrap_or(m.heads as f64 / g);
    let t_comm = (m.batch * m.seq_len * m.head_dim) as f64 * z * ring_factor(m, c);
    Ok(TpRuntime {
        t_comm,
        total: 4.0 * t_comm + t_attn / g + t_ffn / g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstRuntime {
    pub t_comm_attn_f: f64,
    pub t_comm_attn_b: f64,
    pub t_comm_weights: f64,
    pub total: f64,
}

/// Sequence-parallel block with compute/communication overlap in attention.
pub fn runtime_burst(m: &ModelSpec, c: &ClusterSpec, t_attn_f: f64, t_attn_b: f64, t_ffn: f64) -> Result<BurstRuntime> {
    check(m, c)?;
    let f = ring_factor(m, c);
    let n_local = m.seq_len as f64 / c.devices as f64;
    let (b, z, d) = (m.batch as f64, m.heads as f64, m.head_dim as f64);
    let h = m.hidden() as f64;
    let t_comm_attn_f = 2.0 * b * n_local * z * d * f;
    let t_comm_attn_b = (3.0 * b * n_local * z * d + 2.0 * b * n_local * z) * f;
    let t_comm_weights = (4.0 * h * z * d + 2.0 * h * m.ffn_dim as f64) * f;
    Ok(BurstRuntime {
        t_comm_attn_f,
        t_comm_attn_b,
        t_comm_weights,
        total: t_attn_f.max(t_comm_attn_f) + t_attn_b.max(t_comm_attn_b) + t_ffn + t_comm_weights,
    })
}

/// Symbolic expressions behind each value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Formulas {
    pub parameter_memory: &'static str,
    pub activation_memory: &'static str,
    pub comm_forward: &'static str,
    pub comm_backward: &'static str,
    pub io_accesses: &'static str,
    pub runtime_total: &'static str,
}

pub fn formulas(method: Method, lao: bool) -> Formulas {
    const RING_IO: &str = "BZN^2/G + BZNd";
    const TILED_IO: &str = "BZN^2/((M/d^2)G)";
    match (method, lao) {
        (Method::RingAttention, _) => Formulas {
            parameter_memory: "4HZd",
            activation_memory: "4BZNd/G + BZN^2/G + BNH/G",
            comm_forward: "2BZNd",
            comm_backward: "6BZNd",
            io_accesses: RING_IO,
            runtime_total: "",
        },
        (Method::TensorParallel, tiled) => Formulas {
            parameter_memory: "4HZd/G",
            activation_memory: if tiled {
                "4BZNd/G + BZN^2/((M/4d)^2 G) + BNH"
            } else {
                "4BZNd/G + BZN^2/G + BNH"
            },
            comm_forward: "4BZNd",
            comm_backward: "4BZNd",
            io_accesses: TILED_IO,
            runtime_total: "4 t_comm + T_attn/G + T_ffn/G; t_comm = (B N Z' d) M_bits (G-1)/(b G)",
        },
        (Method::BurstAttention, tiled) => Formulas {
            parameter_memory: "4HZd",
            activation_memory: if tiled {
                "4BZNd/G + BZN^2/((M/4d)^2 G^2) + BNH/G"
            } else {
                "4BZNd/G + BZN^2/G^2 + BNH/G"
            },
            comm_forward: "2BZNd",
            comm_backward: "3BZNd + 2BZN",
            io_accesses: TILED_IO,
            runtime_total: "max(T_attn_f, t_comm_attn_f) + max(T_attn_b, t_comm_attn_b) + T_ffn + t_comm_weights",
        },
    }
}

/// Compute times fed to the runtime models.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeTimes {
    pub t_attn_f: f64,
    pub t_attn_b: f64,
    pub t_ffn: f64,
}

/// One analytical row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub method: Method,
    pub lao: bool,
    pub devices: u64,
    pub seq_len: u64,
    pub parameter_memory: f64,
    pub activation_memory: f64,
    pub comm_forward: u64,
    pub comm_backward: u64,
    pub io_accesses: f64,
    /// No runtime model exists for RingAttention.
    pub runtime_total: Option<f64>,
    pub formulas: Formulas,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub compute: ComputeTimes,
    pub warnings: Vec<String>,
    pub rows: Vec<CostRow>,
}

pub fn cost_row(m: &ModelSpec, c: &ClusterSpec, t: &ComputeTimes, method: Method, lao: bool) -> Result<CostRow> {
    let (parameter_memory, activation_memory) = memory_overheads(m, c, method, lao)?;
    let (comm_forward, comm_backward) = communication_overheads(m, c, method)?;
    let runtime_total = match method {
        Method::RingAttention => None,
        Method::TensorParallel => Some(runtime_tp(m, c, t.t_attn_f + t.t_attn_b, t.t_ffn)?.total),
        Method::BurstAttention => Some(runtime_burst(m, c, t.t_attn_f, t.t_attn_b, t.t_ffn)?.total),
    };
    Ok(CostRow {
        method,
        lao,
        devices: c.devices,
        seq_len: m.seq_len,
        parameter_memory,
        activation_memory,
        comm_forward,
        comm_backward,
        io_accesses: io_accesses(m, c, method)?,
        runtime_total,
        formulas: formulas(method, lao),
    })
}

/// Every method row at one point.
pub fn cost_report(m: &ModelSpec, c: &ClusterSpec, t: &ComputeTimes) -> Result<CostReport> {
    let rows = METHOD_ROWS
        .iter()
        .map(|&(method, lao)| cost_row(m, c, t, method, lao))
        .collect::<Result<_>>()?;
    Ok(CostReport {
        model: m.clone(),
        cluster: *c,
        compute: *t,
        warnings: m.hidden_warning().into_iter().collect(),
        rows,
    })
}

pub const CSV_HEADER: [&str; 11] = [
    "method",
    "lao",
    "devices",
    "seq_len",
    "parameter_memory",
    "activation_memory",
    "comm_forward",
    "comm_backward",
    "io_accesses",
    "runtime_total",
    "formula_activation",
];

/// Writes rows as CSV with [`CSV_HEADER`].
pub fn write_csv(rows: &[CostRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.lao.to_string(),
            r.devices.to_string(),
            r.seq_len.to_string(),
            r.parameter_memory.to_string(),
            r.activation_memory.to_string(),
            r.comm_forward.to_string(),
            r.comm_backward.to_string(),
            r.io_accesses.to_string(),
            r.runtime_total.map(|t| t.to_string()).unwrap_or_default(),
            r.formulas.activation_memory.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
