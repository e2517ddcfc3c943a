//! C ABI for the ring attention simulator.
//!
//! Every function returns a [`BurstStatus`]; on failure a message is kept
//! per thread and read with [`burst_last_error_message`]. Tensors are
//! row-major `double` arrays laid out as `[heads][seq_len][head_dim]`, and
//! row statistics as `[heads][seq_len]`. Every buffer comes with its length
//! in elements, checked before use.
//!
//! Panics never cross the boundary: they surface as `BURST_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use burst_core::cost::{self, ClusterSpec, Method, ModelSpec};
use burst_core::gao::{gao_backward, gao_forward, Cluster, GaoOptions, Qkv};
use burst_core::local::{BlockMask, TileSpec};
use burst_core::reference::{forward_dense, AttnProblem};
use burst_core::sim::engine::{ExecOptions, Executor, Overlap};
use burst_core::tensor::Matrix;
use burst_core::Error;

/// Outcome of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BurstStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Sequence cannot be split across the devices.
    Partition = 3,
    /// A query row has no visible key under the mask.
    FullyMaskedRow = 4,
    /// Backward requested before forward.
    ForwardNotRun = 5,
    /// The simulated ring failed (deadlock or desynchronization).
    Runtime = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BurstOverlap {
    None = 0,
    DoubleBuffer = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BurstMethod {
    RingAttention = 0,
    TensorParallel = 1,
    BurstAttention = 2,
}

/// Shape and options of a simulated run.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BurstConfig {
    pub seq_len: usize,
    pub head_dim: usize,
    /// Independent attention heads (batch times heads).
    pub heads: usize,
    pub devices: usize,
    /// Square tile length of the local kernels; 0 runs them untiled.
    pub tile: usize,
    pub causal: bool,
    /// Pad a sequence that does not split evenly across `devices`.
    pub pad: bool,
    /// Run devices on threads instead of in lock step.
    pub threaded: bool,
    pub overlap: BurstOverlap,
}

/// Per-device traffic of the passes run so far, in elements.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BurstCommCounts {
    pub elements_sent_forward: u64,
    pub elements_sent_backward: u64,
    pub ring_steps: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
}

/// Analytical model parameters. `hidden` and `heads_per_device` take their
/// defaults (`heads * head_dim` and `heads / devices`) when 0.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BurstModelSpec {
    pub batch: u64,
    pub seq_len: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub hidden: u64,
    pub heads_per_device: f64,
    pub ffn_dim: u64,
    pub bits_per_element: u64,
    pub sram_bytes: u64,
}

/// Opaque simulation state: a partitioned cluster plus its options.
pub struct BurstEngine {
    cluster: Cluster<f64>,
    opts: GaoOptions<f64>,
    seq_len: usize,
    head_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(BurstStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Partition { .. } => BurstStatus::Partition,
            Error::FullyMaskedRow { .. } => BurstStatus::FullyMaskedRow,
            Error::ForwardNotRun { .. } => BurstStatus::ForwardNotRun,
            Error::Deadlock { .. } | Error::RingDesync { .. } => BurstStatus::Runtime,
            _ => BurstStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BurstStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BurstStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BurstStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            BurstStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(BurstStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must point to `len` readable doubles.
unsafe fn input<'a>(p: *const f64, len: usize, want: usize, name: &str) -> Result<&'a [f64], Failure> {
    non_null(p, name)?;
    if len != want {
        return Err(invalid(format!("{name} has {len} elements, expected {want}")));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must point to `len` writable doubles.
unsafe fn output<'a>(p: *mut f64, len: usize, want: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    non_null(p, name)?;
    if len != want {
        return Err(invalid(format!("{name} has {len} elements, expected {want}")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

impl BurstConfig {
    fn tensor_len(&self) -> usize {
        self.heads * self.seq_len * self.head_dim
    }

    fn check(&self) -> Result<(), Failure> {
        if self.seq_len == 0 || self.head_dim == 0 || self.heads == 0 {
            return Err(invalid("seq_len, head_dim and heads must be positive"));
        }
        self.heads
            .checked_mul(self.seq_len)
            .and_then(|x| x.checked_mul(self.head_dim))
            .ok_or_else(|| invalid("tensor size overflows"))?;
        Ok(())
    }

    fn mask(&self) -> Option<BlockMask> {
        self.causal.then(BlockMask::causal)
    }

    fn options(&self) -> Result<GaoOptions<f64>, Failure> {
        Ok(GaoOptions {
            scale: None,
            tiles: match self.tile {
                0 => None,
                t => Some(TileSpec::square(t)?),
            },
            mask: self.mask(),
            exec: ExecOptions {
                executor: if self.threaded {
                    Executor::Threaded { jitter: None }
                } else {
                    Executor::LockStep
                },
                overlap: match self.overlap {
                    BurstOverlap::None => Overlap::None,
                    BurstOverlap::DoubleBuffer => Overlap::DoubleBuffer,
                },
                start_offset: 0,
            },
        })
    }

    fn split(&self, data: &[f64]) -> Result<Vec<Matrix>, Failure> {
        let step = self.seq_len * self.head_dim;
        data.chunks(step)
            .map(|c| Matrix::from_vec(self.seq_len, self.head_dim, c.to_vec()).map_err(Failure::from))
            .collect()
    }

    fn heads(&self, q: &[f64], k: &[f64], v: &[f64]) -> Result<Vec<Qkv>, Failure> {
        let (q, k, v) = (self.split(q)?, self.split(k)?, self.split(v)?);
        q.into_iter()
            .zip(k)
            .zip(v)
            .map(|((q, k), v)| Qkv::new(q, k, v).map_err(Failure::from))
            .collect()
    }
}

impl From<burst_core::tensor::TensorError> for Failure {
    fn from(e: burst_core::tensor::TensorError) -> Self {
        Error::from(e).into()
    }
}

fn scatter<'m>(mats: impl Iterator<Item = &'m [f64]>, out: &mut [f64]) {
    let mut at = 0;
    for m in mats {
        out[at..at + m.len()].copy_from_slice(m);
        at += m.len();
    }
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn burst_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn burst_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Partitions `q`, `k`, `v` (each `heads * seq_len * head_dim` long) across
/// the configured devices and returns a new engine in `*out`. Free it with
/// [`burst_engine_free`].
///
/// # Safety
/// Pointers must be valid for the given lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn burst_engine_new(
    config: *const BurstConfig,
    q: *const f64,
    k: *const f64,
    v: *const f64,
    len: usize,
    out: *mut *mut BurstEngine,
) -> BurstStatus {
    guard(|| {
        non_null(config, "config")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let cfg = *config;
        cfg.check()?;
        let want = cfg.tensor_len();
        let heads = cfg.heads(
            input(q, len, want, "q")?,
            input(k, len, want, "k")?,
            input(v, len, want, "v")?,
        )?;
        if let Some(mask) = cfg.mask() {
            mask.validate(cfg.seq_len)?;
        }
        let engine = BurstEngine {
            cluster: Cluster::partition(&heads, cfg.devices, cfg.pad)?,
            opts: cfg.options()?,
            seq_len: cfg.seq_len,
            head_dim: cfg.head_dim,
        };
        *out = Box::into_raw(Box::new(engine));
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must come from [`burst_engine_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn burst_engine_free(engine: *mut BurstEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Runs the forward ring pass and writes `O` (`heads * seq_len * head_dim`)
/// and the row log-sum-exp (`heads * seq_len`).
///
/// # Safety
/// `engine` must be live; output pointers valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn burst_engine_forward(
    engine: *mut BurstEngine,
    o: *mut f64,
    o_len: usize,
    lse: *mut f64,
    lse_len: usize,
) -> BurstStatus {
    guard(|| {
        non_null(engine, "engine")?;
        let e = &mut *engine;
        let heads = e.cluster.heads;
        let o = output(o, o_len, heads * e.seq_len * e.head_dim, "o")?;
        let lse = output(lse, lse_len, heads * e.seq_len, "lse")?;
        gao_forward(&mut e.cluster, &e.opts)?;
        let outs = e.cluster.outputs()?;
        scatter(outs.iter().map(|x| x.o.as_slice()), o);
        scatter(outs.iter().map(|x| x.lse.as_slice()), lse);
        Ok(())
    })
}

/// Runs the backward ring pass for output gradient `d_o` and writes
/// `dQ`, `dK`, `dV`. All five buffers are `len` long.
///
/// # Safety
/// `engine` must be live; pointers valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn burst_engine_backward(
    engine: *mut BurstEngine,
    d_o: *const f64,
    dq: *mut f64,
    dk: *mut f64,
    dv: *mut f64,
    len: usize,
) -> BurstStatus {
    guard(|| {
        non_null(engine, "engine")?;
        let e = &mut *engine;
        let want = e.cluster.heads * e.seq_len * e.head_dim;
        let shape = BurstConfig {
            seq_len: e.seq_len,
            head_dim: e.head_dim,
            heads: e.cluster.heads,
            devices: 0,
            tile: 0,
            causal: false,
            pad: false,
            threaded: false,
            overlap: BurstOverlap::None,
        };
        let d_o = shape.split(input(d_o, len, want, "d_o")?)?;
        let (dq, dk, dv) = (output(dq, len, want, "dq")?, output(dk, len, want, "dk")?, output(dv, len, want, "dv")?);
        gao_backward(&mut e.cluster, &d_o, &e.opts)?;
        let g = e.cluster.grads()?;
        scatter(g.iter().map(|x| x.dq.as_slice()), dq);
        scatter(g.iter().map(|x| x.dk.as_slice()), dk);
        scatter(g.iter().map(|x| x.dv.as_slice()), dv);
        Ok(())
    })
}

/// Copies the traffic counters of the passes run so far.
///
/// # Safety
/// `engine` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn burst_engine_comm(engine: *const BurstEngine, out: *mut BurstCommCounts) -> BurstStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(out, "out")?;
        let l = &(*engine).cluster.ledger;
        *out = BurstCommCounts {
            elements_sent_forward: l.elements_sent_forward,
            elements_sent_backward: l.elements_sent_backward,
            ring_steps: l.ring_steps,
            messages_sent: l.messages_sent,
            messages_received: l.messages_received,
        };
        Ok(())
    })
}

/// Dense single-device reference forward; same layout as
/// [`burst_engine_forward`]. Only `seq_len`, `head_dim`, `heads` and
/// `causal` of the config are used.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn burst_dense_forward(
    config: *const BurstConfig,
    q: *const f64,
    k: *const f64,
    v: *const f64,
    len: usize,
    o: *mut f64,
    lse: *mut f64,
    lse_len: usize,
) -> BurstStatus {
    guard(|| {
        non_null(config, "config")?;
        let cfg = *config;
        cfg.check()?;
        let want = cfg.tensor_len();
        let heads = cfg.heads(input(q, len, want, "q")?, input(k, len, want, "k")?, input(v, len, want, "v")?)?;
        let o = output(o, len, want, "o")?;
        let lse = output(lse, lse_len, cfg.heads * cfg.seq_len, "lse")?;
        let mut outs = Vec::with_capacity(heads.len());
        for h in heads {
            let p = AttnProblem::new(h.q, h.k, h.v)?.with_mask(cfg.mask())?;
            outs.push(forward_dense(&p)?);
        }
        scatter(outs.iter().map(|x| x.o.as_slice()), o);
        scatter(outs.iter().map(|x| x.lse.as_slice()), lse);
        Ok(())
    })
}

fn model(spec: &BurstModelSpec) -> ModelSpec {
    ModelSpec {
        batch: spec.batch,
        seq_len: spec.seq_len,
        heads: spec.heads,
        heads_per_device: (spec.heads_per_device != 0.0).then_some(spec.heads_per_device),
        head_dim: spec.head_dim,
        hidden: (spec.hidden != 0).then_some(spec.hidden),
        ffn_dim: spec.ffn_dim,
        bits_per_element: spec.bits_per_element,
        sram_bytes: spec.sram_bytes,
    }
}

/// Modeled per-device forward and backward traffic of `method`, in elements.
///
/// # Safety
/// `spec`, `forward` and `backward` must be valid.
#[no_mangle]
pub unsafe extern "C" fn burst_cost_communication(
    spec: *const BurstModelSpec,
    devices: u64,
    method: BurstMethod,
    forward: *mut u64,
    backward: *mut u64,
) -> BurstStatus {
    guard(|| {
        non_null(spec, "spec")?;
        non_null(forward, "forward")?;
        non_null(backward, "backward")?;
        let method = match method {
            BurstMethod::RingAttention => Method::RingAttention,
            BurstMethod::TensorParallel => Method::TensorParallel,
            BurstMethod::BurstAttention => Method::BurstAttention,
        };
        let c = ClusterSpec { devices, bandwidth: 1.0 };
        let (f, b) = cost::communication_overheads(&model(&*spec), &c, method)?;
        *forward = f;
        *backward = b;
        Ok(())
    })
}

/// Total modeled runtime of one layer: tensor parallelism when
/// `method` is `TENSOR_PARALLEL`, the overlapped ring otherwise.
/// `t_attn_b` is added to `t_attn_f` for tensor parallelism.
///
/// # Safety
/// `spec` and `total` must be valid.
#[no_mangle]
pub unsafe extern "C" fn burst_cost_runtime(
    spec: *const BurstModelSpec,
    devices: u64,
    bandwidth: f64,
    method: BurstMethod,
    t_attn_f: f64,
    t_attn_b: f64,
    t_ffn: f64,
    total: *mut f64,
) -> BurstStatus {
    guard(|| {
        non_null(spec, "spec")?;
        non_null(total, "total")?;
        let m = model(&*spec);
        let c = ClusterSpec { devices, bandwidth };
        *total = match method {
            BurstMethod::TensorParallel => cost::runtime_tp(&m, &c, t_attn_f + t_attn_b, t_ffn)?.total,
            BurstMethod::BurstAttention => cost::runtime_burst(&m, &c, t_attn_f, t_attn_b, t_ffn)?.total,
            BurstMethod::RingAttention => return Err(invalid("no runtime model for ring attention")),
        };
        Ok(())
    })
}
