//! Verification runs: simulate one configuration and compare against the
//! dense oracle.

use serde::Serialize;

use super::config::{ExecutorKind, Mode, Precision, RunConfig, Tolerances};
use crate::cost::{self, ClusterSpec, Method, ModelSpec};
use crate::error::Result;
use crate::gao::{gao_backward, gao_forward, Cluster, GaoOptions, PassReport, Qkv};
use crate::local::TileSpec;
use crate::reference::{backward_dense, forward_dense, AttnOutput, AttnProblem, Grads};
use crate::ring_reference::{ring_backward, ring_forward};
use crate::rng::{random_matrix, substream};
use crate::sim::engine::{ExecOptions, Executor, Overlap, StepRecord};
use crate::sim::ledger::CommLedger;
use crate::sim::schedule::{simulate, Faults, LinearDurations, ScheduleInput, ScheduleTrace};
use crate::tensor::{Matrix, Real};

pub const SCHEMA_VERSION: u32 = 1;

/// Inputs of a run: head `h` uses substream `h` of the seed for `Q, K, V`
/// and substream `h` of `seed ^ DO_STREAM` for `dO`.
pub struct Workload {
    pub heads: Vec<Qkv>,
    pub d_o: Vec<Matrix>,
}

const DO_STREAM: u64 = 0x5eed_0d0d_0d0d_0d0d;

impl Workload {
    pub fn generate(cfg: &RunConfig) -> Self {
        let n = cfg.head_count();
        Self {
            heads: (0..n as u64)
                .map(|h| Qkv::random(cfg.seq, cfg.dim, substream(cfg.seed, h)))
                .collect(),
            d_o: (0..n as u64)
                .map(|h| random_matrix(cfg.seq, cfg.dim, substream(cfg.seed ^ DO_STREAM, h)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MaxErrors {
    pub forward_o: f64,
    pub forward_lse: f64,
    pub dq: f64,
    pub dk: f64,
    pub dv: f64,
}

impl MaxErrors {
    pub fn forward(&self) -> f64 {
        self.forward_o.max(self.forward_lse)
    }
    pub fn backward(&self) -> f64 {
        self.dq.max(self.dk).max(self.dv)
    }
}

/// Closed-form traffic for the simulated method, for comparison with the ledger.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeledComm {
    pub method: Method,
    pub forward: u64,
    pub backward: u64,
    pub forward_formula: &'static str,
    pub backward_formula: &'static str,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PassTimes {
    pub forward: f64,
    pub backward: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Makespans {
    pub none: PassTimes,
    pub double_buffer: PassTimes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub tile: Option<TileSpec>,
    pub errors: MaxErrors,
    pub tolerances: Tolerances,
    pub ledger: serde_json::Value,
    pub modeled: Option<ModeledComm>,
    pub peak_activation_elements: Vec<u64>,
    pub peak_intermediate_elements: u64,
    /// Virtual time of each pass under both overlap policies; absent for
    /// the dense mode.
    pub makespan: Option<Makespans>,
    pub verdict: Verdict,
}

/// Results of a simulated mode, in double precision.
pub struct ModeOutcome {
    pub outputs: Vec<AttnOutput>,
    pub grads: Vec<Grads>,
    pub ledger: CommLedger,
    pub forward: Option<PassReport>,
    pub backward: Option<PassReport>,
}

pub fn exec_options(cfg: &RunConfig) -> ExecOptions {
    ExecOptions {
        executor: match cfg.executor {
            ExecutorKind::LockStep => Executor::LockStep,
            ExecutorKind::Threaded => Executor::Threaded { jitter: None },
        },
        overlap: cfg.overlap,
        start_offset: 0,
    }
}

pub fn gao_options<T: Real>(cfg: &RunConfig) -> Result<GaoOptions<T>> {
    Ok(GaoOptions {
        scale: None,
        tiles: cfg.tile_spec(),
        mask: cfg.mask.load().map_err(|e| crate::Error::InvalidArgument(e.0))?,
        exec: exec_options(cfg),
    })
}

fn simulate_mode<T: Real>(cfg: &RunConfig, work: &Workload) -> Result<ModeOutcome> {
    let opts = gao_options::<T>(cfg)?;
    let heads: Vec<Qkv<T>> = work.heads.iter().map(Qkv::cast).collect();
    let d_o: Vec<Matrix<T>> = work.d_o.iter().map(Matrix::cast).collect();
    if cfg.mode == Mode::Dense {
        let mut outputs = Vec::new();
        let mut grads = Vec::new();
        for (h, g) in heads.iter().zip(&d_o) {
            let p = AttnProblem::new(h.q.clone(), h.k.clone(), h.v.clone())?.with_mask(opts.mask.clone())?;
            let out = forward_dense(&p)?;
            let gr = backward_dense(&p, g)?;
            outputs.push(AttnOutput {
                o: out.o.cast(),
                lse: out.lse.cast(),
            });
            grads.push(Grads {
                dq: gr.dq.cast(),
                dk: gr.dk.cast(),
                dv: gr.dv.cast(),
            });
        }
        return Ok(ModeOutcome {
            outputs,
            grads,
            ledger: CommLedger::new(1),
            forward: None,
            backward: None,
        });
    }
    let mut cluster = Cluster::partition(&heads, cfg.gpus, cfg.pad)?;
    let (fwd, bwd) = match cfg.mode {
        Mode::RingReference => {
            let (f, state) = ring_forward(&mut cluster, &opts)?;
            let b = ring_backward(&mut cluster, state, &d_o, &opts)?;
            (f, b)
        }
        _ => {
            let f = gao_forward(&mut cluster, &opts)?;
            let b = gao_backward(&mut cluster, &d_o, &opts)?;
            (f, b)
        }
    };
    let outputs = cluster
        .outputs()?
        .into_iter()
        .map(|o| AttnOutput {
            o: o.o.cast(),
            lse: o.lse.cast(),
        })
        .collect();
    let grads = cluster
        .grads()?
        .into_iter()
        .map(|g| Grads {
            dq: g.dq.cast(),
            dk: g.dk.cast(),
            dv: g.dv.cast(),
        })
        .collect();
    Ok(ModeOutcome {
        outputs,
        grads,
        ledger: cluster.ledger,
        forward: Some(fwd),
        backward: Some(bwd),
    })
}

pub fn simulate_config(cfg: &RunConfig, work: &Workload) -> Result<ModeOutcome> {
    match cfg.precision {
        Precision::Double => simulate_mode::<f64>(cfg, work),
        Precision::Single => simulate_mode::<f32>(cfg, work),
    }
}

pub fn oracle(cfg: &RunConfig, work: &Workload) -> Result<(Vec<AttnOutput>, Vec<Grads>)> {
    let mask = cfg.mask.load().map_err(|e| crate::Error::InvalidArgument(e.0))?;
    let mut outs = Vec::new();
    let mut grads = Vec::new();
    for (h, g) in work.heads.iter().zip(&work.d_o) {
        let p = AttnProblem::new(h.q.clone(), h.k.clone(), h.v.clone())?.with_mask(mask.clone())?;
        outs.push(forward_dense(&p)?);
        grads.push(backward_dense(&p, g)?);
    }
    Ok((outs, grads))
}

pub fn compare(got: &ModeOutcome, want: &(Vec<AttnOutput>, Vec<Grads>)) -> MaxErrors {
    let mut e = MaxErrors::default();
    for (a, b) in got.outputs.iter().zip(&want.0) {
        e.forward_o = e.forward_o.max(a.o.max_abs_diff(&b.o));
        e.forward_lse = e.forward_lse.max(a.lse.max_abs_diff(&b.lse));
    }
    for (a, b) in got.grads.iter().zip(&want.1) {
        e.dq = e.dq.max(a.dq.max_abs_diff(&b.dq));
        e.dk = e.dk.max(a.dk.max_abs_diff(&b.dk));
        e.dv = e.dv.max(a.dv.max_abs_diff(&b.dv));
    }
    e
}

pub fn model_spec(cfg: &RunConfig) -> ModelSpec {
    ModelSpec {
        batch: cfg.batch as u64,
        seq_len: (cfg.part_len() * cfg.devices()) as u64,
        heads: cfg.heads as u64,
        head_dim: cfg.dim as u64,
        bits_per_element: 8 * cfg.bytes_per_element() as u64,
        sram_bytes: cfg.sram_bytes as u64,
        ..ModelSpec::default()
    }
}

fn modeled(cfg: &RunConfig) -> Result<Option<ModeledComm>> {
    let method = match cfg.mode {
        Mode::Burst | Mode::BurstNoLao => Method::BurstAttention,
        Mode::RingReference => Method::RingAttention,
        Mode::Dense => return Ok(None),
    };
    let c = ClusterSpec {
        devices: cfg.gpus as u64,
        bandwidth: cfg.bandwidth,
    };
    let (forward, backward) = cost::communication_overheads(&model_spec(cfg), &c, method)?;
    let f = cost::formulas(method, false);
    Ok(Some(ModeledComm {
        method,
        forward,
        backward,
        forward_formula: f.comm_forward,
        backward_formula: f.comm_backward,
    }))
}

/// Replays a pass on the virtual timeline. Passes made of several full
/// circles (the ring reference) are replayed circle by circle.
pub fn pass_traces(log: &[StepRecord], devices: usize, cfg: &RunConfig, overlap: Overlap) -> Result<Vec<ScheduleTrace>> {
    let durations = LinearDurations {
        bandwidth: cfg.bandwidth,
        compute_rate: cfg.compute_rate,
        bytes_per_element: cfg.bytes_per_element() as u64,
    };
    let circles = log.iter().map(|r| r.round / devices + 1).max().unwrap_or(0);
    (0..circles)
        .map(|c| {
            let part: Vec<StepRecord> = log
                .iter()
                .filter(|r| r.round / devices == c)
                .map(|r| StepRecord {
                    round: r.round % devices,
                    ..r.clone()
                })
                .collect();
            let input = ScheduleInput::from_log(&part, devices, &durations);
            simulate(&input, overlap, &Faults::default())
        })
        .collect()
}

fn pass_time(report: &PassReport, devices: usize, cfg: &RunConfig, overlap: Overlap) -> Result<f64> {
    Ok(pass_traces(&report.log, devices, cfg, overlap)?
        .iter()
        .map(ScheduleTrace::makespan)
        .sum())
}

/// Runs the full verification of one configuration.
pub fn verify(cfg: &RunConfig) -> Result<RunReport> {
    let work = Workload::generate(cfg);
    let want = oracle(cfg, &work)?;
    let got = simulate_config(cfg, &work)?;
    let errors = compare(&got, &want);
    let tol = cfg.tolerances();
    let makespan = match (&got.forward, &got.backward) {
        (Some(f), Some(b)) => {
            let g = cfg.gpus;
            let times = |o| -> Result<PassTimes> {
                Ok(PassTimes {
                    forward: pass_time(f, g, cfg, o)?,
                    backward: pass_time(b, g, cfg, o)?,
                })
            };
            Some(Makespans {
                none: times(Overlap::None)?,
                double_buffer: times(Overlap::DoubleBuffer)?,
            })
        }
        _ => None,
    };
    let pass = errors.forward() <= tol.forward && errors.backward() <= tol.backward;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        tile: cfg.tile_spec(),
        errors,
        tolerances: tol,
        ledger: got.ledger.to_flat_json(),
        modeled: modeled(cfg)?,
        peak_activation_elements: got.ledger.peak_activation_elements(),
        peak_intermediate_elements: got.ledger.peak_intermediate_elements(),
        makespan,
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::MaskSpec;

    #[test]
    fn dense_mode_is_exact() {
        let cfg = RunConfig {
            mode: Mode::Dense,
            ..RunConfig::default()
        };
        let r = verify(&cfg).unwrap();
        assert_eq!(r.errors, MaxErrors::default());
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r.makespan.is_none());
    }

    #[test]
    fn burst_modes_pass() {
        for mode in [Mode::Burst, Mode::BurstNoLao, Mode::RingReference] {
            for mask in [MaskSpec::None, MaskSpec::Causal] {
                let cfg = RunConfig {
                    mode,
                    mask,
                    seq: 16,
                    dim: 4,
                    gpus: 4,
                    seed: 7,
                    ..RunConfig::default()
                };
                let r = verify(&cfg).unwrap();
                assert_eq!(r.verdict, Verdict::Pass, "{mode:?}: {:?}", r.errors);
                let m = r.makespan.unwrap();
                assert!(m.double_buffer.forward <= m.none.forward);
                let modeled = r.modeled.unwrap();
                assert_eq!(r.ledger["elements_sent_forward"], modeled.forward);
                if mode != Mode::RingReference {
                    assert_eq!(r.ledger["elements_sent_backward"], modeled.backward);
                }
            }
        }
    }

    #[test]
    fn single_precision_passes_loose_tolerances() {
        let cfg = RunConfig {
            precision: Precision::Single,
            ..RunConfig::default()
        };
        let r = verify(&cfg).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{:?}", r.errors);
        assert!(r.errors.forward() > 0.0);
    }

    #[test]
    fn tight_tolerance_fails() {
        let cfg = RunConfig {
            tolerances: Some(Tolerances {
                forward: 1e-30,
                backward: 1e-30,
            }),
            seq: 32,
            ..RunConfig::default()
        };
        assert_eq!(verify(&cfg).unwrap().verdict, Verdict::Fail);
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = RunConfig {
            executor: ExecutorKind::Threaded,
            ..RunConfig::default()
        };
        let a = serde_json::to_string(&verify(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&verify(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
