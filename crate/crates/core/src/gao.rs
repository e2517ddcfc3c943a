//! Distributed attention over a ring of simulated devices.
//!
//! The sequence is split into `G` contiguous row blocks. In the forward pass
//! every device keeps its queries and circulates its keys and values; each
//! hop produces an unnormalized partial that is folded into the device's
//! running `(O, m, l)`. In the backward pass keys and values stay put while
//! `(Q, dO, lse, D)` travel together with the `dQ` accumulator, which comes
//! home after a full circle. `dK` and `dV` accumulate on the host device.
//!
//! Several heads (`B × Z` of them) share one ring: a payload carries the
//! blocks of every head.

use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::{backward_block, forward_block, BackwardOperands, BlockMask, MaskWindow, PartialAttn, TileSpec};
use crate::reference::{AttnOutput, Grads};
use crate::sim::engine::{run_pass, ExecOptions, Hop, RingProgram, StepRecord, StepWork};
use crate::sim::ledger::{CommLedger, Pass};
use crate::sim::schedule::{simulate, DurationModel, Faults, ScheduleInput, ScheduleTrace};
use crate::tensor::{Matrix, Real, Vector};

/// Query, key and value of one head, all `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv<T: Real = f64> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Real> Qkv<T> {
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "Q {:?}, K {:?}, V {:?} must share one shape",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if q.rows() == 0 || q.cols() == 0 {
            return Err(Error::Shape("empty attention input".into()));
        }
        Ok(Self { q, k, v })
    }

    pub fn cast<U: Real>(&self) -> Qkv<U> {
        Qkv {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
        }
    }
}

impl Qkv {
    /// Uniform `[-1, 1)` inputs from three substreams of `seed`.
    pub fn random(n: usize, d: usize, seed: u64) -> Self {
        use crate::rng::{random_matrix, substream};
        Self {
            q: random_matrix(n, d, substream(seed, 0)),
            k: random_matrix(n, d, substream(seed, 1)),
            v: random_matrix(n, d, substream(seed, 2)),
        }
    }
}

/// Rows per device for `seq_len` tokens on `devices` devices. With `pad`,
/// a non-divisible length is rounded up and the tail is padding.
pub fn partition_len(seq_len: usize, devices: usize, pad: bool) -> Result<usize> {
    if devices == 0 {
        return Err(Error::Partition {
            seq_len,
            devices,
            hint: "; at least one device is required",
        });
    }
    if devices > seq_len {
        return Err(Error::Partition {
            seq_len,
            devices,
            hint: "; every device needs at least one token",
        });
    }
    if !seq_len.is_multiple_of(devices) && !pad {
        return Err(Error::Partition {
            seq_len,
            devices,
            hint: " evenly; enable padding or pick a divisor",
        });
    }
    Ok(seq_len.div_ceil(devices))
}

/// One head's slice of the sequence on one device.
#[derive(Debug, Clone)]
pub struct HeadShard<T: Real = f64> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Running forward statistics, reset at the start of every forward pass.
    pub acc: Option<PartialAttn<T>>,
    pub o: Option<Matrix<T>>,
    pub lse: Option<Vector<T>>,
    pub d_o: Option<Matrix<T>>,
    /// `rowsum(dO ∘ O)`.
    pub delta: Option<Vector<T>>,
    pub dq: Option<Matrix<T>>,
    pub dk: Option<Matrix<T>>,
    pub dv: Option<Matrix<T>>,
}

impl<T: Real> HeadShard<T> {
    fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>) -> Self {
        Self {
            q,
            k,
            v,
            acc: None,
            o: None,
            lse: None,
            d_o: None,
            delta: None,
            dq: None,
            dk: None,
            dv: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeviceState<T: Real = f64> {
    pub device_id: usize,
    /// Global index of the first local row.
    pub row_offset: usize,
    /// Local rows that are real tokens; the rest is padding.
    pub real_rows: usize,
    pub shards: Vec<HeadShard<T>>,
}

impl<T: Real> DeviceState<T> {
    /// Elements resident for the whole pass: `Q, K, V, O` of every head.
    pub fn resident_elements(&self) -> u64 {
        self.shards.iter().map(|s| 4 * s.q.len() as u64).sum()
    }
}

/// A partitioned workload.
#[derive(Debug, Clone)]
pub struct Cluster<T: Real = f64> {
    pub devices: Vec<DeviceState<T>>,
    pub seq_len: usize,
    pub padded_len: usize,
    pub part_len: usize,
    pub head_dim: usize,
    pub heads: usize,
    /// Counters accumulated over every pass since the last reset.
    pub ledger: CommLedger,
}

fn pad_rows<T: Real>(m: &Matrix<T>, rows: usize) -> Result<Matrix<T>> {
    if m.rows() == rows {
        return Ok(m.clone());
    }
    let mut out = Matrix::zeros(rows, m.cols());
    out.write_rows(0, m)?;
    Ok(out)
}

impl<T: Real> Cluster<T> {
    /// Splits every head into `devices` contiguous row blocks.
    pub fn partition(heads: &[Qkv<T>], devices: usize, pad: bool) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::InvalidArgument("at least one head is required".into()))?;
        let (seq_len, head_dim) = first.q.shape();
        for h in heads {
            if h.q.shape() != (seq_len, head_dim) || h.k.shape() != (seq_len, head_dim) || h.v.shape() != (seq_len, head_dim)
            {
                return Err(Error::Shape(format!(
                    "every head must be {seq_len} x {head_dim}, got Q {:?}, K {:?}, V {:?}",
                    h.q.shape(),
                    h.k.shape(),
                    h.v.shape()
                )));
            }
        }
        let part_len = partition_len(seq_len, devices, pad)?;
        let padded_len = part_len * devices;
        let padded: Vec<[Matrix<T>; 3]> = heads
            .iter()
            .map(|h| Ok([pad_rows(&h.q, padded_len)?, pad_rows(&h.k, padded_len)?, pad_rows(&h.v, padded_len)?]))
            .collect::<Result<_>>()?;
        let devices = (0..devices)
            .map(|i| {
                let row_offset = i * part_len;
                let shards = padded
                    .iter()
                    .map(|[q, k, v]| {
                        Ok(HeadShard::new(
                            q.row_block(row_offset, part_len)?,
                            k.row_block(row_offset, part_len)?,
                            v.row_block(row_offset, part_len)?,
                        ))
                    })
                    .collect::<Result<_>>()?;
                Ok(DeviceState {
                    device_id: i,
                    row_offset,
                    real_rows: seq_len.saturating_sub(row_offset).min(part_len),
                    shards,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ledger: CommLedger::new(devices.len()),
            devices,
            seq_len,
            padded_len,
            part_len,
            head_dim,
            heads: heads.len(),
        })
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    /// Concatenates a per-shard matrix over devices, dropping padding rows.
    pub fn gather(&self, head: usize, pick: impl Fn(&HeadShard<T>) -> Option<&Matrix<T>>) -> Result<Matrix<T>> {
        let parts = self
            .devices
            .iter()
            .map(|d| pick(&d.shards[head]).cloned().ok_or(Error::ForwardNotRun { device: d.device_id }))
            .collect::<Result<Vec<_>>>()?;
        Matrix::vstack(&parts)?.row_block(0, self.seq_len).map_err(Into::into)
    }

    fn gather_vec(&self, head: usize, pick: impl Fn(&HeadShard<T>) -> Option<&Vector<T>>) -> Result<Vector<T>> {
        let parts = self
            .devices
            .iter()
            .map(|d| pick(&d.shards[head]).cloned().ok_or(Error::ForwardNotRun { device: d.device_id }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Vector::concat(&parts).slice(0, self.seq_len))
    }

    /// Forward results per head, padding removed.
    pub fn outputs(&self) -> Result<Vec<AttnOutput<T>>> {
        (0..self.heads)
            .map(|h| {
                Ok(AttnOutput {
                    o: self.gather(h, |s| s.o.as_ref())?,
                    lse: self.gather_vec(h, |s| s.lse.as_ref())?,
                })
            })
            .collect()
    }

    /// Backward results per head, padding removed.
    pub fn grads(&self) -> Result<Vec<Grads<T>>> {
        (0..self.heads)
            .map(|h| {
                Ok(Grads {
                    dq: self.gather(h, |s| s.dq.as_ref())?,
                    dk: self.gather(h, |s| s.dk.as_ref())?,
                    dv: self.gather(h, |s| s.dv.as_ref())?,
                })
            })
            .collect()
    }

    pub fn reset_ledger(&mut self) {
        self.ledger.reset();
    }
}

/// Numerical settings of a ring pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GaoOptions<T: Real = f64> {
    /// Score scale; `None` means `1/√d`.
    pub scale: Option<T>,
    /// Tile geometry of the local kernels; `None` runs them untiled.
    pub tiles: Option<TileSpec>,
    pub mask: Option<BlockMask>,
    pub exec: ExecOptions,
}

impl<T: Real> Default for GaoOptions<T> {
    fn default() -> Self {
        Self {
            scale: None,
            tiles: None,
            mask: None,
            exec: ExecOptions::default(),
        }
    }
}

impl<T: Real> GaoOptions<T> {
    fn scale_for(&self, head_dim: usize) -> T {
        self.scale
            .unwrap_or_else(|| T::one() / T::from_f64(head_dim as f64).sqrt())
    }
}

/// What one pass did.
#[derive(Debug, Clone)]
pub struct PassReport {
    pub pass: Pass,
    pub log: Vec<StepRecord>,
    /// Counters of this pass alone.
    pub ledger: CommLedger,
}

#[derive(Debug)]
pub struct ForwardPayload<T: Real = f64> {
    pub origin: usize,
    /// Per head.
    pub k: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

/// The read-only part of the backward payload; `dQ` travels separately as
/// the accumulator.
#[derive(Debug)]
pub struct BackwardPayload<T: Real = f64> {
    pub origin: usize,
    pub q: Vec<Matrix<T>>,
    pub d_o: Vec<Matrix<T>>,
    pub lse: Vec<Vector<T>>,
    pub delta: Vec<Vector<T>>,
}

struct Geometry<'a, T: Real> {
    scale: T,
    tiles: Option<&'a TileSpec>,
    mask: Option<&'a BlockMask>,
    part_len: usize,
    seq_len: usize,
}

struct ForwardProgram<'a, 'd, T: Real>(Geometry<'a, T>, PhantomData<&'d mut ()>);

impl<'d, T: Real> RingProgram for ForwardProgram<'_, 'd, T> {
    type Device = &'d mut DeviceState<T>;
    type Shared = ForwardPayload<T>;
    type Carry = ();

    fn shared_elements(&self, p: &ForwardPayload<T>) -> u64 {
        p.k.iter().chain(&p.v).map(|m| m.len() as u64).sum()
    }

    fn carry_elements(&self, _: &()) -> u64 {
        0
    }

    fn step(&self, device: &mut Self::Device, p: &ForwardPayload<T>, _: &mut (), hop: Hop) -> Result<StepWork> {
        let g = &self.0;
        let window = MaskWindow::new(g.mask, device.row_offset, p.origin * g.part_len, g.seq_len);
        let mut work = StepWork {
            skipped: true,
            ..StepWork::default()
        };
        for (h, shard) in device.shards.iter_mut().enumerate() {
            let Some((part, stats)) = forward_block(&shard.q, &p.k[h], &p.v[h], g.scale, g.tiles, &window, None)? else {
                continue;
            };
            work.skipped = false;
            work.stats.absorb(&stats);
            let acc = shard.acc.as_mut().ok_or(Error::RingDesync {
                device: hop.device,
                detail: "forward accumulator missing".into(),
            })?;
            acc.merge(&part)?;
        }
        Ok(work)
    }
}

struct BackwardProgram<'a, 'd, T: Real>(Geometry<'a, T>, PhantomData<&'d mut ()>);

impl<'d, T: Real> RingProgram for BackwardProgram<'_, 'd, T> {
    type Device = &'d mut DeviceState<T>;
    type Shared = BackwardPayload<T>;
    type Carry = Vec<Matrix<T>>;

    fn shared_elements(&self, p: &BackwardPayload<T>) -> u64 {
        let mats: u64 = p.q.iter().chain(&p.d_o).map(|m| m.len() as u64).sum();
        let vecs: u64 = p.lse.iter().chain(&p.delta).map(|v| v.len() as u64).sum();
        mats + vecs
    }

    fn carry_elements(&self, dq: &Vec<Matrix<T>>) -> u64 {
        dq.iter().map(|m| m.len() as u64).sum()
    }

    fn step(&self, device: &mut Self::Device, p: &BackwardPayload<T>, dq: &mut Vec<Matrix<T>>, _: Hop) -> Result<StepWork> {
        let g = &self.0;
        let window = MaskWindow::new(g.mask, p.origin * g.part_len, device.row_offset, g.seq_len);
        let mut work = StepWork {
            skipped: true,
            ..StepWork::default()
        };
        for (h, shard) in device.shards.iter_mut().enumerate() {
            let ops = BackwardOperands {
                q: &p.q[h],
                k: &shard.k,
                v: &shard.v,
                d_o: &p.d_o[h],
                lse: &p.lse[h],
                delta: &p.delta[h],
            };
            let Some((grads, stats)) = backward_block(&ops, g.scale, g.tiles, &window)? else {
                continue;
            };
            work.skipped = false;
            work.stats.absorb(&stats);
            dq[h].add_assign(&grads.dq)?;
            shard
                .dk
                .get_or_insert_with(|| Matrix::zeros(shard.k.rows(), shard.k.cols()))
                .add_assign(&grads.dk)?;
            shard
                .dv
                .get_or_insert_with(|| Matrix::zeros(shard.v.rows(), shard.v.cols()))
                .add_assign(&grads.dv)?;
        }
        Ok(work)
    }
}

fn validate<T: Real>(cluster: &Cluster<T>, opts: &GaoOptions<T>) -> Result<()> {
    if let Some(t) = &opts.tiles {
        t.validate()?;
    }
    if let Some(m) = &opts.mask {
        m.validate(cluster.seq_len)?;
    }
    let s = opts.scale_for(cluster.head_dim);
    if !(s.is_finite() && s > T::zero()) {
        return Err(Error::InvalidArgument(format!("scale must be positive and finite, got {s}")));
    }
    Ok(())
}

fn geometry<'a, T: Real>(cluster: &Cluster<T>, opts: &'a GaoOptions<T>) -> Geometry<'a, T> {
    Geometry {
        scale: opts.scale_for(cluster.head_dim),
        tiles: opts.tiles.as_ref(),
        mask: opts.mask.as_ref(),
        part_len: cluster.part_len,
        seq_len: cluster.seq_len,
    }
}

fn record<T: Real>(cluster: &mut Cluster<T>, pass: Pass, log: Vec<StepRecord>, messages: (u64, u64)) -> PassReport {
    let resident: Vec<u64> = cluster.devices.iter().map(DeviceState::resident_elements).collect();
    let mut ledger = CommLedger::new(cluster.device_count());
    ledger.record_pass(pass, &log, &resident, messages);
    cluster.ledger.record_pass(pass, &log, &resident, messages);
    PassReport { pass, log, ledger }
}

/// Runs the forward pass; afterwards every shard holds `O` and `lse`.
pub fn gao_forward<T: Real>(cluster: &mut Cluster<T>, opts: &GaoOptions<T>) -> Result<PassReport> {
    validate(cluster, opts)?;
    let (part, d) = (cluster.part_len, cluster.head_dim);
    let mut payloads = Vec::with_capacity(cluster.device_count());
    for dev in &mut cluster.devices {
        for s in &mut dev.shards {
            s.acc = Some(PartialAttn::empty(part, d));
            s.o = None;
            s.lse = None;
        }
        payloads.push((
            ForwardPayload {
                origin: dev.device_id,
                k: dev.shards.iter().map(|s| s.k.clone()).collect(),
                v: dev.shards.iter().map(|s| s.v.clone()).collect(),
            },
            (),
        ));
    }
    let program = ForwardProgram(geometry(cluster, opts), PhantomData);
    let outcome = run_pass(&program, cluster.devices.iter_mut().collect(), payloads, &opts.exec)?;
    let (log, messages) = (outcome.log, (outcome.messages_sent, outcome.messages_received));
    drop(outcome.devices);
    for dev in &mut cluster.devices {
        for s in &mut dev.shards {
            let mut acc = s.acc.take().ok_or(Error::RingDesync {
                device: dev.device_id,
                detail: "forward accumulator missing".into(),
            })?;
            // Padding rows may see no key at all; give them a neutral softmax.
            for r in dev.real_rows..part {
                if !(acc.l[r] > T::zero()) {
                    acc.l[r] = T::one();
                    acc.m[r] = T::zero();
                }
            }
            let out = acc.finalize().map_err(|e| match e {
                Error::FullyMaskedRow { row } => Error::FullyMaskedRow { row: dev.row_offset + row },
                other => other,
            })?;
            s.o = Some(out.o);
            s.lse = Some(out.lse);
        }
    }
    Ok(record(cluster, Pass::Forward, log, messages))
}

/// Runs the backward pass for output gradients `d_o` (one `N × d` matrix per
/// head); afterwards every shard holds `dQ`, `dK` and `dV`.
pub fn gao_backward<T: Real>(cluster: &mut Cluster<T>, d_o: &[Matrix<T>], opts: &GaoOptions<T>) -> Result<PassReport> {
    validate(cluster, opts)?;
    if d_o.len() != cluster.heads {
        return Err(Error::Shape(format!("{} output gradients for {} heads", d_o.len(), cluster.heads)));
    }
    let (part, d) = (cluster.part_len, cluster.head_dim);
    let padded: Vec<Matrix<T>> = d_o
        .iter()
        .map(|g| {
            if g.shape() != (cluster.seq_len, d) {
                return Err(Error::Shape(format!(
                    "output gradient {:?} does not match {} x {d}",
                    g.shape(),
                    cluster.seq_len
                )));
            }
            pad_rows(g, cluster.padded_len)
        })
        .collect::<Result<_>>()?;
    let mut payloads = Vec::with_capacity(cluster.device_count());
    for dev in &mut cluster.devices {
        for (h, s) in dev.shards.iter_mut().enumerate() {
            let (Some(o), Some(_)) = (&s.o, &s.lse) else {
                return Err(Error::ForwardNotRun { device: dev.device_id });
            };
            let g = padded[h].row_block(dev.row_offset, part)?;
            let delta = g.hadamard(o)?.rowsum()?;
            s.d_o = Some(g);
            s.delta = Some(delta);
            s.dq = None;
            s.dk = Some(Matrix::zeros(part, d));
            s.dv = Some(Matrix::zeros(part, d));
        }
        let pick_m = |f: fn(&HeadShard<T>) -> &Option<Matrix<T>>| -> Vec<Matrix<T>> {
            dev.shards.iter().map(|s| f(s).clone().expect("set above")).collect()
        };
        let pick_v = |f: fn(&HeadShard<T>) -> &Option<Vector<T>>| -> Vec<Vector<T>> {
            dev.shards.iter().map(|s| f(s).clone().expect("set above")).collect()
        };
        let shared = BackwardPayload {
            origin: dev.device_id,
            q: dev.shards.iter().map(|s| s.q.clone()).collect(),
            d_o: pick_m(|s| &s.d_o),
            lse: pick_v(|s| &s.lse),
            delta: pick_v(|s| &s.delta),
        };
        let dq = (0..dev.shards.len()).map(|_| Matrix::zeros(part, d)).collect();
        payloads.push((shared, dq));
    }
    let program = BackwardProgram(geometry(cluster, opts), PhantomData);
    let outcome = run_pass(&program, cluster.devices.iter_mut().collect(), payloads, &opts.exec)?;
    let (log, messages) = (outcome.log, (outcome.messages_sent, outcome.messages_received));
    drop(outcome.devices);
    for (origin, (_, dq)) in outcome.payloads.into_iter().enumerate() {
        for (s, g) in cluster.devices[origin].shards.iter_mut().zip(dq) {
            s.dq = Some(g);
        }
    }
    Ok(record(cluster, Pass::Backward, log, messages))
}

/// Which pass [`run_ring_pass`] runs.
#[derive(Debug, Clone, Copy)]
pub enum PassInput<'a, T: Real = f64> {
    Forward,
    Backward { d_o: &'a [Matrix<T>] },
}

/// Runs a pass and replays it on the virtual timeline.
pub fn run_ring_pass<T: Real>(
    cluster: &mut Cluster<T>,
    input: PassInput<'_, T>,
    opts: &GaoOptions<T>,
    durations: &dyn DurationModel,
) -> Result<(PassReport, ScheduleTrace)> {
    let report = match input {
        PassInput::Forward => gao_forward(cluster, opts)?,
        PassInput::Backward { d_o } => gao_backward(cluster, d_o, opts)?,
    };
    let schedule = ScheduleInput::from_log(&report.log, cluster.device_count(), durations);
    let trace = simulate(&schedule, opts.exec.overlap, &Faults::default())?;
    Ok((report, trace))
}

/// Summary of a pass for reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub flops: u64,
    pub hops_skipped: u64,
    pub peak_intermediate_elements: u64,
}

impl PassReport {
    pub fn summary(&self) -> PassSummary {
        PassSummary {
            flops: self.ledger.per_device.iter().map(|d| d.flops).sum(),
            hops_skipped: self.ledger.per_device.iter().map(|d| d.hops_skipped).sum(),
            peak_intermediate_elements: self.ledger.peak_intermediate_elements(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{backward_dense, finite_difference_grad, forward_dense, AttnProblem};
    use crate::rng::random_matrix;
    use crate::sim::engine::{Executor, Jitter, Overlap};

    fn dense(h: &Qkv, mask: Option<&BlockMask>) -> AttnProblem {
        AttnProblem::new(h.q.clone(), h.k.clone(), h.v.clone())
            .unwrap()
            .with_mask(mask.cloned())
            .unwrap()
    }

    fn run_both(heads: &[Qkv], g: usize, opts: &GaoOptions, d_o: &[Matrix], pad: bool) -> Cluster {
        let mut c = Cluster::partition(heads, g, pad).unwrap();
        gao_forward(&mut c, opts).unwrap();
        gao_backward(&mut c, d_o, opts).unwrap();
        c
    }

    #[test]
    fn partition_round_trips() {
        let h = Qkv::random(8, 3, 1);
        let c = Cluster::partition(std::slice::from_ref(&h), 4, false).unwrap();
        for (i, d) in c.devices.iter().enumerate() {
            assert_eq!(d.row_offset, 2 * i);
            assert_eq!(d.shards[0].q, h.q.row_block(2 * i, 2).unwrap());
        }
        assert_eq!(c.gather(0, |s| Some(&s.q)).unwrap(), h.q);
        assert_eq!(c.gather(0, |s| Some(&s.v)).unwrap(), h.v);
        let single = Cluster::partition(std::slice::from_ref(&h), 1, false).unwrap();
        assert_eq!(single.devices[0].shards[0].k, h.k);
    }

    #[test]
    fn partition_errors() {
        let h = [Qkv::random(6, 2, 1)];
        assert!(matches!(Cluster::partition(&h, 4, false), Err(Error::Partition { .. })));
        assert!(matches!(Cluster::partition(&h, 7, true), Err(Error::Partition { .. })));
        assert!(matches!(Cluster::partition(&h, 0, true), Err(Error::Partition { .. })));
        let c = Cluster::partition(&h, 4, true).unwrap();
        assert_eq!((c.part_len, c.padded_len), (2, 8));
        assert_eq!(c.devices[3].real_rows, 0);
        assert_eq!(c.devices[2].real_rows, 2);
        assert!(Cluster::<f64>::partition(&[], 2, false).is_err());
    }

    #[test]
    fn small_ring_matches_dense() {
        let h = Qkv::random(4, 2, 7);
        let d_o = random_matrix(4, 2, 99);
        let c = run_both(std::slice::from_ref(&h), 2, &GaoOptions::default(), std::slice::from_ref(&d_o), false);
        let p = dense(&h, None);
        let want = forward_dense(&p).unwrap();
        let got = &c.outputs().unwrap()[0];
        assert!(got.o.max_abs_diff(&want.o) < 1e-10);
        assert!(got.lse.max_abs_diff(&want.lse) < 1e-10);
        let gw = backward_dense(&p, &d_o).unwrap();
        assert!(c.grads().unwrap()[0].max_abs_diff(&gw) < 1e-8);
    }

    #[test]
    fn four_devices_match_finite_differences() {
        let h = Qkv::random(8, 2, 3);
        let d_o = random_matrix(8, 2, 4);
        let c = run_both(std::slice::from_ref(&h), 4, &GaoOptions::default(), std::slice::from_ref(&d_o), false);
        let p = dense(&h, None);
        let got = &c.grads().unwrap()[0];
        assert!(got.max_abs_diff(&backward_dense(&p, &d_o).unwrap()) < 1e-8);
        let fd = finite_difference_grad(&p, &d_o, 1e-5).unwrap();
        assert!(got.max_abs_diff(&fd) < 1e-5);
    }

    #[test]
    fn single_device_is_the_dense_computation() {
        let h = Qkv::random(6, 3, 5);
        let d_o = random_matrix(6, 3, 6);
        let c = run_both(std::slice::from_ref(&h), 1, &GaoOptions::default(), std::slice::from_ref(&d_o), false);
        let p = dense(&h, None);
        let out = &c.outputs().unwrap()[0];
        let want = forward_dense(&p).unwrap();
        assert!(out.o.max_abs_diff(&want.o) < 1e-14);
        assert!(c.grads().unwrap()[0].max_abs_diff(&backward_dense(&p, &d_o).unwrap()) < 1e-12);
        assert_eq!(c.ledger.elements_sent_forward, 0);
        assert_eq!(c.ledger.ring_steps, 0);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let h = Qkv::random(8, 2, 8);
        let z = Matrix::zeros(8, 2);
        let c = run_both(std::slice::from_ref(&h), 4, &GaoOptions::default(), std::slice::from_ref(&z), false);
        let g = &c.grads().unwrap()[0];
        assert_eq!(g.dq.max_abs(), 0.0);
        assert_eq!(g.dk.max_abs(), 0.0);
        assert_eq!(g.dv.max_abs(), 0.0);
    }

    #[test]
    fn backward_needs_forward() {
        let h = [Qkv::random(4, 2, 1)];
        let mut c = Cluster::partition(&h, 2, false).unwrap();
        let err = gao_backward(&mut c, &[Matrix::zeros(4, 2)], &GaoOptions::default()).unwrap_err();
        assert!(matches!(err, Error::ForwardNotRun { device: 0 }));
    }

    #[test]
    fn ledger_counts_match_closed_forms() {
        // B·Z = 2 heads, N = 8, d = 4, G = 4
        let heads = [Qkv::random(8, 4, 1), Qkv::random(8, 4, 2)];
        let d_o = [random_matrix(8, 4, 3), random_matrix(8, 4, 4)];
        let c = run_both(&heads, 4, &GaoOptions::default(), &d_o, false);
        assert_eq!(c.ledger.elements_sent_forward, 128);
        assert_eq!(c.ledger.elements_sent_backward, 224);
        assert_eq!(c.ledger.ring_steps, 8);
        assert_eq!(c.ledger.messages_sent, c.ledger.messages_received);
    }

    #[test]
    fn masks_tiles_padding_and_offsets_agree_with_dense() {
        let n = 10;
        let heads = [Qkv::random(n, 3, 11)];
        let d_o = [random_matrix(n, 3, 12)];
        let masks = [
            None,
            Some(BlockMask::causal()),
            Some(BlockMask::from_blocks(2, [(0, 3), (4, 0), (1, 2)]).unwrap()),
        ];
        for mask in &masks {
            let p = dense(&heads[0], mask.as_ref());
            let want = forward_dense(&p).unwrap();
            let want_g = backward_dense(&p, &d_o[0]).unwrap();
            for g in [1, 3, 4, 5] {
                for tiles in [None, Some(TileSpec::new(2, 1).unwrap())] {
                    for start_offset in [0, 2] {
                        let opts = GaoOptions {
                            tiles,
                            mask: mask.clone(),
                            exec: ExecOptions {
                                start_offset,
                                ..ExecOptions::default()
                            },
                            ..GaoOptions::default()
                        };
                        let c = run_both(&heads, g, &opts, &d_o, true);
                        let out = &c.outputs().unwrap()[0];
                        let ctx = format!("mask={mask:?} g={g} tiles={tiles:?} offset={start_offset}");
                        assert!(out.o.max_abs_diff(&want.o) < 1e-10, "{ctx}");
                        assert!(out.lse.max_abs_diff(&want.lse) < 1e-10, "{ctx}");
                        assert!(c.grads().unwrap()[0].max_abs_diff(&want_g) < 1e-8, "{ctx}");
                    }
                }
            }
        }
    }

    #[test]
    fn causal_ring_skips_upper_hops() {
        let heads = [Qkv::random(8, 2, 2)];
        let opts = GaoOptions {
            mask: Some(BlockMask::causal()),
            ..GaoOptions::default()
        };
        let mut c = Cluster::partition(&heads, 4, false).unwrap();
        let rep = gao_forward(&mut c, &opts).unwrap();
        // device i sees origins j > i fully masked: 3 + 2 + 1 + 0 hops
        assert_eq!(rep.summary().hops_skipped, 6);
        let skipped: Vec<_> = rep.log.iter().filter(|r| r.work.skipped).collect();
        assert!(skipped.iter().all(|r| r.origin > r.device && r.work.stats.flops == 0));
        // skipped hops still move the payload
        assert_eq!(rep.ledger.elements_sent_forward, 2 * 8 * 2);
    }

    #[test]
    fn executors_and_overlap_modes_are_bitwise_identical() {
        let heads = [Qkv::random(12, 4, 21), Qkv::random(12, 4, 22)];
        let d_o = [random_matrix(12, 4, 23), random_matrix(12, 4, 24)];
        let mut results = Vec::new();
        for executor in [
            Executor::LockStep,
            Executor::Threaded { jitter: None },
            Executor::Threaded {
                jitter: Some(Jitter { seed: 5, max_micros: 300 }),
            },
        ] {
            for overlap in [Overlap::None, Overlap::DoubleBuffer] {
                let opts = GaoOptions {
                    tiles: Some(TileSpec::square(2).unwrap()),
                    exec: ExecOptions {
                        executor,
                        overlap,
                        start_offset: 0,
                    },
                    ..GaoOptions::default()
                };
                let c = run_both(&heads, 3, &opts, &d_o, false);
                results.push((c.outputs().unwrap(), c.grads().unwrap(), c.ledger.clone()));
            }
        }
        for r in &results[1..] {
            for h in 0..2 {
                assert_eq!(r.0[h].o, results[0].0[h].o);
                assert_eq!(r.0[h].lse, results[0].0[h].lse);
                assert_eq!(r.1[h].dq, results[0].1[h].dq);
                assert_eq!(r.1[h].dk, results[0].1[h].dk);
                assert_eq!(r.1[h].dv, results[0].1[h].dv);
            }
            assert_eq!(r.2.elements_sent_forward, results[0].2.elements_sent_forward);
            assert_eq!(r.2.elements_sent_backward, results[0].2.elements_sent_backward);
        }
    }

    #[test]
    fn fully_masked_row_is_reported_globally() {
        let heads = [Qkv::random(8, 2, 1)];
        let opts = GaoOptions {
            mask: Some(BlockMask::from_blocks(2, (0..4).map(|k| (2, k))).unwrap()),
            ..GaoOptions::default()
        };
        let mut c = Cluster::partition(&heads, 2, false).unwrap();
        assert!(matches!(gao_forward(&mut c, &opts), Err(Error::FullyMaskedRow { row: 4 })));
    }

    #[test]
    fn untiled_hop_allocates_one_square_block() {
        let heads = [Qkv::random(16, 2, 1)];
        let mut c = Cluster::partition(&heads, 4, false).unwrap();
        let rep = gao_forward(&mut c, &GaoOptions::default()).unwrap();
        assert!(rep.log.iter().all(|r| r.meter.count_shape(4, 4) == 1));
        let tiled = GaoOptions {
            tiles: Some(TileSpec::square(2).unwrap()),
            ..GaoOptions::default()
        };
        let rep = gao_forward(&mut c, &tiled).unwrap();
        assert!(rep.log.iter().all(|r| r.meter.count_shape(4, 4) == 0));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn ring_matches_dense_for_any_split(
            n in 1usize..20,
            d in 1usize..6,
            g in 1usize..6,
            tile in 0usize..5,
            causal in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            proptest::prop_assume!(g <= n);
            let heads = [Qkv::random(n, d, seed)];
            let d_o = [random_matrix(n, d, seed + 1)];
            let mask = causal.then(BlockMask::causal);
            let opts = GaoOptions {
                tiles: (tile > 0).then(|| TileSpec::square(tile).unwrap()),
                mask: mask.clone(),
                ..GaoOptions::default()
            };
            let c = run_both(&heads, g, &opts, &d_o, true);
            let p = dense(&heads[0], mask.as_ref());
            let want = forward_dense(&p).unwrap();
            let out = &c.outputs().unwrap()[0];
            proptest::prop_assert!(out.o.max_abs_diff(&want.o) < 1e-10);
            proptest::prop_assert!(out.lse.max_abs_diff(&want.lse) < 1e-10);
            proptest::prop_assert!(c.grads().unwrap()[0].max_abs_diff(&backward_dense(&p, &d_o[0]).unwrap()) < 1e-8);
            // traffic follows the padded length
            let padded = (c.padded_len * d) as u64;
            let (f, b) = if g == 1 { (0, 0) } else { (2 * padded, 3 * padded + 2 * c.padded_len as u64) };
            proptest::prop_assert_eq!((c.ledger.elements_sent_forward, c.ledger.elements_sent_backward), (f, b));
        }
    }
}
