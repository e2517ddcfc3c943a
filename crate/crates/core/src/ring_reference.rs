//! Baseline ring attention without online softmax.
//!
//! Each device materializes its full `N/G × N` score row block. The forward
//! pass needs two rounds: keys circulate to fill the scores, the softmax is
//! taken over the complete rows, then values circulate to form the output.
//! The backward pass circulates `V` with a traveling `dV`, then `K` with a
//! traveling `dK`. It is used to contrast memory and traffic with the
//! single-round scheme in [`crate::gao`].

use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::gao::{Cluster, GaoOptions, PassReport};
use crate::local::{BlockMask, MaskWindow};
use crate::sim::engine::{run_pass, ExecOptions, Hop, RingProgram, StepRecord, StepWork};
use crate::sim::ledger::{CommLedger, Pass};
use crate::tensor::{dot, Matrix, Real, Vector};

struct HeadState<T: Real> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Scores, then probabilities, `part × padded_len`.
    p: Matrix<T>,
    /// `dO Vᵀ`, then `dS`.
    ds: Option<Matrix<T>>,
    o: Matrix<T>,
    d_o: Option<Matrix<T>>,
    dq: Option<Matrix<T>>,
}

struct Device<T: Real> {
    row_offset: usize,
    heads: Vec<HeadState<T>>,
}

#[derive(Clone, Copy)]
enum Phase {
    Scores,
    Values,
    ValueGrads,
    KeyGrads,
}

struct Program<'a, 'd, T: Real> {
    phase: Phase,
    scale: T,
    mask: Option<&'a BlockMask>,
    part_len: usize,
    seq_len: usize,
    _device: PhantomData<&'d mut ()>,
}

/// Circulating blocks: `(origin, per-head matrix)`.
type Blocks<T> = (usize, Vec<Matrix<T>>);

impl<'d, T: Real> RingProgram for Program<'_, 'd, T> {
    type Device = &'d mut Device<T>;
    type Shared = Blocks<T>;
    type Carry = Vec<Matrix<T>>;

    fn shared_elements(&self, s: &Blocks<T>) -> u64 {
        s.1.iter().map(|m| m.len() as u64).sum()
    }

    fn carry_elements(&self, c: &Vec<Matrix<T>>) -> u64 {
        c.iter().map(|m| m.len() as u64).sum()
    }

    fn step(&self, dev: &mut Self::Device, shared: &Blocks<T>, carry: &mut Vec<Matrix<T>>, _: Hop) -> Result<StepWork> {
        let (origin, blocks) = shared;
        let col0 = *origin * self.part_len;
        let window = MaskWindow::new(self.mask, dev.row_offset, col0, self.seq_len);
        let mut work = StepWork::default();
        for (h, head) in dev.heads.iter_mut().enumerate() {
            let blk = &blocks[h];
            let (rows, cols, d) = (head.q.rows(), blk.rows(), blk.cols() as u64);
            work.stats.flops += 2 * (rows * cols) as u64 * d;
            work.stats.tiles_computed += 1;
            match self.phase {
                Phase::Scores => {
                    for r in 0..rows {
                        let qr = head.q.row(r);
                        let out = &mut head.p.row_mut(r)[col0..col0 + cols];
                        for (c, x) in out.iter_mut().enumerate() {
                            *x = if window.allows(r, c) {
                                dot(qr, blk.row(c)) * self.scale
                            } else {
                                T::neg_infinity()
                            };
                        }
                    }
                    work.stats.hbm_accesses += (rows * cols) as u64 + (rows + cols) as u64 * d;
                }
                Phase::Values => {
                    for r in 0..rows {
                        for c in 0..cols {
                            let w = head.p.get(r, col0 + c);
                            if w != T::zero() {
                                for (o, &v) in head.o.row_mut(r).iter_mut().zip(blk.row(c)) {
                                    *o += w * v;
                                }
                            }
                        }
                    }
                    work.stats.hbm_accesses += (rows * cols) as u64 + (2 * rows + cols) as u64 * d;
                }
                Phase::ValueGrads => {
                    let d_o = head.d_o.as_ref().expect("set before the pass");
                    let dp = head.ds.as_mut().expect("set before the pass");
                    let dv = &mut carry[h];
                    for r in 0..rows {
                        let g = d_o.row(r);
                        for c in 0..cols {
                            dp.set(r, col0 + c, dot(g, blk.row(c)));
                            let w = head.p.get(r, col0 + c);
                            if w != T::zero() {
                                for (x, &y) in dv.row_mut(c).iter_mut().zip(g) {
                                    *x += w * y;
                                }
                            }
                        }
                    }
                    work.stats.flops += 2 * (rows * cols) as u64 * d;
                    work.stats.hbm_accesses += 2 * (rows * cols) as u64 + (rows + 3 * cols) as u64 * d;
                }
                Phase::KeyGrads => {
                    let ds = head.ds.as_ref().expect("set before the pass");
                    let dq = head.dq.as_mut().expect("set before the pass");
                    let dk = &mut carry[h];
                    for r in 0..rows {
                        for c in 0..cols {
                            let s = ds.get(r, col0 + c) * self.scale;
                            if s != T::zero() {
                                for (x, &y) in dq.row_mut(r).iter_mut().zip(blk.row(c)) {
                                    *x += s * y;
                                }
                                for (x, &y) in dk.row_mut(c).iter_mut().zip(head.q.row(r)) {
                                    *x += s * y;
                                }
                            }
                        }
                    }
                    work.stats.flops += 2 * (rows * cols) as u64 * d;
                    work.stats.hbm_accesses += (rows * cols) as u64 + 2 * (rows + 2 * cols) as u64 * d;
                }
            }
        }
        Ok(work)
    }
}

fn run_round<T: Real>(
    program: &Program<'_, '_, T>,
    devices: &mut [Device<T>],
    pick: impl Fn(&HeadState<T>) -> &Matrix<T>,
    with_carry: bool,
    exec: &ExecOptions,
) -> Result<(Vec<StepRecord>, u64, u64, Vec<Vec<Matrix<T>>>)> {
    let payloads = devices
        .iter()
        .enumerate()
        .map(|(i, dev)| {
            let blocks: Vec<Matrix<T>> = dev.heads.iter().map(|h| pick(h).clone()).collect();
            let carry = if with_carry {
                blocks.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect()
            } else {
                Vec::new()
            };
            ((i, blocks), carry)
        })
        .collect();
    let out = run_pass(program, devices.iter_mut().collect(), payloads, exec)?;
    let carries = out.payloads.into_iter().map(|(_, c)| c).collect();
    Ok((out.log, out.messages_sent, out.messages_received, carries))
}

fn merge_logs(a: Vec<StepRecord>, b: Vec<StepRecord>, g: usize) -> Vec<StepRecord> {
    // The second round's steps are numbered after the first.
    let mut log = a;
    log.extend(b.into_iter().map(|mut r| {
        r.round += g;
        r
    }));
    log.sort_by_key(|r| (r.device, r.round));
    log
}

fn record<T: Real>(
    cluster: &mut Cluster<T>,
    pass: Pass,
    log: Vec<StepRecord>,
    resident: &[u64],
    messages: (u64, u64),
) -> PassReport {
    let mut ledger = CommLedger::new(cluster.device_count());
    ledger.record_rounds(pass, 2, &log, resident, messages);
    cluster.ledger.record_rounds(pass, 2, &log, resident, messages);
    PassReport { pass, log, ledger }
}

fn devices_of<T: Real>(cluster: &Cluster<T>) -> Vec<Device<T>> {
    let (part, padded) = (cluster.part_len, cluster.padded_len);
    cluster
        .devices
        .iter()
        .map(|d| Device {
            row_offset: d.row_offset,
            heads: d
                .shards
                .iter()
                .map(|s| HeadState {
                    q: s.q.clone(),
                    k: s.k.clone(),
                    v: s.v.clone(),
                    p: Matrix::zeros(part, padded),
                    ds: None,
                    o: Matrix::zeros(part, cluster.head_dim),
                    d_o: None,
                    dq: None,
                })
                .collect(),
        })
        .collect()
}

fn program<'a, 'd, T: Real>(cluster: &Cluster<T>, opts: &'a GaoOptions<T>, phase: Phase) -> Program<'a, 'd, T> {
    Program {
        phase,
        scale: opts
            .scale
            .unwrap_or_else(|| T::one() / T::from_f64(cluster.head_dim as f64).sqrt()),
        mask: opts.mask.as_ref(),
        part_len: cluster.part_len,
        seq_len: cluster.seq_len,
        _device: PhantomData,
    }
}

fn check<T: Real>(cluster: &Cluster<T>, opts: &GaoOptions<T>) -> Result<()> {
    if opts.tiles.is_some() {
        return Err(Error::InvalidArgument(
            "the ring reference keeps the full score block and does not tile".into(),
        ));
    }
    if let Some(m) = &opts.mask {
        m.validate(cluster.seq_len)?;
    }
    Ok(())
}

/// Probabilities kept by [`ring_forward`] for [`ring_backward`].
pub struct RingState<T: Real = f64> {
    devices: Vec<Device<T>>,
}

/// Forward pass of the baseline; fills `o` and `lse` of every shard and
/// returns the stored probabilities.
pub fn ring_forward<T: Real>(cluster: &mut Cluster<T>, opts: &GaoOptions<T>) -> Result<(PassReport, RingState<T>)> {
    check(cluster, opts)?;
    let g = cluster.device_count();
    let mut devices = devices_of(cluster);
    let scores = program(cluster, opts, Phase::Scores);
    let (log_a, s_a, r_a, _) = run_round(&scores, &mut devices, |h| &h.k, false, &opts.exec)?;
    let mut lses = Vec::with_capacity(g);
    for (dev, state) in devices.iter_mut().zip(&cluster.devices) {
        let mut per_head = Vec::with_capacity(dev.heads.len());
        for h in &mut dev.heads {
            let mut lse = Vector::zeros(h.p.rows());
            for r in 0..h.p.rows() {
                let row = h.p.row_mut(r);
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                if mx == T::neg_infinity() {
                    if r < state.real_rows {
                        return Err(Error::FullyMaskedRow { row: state.row_offset + r });
                    }
                    row.iter_mut().for_each(|x| *x = T::zero());
                    continue;
                }
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x = *x / sum;
                }
                lse[r] = mx + sum.ln();
            }
            per_head.push(lse);
        }
        lses.push(per_head);
    }
    let values = program(cluster, opts, Phase::Values);
    let (log_b, s_b, r_b, _) = run_round(&values, &mut devices, |h| &h.v, false, &opts.exec)?;
    let mut resident = Vec::with_capacity(g);
    for ((dev, state), lse) in devices.iter_mut().zip(&mut cluster.devices).zip(lses) {
        let mut res = 0;
        for ((h, s), l) in dev.heads.iter_mut().zip(&mut state.shards).zip(lse) {
            res += 4 * h.q.len() as u64 + h.p.len() as u64;
            s.o = Some(h.o.clone());
            s.lse = Some(l);
        }
        resident.push(res);
    }
    let log = merge_logs(log_a, log_b, g);
    let report = record(cluster, Pass::Forward, log, &resident, (s_a + s_b, r_a + r_b));
    Ok((report, RingState { devices }))
}

/// Backward pass of the baseline from the state of its forward pass.
pub fn ring_backward<T: Real>(
    cluster: &mut Cluster<T>,
    state: RingState<T>,
    d_o: &[Matrix<T>],
    opts: &GaoOptions<T>,
) -> Result<PassReport> {
    check(cluster, opts)?;
    if d_o.len() != cluster.heads {
        return Err(Error::Shape(format!("{} output gradients for {} heads", d_o.len(), cluster.heads)));
    }
    let g = cluster.device_count();
    let (part, d) = (cluster.part_len, cluster.head_dim);
    let mut devices = state.devices;
    if devices.len() != g {
        return Err(Error::InvalidArgument("ring state belongs to a different cluster".into()));
    }
    for (dev, state) in devices.iter_mut().zip(&cluster.devices) {
        for (hi, h) in dev.heads.iter_mut().enumerate() {
            let full = &d_o[hi];
            if full.shape() != (cluster.seq_len, d) {
                return Err(Error::Shape(format!(
                    "output gradient {:?} does not match {} x {d}",
                    full.shape(),
                    cluster.seq_len
                )));
            }
            let mut local = Matrix::zeros(part, d);
            for r in 0..state.real_rows {
                local.row_mut(r).copy_from_slice(full.row(state.row_offset + r));
            }
            h.d_o = Some(local);
            h.ds = Some(Matrix::zeros(part, cluster.padded_len));
            h.dq = Some(Matrix::zeros(part, d));
        }
    }
    let vgrads = program(cluster, opts, Phase::ValueGrads);
    let (log_a, s_a, r_a, dv) = run_round(&vgrads, &mut devices, |h| &h.v, true, &opts.exec)?;
    for dev in &mut devices {
        for h in &mut dev.heads {
            let o = &h.o;
            let d_o = h.d_o.as_ref().expect("set above");
            let ds = h.ds.as_mut().expect("set above");
            for r in 0..part {
                let delta = dot(d_o.row(r), o.row(r));
                for (x, &p) in ds.row_mut(r).iter_mut().zip(h.p.row(r)) {
                    *x = p * (*x - delta);
                }
            }
        }
    }
    let kgrads = program(cluster, opts, Phase::KeyGrads);
    let (log_b, s_b, r_b, dk) = run_round(&kgrads, &mut devices, |h| &h.k, true, &opts.exec)?;
    let mut resident = Vec::with_capacity(g);
    for (i, (dev, state)) in devices.into_iter().zip(&mut cluster.devices).enumerate() {
        let mut res = 0;
        for (hi, (h, s)) in dev.heads.into_iter().zip(&mut state.shards).enumerate() {
            res += 4 * h.q.len() as u64 + 2 * h.p.len() as u64;
            s.dq = h.dq;
            s.dk = Some(dk[i][hi].clone());
            s.dv = Some(dv[i][hi].clone());
        }
        resident.push(res);
    }
    let log = merge_logs(log_a, log_b, g);
    Ok(record(cluster, Pass::Backward, log, &resident, (s_a + s_b, r_a + r_b)))
}
