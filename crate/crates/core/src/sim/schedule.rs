//! Virtual-time replay of a ring pass.
//!
//! The numerical pass records what every `(device, round)` step computed
//! and sent. This module turns those records into a timeline with a
//! pluggable duration model and a discrete-event simulation of the ring
//! channels, with or without double buffering.
//!
//! Channel `i` links device `i` to device `(i + 1) mod G`, is FIFO and moves
//! one transfer at a time. Sends made during round `r` feed the receiver's
//! round `r + 1`; the sends of the last round return payloads home.
//!
//! * `None`: the whole payload is sent after the step; it may start once the
//!   receiver has finished its own round `r` step. A device starts round
//!   `r + 1` when the incoming payload has arrived and its own send is done.
//! * `DoubleBuffer`: the read-only part goes into the receiver's staging
//!   slot as soon as the round begins (the receiver must have started round
//!   `r`, which freed that slot). The accumulated part follows the step.
//!   Compute may begin on the read-only part; its end waits for the
//!   accumulated part to have arrived.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::engine::{Overlap, StepRecord};
use crate::error::{Error, Result};
use crate::local::KernelStats;

/// Maps work and traffic to virtual durations.
pub trait DurationModel {
    fn compute_time(&self, stats: &KernelStats) -> f64;
    /// Time to move `elements` out of a payload of `payload_elements`.
    fn transfer_time(&self, elements: u64, payload_elements: u64) -> f64;
}

/// Transfer = bytes / bandwidth, compute = flops / rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDurations {
    /// Bytes per unit of virtual time.
    pub bandwidth: f64,
    /// Flops per unit of virtual time.
    pub compute_rate: f64,
    pub bytes_per_element: u64,
}

impl Default for LinearDurations {
    fn default() -> Self {
        Self {
            bandwidth: 1.0,
            compute_rate: 1.0,
            bytes_per_element: 8,
        }
    }
}

impl DurationModel for LinearDurations {
    fn compute_time(&self, stats: &KernelStats) -> f64 {
        stats.flops as f64 / self.compute_rate
    }
    fn transfer_time(&self, elements: u64, _payload_elements: u64) -> f64 {
        (elements * self.bytes_per_element) as f64 / self.bandwidth
    }
}

/// Every step takes `compute` (zero when a fully masked hop does no work)
/// and every whole payload takes `transfer`, split pro rata between parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedDurations {
    pub compute: f64,
    pub transfer: f64,
}

impl DurationModel for FixedDurations {
    fn compute_time(&self, stats: &KernelStats) -> f64 {
        if stats.flops == 0 {
            0.0
        } else {
            self.compute
        }
    }
    fn transfer_time(&self, elements: u64, payload_elements: u64) -> f64 {
        if payload_elements == 0 {
            0.0
        } else {
            self.transfer * elements as f64 / payload_elements as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ComputeStart,
    ComputeEnd,
    SendStart,
    SendEnd,
    RecvReady,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub device: usize,
    pub kind: EventKind,
    pub t_virtual: f64,
    /// Compute and send events carry the round they belong to; `recv_ready`
    /// carries the round the payload is for (`G` for the return home).
    pub round: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub overlap: Overlap,
    pub devices: usize,
    pub events: Vec<TraceEvent>,
}

impl ScheduleTrace {
    pub fn makespan(&self) -> f64 {
        self.events.iter().map(|e| e.t_virtual).fold(0.0, f64::max)
    }

    pub fn device_events(&self, device: usize) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.device == device)
    }

    pub fn find(&self, device: usize, kind: EventKind, round: usize) -> Option<&TraceEvent> {
        self.events
            .iter()
            .find(|e| e.device == device && e.kind == kind && e.round == round)
    }

    /// Newline-delimited JSON, one event per line.
    pub fn write_ndjson(&self, mut out: impl Write) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Injected faults for testing failure handling.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Faults {
    /// Sends from `(device, round)` that never arrive.
    pub drop: Vec<(usize, usize)>,
    /// Extra compute time added to `(device, round)`.
    pub stall: Vec<(usize, usize, f64)>,
}

/// Durations and sizes per `(device, round)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleInput {
    pub compute: Vec<Vec<f64>>,
    pub shared_time: Vec<Vec<f64>>,
    pub carry_time: Vec<Vec<f64>>,
    /// Whether the accumulated part has any elements; an empty one is not sent.
    pub has_carry: bool,
}

impl ScheduleInput {
    pub fn from_log(log: &[StepRecord], devices: usize, model: &dyn DurationModel) -> Self {
        let mut input = Self {
            compute: vec![vec![0.0; devices]; devices],
            shared_time: vec![vec![0.0; devices]; devices],
            carry_time: vec![vec![0.0; devices]; devices],
            has_carry: false,
        };
        for rec in log {
            let total = rec.shared_sent + rec.carry_sent;
            input.compute[rec.device][rec.round] = model.compute_time(&rec.work.stats);
            input.shared_time[rec.device][rec.round] = model.transfer_time(rec.shared_sent, total);
            input.carry_time[rec.device][rec.round] = model.transfer_time(rec.carry_sent, total);
            input.has_carry |= rec.carry_sent > 0;
        }
        input
    }

    /// Same durations for every step.
    pub fn uniform(devices: usize, compute: f64, shared: f64, carry: f64) -> Self {
        Self {
            compute: vec![vec![compute; devices]; devices],
            shared_time: vec![vec![if devices > 1 { shared } else { 0.0 }; devices]; devices],
            carry_time: vec![vec![if devices > 1 { carry } else { 0.0 }; devices]; devices],
            has_carry: devices > 1 && carry > 0.0,
        }
    }

    fn devices(&self) -> usize {
        self.compute.len()
    }

    /// Rough length of one round, used for the deadlock horizon.
    fn round_estimate(&self) -> f64 {
        let g = self.devices();
        if g == 0 {
            return 1.0;
        }
        let mut total = 0.0;
        for d in 0..g {
            for r in 0..g {
                total += self.compute[d][r] + self.shared_time[d][r] + self.carry_time[d][r];
            }
        }
        let est = total / (g * g) as f64;
        if est > 0.0 && est.is_finite() {
            est
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Whole,
    Shared,
    Carry,
}

#[derive(Debug, Clone, Copy)]
struct Transfer {
    part: Part,
    round: usize,
    duration: f64,
}

#[derive(Debug, Clone, Copy)]
enum Action {
    ComputeDone { device: usize, round: usize },
    TransferDone { channel: usize, transfer: Transfer },
}

struct Queued {
    t: f64,
    seq: u64,
    action: Action,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // min-heap on (t, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Default, Clone)]
struct DeviceState {
    /// Next round to start.
    next_round: usize,
    computing: Option<usize>,
    /// Round whose compute body finished but still waits for its carry.
    awaiting_carry: Option<usize>,
    compute_done: Vec<bool>,
    started: Vec<bool>,
    /// Indexed by the round the payload is for (`1..=G`).
    shared_in: Vec<bool>,
    carry_in: Vec<bool>,
    /// Own sends finished, indexed by round.
    sent_shared: Vec<bool>,
    sent_whole: Vec<bool>,
    compute_start: f64,
}

struct Sim<'a> {
    input: &'a ScheduleInput,
    overlap: Overlap,
    faults: &'a Faults,
    g: usize,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Queued>,
    devices: Vec<DeviceState>,
    queues: Vec<VecDeque<Transfer>>,
    busy: Vec<bool>,
    events: Vec<TraceEvent>,
}

impl Sim<'_> {
    fn push(&mut self, t: f64, action: Action) {
        self.seq += 1;
        self.heap.push(Queued { t, seq: self.seq, action });
    }

    fn log(&mut self, device: usize, kind: EventKind, round: usize) {
        self.events.push(TraceEvent {
            device,
            kind,
            t_virtual: self.now,
            round,
        });
    }

    fn has_carry(&self) -> bool {
        self.overlap == Overlap::DoubleBuffer && self.input.has_carry
    }

    fn compute_time(&self, device: usize, round: usize) -> f64 {
        let extra: f64 = self
            .faults
            .stall
            .iter()
            .filter(|(d, r, _)| *d == device && *r == round)
            .map(|(_, _, t)| t)
            .sum();
        self.input.compute[device][round] + extra
    }

    fn enqueue(&mut self, device: usize, part: Part, round: usize) {
        let duration = match part {
            Part::Whole => self.input.shared_time[device][round] + self.input.carry_time[device][round],
            Part::Shared => self.input.shared_time[device][round],
            Part::Carry => self.input.carry_time[device][round],
        };
        self.queues[device].push_back(Transfer { part, round, duration });
    }

    fn transfer_ready(&self, channel: usize, t: &Transfer) -> bool {
        let recv = &self.devices[(channel + 1) % self.g];
        // The home-bound send of the last round lands in a free buffer.
        if t.round + 1 == self.g {
            return match t.part {
                Part::Whole | Part::Carry => true,
                Part::Shared => recv.started[t.round],
            };
        }
        match t.part {
            Part::Whole => recv.compute_done[t.round],
            Part::Shared => recv.started[t.round],
            Part::Carry => true,
        }
    }

    fn round_ready(&self, device: usize) -> bool {
        let s = &self.devices[device];
        let r = s.next_round;
        if r >= self.g || s.computing.is_some() || s.awaiting_carry.is_some() {
            return false;
        }
        if r == 0 {
            return true;
        }
        if !s.compute_done[r - 1] {
            return false;
        }
        match self.overlap {
            Overlap::None => s.shared_in[r] && s.sent_whole[r - 1],
            Overlap::DoubleBuffer => s.shared_in[r] && s.sent_shared[r - 1],
        }
    }

    /// Starts everything that can start at `now`, until nothing changes.
    fn progress(&mut self) {
        loop {
            let mut changed = false;
            for d in 0..self.g {
                if self.round_ready(d) {
                    let r = self.devices[d].next_round;
                    self.devices[d].next_round += 1;
                    self.devices[d].started[r] = true;
                    self.devices[d].computing = Some(r);
                    self.devices[d].compute_start = self.now;
                    self.log(d, EventKind::ComputeStart, r);
                    if self.g > 1 && self.overlap == Overlap::DoubleBuffer {
                        self.enqueue(d, Part::Shared, r);
                    }
                    let t = self.now + self.compute_time(d, r);
                    self.push(t, Action::ComputeDone { device: d, round: r });
                    changed = true;
                }
                if let Some(r) = self.devices[d].awaiting_carry {
                    if self.devices[d].carry_in[r] {
                        self.devices[d].awaiting_carry = None;
                        self.finish_compute(d, r);
                        changed = true;
                    }
                }
            }
            for c in 0..self.g {
                if self.busy[c] {
                    continue;
                }
                let Some(head) = self.queues[c].front().copied() else {
                    continue;
                };
                if self.transfer_ready(c, &head) {
                    self.queues[c].pop_front();
                    self.busy[c] = true;
                    self.log(c, EventKind::SendStart, head.round);
                    self.push(self.now + head.duration, Action::TransferDone { channel: c, transfer: head });
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }

    fn finish_compute(&mut self, d: usize, r: usize) {
        self.devices[d].compute_done[r] = true;
        self.log(d, EventKind::ComputeEnd, r);
        if self.g > 1 {
            match self.overlap {
                Overlap::None => self.enqueue(d, Part::Whole, r),
                Overlap::DoubleBuffer if self.has_carry() => self.enqueue(d, Part::Carry, r),
                Overlap::DoubleBuffer => {}
            }
        }
    }

    fn handle(&mut self, action: Action) {
        match action {
            Action::ComputeDone { device, round } => {
                self.devices[device].computing = None;
                if round > 0 && self.has_carry() && !self.devices[device].carry_in[round] {
                    self.devices[device].awaiting_carry = Some(round);
                } else {
                    self.finish_compute(device, round);
                }
            }
            Action::TransferDone { channel, transfer } => {
                self.busy[channel] = false;
                self.log(channel, EventKind::SendEnd, transfer.round);
                let r = transfer.round;
                match transfer.part {
                    Part::Whole => self.devices[channel].sent_whole[r] = true,
                    Part::Shared => self.devices[channel].sent_shared[r] = true,
                    Part::Carry => {}
                }
                if self.faults.drop.contains(&(channel, r)) {
                    return;
                }
                let recv = (channel + 1) % self.g;
                let tag = r + 1;
                match transfer.part {
                    Part::Whole | Part::Shared => {
                        self.devices[recv].shared_in[tag] = true;
                        if transfer.part == Part::Whole {
                            self.devices[recv].carry_in[tag] = true;
                        }
                        self.log(recv, EventKind::RecvReady, tag);
                    }
                    Part::Carry => self.devices[recv].carry_in[tag] = true,
                }
            }
        }
    }

    fn finished(&self) -> bool {
        let g = self.g;
        self.devices.iter().all(|s| {
            s.compute_done.iter().all(|&c| c)
                && (g == 1 || (s.shared_in[g] && (!self.has_carry() || s.carry_in[g])))
        })
    }

    fn diagnose(&self) -> String {
        let stuck: Vec<String> = self
            .devices
            .iter()
            .enumerate()
            .filter(|(_, s)| s.compute_done.iter().any(|c| !c) || (self.g > 1 && !s.shared_in[self.g]))
            .map(|(i, s)| {
                let waiting = s.next_round.min(self.g);
                format!("device {i} at round {waiting}")
            })
            .collect();
        stuck.join(", ")
    }
}

/// Replays a pass on the virtual timeline.
pub fn simulate(input: &ScheduleInput, overlap: Overlap, faults: &Faults) -> Result<ScheduleTrace> {
    let g = input.devices();
    if g == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one device".into()));
    }
    let horizon = 10.0 * g as f64 * input.round_estimate();
    let state = DeviceState {
        compute_done: vec![false; g],
        started: vec![false; g],
        shared_in: vec![false; g + 1],
        carry_in: vec![false; g + 1],
        sent_shared: vec![false; g],
        sent_whole: vec![false; g],
        ..DeviceState::default()
    };
    let mut sim = Sim {
        input,
        overlap,
        faults,
        g,
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        devices: vec![state; g],
        queues: vec![VecDeque::new(); g],
        busy: vec![false; g],
        events: Vec::new(),
    };
    sim.progress();
    while let Some(q) = sim.heap.pop() {
        let idle = q.t - sim.now;
        if idle > horizon {
            return Err(Error::Deadlock {
                idle,
                horizon,
                detail: format!("no progress after t={}: {}", sim.now, sim.diagnose()),
            });
        }
        sim.now = q.t;
        sim.handle(q.action);
        sim.progress();
    }
    if !sim.finished() {
        return Err(Error::Deadlock {
            idle: f64::INFINITY,
            horizon,
            detail: format!("all channels idle at t={}: {}", sim.now, sim.diagnose()),
        });
    }
    Ok(ScheduleTrace {
        overlap,
        devices: g,
        events: sim.events,
    })
}

/// Overlap of one round, summed over devices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundOverlap {
    pub round: usize,
    pub compute: f64,
    pub communication: f64,
    /// Time during which a device both computed and sent.
    pub overlapped: f64,
    /// `overlapped / communication`, zero without communication.
    pub ratio: f64,
}

/// Intersects each device's compute interval of a round with the sends it
/// made in that round.
pub fn measure_overlap(trace: &ScheduleTrace) -> Vec<RoundOverlap> {
    let g = trace.devices;
    let mut out: Vec<RoundOverlap> = (0..g)
        .map(|round| RoundOverlap {
            round,
            compute: 0.0,
            communication: 0.0,
            overlapped: 0.0,
            ratio: 0.0,
        })
        .collect();
    for d in 0..g {
        let mut open_send: Option<(f64, usize)> = None;
        let mut sends: Vec<(usize, f64, f64)> = Vec::new();
        let mut computes: Vec<(usize, f64, f64)> = Vec::new();
        let mut open_compute: Option<(f64, usize)> = None;
        for e in trace.device_events(d) {
            match e.kind {
                EventKind::SendStart => open_send = Some((e.t_virtual, e.round)),
                EventKind::SendEnd => {
                    if let Some((s, r)) = open_send.take() {
                        sends.push((r, s, e.t_virtual));
                    }
                }
                EventKind::ComputeStart => open_compute = Some((e.t_virtual, e.round)),
                EventKind::ComputeEnd => {
                    if let Some((s, r)) = open_compute.take() {
                        computes.push((r, s, e.t_virtual));
                    }
                }
                EventKind::RecvReady => {}
            }
        }
        for &(r, cs, ce) in &computes {
            if r < g {
                out[r].compute += ce - cs;
            }
        }
        for &(r, ss, se) in &sends {
            if r >= g {
                continue;
            }
            out[r].communication += se - ss;
            for &(cr, cs, ce) in &computes {
                if cr == r {
                    out[r].overlapped += (se.min(ce) - ss.max(cs)).max(0.0);
                }
            }
        }
    }
    for o in &mut out {
        o.ratio = if o.communication > 0.0 {
            o.overlapped / o.communication
        } else {
            0.0
        };
    }
    out
}
