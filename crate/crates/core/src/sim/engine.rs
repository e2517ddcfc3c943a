//! Ring execution: moves payloads around `G` simulated devices and runs one
//! compute step per device per round.
//!
//! A payload is split into a read-only `Shared` part (sent as soon as a
//! round starts when double buffering) and a mutable `Carry` part that
//! accumulates while traveling and is sent after the step. Two executors
//! exist: a single-threaded lock-step loop and one OS thread per device
//! talking over bounded channels. Both apply the same steps in the same
//! per-device order, so their results are bitwise identical.

use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::KernelStats;
use crate::tensor::meter::{self, MeterReport};

/// Communication/computation overlap policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Overlap {
    /// Compute, then exchange the whole payload.
    #[default]
    None,
    /// Send the read-only payload into the neighbor's staging slot while
    /// computing on the active slot.
    DoubleBuffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Executor {
    #[default]
    LockStep,
    /// One worker thread per device. `jitter` injects random sleeps of up
    /// to `max_micros` before every step and send, seeded per worker.
    Threaded { jitter: Option<Jitter> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Jitter {
    pub seed: u64,
    pub max_micros: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExecOptions {
    pub executor: Executor,
    pub overlap: Overlap,
    /// Payload of origin `o` first computes on device `(o + start_offset) % G`.
    pub start_offset: usize,
}

/// Identifies one step: `device` computes on the payload of `origin` in
/// `round` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    pub device: usize,
    pub origin: usize,
    pub round: usize,
    pub devices: usize,
}

/// What one step did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepWork {
    pub stats: KernelStats,
    /// The mask skipped every block of this hop.
    pub skipped: bool,
}

pub trait RingProgram: Sync {
    type Device: Send;
    type Shared: Send + Sync;
    type Carry: Send;

    fn shared_elements(&self, shared: &Self::Shared) -> u64;
    fn carry_elements(&self, carry: &Self::Carry) -> u64;
    fn step(&self, device: &mut Self::Device, shared: &Self::Shared, carry: &mut Self::Carry, hop: Hop) -> Result<StepWork>;
}

/// One row of the work log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub device: usize,
    pub round: usize,
    pub origin: usize,
    pub work: StepWork,
    pub meter: MeterReport,
    /// Elements this device sent after (or during) the step; zero for `G = 1`.
    pub shared_sent: u64,
    pub carry_sent: u64,
}

/// Everything a finished pass hands back.
pub struct PassOutcome<P: RingProgram> {
    pub devices: Vec<P::Device>,
    /// Payloads indexed by origin after their full circle.
    pub payloads: Vec<(Arc<P::Shared>, P::Carry)>,
    /// Records sorted by `(device, round)`.
    pub log: Vec<StepRecord>,
    pub messages_sent: u64,
    pub messages_received: u64,
}

struct Envelope<S, C> {
    origin: usize,
    hops: usize,
    shared: Arc<S>,
    carry: C,
}

fn expected_origin(device: usize, round: usize, offset: usize, g: usize) -> usize {
    (device + g * (round + 1) - (offset % g) - round % g) % g
}

fn check_envelope<S, C>(env: &Envelope<S, C>, device: usize, round: usize, offset: usize, g: usize) -> Result<()> {
    let origin = expected_origin(device, round, offset, g);
    if env.origin != origin || env.hops != round {
        return Err(Error::RingDesync {
            device,
            detail: format!(
                "round {round} expected payload of origin {origin} after {round} hops, got origin {} after {} hops",
                env.origin, env.hops
            ),
        });
    }
    Ok(())
}

/// Runs one full pass: `G` rounds, payloads return to their start device.
pub fn run_pass<P: RingProgram>(
    program: &P,
    devices: Vec<P::Device>,
    payloads: Vec<(P::Shared, P::Carry)>,
    opts: &ExecOptions,
) -> Result<PassOutcome<P>> {
    let g = devices.len();
    if g == 0 || payloads.len() != g {
        return Err(Error::RingDesync {
            device: 0,
            detail: format!("{} payloads for {} devices", payloads.len(), g),
        });
    }
    // device i starts with the payload whose origin is (i - offset) mod g
    let mut initial: Vec<Option<Envelope<P::Shared, P::Carry>>> = (0..g).map(|_| None).collect();
    for (origin, (shared, carry)) in payloads.into_iter().enumerate() {
        initial[(origin + opts.start_offset) % g] = Some(Envelope {
            origin,
            hops: 0,
            shared: Arc::new(shared),
            carry,
        });
    }
    let initial: Vec<_> = initial.into_iter().map(|e| e.expect("one payload per device")).collect();
    match opts.executor {
        Executor::LockStep => run_lockstep(program, devices, initial, opts),
        Executor::Threaded { jitter } => run_threaded(program, devices, initial, opts, jitter),
    }
}

fn metered_step<P: RingProgram>(
    program: &P,
    device: &mut P::Device,
    env: &mut Envelope<P::Shared, P::Carry>,
    hop: Hop,
) -> Result<(StepWork, MeterReport)> {
    let (work, report) = meter::measure(|| program.step(device, &env.shared, &mut env.carry, hop));
    Ok((work?, report))
}

fn run_lockstep<P: RingProgram>(
    program: &P,
    mut devices: Vec<P::Device>,
    mut slots: Vec<Envelope<P::Shared, P::Carry>>,
    opts: &ExecOptions,
) -> Result<PassOutcome<P>> {
    let g = devices.len();
    let mut log = Vec::with_capacity(g * g);
    let mut sent = 0u64;
    for round in 0..g {
        for (i, (device, env)) in devices.iter_mut().zip(slots.iter_mut()).enumerate() {
            check_envelope(env, i, round, opts.start_offset, g)?;
            let hop = Hop {
                device: i,
                origin: env.origin,
                round,
                devices: g,
            };
            let (work, report) = metered_step(program, device, env, hop)?;
            let (shared_sent, carry_sent) = if g > 1 {
                (program.shared_elements(&env.shared), program.carry_elements(&env.carry))
            } else {
                (0, 0)
            };
            log.push(StepRecord {
                device: i,
                round,
                origin: env.origin,
                work,
                meter: report,
                shared_sent,
                carry_sent,
            });
        }
        if g > 1 {
            // device i sends to (i + 1) mod g
            slots.rotate_right(1);
            for env in &mut slots {
                env.hops += 1;
            }
            sent += g as u64;
        }
    }
    log.sort_by_key(|r| (r.device, r.round));
    let payloads = finish(slots, opts.start_offset, g)?;
    Ok(PassOutcome {
        devices,
        payloads,
        log,
        messages_sent: sent,
        messages_received: sent,
    })
}

fn finish<S, C>(slots: Vec<Envelope<S, C>>, offset: usize, g: usize) -> Result<Vec<(Arc<S>, C)>> {
    let mut out: Vec<Option<(Arc<S>, C)>> = (0..g).map(|_| None).collect();
    for (i, env) in slots.into_iter().enumerate() {
        let hops_needed = if g > 1 { g } else { 0 };
        if env.hops != hops_needed || (env.origin + offset) % g != i {
            return Err(Error::RingDesync {
                device: i,
                detail: format!(
                    "payload of origin {} ended after {} hops at device {i}",
                    env.origin, env.hops
                ),
            });
        }
        out[env.origin] = Some((env.shared, env.carry));
    }
    Ok(out.into_iter().map(|p| p.expect("conserved payloads")).collect())
}

enum Msg<S, C> {
    Shared { origin: usize, hops: usize, shared: Arc<S> },
    Carry { origin: usize, hops: usize, carry: C },
    Whole(Envelope<S, C>),
}

const RECV_TIMEOUT: Duration = Duration::from_secs(60);

struct Worker<'a, P: RingProgram> {
    program: &'a P,
    index: usize,
    g: usize,
    opts: ExecOptions,
    tx: Sender<Msg<P::Shared, P::Carry>>,
    rx: Receiver<Msg<P::Shared, P::Carry>>,
    rng: Option<(SplitMix64, u64)>,
    sent: u64,
    received: u64,
}

impl<P: RingProgram> Worker<'_, P> {
    fn pause(&mut self) {
        if let Some((rng, max)) = self.rng.as_mut() {
            let us = rng.gen_range(0..=*max);
            if us > 0 {
                std::thread::sleep(Duration::from_micros(us));
            }
        }
    }

    fn send(&mut self, msg: Msg<P::Shared, P::Carry>) -> Result<()> {
        self.pause();
        self.sent += 1;
        self.tx.send(msg).map_err(|_| Error::RingDesync {
            device: self.index,
            detail: "successor hung up".into(),
        })
    }

    fn recv(&mut self) -> Result<Msg<P::Shared, P::Carry>> {
        let msg = self.rx.recv_timeout(RECV_TIMEOUT).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Deadlock {
                idle: RECV_TIMEOUT.as_secs_f64(),
                horizon: RECV_TIMEOUT.as_secs_f64(),
                detail: format!("device {} waited on its predecessor", self.index),
            },
            RecvTimeoutError::Disconnected => Error::RingDesync {
                device: self.index,
                detail: "predecessor hung up".into(),
            },
        })?;
        self.received += 1;
        Ok(msg)
    }

    fn desync(&self, what: &str) -> Error {
        Error::RingDesync {
            device: self.index,
            detail: format!("unexpected {what} message"),
        }
    }

    /// Receives the payload for the next round.
    fn receive_payload(&mut self) -> Result<Envelope<P::Shared, P::Carry>> {
        match self.opts.overlap {
            Overlap::None => match self.recv()? {
                Msg::Whole(env) => Ok(env),
                _ => Err(self.desync("partial")),
            },
            Overlap::DoubleBuffer => {
                let (origin, hops, shared) = match self.recv()? {
                    Msg::Shared { origin, hops, shared } => (origin, hops, shared),
                    _ => return Err(self.desync("out-of-order")),
                };
                match self.recv()? {
                    Msg::Carry { origin: o, hops: h, carry } if o == origin && h == hops => Ok(Envelope {
                        origin,
                        hops,
                        shared,
                        carry,
                    }),
                    _ => Err(self.desync("mismatched carry")),
                }
            }
        }
    }

    fn run(
        mut self,
        mut device: P::Device,
        env: Envelope<P::Shared, P::Carry>,
    ) -> Result<(P::Device, Envelope<P::Shared, P::Carry>, Vec<StepRecord>, u64, u64)> {
        let g = self.g;
        let ring = g > 1;
        let mut log = Vec::with_capacity(g);
        let mut held = Some(env);
        for round in 0..g {
            let mut env = match held.take() {
                Some(env) => env,
                None => self.receive_payload()?,
            };
            check_envelope(&env, self.index, round, self.opts.start_offset, g)?;
            if ring && self.opts.overlap == Overlap::DoubleBuffer {
                self.send(Msg::Shared {
                    origin: env.origin,
                    hops: env.hops + 1,
                    shared: Arc::clone(&env.shared),
                })?;
            }
            self.pause();
            let hop = Hop {
                device: self.index,
                origin: env.origin,
                round,
                devices: g,
            };
            let (work, report) = metered_step(self.program, &mut device, &mut env, hop)?;
            let (shared_sent, carry_sent) = if ring {
                (self.program.shared_elements(&env.shared), self.program.carry_elements(&env.carry))
            } else {
                (0, 0)
            };
            log.push(StepRecord {
                device: self.index,
                round,
                origin: env.origin,
                work,
                meter: report,
                shared_sent,
                carry_sent,
            });
            if !ring {
                held = Some(env);
                continue;
            }
            let hops = env.hops + 1;
            match self.opts.overlap {
                Overlap::None => self.send(Msg::Whole(Envelope { hops, ..env }))?,
                Overlap::DoubleBuffer => self.send(Msg::Carry {
                    origin: env.origin,
                    hops,
                    carry: env.carry,
                })?,
            }
        }
        // The last send brings each payload back to where it started.
        let home = match held {
            Some(env) => env,
            None => self.receive_payload()?,
        };
        Ok((device, home, log, self.sent, self.received))
    }
}

fn run_threaded<P: RingProgram>(
    program: &P,
    devices: Vec<P::Device>,
    initial: Vec<Envelope<P::Shared, P::Carry>>,
    opts: &ExecOptions,
    jitter: Option<Jitter>,
) -> Result<PassOutcome<P>> {
    let g = devices.len();
    // Channel i carries device i -> device (i + 1) mod g; two slots model the
    // staging buffer.
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..g).map(|_| bounded(2)).unzip();
    let mut rxs: Vec<Option<Receiver<_>>> = rxs.into_iter().map(Some).collect();
    let results = std::thread::scope(|scope| {
        let handles: Vec<_> = devices
            .into_iter()
            .zip(initial)
            .enumerate()
            .map(|(i, (device, env))| {
                let worker = Worker {
                    program,
                    index: i,
                    g,
                    opts: *opts,
                    tx: txs[i].clone(),
                    rx: rxs[(i + g - 1) % g].take().expect("one receiver per worker"),
                    rng: jitter.map(|j| {
                        (
                            SplitMix64::seed_from_u64(crate::rng::substream(j.seed, i as u64)),
                            j.max_micros,
                        )
                    }),
                    sent: 0,
                    received: 0,
                };
                std::thread::Builder::new()
                    .name(format!("device-{i}"))
                    .spawn_scoped(scope, move || worker.run(device, env))
                    .expect("spawn device worker")
            })
            .collect();
        drop(txs);
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidArgument("device worker panicked".into()))))
            .collect::<Vec<_>>()
    });
    let mut devices = Vec::with_capacity(g);
    let mut slots = Vec::with_capacity(g);
    let mut log = Vec::with_capacity(g * g);
    let (mut sent, mut received) = (0, 0);
    // Report the root cause rather than a neighbor's hang-up.
    let mut first_err = None;
    for r in results {
        match r {
            Ok((d, env, l, s, rcv)) => {
                devices.push(d);
                slots.push(env);
                log.extend(l);
                sent += s;
                received += rcv;
            }
            Err(e) => {
                let is_hangup = matches!(&e, Error::RingDesync { detail, .. } if detail.contains("hung up"));
                match &first_err {
                    None => first_err = Some(e),
                    Some(Error::RingDesync { detail, .. }) if detail.contains("hung up") && !is_hangup => {
                        first_err = Some(e)
                    }
                    _ => {}
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    if sent != received {
        return Err(Error::RingDesync {
            device: 0,
            detail: format!("{sent} messages sent but {received} received"),
        });
    }
    log.sort_by_key(|r| (r.device, r.round));
    let payloads = finish(slots, opts.start_offset, g)?;
    Ok(PassOutcome {
        devices,
        payloads,
        log,
        messages_sent: sent,
        messages_received: received,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicBool, Ordering};

    /// Each device appends `(device, origin)` to its history and to the
    /// traveling carry.
    struct Tracer {
        fail_at: Option<(usize, usize)>,
        failed: AtomicBool,
    }

    impl RingProgram for Tracer {
        type Device = Vec<usize>;
        type Shared = usize;
        type Carry = Vec<usize>;

        fn shared_elements(&self, _: &usize) -> u64 {
            3
        }
        fn carry_elements(&self, c: &Vec<usize>) -> u64 {
            c.len() as u64
        }
        fn step(&self, device: &mut Vec<usize>, shared: &usize, carry: &mut Vec<usize>, hop: Hop) -> Result<StepWork> {
            if self.fail_at == Some((hop.device, hop.round)) {
                self.failed.store(true, Ordering::SeqCst);
                return Err(Error::InvalidArgument("injected".into()));
            }
            assert_eq!(*shared, hop.origin);
            device.push(hop.origin);
            carry.push(hop.device);
            Ok(StepWork::default())
        }
    }

    fn tracer() -> Tracer {
        Tracer {
            fail_at: None,
            failed: AtomicBool::new(false),
        }
    }

    fn run(g: usize, opts: ExecOptions) -> PassOutcome<Tracer> {
        run_pass(
            &tracer(),
            vec![Vec::new(); g],
            (0..g).map(|o| (o, Vec::new())).collect(),
            &opts,
        )
        .unwrap()
    }

    fn all_opts() -> Vec<ExecOptions> {
        let mut v = Vec::new();
        for executor in [
            Executor::LockStep,
            Executor::Threaded { jitter: None },
            Executor::Threaded {
                jitter: Some(Jitter { seed: 3, max_micros: 200 }),
            },
        ] {
            for overlap in [Overlap::None, Overlap::DoubleBuffer] {
                for start_offset in [0, 1] {
                    v.push(ExecOptions {
                        executor,
                        overlap,
                        start_offset,
                    });
                }
            }
        }
        v
    }

    #[test]
    fn every_payload_visits_every_device_once() {
        for g in [1, 2, 3, 5] {
            for opts in all_opts() {
                let out = run(g, opts);
                for (i, hist) in out.devices.iter().enumerate() {
                    let mut seen = hist.clone();
                    seen.sort_unstable();
                    assert_eq!(seen, (0..g).collect::<Vec<_>>());
                    // ring order: origin decreases by one each round
                    for (r, &o) in hist.iter().enumerate() {
                        assert_eq!(o, expected_origin(i, r, opts.start_offset, g));
                    }
                }
                for (origin, (shared, visits)) in out.payloads.iter().enumerate() {
                    assert_eq!(**shared, origin);
                    let mut v = visits.clone();
                    v.sort_unstable();
                    assert_eq!(v, (0..g).collect::<Vec<_>>());
                }
                let expected_msgs = if g > 1 {
                    match (opts.executor, opts.overlap) {
                        (Executor::Threaded { .. }, Overlap::DoubleBuffer) => 2 * g * g,
                        _ => g * g,
                    }
                } else {
                    0
                };
                assert_eq!(out.messages_sent, expected_msgs as u64, "{opts:?}");
                assert_eq!(out.messages_sent, out.messages_received);
            }
        }
    }

    #[test]
    fn log_counts_sends() {
        let out = run(4, ExecOptions::default());
        assert_eq!(out.log.len(), 16);
        assert!(out.log.iter().all(|r| r.shared_sent == 3));
        let single = run(1, ExecOptions::default());
        assert_eq!(single.log[0].shared_sent, 0);
    }

    #[test]
    fn step_error_propagates_without_hanging() {
        for executor in [Executor::LockStep, Executor::Threaded { jitter: None }] {
            for overlap in [Overlap::None, Overlap::DoubleBuffer] {
                let program = Tracer {
                    fail_at: Some((2, 1)),
                    failed: AtomicBool::new(false),
                };
                let res = run_pass(
                    &program,
                    vec![Vec::new(); 4],
                    (0..4).map(|o| (o, Vec::new())).collect(),
                    &ExecOptions {
                        executor,
                        overlap,
                        start_offset: 0,
                    },
                );
                match res {
                    Err(Error::InvalidArgument(msg)) => assert_eq!(msg, "injected"),
                    Err(other) => panic!("unexpected error {other}"),
                    Ok(_) => panic!("expected failure"),
                }
                assert!(program.failed.load(Ordering::SeqCst));
            }
        }
    }

    #[test]
    fn payload_count_mismatch_is_fatal() {
        let res = run_pass(&tracer(), vec![Vec::new(); 3], vec![(0, Vec::new())], &ExecOptions::default());
        assert!(matches!(res, Err(Error::RingDesync { .. })));
    }
}
