//! Simulated devices, ring transport and communication accounting.

pub mod engine;
pub mod ledger;
pub mod schedule;

pub use engine::{ExecOptions, Executor, Hop, Jitter, Overlap, PassOutcome, RingProgram, StepRecord, StepWork};
pub use ledger::CommLedger;
