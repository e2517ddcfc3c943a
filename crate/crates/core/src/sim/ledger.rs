//! Communication and memory accounting for ring passes.

use serde::{Deserialize, Serialize};

use super::engine::StepRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Forward,
    Backward,
}

/// Counters for one device.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceCounters {
    pub elements_sent_forward: u64,
    pub elements_sent_backward: u64,
    pub messages_sent: u64,
    pub flops: u64,
    pub hbm_accesses_modeled: u64,
    pub tiles_computed: u64,
    pub tiles_skipped: u64,
    pub hops_skipped: u64,
    /// Largest number of intermediate elements alive during one step.
    pub peak_intermediate_elements: u64,
    /// Resident tensors plus `peak_intermediate_elements`.
    pub peak_activation_elements: u64,
}

/// Per-run counters. Element counts exclude payload metadata (origin,
/// hop count), so they can be compared with the analytical formulas.
///
/// The headline `elements_sent_*` fields are per device: what one device
/// pushes to its successor over a pass. All devices send the same amount,
/// so the cluster-wide volume is `G` times larger (see [`Self::cluster_elements_sent`]).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub elements_sent_forward: u64,
    pub elements_sent_backward: u64,
    pub ring_steps: u64,
    pub hbm_accesses_modeled: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub per_device: Vec<DeviceCounters>,
}

impl CommLedger {
    pub fn new(devices: usize) -> Self {
        Self {
            per_device: vec![DeviceCounters::default(); devices],
            ..Self::default()
        }
    }

    pub fn devices(&self) -> usize {
        self.per_device.len()
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.devices());
    }

    /// Adds the steps of one finished pass. `resident` holds the elements
    /// each device keeps in memory for the whole pass (inputs, outputs and
    /// both payload buffers).
    pub fn record_pass(&mut self, pass: Pass, log: &[StepRecord], resident: &[u64], messages: (u64, u64)) {
        self.record_rounds(pass, 1, log, resident, messages);
    }

    /// Like [`record_pass`](Self::record_pass) for a pass made of `rounds`
    /// full circles.
    pub fn record_rounds(&mut self, pass: Pass, rounds: u64, log: &[StepRecord], resident: &[u64], messages: (u64, u64)) {
        let g = self.devices();
        if g > 1 {
            self.ring_steps += rounds * g as u64;
        }
        for rec in log {
            let dev = &mut self.per_device[rec.device];
            let sent = rec.shared_sent + rec.carry_sent;
            match pass {
                Pass::Forward => dev.elements_sent_forward += sent,
                Pass::Backward => dev.elements_sent_backward += sent,
            }
            if sent > 0 {
                dev.messages_sent += 1;
            }
            let s = &rec.work.stats;
            dev.flops += s.flops;
            dev.hbm_accesses_modeled += s.hbm_accesses;
            dev.tiles_computed += s.tiles_computed;
            dev.tiles_skipped += s.tiles_skipped;
            dev.hops_skipped += u64::from(rec.work.skipped);
            let peak = rec.meter.peak_live_elements as u64;
            dev.peak_intermediate_elements = dev.peak_intermediate_elements.max(peak);
            let res = resident.get(rec.device).copied().unwrap_or(0);
            dev.peak_activation_elements = dev.peak_activation_elements.max(res + peak);
        }
        self.messages_sent += messages.0;
        self.messages_received += messages.1;
        self.refresh();
    }

    fn refresh(&mut self) {
        let max = |f: fn(&DeviceCounters) -> u64| self.per_device.iter().map(f).max().unwrap_or(0);
        self.elements_sent_forward = max(|d| d.elements_sent_forward);
        self.elements_sent_backward = max(|d| d.elements_sent_backward);
        self.hbm_accesses_modeled = max(|d| d.hbm_accesses_modeled);
    }

    /// Total elements moved by all devices in both passes.
    pub fn cluster_elements_sent(&self) -> u64 {
        self.per_device
            .iter()
            .map(|d| d.elements_sent_forward + d.elements_sent_backward)
            .sum()
    }

    pub fn peak_activation_elements(&self) -> Vec<u64> {
        self.per_device.iter().map(|d| d.peak_activation_elements).collect()
    }

    pub fn peak_intermediate_elements(&self) -> u64 {
        self.per_device
            .iter()
            .map(|d| d.peak_intermediate_elements)
            .max()
            .unwrap_or(0)
    }

    /// Flat JSON object for export.
    pub fn to_flat_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("elements_sent_forward".into(), self.elements_sent_forward.into());
        map.insert("elements_sent_backward".into(), self.elements_sent_backward.into());
        map.insert("ring_steps".into(), self.ring_steps.into());
        map.insert("hbm_accesses_modeled".into(), self.hbm_accesses_modeled.into());
        map.insert("messages_sent".into(), self.messages_sent.into());
        map.insert("messages_received".into(), self.messages_received.into());
        map.insert("cluster_elements_sent".into(), self.cluster_elements_sent().into());
        map.insert("peak_intermediate_elements".into(), self.peak_intermediate_elements().into());
        for (i, d) in self.per_device.iter().enumerate() {
            map.insert(format!("device{i}_peak_activation_elements"), d.peak_activation_elements.into());
        }
        serde_json::Value::Object(map)
    }
}
