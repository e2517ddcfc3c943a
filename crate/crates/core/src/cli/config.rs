//! Run configuration: a JSON file overlaid with command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::local::{BlockMask, TileSpec};
use crate::sim::engine::Overlap;

/// A rejected configuration; the message names the violated constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    /// Ring with tiled local kernels.
    #[default]
    Burst,
    /// Ring with untiled local kernels.
    BurstNoLao,
    /// Two-round ring that stores the full score rows.
    RingReference,
    /// Single-device dense attention.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExecutorKind {
    #[default]
    LockStep,
    Threaded,
}

/// `none`, `causal`, or a path to a block-mask JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum MaskSpec {
    #[default]
    None,
    Causal,
    File(PathBuf),
}

impl FromStr for MaskSpec {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "none" | "" => MaskSpec::None,
            "causal" => MaskSpec::Causal,
            path => MaskSpec::File(PathBuf::from(path)),
        })
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::None => f.write_str("none"),
            MaskSpec::Causal => f.write_str("causal"),
            MaskSpec::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl Serialize for MaskSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaskSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

impl MaskSpec {
    pub fn load(&self) -> Result<Option<BlockMask>, ConfigError> {
        match self {
            MaskSpec::None => Ok(None),
            MaskSpec::Causal => Ok(Some(BlockMask::causal())),
            MaskSpec::File(p) => BlockMask::load(p)
                .map(Some)
                .map_err(|e| bad(format!("mask file {}: {e}", p.display()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub forward: f64,
    pub backward: f64,
}

impl Tolerances {
    pub fn for_precision(p: Precision) -> Self {
        match p {
            Precision::Double => Self {
                forward: 1e-10,
                backward: 1e-8,
            },
            Precision::Single => Self {
                forward: 1e-5,
                backward: 1e-4,
            },
        }
    }
}

/// Largest `B · Z · N²` the simulator agrees to hold.
pub const MAX_SCORE_ELEMENTS: u64 = 1 << 26;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seq: usize,
    pub dim: usize,
    pub heads: usize,
    pub batch: usize,
    pub gpus: usize,
    pub seed: u64,
    pub precision: Precision,
    pub mode: Mode,
    pub mask: MaskSpec,
    /// Square tile length; derived from `sram_bytes` when absent.
    pub tiles: Option<usize>,
    pub sram_bytes: usize,
    pub overlap: Overlap,
    pub executor: ExecutorKind,
    /// Pad a sequence that does not split evenly.
    pub pad: bool,
    /// Bytes per unit of virtual time.
    pub bandwidth: f64,
    /// Flops per unit of virtual time.
    pub compute_rate: f64,
    /// Defaults by precision.
    pub tolerances: Option<Tolerances>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seq: 16,
            dim: 4,
            heads: 1,
            batch: 1,
            gpus: 4,
            seed: 0,
            precision: Precision::Double,
            mode: Mode::Burst,
            mask: MaskSpec::None,
            tiles: None,
            sram_bytes: 1024,
            overlap: Overlap::None,
            executor: ExecutorKind::LockStep,
            pad: false,
            bandwidth: 1.0,
            compute_rate: 1.0,
            tolerances: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| bad(format!("config {}: {e}", path.display())))
    }

    pub fn bytes_per_element(&self) -> usize {
        match self.precision {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tolerances.unwrap_or(Tolerances::for_precision(self.precision))
    }

    pub fn head_count(&self) -> usize {
        self.batch * self.heads
    }

    /// Devices actually used: dense mode runs on one.
    pub fn devices(&self) -> usize {
        if self.mode == Mode::Dense {
            1
        } else {
            self.gpus
        }
    }

    pub fn part_len(&self) -> usize {
        self.seq.div_ceil(self.devices().max(1))
    }

    /// Tile geometry of the local kernels for this mode.
    pub fn tile_spec(&self) -> Option<TileSpec> {
        match self.mode {
            Mode::Burst => Some(match self.tiles {
                Some(t) => TileSpec::square(t.min(self.part_len())).expect("validated"),
                None => TileSpec::from_sram(self.sram_bytes, self.dim, self.bytes_per_element(), self.part_len())
                    .expect("validated"),
            }),
            _ => None,
        }
    }

    /// Checks every constraint without allocating tensors.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("seq", self.seq),
            ("dim", self.dim),
            ("heads", self.heads),
            ("batch", self.batch),
            ("gpus", self.gpus),
        ] {
            if v == 0 {
                return Err(bad(format!("{name} must be at least 1")));
            }
        }
        if self.gpus > self.seq {
            return Err(bad(format!(
                "gpus ({}) must not exceed seq ({}): every device needs a token",
                self.gpus, self.seq
            )));
        }
        if self.mode != Mode::Dense && !self.seq.is_multiple_of(self.gpus) && !self.pad {
            return Err(bad(format!(
                "seq ({}) must be divisible by gpus ({}) unless pad is enabled",
                self.seq, self.gpus
            )));
        }
        if self.tiles == Some(0) {
            return Err(bad("tiles must be at least 1"));
        }
        if self.tiles.is_some() && self.mode != Mode::Burst {
            return Err(bad("tiles only applies to mode burst"));
        }
        if self.sram_bytes == 0 {
            return Err(bad("sram_bytes must be positive"));
        }
        for (name, v) in [("bandwidth", self.bandwidth), ("compute_rate", self.compute_rate)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("{name} must be positive and finite")));
            }
        }
        if let Some(t) = self.tolerances {
            if !(t.forward > 0.0 && t.backward > 0.0) {
                return Err(bad("tolerances must be positive"));
            }
        }
        let scores = (self.head_count() as u64)
            .saturating_mul(self.seq as u64)
            .saturating_mul(self.seq as u64);
        if scores > MAX_SCORE_ELEMENTS {
            return Err(bad(format!(
                "batch x heads x seq^2 = {scores} exceeds the limit of {MAX_SCORE_ELEMENTS}"
            )));
        }
        if let Some(mask) = self.mask.load()? {
            mask.validate(self.seq).map_err(|e| bad(format!("mask: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        let t = RunConfig::default().tile_spec().unwrap();
        // 1024 bytes / (4 · 4 · 8) = 8 tokens, clamped to N/G = 4
        assert_eq!(t.tile_rows, 4);
    }

    #[test]
    fn violations_name_the_constraint() {
        let cases = [
            (RunConfig { seq: 0, ..Default::default() }, "seq"),
            (RunConfig { gpus: 32, ..Default::default() }, "gpus"),
            (RunConfig { seq: 10, ..Default::default() }, "divisible"),
            (RunConfig { tiles: Some(0), ..Default::default() }, "tiles"),
            (
                RunConfig {
                    mode: Mode::RingReference,
                    tiles: Some(2),
                    ..Default::default()
                },
                "tiles",
            ),
            (RunConfig { bandwidth: 0.0, ..Default::default() }, "bandwidth"),
            (RunConfig { seq: 1 << 14, gpus: 1, ..Default::default() }, "limit"),
            (
                RunConfig {
                    mask: MaskSpec::File("/nonexistent/mask.json".into()),
                    ..Default::default()
                },
                "mask",
            ),
        ];
        for (cfg, word) in cases {
            let err = cfg.validate().unwrap_err();
            assert!(err.0.contains(word), "{err} should mention {word}");
        }
        assert!(RunConfig { seq: 10, pad: true, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let cfg = RunConfig {
            mask: MaskSpec::Causal,
            mode: Mode::RingReference,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"mask\":\"causal\""));
        assert!(text.contains("\"mode\":\"ring_reference\""));
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"gpus": 2}"#).unwrap();
        assert_eq!(partial.gpus, 2);
        assert_eq!(partial.seq, 16);
        assert!(serde_json::from_str::<RunConfig>(r#"{"gpu": 2}"#).is_err());
    }
}
