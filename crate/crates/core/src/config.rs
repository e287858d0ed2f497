//! Run configuration: one file describing the source, both nodes and the
//! analysis settings.
//!
//! Files are TOML (nested sections of `key = value`); JSON with the same
//! structure is accepted as well. Every random stream derives from the
//! top-level `seed`; `rng_seed` fields inside sections are overwritten when a
//! run starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coincidence::DEFAULT_WINDOW_PS;
use crate::link::{ClockModel, DetectorConfig, LinkConfig};
use crate::rate::Weighting;
use crate::source::SourceConfig;
use crate::sync::SyncParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), reason: reason.into() }
}

/// One endpoint: the fiber leading to it, its detectors and its clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub clock: ClockModel,
}

fn default_window() -> u64 {
    DEFAULT_WINDOW_PS
}
fn default_offsets() -> usize {
    10
}
fn default_settings() -> Vec<[f64; 2]> {
    crate::bell::CANONICAL_SETTINGS_DEG.iter().map(|&(a, b)| [a, b]).collect()
}
fn default_setting_duration() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Full coincidence window.
    #[serde(default = "default_window")]
    pub window_ps: u64,
    /// Number of displaced windows averaged for accidentals.
    #[serde(default = "default_offsets")]
    pub accidental_offsets: usize,
    #[serde(default)]
    pub sync: SyncParams,
    /// Include held (flagged) blocks in the headline Allan value.
    #[serde(default)]
    pub include_flagged: bool,
    /// Analyzer angles `[θ_A, θ_B]` in degrees for the four CHSH terms.
    #[serde(default = "default_settings")]
    pub settings_deg: Vec<[f64; 2]>,
    /// Acquisition time per CHSH setting.
    #[serde(default = "default_setting_duration")]
    pub setting_duration_s: f64,
    /// Analyzer angles `[θ_A, θ_B]` in degrees for `simulate`.
    #[serde(default)]
    pub analyzer_deg: [f64; 2],
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            window_ps: default_window(),
            accidental_offsets: default_offsets(),
            sync: SyncParams::default(),
            include_flagged: false,
            settings_deg: default_settings(),
            setting_duration_s: default_setting_duration(),
            analyzer_deg: [0.0, 0.0],
        }
    }
}

fn default_powers() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0]
}
fn default_point_duration() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_powers")]
    pub powers_mw: Vec<f64>,
    #[serde(default = "default_point_duration")]
    pub point_duration_s: f64,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub non_negative: bool,
    /// Acquisition time per channel pair in a spectrum scan.
    #[serde(default = "default_spectrum_duration")]
    pub spectrum_duration_s: f64,
}

fn default_spectrum_duration() -> f64 {
    1.0
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            powers_mw: default_powers(),
            point_duration_s: default_point_duration(),
            weighting: Weighting::default(),
            non_negative: false,
            spectrum_duration_s: default_spectrum_duration(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Complete description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Channel pair routed to the two nodes.
    pub distribution_pair: u32,
    pub source: SourceConfig,
    /// Local node, receives the idler photons.
    pub alice: NodeConfig,
    /// Remote node, receives the signal photons.
    pub bob: NodeConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Reads a TOML or JSON file. JSON is recognised by a `.json` extension
    /// or a leading `{`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        let cfg = Self::parse(&text, json).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, String> {
        if json {
            serde_json::from_str(text).map_err(|e| e.to_string())
        } else {
            toml::from_str(text).map_err(|e| e.to_string())
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every value and names the first offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(invalid("duration_s", "must be non-negative and finite"));
        }
        self.source
            .validate()
            .map_err(|e| invalid("source", e.to_string()))?;
        if self.source.pair(self.distribution_pair).is_none() {
            return Err(invalid(
                "distribution_pair",
                format!("no channel pair with index {}", self.distribution_pair),
            ));
        }
        for (name, node) in [("alice", &self.alice), ("bob", &self.bob)] {
            node.link
                .validate()
                .map_err(|e| invalid(format!("{name}.link"), e.to_string()))?;
            node.detector
                .validate()
                .map_err(|e| invalid(format!("{name}.detector"), e.to_string()))?;
            node.clock
                .validate()
                .map_err(|e| invalid(format!("{name}.clock"), e.to_string()))?;
            if node.detector.channels < 2 {
                return Err(invalid(format!("{name}.detector.channels"), "need two analyzer ports"));
            }
        }
        if self.alice.detector.resolution_ps != self.bob.detector.resolution_ps {
            return Err(invalid("bob.detector.resolution_ps", "both nodes must share one tagger resolution"));
        }
        let a = &self.analysis;
        if a.window_ps == 0 {
            return Err(invalid("analysis.window_ps", "must be positive"));
        }
        if a.accidental_offsets == 0 {
            return Err(invalid("analysis.accidental_offsets", "must be at least 1"));
        }
        a.sync
            .validate()
            .map_err(|e| invalid("analysis.sync", e.to_string()))?;
        if a.settings_deg.len() != 4 {
            return Err(invalid("analysis.settings_deg", "exactly four [θ_A, θ_B] pairs are required"));
        }
        if a.settings_deg.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("analysis.settings_deg", "angles must be finite"));
        }
        if !(a.setting_duration_s > 0.0 && a.setting_duration_s.is_finite()) {
            return Err(invalid("analysis.setting_duration_s", "must be positive and finite"));
        }
        let s = &self.sweep;
        if s.powers_mw.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(invalid("sweep.powers_mw", "powers must be positive and finite"));
        }
        if !(s.point_duration_s > 0.0 && s.point_duration_s.is_finite()) {
            return Err(invalid("sweep.point_duration_s", "must be positive and finite"));
        }
        if !(s.spectrum_duration_s > 0.0 && s.spectrum_duration_s.is_finite()) {
            return Err(invalid("sweep.spectrum_duration_s", "must be positive and finite"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn resolution_ps(&self) -> u64 {
        self.alice.detector.resolution_ps
    }
}

/// SHA-256 of the compact JSON serialization, as lowercase hex.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Annotated reference of every configuration key.
pub const SCHEMA: &str = r#"# pairlink run configuration (TOML; JSON with the same layout also works)

seed = 1                      # master seed, every random stream derives from it
duration_s = 10.0             # simulated acquisition time
output_dir = "out"            # default destination for outputs
distribution_pair = 5         # channel pair sent to the two nodes

[source]
pump_power_mw = 1.0           # on-chip pump power P
visibility = 0.952            # two-photon interference visibility V
phase_theta = 0.0             # phase of the |VV> term, rad (after compensation)
single_nanowire = false       # pump one nanowire: doubles the quadratic term

[[source.pairs]]              # one table per channel pair
index = 5                     # pair number counted from the pump
detuning_ghz = 500.0          # signal/idler offset from the pump
a = 5.0e4                     # pair generation, 1/(s mW^2)
b_s = 8.0e3                   # linear noise, signal arm, 1/(s mW)
b_i = 1.0e4                   # linear noise, idler arm, 1/(s mW)
c_s = 0.0                     # constant background, signal arm, 1/s
c_i = 0.0                     # constant background, idler arm, 1/s

[alice.link]                  # fiber to the local node
length_km = 0.0
delay_us_per_km = 5.0
loss_db_per_km = 0.2
extra_loss_db = 3.2           # insertion losses outside the fiber span

[alice.detector]
efficiency = 0.8
jitter_sigma_ps = 96.7        # Gaussian timing jitter per detection
dark_rate_hz = 100.0          # per detector channel
resolution_ps = 156           # tagger bin, shared by both nodes
channels = 2                  # analyzer output ports

[alice.clock]
initial_offset_ps = 0
linear_rate = 0.0             # s/s
random_walk_sigma_ps_per_sqrt_s = 0.0
pps_jitter_halfwidth_ps = 0.0 # uniform per-second 1PPS edge error

[bob.link]                    # fiber to the remote node
length_km = 30.245
delay_us_per_km = 5.0
loss_db_per_km = 0.2
extra_loss_db = 1.0

[bob.detector]
efficiency = 0.8
jitter_sigma_ps = 96.7
dark_rate_hz = 100.0
resolution_ps = 156
channels = 2

[bob.clock]
initial_offset_ps = 0
linear_rate = 2.0e-12
random_walk_sigma_ps_per_sqrt_s = 20.0
pps_jitter_halfwidth_ps = 3000.0

[analysis]
window_ps = 1000              # full coincidence window
accidental_offsets = 10       # displaced windows averaged for accidentals
include_flagged = false       # headline Allan value includes held blocks
settings_deg = [[0.0, 22.5], [0.0, 67.5], [45.0, 22.5], [45.0, 67.5]]
setting_duration_s = 2.0      # acquisition time per CHSH setting
analyzer_deg = [0.0, 0.0]     # analyzer angles used by `simulate`

[analysis.sync]
search_range_ps = 1000000000  # initial offset scan covers +/- this
coarse_bin_ps = 1000          # initial coarse bin width
refine_halfwidth_ps = 50000   # fine scan half-width around the coarse peak
fine_range_ps = 10000         # per-block tracking half-width
max_consecutive_failures = 5  # more peakless blocks in a row abort sync
min_peak_counts = 10.0        # minimum peak excess for a locked block

[sweep]
powers_mw = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0]
point_duration_s = 10.0
weighting = "unweighted"      # or "poisson"
non_negative = false          # constrain a, b, c >= 0
spectrum_duration_s = 1.0     # acquisition per channel pair in a spectrum scan
"#;
