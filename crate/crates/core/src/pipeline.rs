//! End-to-end runs built from a [`RunConfig`]: simulated acquisitions,
//! synchronization, CHSH experiments, power sweeps and spectrum scans.
//!
//! Acquisitions are generated one second at a time. Each second draws from
//! its own random streams, so results do not depend on how seconds are
//! scheduled across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bell::{chsh_s, expectation, ChshResult, Expectation, SettingCounts};
use crate::coincidence::{count_coincidences, measure_coincidences, CoincidenceResult};
use crate::config::{NodeConfig, RunConfig};
use crate::error::Result;
use crate::link::{darks_into, detect_into, propagate, ClockModel, ClockTrajectory};
use crate::rate::{spectrum_scan, PowerSweep, RateKind, SpectrumRow, SpectrumTable, SweepPoint};
use crate::rng::{self, label};
use crate::source::{generate_window, split_arms, AnalyzerSetting, Arm, SourceConfig};
use crate::sync::{apply_correction, find_initial_offset, track_drift, InitialOffset, SyncParams, SyncResult};
use crate::tagstream::{TagStream, TimeTag, PS_PER_S};

/// Node labels for seed derivation.
pub const ALICE: u64 = 0xA11CE;
pub const BOB: u64 = 0xB0B;

/// Run labels separating independent acquisitions under one master seed.
pub mod run {
    pub const MAIN: u64 = 0;
    pub const CHSH: u64 = 0x100;
    pub const SWEEP: u64 = 0x200;
    pub const SPECTRUM: u64 = 0x300;
}

/// Node clock with its seed derived from the master seed.
pub fn seeded_clock(cfg: &RunConfig, node: u64) -> ClockModel {
    let model = if node == ALICE { &cfg.alice.clock } else { &cfg.bob.clock };
    ClockModel {
        rng_seed: rng::derive_seed(cfg.seed, &[label::CLOCK_WALK, node]),
        ..model.clone()
    }
}

/// The distributed channel pair only, seeded for `run_label`.
pub fn seeded_source(cfg: &RunConfig, pair: u32, run_label: u64) -> SourceConfig {
    let mut src = cfg
        .source
        .only_pair(pair)
        .expect("validated config has the pair");
    src.rng_seed = rng::derive_seed(cfg.seed, &[label::SOURCE, run_label, pair as u64]);
    src
}

/// Tag streams of both nodes together with the injected truth.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub alice: TagStream,
    pub bob: TagStream,
    pub truth: Truth,
}

/// Quantities known only to the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Bob's fiber delay minus Alice's.
    pub injected_delay_ps: i64,
    /// Clock offsets at the start of every second.
    pub alice_clock_ps: Vec<f64>,
    pub bob_clock_ps: Vec<f64>,
}

impl Truth {
    /// The delay a perfect tracker would report for block `i`.
    pub fn expected_delay_ps(&self, i: usize) -> f64 {
        self.injected_delay_ps as f64 + self.bob_clock_ps[i] - self.alice_clock_ps[i]
    }
}

struct Node<'a> {
    id: u64,
    cfg: &'a NodeConfig,
    clock: &'a ClockTrajectory,
}

/// Generates `[0, duration_s)` second by second and detects idler photons at
/// `idler_node` and signal photons at `signal_node`.
fn acquire(
    seed: u64,
    src: &SourceConfig,
    setting: AnalyzerSetting,
    duration_s: f64,
    run_label: u64,
    idler_node: &Node<'_>,
    signal_node: &Node<'_>,
) -> Result<(Vec<TimeTag>, Vec<TimeTag>)> {
    src.validate()?;
    let chunks = duration_s.ceil() as u64;
    let parts: Vec<Result<(Vec<TimeTag>, Vec<TimeTag>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let start = c as f64 * PS_PER_S;
            let end = ((c + 1) as f64).min(duration_s) * PS_PER_S;
            let events = generate_window(src, start, end, c);
            let mut split_rng = rng::stream(seed, &[label::POLARIZATION, run_label, c]);
            let (idler, signal) = split_arms(&events, setting, src, &mut split_rng)?;
            let mut out = [Vec::new(), Vec::new()];
            for (slot, (node, photons)) in out.iter_mut().zip([(idler_node, idler), (signal_node, signal)]) {
                let mut link_rng = rng::stream(seed, &[label::LINK, node.id, run_label, c]);
                let arrived = propagate(&photons, &node.cfg.link, &mut link_rng);
                let mut det_rng = rng::stream(seed, &[label::DETECT, node.id, run_label, c]);
                slot.reserve(arrived.len());
                detect_into(&arrived, &node.cfg.detector, node.clock, &mut det_rng, slot);
                let mut dark_rng = rng::stream(seed, &[label::DARK, node.id, run_label, c]);
                darks_into(&node.cfg.detector, node.clock, start, end, &mut dark_rng, slot);
            }
            let [a, b] = out;
            Ok((a, b))
        })
        .collect();
    let mut idler = Vec::new();
    let mut signal = Vec::new();
    for part in parts {
        let (a, b) = part?;
        idler.extend(a);
        signal.extend(b);
    }
    Ok((idler, signal))
}

fn finish(tags: Vec<TimeTag>, resolution_ps: u64, node: &str, cfg: &RunConfig) -> Result<TagStream> {
    let mut s = TagStream::from_unsorted(tags, resolution_ps)?;
    s.metadata.insert("node".into(), node.into());
    s.metadata.insert("seed".into(), cfg.seed.to_string());
    s.metadata.insert("config_hash".into(), cfg.hash());
    Ok(s)
}

/// Simulates the two-node distribution of `cfg.distribution_pair` with fixed
/// analyzer angles.
pub fn simulate_nodes(
    cfg: &RunConfig,
    setting: AnalyzerSetting,
    duration_s: f64,
    run_label: u64,
) -> Result<Acquisition> {
    cfg.validate()?;
    let src = seeded_source(cfg, cfg.distribution_pair, run_label);
    let horizon = duration_s + 1.0;
    let alice_clock = ClockTrajectory::new(&seeded_clock(cfg, ALICE), horizon);
    let bob_clock = ClockTrajectory::new(&seeded_clock(cfg, BOB), horizon);
    let alice = Node { id: ALICE, cfg: &cfg.alice, clock: &alice_clock };
    let bob = Node { id: BOB, cfg: &cfg.bob, clock: &bob_clock };
    let (a, b) = acquire(cfg.seed, &src, setting, duration_s, run_label, &alice, &bob)?;
    let seconds = duration_s.ceil() as usize;
    Ok(Acquisition {
        alice: finish(a, cfg.resolution_ps(), "alice", cfg)?,
        bob: finish(b, cfg.resolution_ps(), "bob", cfg)?,
        truth: Truth {
            injected_delay_ps: cfg.bob.link.delay_ps() - cfg.alice.link.delay_ps(),
            alice_clock_ps: alice_clock.per_second(seconds),
            bob_clock_ps: bob_clock.per_second(seconds),
        },
    })
}

/// Local acquisition: both photons of each pair go through Alice's link,
/// detector and clock, as in a bench-top characterization.
pub fn simulate_local(cfg: &RunConfig, src: &SourceConfig, duration_s: f64, run_label: u64) -> Result<(TagStream, TagStream)> {
    let clock = ClockTrajectory::new(&seeded_clock(cfg, ALICE), duration_s + 1.0);
    let idler = Node { id: ALICE, cfg: &cfg.alice, clock: &clock };
    let signal = Node { id: BOB, cfg: &cfg.alice, clock: &clock };
    let (a, b) = acquire(cfg.seed, src, AnalyzerSetting::from_degrees(0.0, 0.0), duration_s, run_label, &idler, &signal)?;
    Ok((
        finish(a, cfg.resolution_ps(), "idler", cfg)?,
        finish(b, cfg.resolution_ps(), "signal", cfg)?,
    ))
}

/// Run metadata written next to simulated tag files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub duration_s: f64,
    pub distribution_pair: u32,
    pub analyzer_deg: [f64; 2],
    pub alice_tags: usize,
    pub bob_tags: usize,
    pub truth: Truth,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, acq: &Acquisition, analyzer_deg: [f64; 2], duration_s: f64) -> Self {
        Manifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            duration_s,
            distribution_pair: cfg.distribution_pair,
            analyzer_deg,
            alice_tags: acq.alice.len(),
            bob_tags: acq.bob.len(),
            truth: acq.truth.clone(),
        }
    }
}

/// Synchronization before and after correction.
#[derive(Debug, Clone)]
pub struct SyncReport {
    pub initial: InitialOffset,
    pub uncorrected: SyncResult,
    /// Tracking rerun on the corrected stream; its delays are the residuals.
    pub corrected: SyncResult,
    pub corrected_bob: TagStream,
    pub dropped_before_epoch: usize,
}

fn first_block(s: &TagStream) -> &[u64] {
    let end = s.times().partition_point(|&t| t < s.pps_period_ps());
    &s.times()[..end]
}

/// Initial offset, drift tracking, correction and residual tracking.
pub fn run_sync(cfg: &RunConfig, alice: &TagStream, bob: &TagStream) -> Result<SyncReport> {
    sync_streams(&cfg.analysis.sync, alice, bob)
}

/// [`run_sync`] with explicit parameters, for tag files without a run config.
pub fn sync_streams(params: &SyncParams, alice: &TagStream, bob: &TagStream) -> Result<SyncReport> {
    let initial = find_initial_offset(first_block(alice), first_block(bob), alice.resolution_ps(), params)?;
    let uncorrected = track_drift(alice, bob, initial.delay_ps, params)?;
    let c = apply_correction(bob, &uncorrected)?;
    let mut corrected = track_drift(alice, &c.stream, 0.0, params)?;
    corrected.correction_applied = true;
    Ok(SyncReport {
        initial,
        uncorrected,
        corrected,
        corrected_bob: c.stream,
        dropped_before_epoch: c.dropped_before_epoch,
    })
}

/// CAR at the fixed initial delay without correction and at zero delay after
/// correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCar {
    pub uncorrected: CoincidenceResult,
    pub corrected: CoincidenceResult,
}

impl DriftCar {
    /// Corrected CAR over uncorrected CAR.
    pub fn factor(&self) -> Option<f64> {
        Some(self.corrected.car? / self.uncorrected.car?)
    }
}

pub fn drift_car(cfg: &RunConfig, alice: &TagStream, bob: &TagStream, report: &SyncReport) -> Result<DriftCar> {
    let w = cfg.analysis.window_ps;
    let n = cfg.analysis.accidental_offsets;
    let res = alice.resolution_ps() as f64;
    let delay = ((report.initial.delay_ps / res).round() * res) as i64;
    Ok(DriftCar {
        uncorrected: measure_coincidences(alice.times(), bob.times(), delay, w, n)?,
        corrected: measure_coincidences(alice.times(), report.corrected_bob.times(), 0, w, n)?,
    })
}

/// Counts between analyzer ports after sync; Alice port first.
pub fn setting_counts(alice: &TagStream, bob_corrected: &TagStream, window_ps: u64) -> Result<SettingCounts> {
    let a = [alice.channel_times(0), alice.channel_times(1)];
    let b = [bob_corrected.channel_times(0), bob_corrected.channel_times(1)];
    let c = |i: usize, j: usize| count_coincidences(&a[i], &b[j], 0, window_ps);
    Ok(SettingCounts::new(c(0, 0)?, c(1, 1)?, c(0, 1)?, c(1, 0)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingRun {
    pub theta_a_deg: f64,
    pub theta_b_deg: f64,
    pub counts: SettingCounts,
    pub expectation: Expectation,
    pub initial_delay_ps: f64,
    pub allan_dev_uncorrected_ns: Option<f64>,
    pub allan_dev_corrected_ns: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChshExperiment {
    pub config_hash: String,
    pub setting_duration_s: f64,
    pub settings: Vec<SettingRun>,
    pub result: ChshResult,
}

/// Four independent acquisitions, one per analyzer setting, each synced and
/// corrected before counting.
pub fn run_chsh_experiment(cfg: &RunConfig) -> Result<ChshExperiment> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(4);
    for (k, &[a_deg, b_deg]) in cfg.analysis.settings_deg.iter().enumerate() {
        let setting = AnalyzerSetting::from_degrees(a_deg, b_deg);
        let acq = simulate_nodes(cfg, setting, cfg.analysis.setting_duration_s, run::CHSH + k as u64)?;
        let sync = run_sync(cfg, &acq.alice, &acq.bob)?;
        let counts = setting_counts(&acq.alice, &sync.corrected_bob, cfg.analysis.window_ps)?;
        runs.push(SettingRun {
            theta_a_deg: a_deg,
            theta_b_deg: b_deg,
            counts,
            expectation: expectation(&counts)?,
            initial_delay_ps: sync.initial.delay_ps,
            allan_dev_uncorrected_ns: sync.uncorrected.allan_dev_ns(),
            allan_dev_corrected_ns: sync.corrected.allan_dev_ns(),
        });
    }
    let e = [0, 1, 2, 3].map(|i| runs[i].expectation);
    Ok(ChshExperiment {
        config_hash: cfg.hash(),
        setting_duration_s: cfg.analysis.setting_duration_s,
        settings: runs,
        result: chsh_s(e),
    })
}

/// Singles of both arms and their coincidences at each sweep power, measured
/// locally on the distributed pair.
pub fn simulate_power_sweep(cfg: &RunConfig) -> Result<PowerSweep> {
    cfg.validate()?;
    let d = cfg.sweep.point_duration_s;
    let mut points = Vec::new();
    for (k, &p) in cfg.sweep.powers_mw.iter().enumerate() {
        let mut src = seeded_source(cfg, cfg.distribution_pair, run::SWEEP + k as u64);
        src.pump_power_mw = p;
        let (idler, signal) = simulate_local(cfg, &src, d, run::SWEEP + k as u64)?;
        let cc = count_coincidences(idler.times(), signal.times(), 0, cfg.analysis.window_ps)?;
        for (which, n) in [
            (RateKind::SinglesS, signal.len() as u64),
            (RateKind::SinglesI, idler.len() as u64),
            (RateKind::Coincidences, cc),
        ] {
            points.push(SweepPoint { power_mw: p, rate_hz: n as f64 / d, which, duration_s: Some(d) });
        }
    }
    Ok(PowerSweep::new(points))
}

/// Local CC and CAR of every configured channel pair.
pub fn simulate_spectrum(cfg: &RunConfig) -> Result<SpectrumTable> {
    cfg.validate()?;
    let d = cfg.sweep.spectrum_duration_s;
    let n = cfg.analysis.accidental_offsets;
    let mut rows = Vec::with_capacity(cfg.source.pairs.len());
    for pair in &cfg.source.pairs {
        let src = seeded_source(cfg, pair.index, run::SPECTRUM);
        let (idler, signal) = simulate_local(cfg, &src, d, run::SPECTRUM + pair.index as u64)?;
        let m = measure_coincidences(idler.times(), signal.times(), 0, cfg.analysis.window_ps, n)?;
        rows.push(SpectrumRow {
            pair_index: pair.index,
            detuning_ghz: pair.detuning_ghz,
            signal_thz: pair.signal_frequency_thz(),
            idler_thz: pair.idler_frequency_thz(),
            a: src.effective_a(pair),
            b_s: pair.linear(Arm::Signal),
            b_i: pair.linear(Arm::Idler),
            singles_s_hz: signal.len() as f64 / d,
            singles_i_hz: idler.len() as f64 / d,
            cc_hz: m.cc as f64 / d,
            car: m.car.unwrap_or(f64::INFINITY),
            car_sigma: m.car_sigma(n).unwrap_or(f64::INFINITY),
        });
    }
    Ok(spectrum_scan(rows))
}
