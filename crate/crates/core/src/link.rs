//! Fiber transmission, detection and node clocks.
//!
//! Ordering inside [`detect`]: efficiency thinning, then Gaussian jitter, then
//! the local clock offset, then quantization onto the tagger grid.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, label, SimRng};
use crate::source::ArmEvent;
use crate::tagstream::{quantize, TagError, TagStream, TimeTag, DEFAULT_RESOLUTION_PS, PS_PER_S};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },
    #[error(transparent)]
    Tag(#[from] TagError),
}

fn invalid(what: &'static str, why: impl Into<String>) -> LinkError {
    LinkError::Invalid { what, why: why.into() }
}

fn default_delay() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub length_km: f64,
    #[serde(default = "default_delay")]
    pub delay_us_per_km: f64,
    #[serde(default)]
    pub loss_db_per_km: f64,
    #[serde(default)]
    pub extra_loss_db: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            length_km: 0.0,
            delay_us_per_km: default_delay(),
            loss_db_per_km: 0.0,
            extra_loss_db: 0.0,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), LinkError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.length_km) || !ok(self.delay_us_per_km) {
            return Err(invalid("link", "length and delay must be finite and ≥ 0"));
        }
        if !ok(self.loss_db_per_km) || !ok(self.extra_loss_db) {
            return Err(invalid("link", "losses must be finite and ≥ 0"));
        }
        Ok(())
    }

    /// Propagation delay, rounded once to whole picoseconds.
    pub fn delay_ps(&self) -> i64 {
        (self.length_km * self.delay_us_per_km * 1.0e6).round() as i64
    }

    pub fn total_loss_db(&self) -> f64 {
        self.loss_db_per_km * self.length_km + self.extra_loss_db
    }

    pub fn transmittance(&self) -> f64 {
        10f64.powf(-self.total_loss_db() / 10.0)
    }
}

/// Shifts surviving photons by the fiber delay. Survival is an independent
/// Bernoulli trial with the link transmittance.
pub fn propagate(events: &[ArmEvent], link: &LinkConfig, rng: &mut SimRng) -> Vec<ArmEvent> {
    let p = link.transmittance();
    let delay = link.delay_ps() as f64;
    events
        .iter()
        .filter(|_| p >= 1.0 || rng.random::<f64>() < p)
        .map(|e| ArmEvent { t_ps: e.t_ps + delay, channel: e.channel })
        .collect()
}

fn default_resolution() -> u64 {
    DEFAULT_RESOLUTION_PS
}

fn default_channels() -> u8 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub efficiency: f64,
    #[serde(default)]
    pub jitter_sigma_ps: f64,
    /// Dark-count rate of each detector channel.
    #[serde(default)]
    pub dark_rate_hz: f64,
    #[serde(default = "default_resolution")]
    pub resolution_ps: u64,
    /// Number of detector channels at the node (analyzer output ports).
    #[serde(default = "default_channels")]
    pub channels: u8,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            efficiency: 1.0,
            jitter_sigma_ps: 0.0,
            dark_rate_hz: 0.0,
            resolution_ps: DEFAULT_RESOLUTION_PS,
            channels: 2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), LinkError> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(invalid("detector", "efficiency must lie in [0, 1]"));
        }
        if !(self.jitter_sigma_ps >= 0.0) || !self.jitter_sigma_ps.is_finite() {
            return Err(invalid("detector", "jitter_sigma_ps must be ≥ 0"));
        }
        if !(self.dark_rate_hz >= 0.0) || !self.dark_rate_hz.is_finite() {
            return Err(invalid("detector", "dark_rate_hz must be ≥ 0"));
        }
        if self.resolution_ps == 0 || self.channels == 0 {
            return Err(invalid("detector", "resolution_ps and channels must be positive"));
        }
        Ok(())
    }
}

/// Per-detector jitter giving a two-detector coincidence FWHM, assuming
/// Gaussian jitter on both sides.
pub fn jitter_sigma_for_fwhm(fwhm_ps: f64) -> f64 {
    fwhm_ps / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt() * std::f64::consts::SQRT_2)
}

/// Local clock of one node relative to true time.
///
/// `offset(t) = initial + linear_rate·t + W(t) + J(⌊t⌋)` where `W` is a
/// Gaussian random walk with one step per second (linearly interpolated in
/// between) and `J` is a per-second 1PPS edge error drawn uniformly from
/// `±pps_jitter_halfwidth_ps`. The first second is the alignment reference,
/// so `J(0) = 0` and `W(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockModel {
    #[serde(default)]
    pub initial_offset_ps: i64,
    /// Seconds of drift per second.
    #[serde(default)]
    pub linear_rate: f64,
    #[serde(default)]
    pub random_walk_sigma_ps_per_sqrt_s: f64,
    #[serde(default)]
    pub pps_jitter_halfwidth_ps: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for ClockModel {
    fn default() -> Self {
        Self::identity()
    }
}

impl ClockModel {
    pub fn identity() -> Self {
        Self {
            initial_offset_ps: 0,
            linear_rate: 0.0,
            random_walk_sigma_ps_per_sqrt_s: 0.0,
            pps_jitter_halfwidth_ps: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if !self.linear_rate.is_finite() {
            return Err(invalid("clock", "linear_rate must be finite"));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.random_walk_sigma_ps_per_sqrt_s) || !ok(self.pps_jitter_halfwidth_ps) {
            return Err(invalid("clock", "random walk and 1PPS jitter must be ≥ 0"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.initial_offset_ps == 0
            && self.linear_rate == 0.0
            && self.random_walk_sigma_ps_per_sqrt_s == 0.0
            && self.pps_jitter_halfwidth_ps == 0.0
    }
}

/// A clock trajectory precomputed per second, shared read-only by workers.
#[derive(Debug, Clone)]
pub struct ClockTrajectory {
    model: ClockModel,
    walk: Vec<f64>,
    pps: Vec<f64>,
}

impl ClockTrajectory {
    /// Knots covering `[0, horizon_s]`. Later times hold the last knot.
    pub fn new(model: &ClockModel, horizon_s: f64) -> Self {
        let n = horizon_s.max(0.0).ceil() as usize + 2;
        let mut walk = Vec::with_capacity(n);
        let mut pps = Vec::with_capacity(n);
        let mut walk_rng = rng::stream(model.rng_seed, &[label::CLOCK_WALK]);
        let mut pps_rng = rng::stream(model.rng_seed, &[label::CLOCK_PPS]);
        let step = Normal::new(0.0, model.random_walk_sigma_ps_per_sqrt_s).expect("sigma ≥ 0");
        let h = model.pps_jitter_halfwidth_ps;
        let mut w = 0.0;
        for k in 0..n {
            if k > 0 {
                w += step.sample(&mut walk_rng);
            }
            walk.push(w);
            let j: f64 = pps_rng.random();
            pps.push(if k == 0 || h == 0.0 { 0.0 } else { (2.0 * j - 1.0) * h });
        }
        Self { model: model.clone(), walk, pps }
    }

    pub fn model(&self) -> &ClockModel {
        &self.model
    }

    pub fn horizon_s(&self) -> usize {
        self.walk.len() - 1
    }

    /// Offset in picoseconds at true time `t_s`.
    pub fn offset_ps(&self, t_s: f64) -> f64 {
        let t = t_s.max(0.0);
        let k = (t.floor() as usize).min(self.walk.len() - 1);
        let frac = t - k as f64;
        let walk = if k + 1 < self.walk.len() {
            self.walk[k] + (self.walk[k + 1] - self.walk[k]) * frac.min(1.0)
        } else {
            self.walk[k]
        };
        self.model.initial_offset_ps as f64 + self.model.linear_rate * t * PS_PER_S + walk + self.pps[k]
    }

    /// Offsets sampled at the start of every second up to `n` seconds.
    pub fn per_second(&self, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.offset_ps(k as f64)).collect()
    }
}

/// Clock offset of `clock` at true time `t_s`, in picoseconds.
pub fn clock_offset_at(clock: &ClockModel, t_s: f64) -> f64 {
    ClockTrajectory::new(clock, t_s).offset_ps(t_s)
}

/// Detects photons into local tags, appending to `out`. Events whose local
/// time would precede the epoch are dropped.
pub fn detect_into(
    events: &[ArmEvent],
    det: &DetectorConfig,
    clock: &ClockTrajectory,
    rng: &mut SimRng,
    out: &mut Vec<TimeTag>,
) {
    let jitter = Normal::new(0.0, det.jitter_sigma_ps).expect("sigma ≥ 0");
    for e in events {
        if det.efficiency < 1.0 && rng.random::<f64>() >= det.efficiency {
            continue;
        }
        let t = e.t_ps + jitter.sample(rng) + clock.offset_ps(e.t_ps / PS_PER_S);
        if let Ok(q) = quantize(t, det.resolution_ps) {
            out.push(TimeTag::new(q, e.channel));
        }
    }
}

/// Dark counts in true time `[start_ps, end_ps)` on every channel.
pub fn darks_into(
    det: &DetectorConfig,
    clock: &ClockTrajectory,
    start_ps: f64,
    end_ps: f64,
    rng: &mut SimRng,
    out: &mut Vec<TimeTag>,
) {
    let mean = det.dark_rate_hz * (end_ps - start_ps).max(0.0) / PS_PER_S;
    if !(mean > 0.0) {
        return;
    }
    let count = Poisson::new(mean).expect("positive mean");
    for channel in 0..det.channels {
        let n = count.sample(rng) as u64;
        for _ in 0..n {
            let t = start_ps + rng.random::<f64>() * (end_ps - start_ps);
            if let Ok(q) = quantize(t + clock.offset_ps(t / PS_PER_S), det.resolution_ps) {
                out.push(TimeTag::new(q, channel));
            }
        }
    }
}

/// Turns arriving photons into the node's local tag stream over
/// `[0, duration_s)`, including dark counts.
pub fn detect(
    events: &[ArmEvent],
    det: &DetectorConfig,
    clock: &ClockModel,
    duration_s: f64,
    rng: &mut SimRng,
) -> Result<TagStream, LinkError> {
    det.validate()?;
    clock.validate()?;
    let last = events.iter().map(|e| e.t_ps).fold(0.0, f64::max) / PS_PER_S;
    let traj = ClockTrajectory::new(clock, duration_s.max(last));
    let mut tags = Vec::with_capacity(events.len());
    detect_into(events, det, &traj, rng, &mut tags);
    darks_into(det, &traj, 0.0, duration_s * PS_PER_S, rng, &mut tags);
    Ok(TagStream::from_unsorted(tags, det.resolution_ps)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn events(times: &[f64]) -> Vec<ArmEvent> {
        times.iter().map(|&t| ArmEvent { t_ps: t, channel: 0 }).collect()
    }

    #[test]
    fn thirty_km_delay() {
        let link = LinkConfig { length_km: 30.245, ..Default::default() };
        assert_eq!(link.delay_ps(), 151_225_000);
        let mut rng = rng::stream(1, &[]);
        let out = propagate(&events(&[0.0, 10.0]), &link, &mut rng);
        assert_eq!(out[0].t_ps, 151_225_000.0);
        assert_eq!(out[1].t_ps, 151_225_010.0);
    }

    #[test]
    fn zero_length_is_identity() {
        let mut rng = rng::stream(1, &[]);
        let ev = events(&[1.0, 2.5, 3.0]);
        assert_eq!(propagate(&ev, &LinkConfig::default(), &mut rng), ev);
    }

    #[test]
    fn six_db_survival_fraction() {
        let link = LinkConfig { length_km: 30.0, loss_db_per_km: 0.2, ..Default::default() };
        let p = link.transmittance();
        assert!((p - 0.251_188_6).abs() < 1e-6);
        let n = 200_000;
        let ev: Vec<ArmEvent> = (0..n).map(|i| ArmEvent { t_ps: i as f64, channel: 0 }).collect();
        let mut rng = rng::stream(2, &[]);
        let k = propagate(&ev, &link, &mut rng).len() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((k - n as f64 * p).abs() < 5.0 * sigma);
    }

    #[test]
    fn loss_and_efficiency_compose() {
        let n = 1_000_000;
        let ev: Vec<ArmEvent> = (0..n).map(|i| ArmEvent { t_ps: i as f64 * 1000.0, channel: 0 }).collect();
        let id = ClockModel::identity();
        let run = |link: LinkConfig, eff: f64, seed: u64| {
            let mut rng = rng::stream(seed, &[]);
            let survived = propagate(&ev, &link, &mut rng);
            let det = DetectorConfig { efficiency: eff, resolution_ps: 1, ..Default::default() };
            detect(&survived, &det, &id, 1.0, &mut rng).unwrap().len() as f64
        };
        let a = run(LinkConfig { extra_loss_db: 3.0, ..Default::default() }, 0.5, 3);
        let b = run(LinkConfig { extra_loss_db: 6.0, ..Default::default() }, 1.0, 4);
        let p = 10f64.powf(-0.6);
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((a - b).abs() < 5.0 * sigma * std::f64::consts::SQRT_2, "{a} vs {b}");
    }

    #[test]
    fn ideal_detection_is_quantization() {
        let ev = events(&[100.0, 233.9, 234.1, 1000.0]);
        let mut rng = rng::stream(5, &[]);
        let det = DetectorConfig { dark_rate_hz: 0.0, ..Default::default() };
        let s = detect(&ev, &det, &ClockModel::identity(), 1.0, &mut rng).unwrap();
        assert_eq!(s.times(), &[156, 156, 312, 936]);
    }

    #[test]
    fn jitter_for_paper_fwhm() {
        let s = jitter_sigma_for_fwhm(322.0);
        assert!((s - 96.7).abs() < 0.05, "{s}");
    }

    #[test]
    fn clock_examples() {
        let mut c = ClockModel { initial_offset_ps: -42, ..ClockModel::identity() };
        assert_eq!(clock_offset_at(&c, 0.0), -42.0);
        c.initial_offset_ps = 0;
        c.linear_rate = 5e-12;
        assert!((clock_offset_at(&c, 600.0) - 3000.0).abs() < 1e-6);
        c.linear_rate = 1e-8;
        assert!((clock_offset_at(&c, 600.0) - 6.0e6).abs() < 1e-3);
    }

    #[test]
    fn random_walk_range_matches_closed_form() {
        // Expected range of an n-step Gaussian walk: 2σ(√(2n/π) − ζ), with the
        // discrete-sampling correction ζ = 0.5826 (Siegmund).
        let sigma = 70.0;
        let n = 600usize;
        let trials = 2000;
        let mut mean_range = 0.0;
        for seed in 0..trials {
            let c = ClockModel {
                random_walk_sigma_ps_per_sqrt_s: sigma,
                rng_seed: seed,
                ..ClockModel::identity()
            };
            let traj = ClockTrajectory::new(&c, n as f64);
            let w = traj.per_second(n + 1);
            let max = w.iter().cloned().fold(f64::MIN, f64::max);
            let min = w.iter().cloned().fold(f64::MAX, f64::min);
            mean_range += (max - min) / trials as f64;
        }
        let expected = 2.0 * sigma * ((2.0 * n as f64 / std::f64::consts::PI).sqrt() - 0.5826);
        assert!((mean_range / expected - 1.0).abs() < 0.03, "{mean_range} vs {expected}");
    }

    #[test]
    fn pps_jitter_is_bounded_and_blockwise() {
        let c = ClockModel { pps_jitter_halfwidth_ps: 3000.0, rng_seed: 9, ..ClockModel::identity() };
        let traj = ClockTrajectory::new(&c, 100.0);
        assert_eq!(traj.offset_ps(0.5), 0.0);
        for k in 1..100 {
            let a = traj.offset_ps(k as f64 + 0.1);
            let b = traj.offset_ps(k as f64 + 0.9);
            assert_eq!(a, b);
            assert!(a.abs() <= 3000.0);
        }
    }

    #[test]
    fn trajectory_is_reproducible_and_prefix_stable() {
        let c = ClockModel {
            random_walk_sigma_ps_per_sqrt_s: 50.0,
            pps_jitter_halfwidth_ps: 100.0,
            rng_seed: 4,
            ..ClockModel::identity()
        };
        let short = ClockTrajectory::new(&c, 10.0).per_second(10);
        let long = ClockTrajectory::new(&c, 100.0).per_second(10);
        assert_eq!(short, long);
    }

    #[test]
    fn darks_follow_poisson_mean() {
        let det = DetectorConfig { dark_rate_hz: 1000.0, channels: 2, resolution_ps: 1, ..Default::default() };
        let mut rng = rng::stream(8, &[]);
        let s = detect(&[], &det, &ClockModel::identity(), 50.0, &mut rng).unwrap();
        let expected = 2.0 * 1000.0 * 50.0;
        assert!((s.len() as f64 - expected).abs() < 5.0 * expected.sqrt());
    }
}
