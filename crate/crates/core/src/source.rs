//! Multi-channel SFWM photon-pair source.
//!
//! Each DWDM channel pair emits correlated pairs as a homogeneous Poisson
//! process at `a·P²`, and each arm additionally sees uncorrelated Raman and
//! background photons at `b·P + c`. Pairs from different channel pairs are
//! independent processes.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, label, SimRng};
use crate::tagstream::PS_PER_S;

/// Pump frequency (ITU CH35).
pub const PUMP_FREQUENCY_THZ: f64 = 193.5;
/// DWDM grid spacing and filter bandwidth.
pub const GRID_SPACING_GHZ: f64 = 100.0;
/// 100 GHz expressed in nm at the 1550 nm reference.
pub const GRID_BANDWIDTH_NM: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("invalid source configuration: {0}")]
    Invalid(String),
    #[error("correlation {0} outside [-1, 1]")]
    Correlation(f64),
    #[error("duration must be positive and finite, got {0}")]
    Duration(f64),
}

/// Which photon of a pair: the idler (low frequency, Stokes side, measured
/// locally) or the signal (high frequency, anti-Stokes side, distributed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Signal,
    Idler,
}

/// One signal/idler channel pair placed symmetrically around the pump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPair {
    /// Pair number `m`, counted outwards from the pump.
    pub index: u32,
    pub detuning_ghz: f64,
    /// Pair generation coefficient, s⁻¹·mW⁻².
    pub a: f64,
    /// Linear (Raman) noise coefficients per arm, s⁻¹·mW⁻¹.
    pub b_s: f64,
    pub b_i: f64,
    /// Constant background per arm, s⁻¹.
    #[serde(default)]
    pub c_s: f64,
    #[serde(default)]
    pub c_i: f64,
}

impl ChannelPair {
    pub fn signal_frequency_thz(&self) -> f64 {
        PUMP_FREQUENCY_THZ + self.detuning_ghz / 1000.0
    }

    pub fn idler_frequency_thz(&self) -> f64 {
        PUMP_FREQUENCY_THZ - self.detuning_ghz / 1000.0
    }

    /// ITU 100 GHz channel numbers `(idler, signal)`, where CH n sits at
    /// `190 THz + n·0.1 THz`.
    pub fn itu_channels(&self) -> (i32, i32) {
        let ch = |f: f64| ((f - 190.0) / 0.1).round() as i32;
        (ch(self.idler_frequency_thz()), ch(self.signal_frequency_thz()))
    }

    pub fn linear(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Signal => self.b_s,
            Arm::Idler => self.b_i,
        }
    }

    pub fn constant(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Signal => self.c_s,
            Arm::Idler => self.c_i,
        }
    }

    fn validate(&self) -> Result<(), SourceError> {
        let coeffs = [self.a, self.b_s, self.b_i, self.c_s, self.c_i];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(SourceError::Invalid(format!(
                "pair {}: rate coefficients must be finite and non-negative",
                self.index
            )));
        }
        if !(self.detuning_ghz > 0.0) {
            return Err(SourceError::Invalid(format!(
                "pair {}: detuning must be positive",
                self.index
            )));
        }
        Ok(())
    }
}

/// Detunings of `n_pairs` consecutive grid pairs, optionally skipping the
/// pair adjacent to the pump.
pub fn grid_detunings(n_pairs: u32, skip_first: bool) -> Vec<f64> {
    let first = if skip_first { 2 } else { 1 };
    (first..first + n_pairs)
        .map(|m| m as f64 * GRID_SPACING_GHZ)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub pump_power_mw: f64,
    pub pairs: Vec<ChannelPair>,
    /// Relative phase of the |VV⟩ term, radians.
    #[serde(default)]
    pub phase_theta: f64,
    pub visibility: f64,
    /// Pump a single nanowire instead of the two-nanowire entangled source.
    #[serde(default)]
    pub single_nanowire: bool,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SourceConfig {
    pub fn validate(&self) -> Result<(), SourceError> {
        if !(self.pump_power_mw >= 0.0) || !self.pump_power_mw.is_finite() {
            return Err(SourceError::Invalid("pump_power_mw must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(SourceError::Invalid("visibility must lie in [0, 1]".into()));
        }
        if !self.phase_theta.is_finite() {
            return Err(SourceError::Invalid("phase_theta must be finite".into()));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            p.validate()?;
            if self.pairs[..i].iter().any(|q| q.detuning_ghz == p.detuning_ghz) {
                return Err(SourceError::Invalid(format!(
                    "pair {}: duplicate detuning {} GHz",
                    p.index, p.detuning_ghz
                )));
            }
            if self.pairs[..i].iter().any(|q| q.index == p.index) {
                return Err(SourceError::Invalid(format!("duplicate pair index {}", p.index)));
            }
        }
        Ok(())
    }

    pub fn pair(&self, index: u32) -> Option<&ChannelPair> {
        self.pairs.iter().find(|p| p.index == index)
    }

    /// Quadratic coefficient actually realised by this configuration.
    ///
    /// The entangled source splits the pump between two nanowires, each
    /// producing pairs at `a_nw·(P/2)²`, so `a = a_nw/2`. Pumping one nanowire
    /// with the full power doubles the quadratic term; the linear Raman term
    /// is the same either way.
    pub fn effective_a(&self, pair: &ChannelPair) -> f64 {
        if self.single_nanowire {
            2.0 * pair.a
        } else {
            pair.a
        }
    }

    pub fn pair_rate(&self, pair: &ChannelPair) -> f64 {
        self.effective_a(pair) * self.pump_power_mw.powi(2)
    }

    /// Uncorrelated photon rate on one arm.
    pub fn noise_rate(&self, pair: &ChannelPair, arm: Arm) -> f64 {
        pair.linear(arm) * self.pump_power_mw + pair.constant(arm)
    }

    pub fn singles_rate(&self, pair: &ChannelPair, arm: Arm) -> f64 {
        self.pair_rate(pair) + self.noise_rate(pair, arm)
    }

    /// A copy restricted to one channel pair.
    pub fn only_pair(&self, index: u32) -> Option<SourceConfig> {
        let pair = self.pair(index)?.clone();
        Some(SourceConfig {
            pairs: vec![pair],
            ..self.clone()
        })
    }
}

/// `a·P²`: pair generation rate of one channel pair.
pub fn pair_rate(power_mw: f64, pair: &ChannelPair) -> f64 {
    pair.a * power_mw * power_mw
}

/// `a·P² + b·P + c`: singles rate of one arm before any loss.
pub fn singles_rate(power_mw: f64, pair: &ChannelPair, arm: Arm) -> f64 {
    pair_rate(power_mw, pair) + pair.linear(arm) * power_mw + pair.constant(arm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Pair,
    NoiseSignal,
    NoiseIdler,
    /// Reserved for source-side dark events; the generator never emits it.
    DarkReserved,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEvent {
    pub t_true_ps: f64,
    pub pair_index: u32,
    pub kind: EventKind,
}

fn poisson_times(rate_hz: f64, start_ps: f64, end_ps: f64, rng: &mut SimRng, out: &mut Vec<f64>) {
    if !(rate_hz > 0.0) || end_ps <= start_ps {
        return;
    }
    let gap = Exp::new(rate_hz / PS_PER_S).expect("positive rate");
    let mut t = start_ps;
    loop {
        t += gap.sample(rng);
        if t >= end_ps {
            break;
        }
        out.push(t);
    }
}

/// Emission events in `[start_ps, end_ps)` for every configured pair.
///
/// `chunk` selects an independent random stream, so consecutive windows of a
/// long run can be generated in any order (or in parallel) with identical
/// results.
pub fn generate_window(cfg: &SourceConfig, start_ps: f64, end_ps: f64, chunk: u64) -> Vec<PairEvent> {
    let mut events = Vec::new();
    let mut scratch = Vec::new();
    for pair in &cfg.pairs {
        let processes = [
            (EventKind::Pair, cfg.pair_rate(pair)),
            (EventKind::NoiseSignal, cfg.noise_rate(pair, Arm::Signal)),
            (EventKind::NoiseIdler, cfg.noise_rate(pair, Arm::Idler)),
        ];
        for (k, (kind, rate)) in processes.into_iter().enumerate() {
            let mut rng = rng::stream(
                cfg.rng_seed,
                &[label::SOURCE, chunk, pair.index as u64, k as u64],
            );
            scratch.clear();
            poisson_times(rate, start_ps, end_ps, &mut rng, &mut scratch);
            events.extend(scratch.iter().map(|&t| PairEvent {
                t_true_ps: t,
                pair_index: pair.index,
                kind,
            }));
        }
    }
    // concatenation of sorted runs; the stable merge sort is near linear here
    events.sort_by(|a, b| a.t_true_ps.total_cmp(&b.t_true_ps));
    events
}

/// All emission events over `[0, duration_s)`, time-sorted and reproducible
/// from `cfg.rng_seed`.
pub fn generate_events(cfg: &SourceConfig, duration_s: f64) -> Result<Vec<PairEvent>, SourceError> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(SourceError::Duration(duration_s));
    }
    cfg.validate()?;
    Ok(generate_window(cfg, 0.0, duration_s * PS_PER_S, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    pub fn sign(self) -> f64 {
        match self {
            Outcome::Plus => 1.0,
            Outcome::Minus => -1.0,
        }
    }

    /// Detector channel of the analyzer output port.
    pub fn channel(self) -> u8 {
        match self {
            Outcome::Plus => 0,
            Outcome::Minus => 1,
        }
    }
}

/// Correlation of the analyzer outcomes for the state
/// `(|HH⟩ + e^{iθ}|VV⟩)/√2` with visibility `V`:
/// `V·[cos2θ_A·cos2θ_B + cosθ·sin2θ_A·sin2θ_B]`.
pub fn correlation_model(theta_a: f64, theta_b: f64, phase: f64, visibility: f64) -> f64 {
    let (sa, ca) = (2.0 * theta_a).sin_cos();
    let (sb, cb) = (2.0 * theta_b).sin_cos();
    visibility * (ca * cb + phase.cos() * sa * sb)
}

/// Joint outcome probabilities, indexed `[++, +−, −+, −−]`.
pub fn outcome_probabilities(
    theta_a: f64,
    theta_b: f64,
    cfg: &SourceConfig,
) -> Result<[f64; 4], SourceError> {
    let e = correlation_model(theta_a, theta_b, cfg.phase_theta, cfg.visibility);
    if !(e.abs() <= 1.0 + 1e-12) {
        return Err(SourceError::Correlation(e));
    }
    let e = e.clamp(-1.0, 1.0);
    let same = 0.25 * (1.0 + e);
    let diff = 0.25 * (1.0 - e);
    Ok([same, diff, diff, same])
}

/// Samples joint analyzer outcomes for fixed settings.
#[derive(Debug, Clone, Copy)]
pub struct OutcomeSampler {
    cumulative: [f64; 3],
}

impl OutcomeSampler {
    pub fn new(theta_a: f64, theta_b: f64, cfg: &SourceConfig) -> Result<Self, SourceError> {
        let p = outcome_probabilities(theta_a, theta_b, cfg)?;
        Ok(Self {
            cumulative: [p[0], p[0] + p[1], p[0] + p[1] + p[2]],
        })
    }

    /// `(idler/Alice outcome, signal/Bob outcome)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Outcome, Outcome) {
        use Outcome::*;
        let u: f64 = rng.random();
        if u < self.cumulative[0] {
            (Plus, Plus)
        } else if u < self.cumulative[1] {
            (Plus, Minus)
        } else if u < self.cumulative[2] {
            (Minus, Plus)
        } else {
            (Minus, Minus)
        }
    }
}

pub fn sample_polarization_outcome<R: Rng + ?Sized>(
    theta_a: f64,
    theta_b: f64,
    cfg: &SourceConfig,
    rng: &mut R,
) -> Result<(Outcome, Outcome), SourceError> {
    Ok(OutcomeSampler::new(theta_a, theta_b, cfg)?.sample(rng))
}

/// A photon arriving at one node, already routed to a detector channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmEvent {
    pub t_ps: f64,
    pub channel: u8,
}

/// Analyzer angles `(θ_A, θ_B)` in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSetting {
    pub theta_a: f64,
    pub theta_b: f64,
}

impl AnalyzerSetting {
    pub fn from_degrees(a_deg: f64, b_deg: f64) -> Self {
        Self {
            theta_a: a_deg.to_radians(),
            theta_b: b_deg.to_radians(),
        }
    }
}

/// Routes emission events to Alice (idler arm) and Bob (signal arm), choosing
/// analyzer output ports. Pairs use the joint polarization sampler; noise
/// photons are unpolarized and pick a port uniformly.
pub fn split_arms(
    events: &[PairEvent],
    setting: AnalyzerSetting,
    cfg: &SourceConfig,
    rng: &mut SimRng,
) -> Result<(Vec<ArmEvent>, Vec<ArmEvent>), SourceError> {
    let sampler = OutcomeSampler::new(setting.theta_a, setting.theta_b, cfg)?;
    let mut idler = Vec::with_capacity(events.len());
    let mut signal = Vec::with_capacity(events.len());
    for ev in events {
        match ev.kind {
            EventKind::Pair => {
                let (oa, ob) = sampler.sample(rng);
                idler.push(ArmEvent { t_ps: ev.t_true_ps, channel: oa.channel() });
                signal.push(ArmEvent { t_ps: ev.t_true_ps, channel: ob.channel() });
            }
            EventKind::NoiseIdler => idler.push(ArmEvent {
                t_ps: ev.t_true_ps,
                channel: rng.random_range(0..2),
            }),
            EventKind::NoiseSignal => signal.push(ArmEvent {
                t_ps: ev.t_true_ps,
                channel: rng.random_range(0..2),
            }),
            EventKind::DarkReserved => {}
        }
    }
    Ok((idler, signal))
}
