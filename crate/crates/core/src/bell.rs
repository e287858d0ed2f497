//! Polarization correlations and the CHSH parameter.

use std::io;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Classical bound on S.
pub const CLASSICAL_BOUND: f64 = 2.0;

/// Default CHSH analyzer settings `(θ_A, θ_B)` in degrees, in the order
/// E₁, E₂, E₃, E₄ of `S = |E₁ − E₂ + E₃ + E₄|`.
pub const CANONICAL_SETTINGS_DEG: [(f64, f64); 4] = [(0.0, 22.5), (0.0, 67.5), (45.0, 22.5), (45.0, 67.5)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BellError {
    #[error("expectation undefined: no coincidences at this setting")]
    NoCounts,
    #[error("correlation sweep needs at least 5 distinct analyzer angles, got {0}")]
    DegenerateSweep(usize),
    #[error("correlation fit is singular")]
    SingularFit,
}

/// Coincidences between analyzer outputs at one setting; `pm` is Alice +
/// with Bob −.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SettingCounts {
    pub cc_pp: u64,
    pub cc_mm: u64,
    pub cc_pm: u64,
    pub cc_mp: u64,
}

impl SettingCounts {
    pub fn new(cc_pp: u64, cc_mm: u64, cc_pm: u64, cc_mp: u64) -> Self {
        SettingCounts { cc_pp, cc_mm, cc_pm, cc_mp }
    }

    pub fn total(&self) -> u64 {
        self.cc_pp + self.cc_mm + self.cc_pm + self.cc_mp
    }
}

/// Counts tagged with the analyzer angles they were taken at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettingMeasurement {
    pub theta_a_rad: f64,
    pub theta_b_rad: f64,
    pub counts: SettingCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub value: f64,
    pub sigma: f64,
}

impl Expectation {
    pub fn new(value: f64, sigma: f64) -> Self {
        Expectation { value, sigma }
    }
}

/// `E = (CC₊₊ + CC₋₋ − CC₊₋ − CC₋₊)/T` with Poisson error
/// `σ = 2√(AB/T³)`, where A counts equal outcomes and B opposite ones.
pub fn expectation(c: &SettingCounts) -> Result<Expectation, BellError> {
    let t = c.total();
    if t == 0 {
        return Err(BellError::NoCounts);
    }
    let same = (c.cc_pp + c.cc_mm) as f64;
    let diff = (c.cc_pm + c.cc_mp) as f64;
    let t = t as f64;
    Ok(Expectation {
        value: (same - diff) / t,
        sigma: 2.0 * (same * diff / (t * t * t)).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshResult {
    pub s: f64,
    pub sigma_s: f64,
    /// `(S − 2)/σ_S`; infinite when σ_S is zero and S exceeds 2.
    pub violation_sigmas: f64,
    pub expectations: [Expectation; 4],
}

/// `S = |E₁ − E₂ + E₃ + E₄|` with the errors added in quadrature.
pub fn chsh_s(e: [Expectation; 4]) -> ChshResult {
    let s = (e[0].value - e[1].value + e[2].value + e[3].value).abs();
    let sigma_s = e.iter().map(|x| x.sigma * x.sigma).sum::<f64>().sqrt();
    let excess = s - CLASSICAL_BOUND;
    let violation_sigmas = if sigma_s > 0.0 {
        excess / sigma_s
    } else if excess > 0.0 {
        f64::INFINITY
    } else if excess < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    ChshResult { s, sigma_s, violation_sigmas, expectations: e }
}

/// CHSH from raw counts at the four canonical settings.
pub fn chsh_from_counts(counts: &[SettingCounts; 4]) -> Result<ChshResult, BellError> {
    let mut e = [Expectation::new(0.0, 0.0); 4];
    for (slot, c) in e.iter_mut().zip(counts) {
        *slot = expectation(c)?;
    }
    Ok(chsh_s(e))
}

/// Result of fitting `E(θ_B) = V·cos(2(θ_B − φ))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFit {
    pub visibility: f64,
    pub visibility_sigma: f64,
    /// Fringe phase φ in radians, in `(−π/2, π/2]`.
    pub phase_rad: f64,
    pub phase_sigma_rad: f64,
    /// Alice's fixed angle during the sweep.
    pub theta_a_rad: f64,
    pub chi2: f64,
    pub n_points: usize,
}

impl CorrelationFit {
    /// Phase offset relative to Alice's angle, wrapped to `(−π/2, π/2]`.
    pub fn phase_offset_rad(&self) -> f64 {
        wrap_half_turn(self.phase_rad - self.theta_a_rad)
    }
}

fn wrap_half_turn(x: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let mut y = x.rem_euclid(PI);
    if y > FRAC_PI_2 {
        y -= PI;
    }
    y
}

/// Weighted linear least squares on `α·cos2θ_B + β·sin2θ_B`, converted to
/// `V = √(α² + β²)` and `φ = ½·atan2(β, α)`. Weights are `1/σ²`; if any
/// sample has zero σ all samples are weighted equally.
pub fn fit_correlation_curve(
    samples: &[(f64, Expectation)],
    theta_a_rad: f64,
) -> Result<CorrelationFit, BellError> {
    let mut angles: Vec<f64> = samples
        .iter()
        .map(|(t, _)| (t.rem_euclid(std::f64::consts::PI) * 1e9).round())
        .collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup();
    if angles.len() < 5 {
        return Err(BellError::DegenerateSweep(angles.len()));
    }
    let weighted = samples.iter().all(|(_, e)| e.sigma > 0.0);
    let mut m = Matrix2::zeros();
    let mut v = Vector2::zeros();
    for (theta, e) in samples {
        let w = if weighted { 1.0 / (e.sigma * e.sigma) } else { 1.0 };
        let x = Vector2::new((2.0 * theta).cos(), (2.0 * theta).sin());
        m += w * x * x.transpose();
        v += w * e.value * x;
    }
    let inv = m.try_inverse().ok_or(BellError::SingularFit)?;
    let p = inv * v;
    let chi2: f64 = samples
        .iter()
        .map(|(theta, e)| {
            let r = e.value - p[0] * (2.0 * theta).cos() - p[1] * (2.0 * theta).sin();
            let w = if weighted { 1.0 / (e.sigma * e.sigma) } else { 1.0 };
            w * r * r
        })
        .sum();
    // without σ the covariance is scaled by the residual variance
    let cov = if weighted {
        inv
    } else {
        inv * (chi2 / (samples.len() as f64 - 2.0).max(1.0))
    };
    let (alpha, beta) = (p[0], p[1]);
    let vis = alpha.hypot(beta);
    let (ja, jb) = if vis > 0.0 { (alpha / vis, beta / vis) } else { (0.0, 0.0) };
    let vis_var = ja * ja * cov[(0, 0)] + 2.0 * ja * jb * cov[(0, 1)] + jb * jb * cov[(1, 1)];
    let (pa, pb) = if vis > 0.0 {
        (-beta / (2.0 * vis * vis), alpha / (2.0 * vis * vis))
    } else {
        (0.0, 0.0)
    };
    let phase_var = pa * pa * cov[(0, 0)] + 2.0 * pa * pb * cov[(0, 1)] + pb * pb * cov[(1, 1)];
    Ok(CorrelationFit {
        visibility: vis,
        visibility_sigma: vis_var.max(0.0).sqrt(),
        phase_rad: wrap_half_turn(0.5 * beta.atan2(alpha)),
        phase_sigma_rad: phase_var.max(0.0).sqrt(),
        theta_a_rad,
        chi2,
        n_points: samples.len(),
    })
}

/// Correlation-curve samples as CSV with columns `theta_B_deg,E,sigma`.
pub fn write_curve_csv<W: io::Write>(w: W, samples: &[(f64, Expectation)]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["theta_B_deg", "E", "sigma"])?;
    for (theta, e) in samples {
        out.write_record([
            theta.to_degrees().to_string(),
            e.value.to_string(),
            e.sigma.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::source::correlation_model;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Poisson};
    use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

    /// E values and errors printed with the measured correlation curves.
    const PRINTED: [(f64, f64); 4] = [(0.6482, 0.0131), (-0.6917, 0.0122), (0.7065, 0.0126), (0.6461, 0.0131)];

    #[test]
    fn perfect_correlation() {
        let e = expectation(&SettingCounts::new(100, 100, 0, 0)).unwrap();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.sigma, 0.0);
        assert_eq!(expectation(&SettingCounts::default()), Err(BellError::NoCounts));
    }

    #[test]
    fn sigma_matches_poisson_resampling() {
        let c = SettingCounts::new(300, 310, 80, 75);
        let analytic = expectation(&c).unwrap().sigma;
        let mut r = rng::stream(2024, &[]);
        let draw = |mean: u64, r: &mut rng::SimRng| Poisson::new(mean as f64).unwrap().sample(r) as u64;
        let n = 10_000;
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let s = SettingCounts::new(draw(c.cc_pp, &mut r), draw(c.cc_mm, &mut r), draw(c.cc_pm, &mut r), draw(c.cc_mp, &mut r));
                expectation(&s).unwrap().value
            })
            .collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd / analytic - 1.0).abs() < 0.05, "{sd} vs {analytic}");
    }

    #[test]
    fn printed_values_replay() {
        let e = PRINTED.map(|(v, s)| Expectation::new(v, s));
        let r = chsh_s(e);
        assert!((r.s - 2.6925).abs() < 5e-4, "{}", r.s);
        assert!((0.024..=0.026).contains(&r.sigma_s), "{}", r.sigma_s);
        assert!((r.violation_sigmas - 27.19).abs() < 0.05, "{}", r.violation_sigmas);
    }

    #[test]
    fn tsirelson_and_zero() {
        let h = FRAC_1_SQRT_2;
        let r = chsh_s([h, -h, h, h].map(|v| Expectation::new(v, 0.0)));
        assert!((r.s - 2.0 * SQRT_2).abs() < 1e-12);
        assert_eq!(r.violation_sigmas, f64::INFINITY);
        let z = chsh_s([Expectation::new(0.0, 0.0); 4]);
        assert_eq!(z.s, 0.0);
    }

    #[test]
    fn canonical_settings_give_tsirelson_under_model() {
        let e = CANONICAL_SETTINGS_DEG
            .map(|(a, b)| Expectation::new(correlation_model(a.to_radians(), b.to_radians(), 0.0, 1.0), 0.0));
        assert!((chsh_s(e).s - 2.0 * SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn noiseless_curve_fit() {
        for theta_a_deg in [0.0f64, 45.0, 10.0] {
            let ta = theta_a_deg.to_radians();
            let samples: Vec<(f64, Expectation)> = (0..9)
                .map(|k| {
                    let tb = (k as f64 * 22.5).to_radians();
                    (tb, Expectation::new(correlation_model(ta, tb, 0.0, 1.0), 0.0))
                })
                .collect();
            let fit = fit_correlation_curve(&samples, ta).unwrap();
            assert!((fit.visibility - 1.0).abs() < 1e-6);
            assert!(fit.phase_offset_rad().abs() < 1e-6, "{}", fit.phase_offset_rad());
        }
    }

    #[test]
    fn noisy_curve_recovers_visibility() {
        let v = 0.946;
        let per_point = 3000.0 * 10.0;
        let mut r = rng::stream(77, &[]);
        let mut pulls = Vec::new();
        for trial in 0..20u64 {
            let samples: Vec<(f64, Expectation)> = (0..9)
                .map(|k| {
                    let tb = (k as f64 * 22.5).to_radians();
                    let e = correlation_model(0.0, tb, 0.0, v);
                    let same = per_point * 0.5 * (1.0 + e);
                    let diff = per_point * 0.5 * (1.0 - e);
                    let d = |m: f64, r: &mut rng::SimRng| Poisson::new(m.max(1e-9)).unwrap().sample(r) as u64;
                    let c = SettingCounts::new(d(same / 2.0, &mut r), d(same / 2.0, &mut r), d(diff / 2.0, &mut r), d(diff / 2.0, &mut r));
                    (tb, expectation(&c).unwrap())
                })
                .collect();
            let fit = fit_correlation_curve(&samples, 0.0).unwrap();
            let pull = (fit.visibility - v) / fit.visibility_sigma;
            assert!(pull.abs() < 3.0, "trial {trial}: {pull}");
            pulls.push(pull);
        }
        let mean = pulls.iter().sum::<f64>() / pulls.len() as f64;
        assert!(mean.abs() < 1.5);
    }

    #[test]
    fn degenerate_sweep_rejected() {
        let e = Expectation::new(0.5, 0.01);
        let same = vec![(0.3, e); 8];
        assert_eq!(fit_correlation_curve(&same, 0.0), Err(BellError::DegenerateSweep(1)));
        let four: Vec<_> = (0..4).map(|k| (k as f64 * 0.3, e)).collect();
        assert_eq!(fit_correlation_curve(&four, 0.0), Err(BellError::DegenerateSweep(4)));
    }

    #[test]
    fn analyzer_flip_is_antisymmetric() {
        for k in 0..12 {
            let ta = k as f64 * 0.37;
            let tb = k as f64 * 0.91;
            let e = correlation_model(ta, tb, 0.3, 0.9);
            let flipped = correlation_model(ta + std::f64::consts::FRAC_PI_2, tb, 0.3, 0.9);
            assert!((e + flipped).abs() < 1e-12);
        }
    }

    #[test]
    fn curve_csv_header() {
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &[(std::f64::consts::FRAC_PI_4, Expectation::new(0.1, 0.01))]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("theta_B_deg,E,sigma\n45,0.1,0.01"));
    }

    proptest! {
        #[test]
        fn expectation_is_bounded(pp in 0u64..10_000, mm in 0u64..10_000, pm in 0u64..10_000, mp in 1u64..10_000) {
            let e = expectation(&SettingCounts::new(pp, mm, pm, mp)).unwrap();
            prop_assert!(e.value.abs() <= 1.0);
            prop_assert!(e.sigma >= 0.0);
        }

        #[test]
        fn scaling_counts_keeps_value_and_shrinks_sigma(
            pp in 1u64..5_000, mm in 1u64..5_000, pm in 1u64..5_000, mp in 1u64..5_000, k in 2u64..50,
        ) {
            let e1 = expectation(&SettingCounts::new(pp, mm, pm, mp)).unwrap();
            let ek = expectation(&SettingCounts::new(k * pp, k * mm, k * pm, k * mp)).unwrap();
            prop_assert!((e1.value - ek.value).abs() < 1e-12);
            prop_assert!((ek.sigma * (k as f64).sqrt() - e1.sigma).abs() < 1e-12);
        }

        #[test]
        fn sigma_s_is_quadrature(s in prop::array::uniform4(0.0f64..0.1), v in prop::array::uniform4(-1.0f64..1.0)) {
            let e = [0, 1, 2, 3].map(|i| Expectation::new(v[i], s[i]));
            let r = chsh_s(e);
            let q = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2] + s[3] * s[3]).sqrt();
            prop_assert!((r.sigma_s - q).abs() < 1e-15);
        }
    }
}
