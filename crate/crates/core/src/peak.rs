//! Gaussian peak fitting on delay histograms.
//!
//! The model integrates `A·exp(−(x−c)²/2σ²) + B` over each bin instead of
//! sampling it at the bin centre, so the fitted width is that of the
//! underlying peak and not the bin-smeared one. For bins much narrower than
//! the peak the two coincide.
//!
//! Histograms of differences between quantized tags need one more step. Each
//! lattice bin holds a single difference value, and the two independent
//! rounding errors smear the true delay with a triangular kernel spanning
//! one resolution step each way. [`BinShape::Lattice`] models that kernel.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use statrs::distribution::{DiscreteCDF, Poisson};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::coincidence::DelayHistogram;

/// `FWHM = FWHM_PER_SIGMA · σ` for a Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

/// Family-wise false-peak probability for the significance test.
const FALSE_PEAK_PROBABILITY: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeakError {
    #[error("histogram is empty")]
    Empty,
    #[error("no significant peak: max bin {max} over baseline {baseline:.3}")]
    NoPeak { max: u64, baseline: f64 },
    #[error("Gaussian fit did not converge")]
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakMethod {
    GaussianFit,
    /// Centroid of the bins above half maximum (fit fallback).
    Centroid,
    /// All excess counts sit in one bin; the centre is that bin's centre and
    /// the width is unresolved.
    SingleBin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakFit {
    pub center_ps: f64,
    pub fwhm_ps: f64,
    pub amplitude: f64,
    pub baseline: f64,
    /// Standard error of the centre estimate.
    pub center_sigma_ps: f64,
    pub method: PeakMethod,
}

impl PeakFit {
    pub fn sigma_ps(&self) -> f64 {
        self.fwhm_ps / FWHM_PER_SIGMA
    }

    pub fn is_degenerate(&self) -> bool {
        self.method == PeakMethod::SingleBin
    }
}

/// How the counts of one bin relate to the underlying continuous peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinShape {
    /// Continuous delays integrated over each bin.
    #[default]
    Box,
    /// Differences of tags quantized to the bin width, one lattice value per
    /// bin.
    Lattice,
}

/// Outcome of the dominance test on a histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakCandidate {
    pub index: usize,
    pub max: u64,
    pub baseline: f64,
    pub significant: bool,
}

fn guard_bins(n: usize) -> usize {
    (n / 50).clamp(4, 64)
}

/// Locates the tallest bin and tests it against the accidental floor.
///
/// The baseline is the mean of the bins away from the peak. A peak must
/// exceed `baseline + 5·√baseline` and be improbable as the maximum of a flat
/// Poisson histogram (Bonferroni over the bins).
pub fn find_peak_candidate(h: &DelayHistogram) -> Result<PeakCandidate, PeakError> {
    let index = h.argmax().ok_or(PeakError::Empty)?;
    let max = h.counts[index];
    let g = guard_bins(h.len());
    let (sum, n) = h
        .counts
        .iter()
        .enumerate()
        .filter(|(i, _)| i.abs_diff(index) > g)
        .fold((0u64, 0usize), |(s, n), (_, &c)| (s + c, n + 1));
    let baseline = if n > 0 {
        sum as f64 / n as f64
    } else {
        let mut sorted = h.counts.clone();
        sorted.sort_unstable();
        sorted[sorted.len() / 2] as f64
    };
    let above_floor = max as f64 > baseline + 5.0 * baseline.sqrt();
    let improbable = if max == 0 {
        false
    } else if baseline <= 0.0 {
        true
    } else {
        let tail = Poisson::new(baseline)
            .map(|p| p.sf(max - 1))
            .unwrap_or(0.0);
        tail < FALSE_PEAK_PROBABILITY / h.len() as f64
    };
    Ok(PeakCandidate {
        index,
        max,
        baseline,
        significant: above_floor && improbable,
    })
}

fn phi(u: f64) -> f64 {
    0.5 * (1.0 + erf(u / std::f64::consts::SQRT_2))
}

fn pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// ∫∫ pdf: the antiderivative of phi
fn phi2(u: f64) -> f64 {
    u * phi(u) + pdf(u)
}

fn model(shape: BinShape, x: f64, h: f64, p: &Vector4<f64>) -> (f64, Vector4<f64>) {
    match shape {
        BinShape::Box => bin_model(x, h, p),
        BinShape::Lattice => lattice_model(x, 2.0 * h, p),
    }
}

/// Model value and gradient at lattice point `x` with step `r`: the Gaussian
/// convolved with the triangle `(1 − |y|/r)₊`.
fn lattice_model(x: f64, r: f64, p: &Vector4<f64>) -> (f64, Vector4<f64>) {
    let (amp, c, s, base) = (p[0], p[1], p[2], p[3]);
    let z = [(x + r - c) / s, (x - c) / s, (x - r - c) / s];
    let w = [1.0, -2.0, 1.0];
    let second_diff = |f: fn(f64) -> f64| z.iter().zip(w).map(|(&z, w)| w * f(z)).sum::<f64>();
    let t = s / r * second_diff(phi2);
    let dt_dc = -second_diff(phi) / r;
    let dt_ds = second_diff(pdf) / r;
    let k = (2.0 * std::f64::consts::PI).sqrt() / r;
    let val = base + amp * k * s * t;
    let d_amp = k * s * t;
    let d_c = amp * k * s * dt_dc;
    let d_s = amp * k * (t + s * dt_ds);
    (val, Vector4::new(d_amp, d_c, d_s, 1.0))
}

/// Model value and gradient for one bin `[x − h, x + h]`, parameters
/// `(A, c, σ, B)`.
fn bin_model(x: f64, h: f64, p: &Vector4<f64>) -> (f64, Vector4<f64>) {
    let (amp, c, s, base) = (p[0], p[1], p[2], p[3]);
    let up = (x + h - c) / s;
    let lo = (x - h - c) / s;
    let g = phi(up) - phi(lo);
    let k = (2.0 * std::f64::consts::PI).sqrt() / (2.0 * h);
    let val = base + amp * k * s * g;
    let d_amp = k * s * g;
    let d_c = amp * k * (pdf(lo) - pdf(up));
    let d_s = amp * k * (g - (up * pdf(up) - lo * pdf(lo)));
    (val, Vector4::new(d_amp, d_c, d_s, 1.0))
}

struct Normal {
    jtj: Matrix4<f64>,
    jtr: Vector4<f64>,
    ssr: f64,
}

fn normal_equations(shape: BinShape, xs: &[f64], ys: &[f64], h: f64, p: &Vector4<f64>) -> Normal {
    let mut jtj = Matrix4::zeros();
    let mut jtr = Vector4::zeros();
    let mut ssr = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let (m, g) = model(shape, x, h, p);
        let r = y - m;
        ssr += r * r;
        jtj += g * g.transpose();
        jtr += g * r;
    }
    Normal { jtj, jtr, ssr }
}

fn ssr_at(shape: BinShape, xs: &[f64], ys: &[f64], h: f64, p: &Vector4<f64>) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - model(shape, x, h, p).0;
            r * r
        })
        .sum()
}

/// Nonlinear least-squares Gaussian fit around the dominant peak.
///
/// Fails with [`PeakError::NoPeak`] when no bin stands out from the floor.
/// A peak whose excess counts all sit in one bin is returned with
/// [`PeakMethod::SingleBin`].
pub fn fit_gaussian_peak(h: &DelayHistogram) -> Result<PeakFit, PeakError> {
    fit_gaussian_peak_with(h, BinShape::Box)
}

/// [`fit_gaussian_peak`] with an explicit bin model.
pub fn fit_gaussian_peak_with(h: &DelayHistogram, shape: BinShape) -> Result<PeakFit, PeakError> {
    let cand = find_peak_candidate(h)?;
    if !cand.significant {
        return Err(PeakError::NoPeak { max: cand.max, baseline: cand.baseline });
    }
    if let Some(single) = single_bin(h, &cand) {
        return Ok(single);
    }
    levenberg_marquardt(h, &cand, shape)
}

/// [`fit_gaussian_peak`], falling back to the half-maximum centroid when the
/// fit does not converge.
pub fn estimate_peak(h: &DelayHistogram) -> Result<PeakFit, PeakError> {
    estimate_peak_with(h, BinShape::Box)
}

pub fn estimate_peak_with(h: &DelayHistogram, shape: BinShape) -> Result<PeakFit, PeakError> {
    match fit_gaussian_peak_with(h, shape) {
        Err(PeakError::NotConverged) => {
            let cand = find_peak_candidate(h)?;
            Ok(centroid(h, &cand))
        }
        other => other,
    }
}

fn single_bin(h: &DelayHistogram, cand: &PeakCandidate) -> Option<PeakFit> {
    let excess = cand.max as f64 - cand.baseline;
    let threshold = cand.baseline + (3.0 * cand.baseline.sqrt()).max(0.1 * excess);
    let lo = cand.index.saturating_sub(3);
    let hi = (cand.index + 3).min(h.len() - 1);
    let others = (lo..=hi)
        .filter(|&i| i != cand.index)
        .any(|i| h.counts[i] as f64 > threshold);
    (!others).then(|| PeakFit {
        center_ps: h.bin_center(cand.index),
        fwhm_ps: 0.0,
        amplitude: excess,
        baseline: cand.baseline,
        center_sigma_ps: h.bin_ps as f64 / 12f64.sqrt(),
        method: PeakMethod::SingleBin,
    })
}

fn centroid(h: &DelayHistogram, cand: &PeakCandidate) -> PeakFit {
    let half = cand.baseline + 0.5 * (cand.max as f64 - cand.baseline);
    // contiguous run of bins above half maximum around the peak
    let mut lo = cand.index;
    while lo > 0 && h.counts[lo - 1] as f64 > half {
        lo -= 1;
    }
    let mut hi = cand.index;
    while hi + 1 < h.len() && h.counts[hi + 1] as f64 > half {
        hi += 1;
    }
    let (mut w, mut wx) = (0.0, 0.0);
    for i in lo..=hi {
        let c = h.counts[i] as f64 - cand.baseline;
        w += c;
        wx += c * h.bin_center(i);
    }
    let center = if w > 0.0 { wx / w } else { h.bin_center(cand.index) };
    PeakFit {
        center_ps: center,
        fwhm_ps: ((hi - lo + 1) as u64 * h.bin_ps) as f64,
        amplitude: cand.max as f64 - cand.baseline,
        baseline: cand.baseline,
        center_sigma_ps: h.bin_ps as f64 / 12f64.sqrt(),
        method: PeakMethod::Centroid,
    }
}

fn levenberg_marquardt(h: &DelayHistogram, cand: &PeakCandidate, shape: BinShape) -> Result<PeakFit, PeakError> {
    let bin = h.bin_ps as f64;
    let half_bin = bin / 2.0;
    let origin = h.bin_center(cand.index);

    // initial width from the second moment of the excess near the peak
    let g = guard_bins(h.len());
    let lo = cand.index.saturating_sub(g);
    let hi = (cand.index + g).min(h.len() - 1);
    let (mut w, mut wx, mut wxx) = (0.0, 0.0, 0.0);
    for i in lo..=hi {
        let c = (h.counts[i] as f64 - cand.baseline).max(0.0);
        let x = h.bin_center(i) - origin;
        w += c;
        wx += c * x;
        wxx += c * x * x;
    }
    let mean = wx / w;
    let sigma0 = ((wxx / w - mean * mean).max(0.0)).sqrt().max(half_bin);

    // fit window: the peak plus enough flanks to pin the baseline
    let reach = ((10.0 * sigma0 / bin).ceil() as usize).max(2 * g).max(16);
    let a = cand.index.saturating_sub(reach);
    let b = (cand.index + reach).min(h.len() - 1);
    let xs: Vec<f64> = (a..=b).map(|i| h.bin_center(i) - origin).collect();
    let ys: Vec<f64> = (a..=b).map(|i| h.counts[i] as f64).collect();

    let excess = cand.max as f64 - cand.baseline;
    let amp0 = excess * bin / ((2.0 * std::f64::consts::PI).sqrt() * sigma0).max(bin);
    let mut p = Vector4::new(amp0.max(excess), mean, sigma0, cand.baseline);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut normal = normal_equations(shape, &xs, &ys, half_bin, &p);
    for _ in 0..500 {
        let mut damped = normal.jtj;
        for k in 0..4 {
            damped[(k, k)] += lambda * normal.jtj[(k, k)].max(1e-12);
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&normal.jtr)) else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
            continue;
        };
        let trial = p + step;
        let valid = trial.iter().all(|v| v.is_finite()) && trial[2] > 1e-3 * bin;
        let trial_ssr = if valid { ssr_at(shape, &xs, &ys, half_bin, &trial) } else { f64::INFINITY };
        if trial_ssr <= normal.ssr {
            let rel = (normal.ssr - trial_ssr) / normal.ssr.max(1e-300);
            let small_step = step[1].abs() < 1e-6 * bin && (step[2] / trial[2]).abs() < 1e-8;
            p = trial;
            normal = normal_equations(shape, &xs, &ys, half_bin, &p);
            lambda = (lambda * 0.1).max(1e-12);
            if rel < 1e-12 || small_step {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                // no downhill step left: at a minimum to numerical precision
                converged = true;
                break;
            }
        }
    }
    let center = origin + p[1];
    let inside = center >= h.start_ps as f64 && center <= h.end_ps() as f64;
    if !converged || !inside || p[0] <= 0.0 || !(p[2] > 0.0) {
        return Err(PeakError::NotConverged);
    }
    let dof = xs.len().saturating_sub(4).max(1) as f64;
    let s2 = normal.ssr / dof;
    let center_sigma = normal
        .jtj
        .try_inverse()
        .map(|inv| (inv[(1, 1)] * s2).max(0.0).sqrt())
        .unwrap_or(f64::NAN);
    Ok(PeakFit {
        center_ps: center,
        fwhm_ps: FWHM_PER_SIGMA * p[2],
        amplitude: p[0],
        baseline: p[3],
        center_sigma_ps: center_sigma,
        method: PeakMethod::GaussianFit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Expected counts of a Gaussian peak integrated over each bin.
    fn synthetic(start: i64, bin: u64, n: usize, center: f64, sigma: f64, total: f64, base: f64) -> DelayHistogram {
        let counts = (0..n)
            .map(|i| {
                let a = start as f64 + (i as u64 * bin) as f64;
                let b = a + bin as f64;
                let mass = phi((b - center) / sigma) - phi((a - center) / sigma);
                (total * mass + base).round() as u64
            })
            .collect();
        DelayHistogram { start_ps: start, bin_ps: bin, counts }
    }

    #[test]
    fn recovers_paper_width_on_fine_bins() {
        // σ = 137 ps ⇒ FWHM 322.6 ps
        let h = synthetic(-5000, 4, 2500, 123.0, 137.0, 1.0e7, 0.0);
        let f = fit_gaussian_peak(&h).unwrap();
        assert_eq!(f.method, PeakMethod::GaussianFit);
        assert!((f.fwhm_ps / (FWHM_PER_SIGMA * 137.0) - 1.0).abs() < 0.01, "{}", f.fwhm_ps);
        assert!((f.center_ps - 123.0).abs() < 1.0);
    }

    #[test]
    fn recovers_width_on_tagger_bins() {
        let h = synthetic(-156 * 64 - 78, 156, 129, 40.0, 137.0, 1.0e6, 20.0);
        let f = fit_gaussian_peak(&h).unwrap();
        assert!((f.fwhm_ps / (FWHM_PER_SIGMA * 137.0) - 1.0).abs() < 0.01, "{}", f.fwhm_ps);
        assert!((f.center_ps - 40.0).abs() < 1.0);
        assert!((f.baseline - 20.0).abs() < 0.5);
    }

    #[test]
    fn lattice_model_undoes_quantization() {
        use rand::Rng;
        use rand_distr::{Distribution, Normal};
        // two tags quantized independently, σ = 137 ps each side combined
        let r = 156u64;
        let mut rng = crate::rng::stream(5, &[]);
        let jitter = Normal::new(0.0, 137.0 / 2f64.sqrt()).unwrap();
        let n = 64i64;
        let mut counts = vec![0u64; (2 * n + 1) as usize];
        for _ in 0..400_000 {
            let t = rng.random_range(1.0e6..2.0e6);
            let qa = ((t + jitter.sample(&mut rng)) / r as f64).floor() as i64;
            let qb = ((t + 40.0 + jitter.sample(&mut rng)) / r as f64).floor() as i64;
            counts[(qb - qa + n) as usize] += 1;
        }
        let h = DelayHistogram { start_ps: -n * r as i64 - r as i64 / 2, bin_ps: r, counts };
        let want = FWHM_PER_SIGMA * 137.0;
        let lat = fit_gaussian_peak_with(&h, BinShape::Lattice).unwrap();
        assert!((lat.fwhm_ps / want - 1.0).abs() < 0.01, "{}", lat.fwhm_ps);
        assert!((lat.center_ps - 40.0).abs() < 2.0, "{}", lat.center_ps);
        // the box model absorbs the extra r²/12 of rounding variance
        let boxed = fit_gaussian_peak(&h).unwrap();
        let inflated = FWHM_PER_SIGMA * (137.0f64.powi(2) + (r * r) as f64 / 12.0).sqrt();
        assert!((boxed.fwhm_ps / inflated - 1.0).abs() < 0.01, "{}", boxed.fwhm_ps);
    }

    #[test]
    fn lattice_gradient_matches_finite_differences() {
        let p = Vector4::new(50.0, 12.0, 90.0, 3.0);
        for x in [-312.0, -156.0, 0.0, 156.0, 468.0] {
            let (_, g) = lattice_model(x, 156.0, &p);
            for k in 0..4 {
                let eps = 1e-4 * p[k].abs().max(1.0);
                let mut up = p;
                let mut dn = p;
                up[k] += eps;
                dn[k] -= eps;
                let fd = (lattice_model(x, 156.0, &up).0 - lattice_model(x, 156.0, &dn).0) / (2.0 * eps);
                assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "k={k} x={x} {fd} {}", g[k]);
            }
        }
    }

    #[test]
    fn single_nonzero_bin_is_degenerate() {
        let mut counts = vec![0u64; 40];
        counts[17] = 9;
        let h = DelayHistogram { start_ps: 0, bin_ps: 156, counts };
        let f = fit_gaussian_peak(&h).unwrap();
        assert!(f.is_degenerate());
        assert_eq!(f.center_ps, h.bin_center(17));
    }

    #[test]
    fn flat_histogram_has_no_peak() {
        let h = DelayHistogram { start_ps: 0, bin_ps: 100, counts: vec![50; 200] };
        assert!(matches!(fit_gaussian_peak(&h), Err(PeakError::NoPeak { .. })));
        let empty = DelayHistogram { start_ps: 0, bin_ps: 100, counts: vec![0; 10] };
        assert!(matches!(fit_gaussian_peak(&empty), Err(PeakError::NoPeak { .. })));
    }

    #[test]
    fn noisy_flat_histogram_has_no_peak() {
        use rand::Rng;
        let mut rng = crate::rng::stream(12, &[]);
        let counts = (0..5000)
            .map(|_| {
                // binomial(40, 0.5) ~ mean 20
                (0..40).filter(|_| rng.random::<bool>()).count() as u64
            })
            .collect();
        let h = DelayHistogram { start_ps: 0, bin_ps: 100, counts };
        assert!(matches!(fit_gaussian_peak(&h), Err(PeakError::NoPeak { .. })));
    }

    #[test]
    fn centroid_fallback() {
        let mut counts = vec![0u64; 20];
        counts[9] = 10;
        counts[10] = 10;
        let h = DelayHistogram { start_ps: 0, bin_ps: 10, counts };
        let cand = find_peak_candidate(&h).unwrap();
        let c = centroid(&h, &cand);
        assert!((c.center_ps - 100.0).abs() < 1e-9);
        assert_eq!(c.method, PeakMethod::Centroid);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = Vector4::new(50.0, 12.0, 90.0, 3.0);
        for x in [-300.0, -40.0, 0.0, 77.0, 260.0] {
            let (_, g) = bin_model(x, 78.0, &p);
            for k in 0..4 {
                let eps = 1e-4 * p[k].abs().max(1.0);
                let mut up = p;
                let mut dn = p;
                up[k] += eps;
                dn[k] -= eps;
                let fd = (bin_model(x, 78.0, &up).0 - bin_model(x, 78.0, &dn).0) / (2.0 * eps);
                assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "k={k} x={x} {fd} {}", g[k]);
            }
        }
    }
}
