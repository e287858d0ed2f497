//! Power-sweep fits of `aP² + bP + c`, CAR prediction, brightness and
//! spectrum tables.

use std::io;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of one 100 GHz grid slot at 1550 nm.
pub use crate::source::GRID_BANDWIDTH_NM;

#[derive(Debug, Error)]
pub enum RateError {
    #[error("need at least 3 distinct powers, got {0}")]
    TooFewPowers(usize),
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("sweep mixes rate kinds {0:?} and {1:?}")]
    MixedKinds(RateKind, RateKind),
    #[error("invalid sweep point {index}: {why}")]
    InvalidPoint { index: usize, why: &'static str },
    #[error("no feasible non-negative fit")]
    Infeasible,
    #[error("bandwidth must be positive")]
    Bandwidth,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    SinglesS,
    SinglesI,
    Coincidences,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub power_mw: f64,
    pub rate_hz: f64,
    pub which: RateKind,
    /// Integration time behind the rate; enables Poisson weighting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerSweep {
    pub points: Vec<SweepPoint>,
}

impl PowerSweep {
    pub fn new(points: Vec<SweepPoint>) -> Self {
        PowerSweep { points }
    }

    pub fn of_kind(&self, which: RateKind) -> PowerSweep {
        PowerSweep {
            points: self.points.iter().filter(|p| p.which == which).copied().collect(),
        }
    }

    pub fn kinds(&self) -> Vec<RateKind> {
        let mut k: Vec<RateKind> = self.points.iter().map(|p| p.which).collect();
        k.sort();
        k.dedup();
        k
    }

    /// Reads CSV with columns `power_mw,rate_hz,which[,duration_s]`.
    pub fn read_csv<R: io::Read>(r: R) -> Result<Self, RateError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let points = rdr
            .deserialize()
            .collect::<Result<Vec<SweepPoint>, _>>()?;
        Ok(PowerSweep { points })
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), RateError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["power_mw", "rate_hz", "which", "duration_s"])?;
        for p in &self.points {
            let which = match p.which {
                RateKind::SinglesS => "singles_s",
                RateKind::SinglesI => "singles_i",
                RateKind::Coincidences => "coincidences",
            };
            out.write_record([
                p.power_mw.to_string(),
                p.rate_hz.to_string(),
                which.to_string(),
                p.duration_s.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Unweighted,
    /// Each rate weighted by the inverse of its Poisson variance
    /// `rate/duration`.
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    pub weighting: Weighting,
    pub non_negative: bool,
}

/// High-power residual pattern: rates falling below the fit at the top of
/// the sweep point to nonlinear absorption or detector saturation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationDiagnostic {
    pub top_points: usize,
    /// Mean of `(measured − fit)/fit` over the highest powers.
    pub mean_relative_residual: f64,
    pub suspected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub which: Option<RateKind>,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Standard errors of `(a, b, c)`; absent with no residual degrees of
    /// freedom in an unweighted fit.
    pub std_errors: Option<[f64; 3]>,
    pub residual_norm: f64,
    /// Residual norm over the norm of the rates.
    pub relative_residual: f64,
    pub n_points: usize,
    pub weighting: Weighting,
    pub constrained: bool,
    /// Names of coefficients that came out negative.
    pub negative: Vec<String>,
    pub saturation: SaturationDiagnostic,
}

impl RateFit {
    pub fn eval(&self, power_mw: f64) -> f64 {
        (self.a * power_mw + self.b) * power_mw + self.c
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }
}

fn validate(sweep: &PowerSweep, opts: &FitOptions) -> Result<Option<RateKind>, RateError> {
    let mut kind = None;
    for (index, p) in sweep.points.iter().enumerate() {
        if !p.power_mw.is_finite() || !p.rate_hz.is_finite() {
            return Err(RateError::InvalidPoint { index, why: "non-finite value" });
        }
        match kind {
            None => kind = Some(p.which),
            Some(k) if k != p.which => return Err(RateError::MixedKinds(k, p.which)),
            _ => {}
        }
        if opts.weighting == Weighting::Poisson {
            match p.duration_s {
                Some(d) if d > 0.0 => {}
                _ => return Err(RateError::InvalidPoint { index, why: "Poisson weighting needs a positive duration" }),
            }
            if p.rate_hz <= 0.0 {
                return Err(RateError::InvalidPoint { index, why: "Poisson weighting needs a positive rate" });
            }
        }
    }
    let mut powers: Vec<f64> = sweep.points.iter().map(|p| p.power_mw).collect();
    powers.sort_by(f64::total_cmp);
    powers.dedup();
    if powers.len() < 3 {
        return if sweep.points.len() >= 3 {
            Err(RateError::RankDeficient)
        } else {
            Err(RateError::TooFewPowers(powers.len()))
        };
    }
    Ok(kind)
}

struct Solved {
    coef: [f64; 3],
    cov: Option<DMatrix<f64>>,
    wrss: f64,
}

/// Weighted least squares restricted to the basis columns in `active`
/// (0 = P², 1 = P, 2 = 1), solved by QR on column-scaled data.
fn solve(powers: &[f64], y: &[f64], w: &[f64], active: &[usize], absolute: bool) -> Result<Solved, RateError> {
    let n = powers.len();
    let k = active.len();
    if n < k {
        return Err(RateError::RankDeficient);
    }
    let basis = |p: f64, col: usize| match col {
        0 => p * p,
        1 => p,
        _ => 1.0,
    };
    let mut x = DMatrix::<f64>::zeros(n, k);
    let mut rhs = DVector::<f64>::zeros(n);
    for i in 0..n {
        let sw = w[i].sqrt();
        for (j, &col) in active.iter().enumerate() {
            x[(i, j)] = sw * basis(powers[i], col);
        }
        rhs[i] = sw * y[i];
    }
    let scale: Vec<f64> = (0..k).map(|j| x.column(j).norm()).collect();
    if scale.iter().any(|&s| s == 0.0) {
        return Err(RateError::RankDeficient);
    }
    for (j, s) in scale.iter().enumerate() {
        x.column_mut(j).scale_mut(1.0 / s);
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if (0..k).any(|j| r[(j, j)].abs() <= 1e-12 * diag_max) {
        return Err(RateError::RankDeficient);
    }
    let qtb = qr.q().transpose() * &rhs;
    let sol = r
        .solve_upper_triangular(&qtb)
        .ok_or(RateError::RankDeficient)?;
    let resid = &rhs - &x * &sol;
    let wrss = resid.norm_squared();
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(RateError::RankDeficient)?;
    let unscaled = &rinv * rinv.transpose();
    let dof = n as f64 - k as f64;
    let factor = if absolute {
        Some(1.0)
    } else if dof > 0.0 {
        Some(wrss / dof)
    } else {
        None
    };
    let mut coef = [0.0; 3];
    for (j, &col) in active.iter().enumerate() {
        coef[col] = sol[j] / scale[j];
    }
    let cov = factor.map(|f| {
        let mut full = DMatrix::<f64>::zeros(3, 3);
        for (a, &ca) in active.iter().enumerate() {
            for (b, &cb) in active.iter().enumerate() {
                full[(ca, cb)] = f * unscaled[(a, b)] / (scale[a] * scale[b]);
            }
        }
        full
    });
    Ok(Solved { coef, cov, wrss })
}

/// Least-squares fit of `aP² + bP + c`.
///
/// Unweighted fits scale the covariance by the residual variance; Poisson
/// weighted fits use the known count variances. With `non_negative` every
/// subset of the basis is tried and the best fit with no negative
/// coefficient is kept.
pub fn fit_rate_curve(sweep: &PowerSweep, opts: &FitOptions) -> Result<RateFit, RateError> {
    let which = validate(sweep, opts)?;
    let powers: Vec<f64> = sweep.points.iter().map(|p| p.power_mw).collect();
    let y: Vec<f64> = sweep.points.iter().map(|p| p.rate_hz).collect();
    let w: Vec<f64> = match opts.weighting {
        Weighting::Unweighted => vec![1.0; y.len()],
        Weighting::Poisson => sweep
            .points
            .iter()
            .map(|p| p.duration_s.unwrap_or(1.0) / p.rate_hz)
            .collect(),
    };
    let absolute = opts.weighting == Weighting::Poisson;
    let full = solve(&powers, &y, &w, &[0, 1, 2], absolute)?;
    let solved = if opts.non_negative && full.coef.iter().any(|&c| c < 0.0) {
        const SUBSETS: [&[usize]; 6] = [&[0, 1], &[0, 2], &[1, 2], &[0], &[1], &[2]];
        SUBSETS
            .iter()
            .filter_map(|s| solve(&powers, &y, &w, s, absolute).ok())
            .filter(|s| s.coef.iter().all(|&c| c >= 0.0))
            .min_by(|a, b| a.wrss.total_cmp(&b.wrss))
            .ok_or(RateError::Infeasible)?
    } else {
        full
    };
    let [a, b, c] = solved.coef;
    let eval = |p: f64| (a * p + b) * p + c;
    let residual_norm = powers
        .iter()
        .zip(&y)
        .map(|(&p, &v)| (v - eval(p)).powi(2))
        .sum::<f64>()
        .sqrt();
    let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let negative = [("a", a), ("b", b), ("c", c)]
        .iter()
        .filter(|(_, v)| *v < 0.0)
        .map(|(n, _)| n.to_string())
        .collect();
    Ok(RateFit {
        which,
        a,
        b,
        c,
        std_errors: solved
            .cov
            .map(|cov| [0, 1, 2].map(|i| cov[(i, i)].max(0.0).sqrt())),
        residual_norm,
        relative_residual: if y_norm > 0.0 { residual_norm / y_norm } else { residual_norm },
        n_points: y.len(),
        weighting: opts.weighting,
        constrained: opts.non_negative,
        negative,
        saturation: saturation(&powers, &y, eval),
    })
}

fn saturation(powers: &[f64], y: &[f64], eval: impl Fn(f64) -> f64) -> SaturationDiagnostic {
    let mut idx: Vec<usize> = (0..powers.len()).collect();
    idx.sort_by(|&i, &j| powers[i].total_cmp(&powers[j]));
    let top = powers.len().div_ceil(3);
    let (low, high) = idx.split_at(idx.len() - top);
    let rel = |f: &dyn Fn(f64) -> f64, i: usize| {
        let m = f(powers[i]);
        if m != 0.0 { (y[i] - m) / m.abs() } else { 0.0 }
    };
    let mean_relative_residual = high.iter().map(|&i| rel(&eval, i)).sum::<f64>() / top as f64;
    // refit the low-power part alone and compare the top points with its
    // extrapolation; a roll-off shows as a consistent deficit
    let lp: Vec<f64> = low.iter().map(|&i| powers[i]).collect();
    let ly: Vec<f64> = low.iter().map(|&i| y[i]).collect();
    let suspected = top >= 2
        && low.len() >= 3
        && solve(&lp, &ly, &vec![1.0; lp.len()], &[0, 1, 2], false)
            .map(|s| {
                let [a, b, c] = s.coef;
                let f = move |p: f64| (a * p + b) * p + c;
                let low_rms = (low.iter().map(|&i| rel(&f, i).powi(2)).sum::<f64>() / low.len() as f64).sqrt();
                let deficits: Vec<f64> = high.iter().map(|&i| rel(&f, i)).collect();
                let mean = deficits.iter().sum::<f64>() / top as f64;
                deficits.iter().all(|&d| d < 0.0) && mean < -(3.0 * low_rms).max(0.01)
            })
            .unwrap_or(false);
    SaturationDiagnostic { top_points: top, mean_relative_residual, suspected }
}

/// CAR predicted from fitted singles and coincidence curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarPrediction {
    pub power_mw: f64,
    pub cc_hz: f64,
    pub accidentals_hz: f64,
    /// `cc/accidentals`; `f64::INFINITY` when no accidentals are predicted.
    pub car: f64,
    pub infinite: bool,
}

/// `CAR(P) = CC(P) / (S_s(P)·S_i(P)·W)`.
pub fn predict_car(power_mw: f64, fit_s: &RateFit, fit_i: &RateFit, fit_cc: &RateFit, window_ps: f64) -> CarPrediction {
    let cc = fit_cc.eval(power_mw);
    let acc = fit_s.eval(power_mw) * fit_i.eval(power_mw) * window_ps * 1e-12;
    let infinite = !(acc > 0.0);
    CarPrediction {
        power_mw,
        cc_hz: cc,
        accidentals_hz: acc.max(0.0),
        car: if infinite { f64::INFINITY } else { cc / acc },
        infinite,
    }
}

/// Source-side brightness per nm: `a / (bandwidth·10^(−loss/10))`.
pub fn brightness(a: f64, bandwidth_nm: f64, total_loss_db: f64) -> Result<f64, RateError> {
    if !(bandwidth_nm > 0.0) {
        return Err(RateError::Bandwidth);
    }
    Ok(a / (bandwidth_nm * 10f64.powf(-total_loss_db / 10.0)))
}

/// One channel pair of a spectrum scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub pair_index: u32,
    pub detuning_ghz: f64,
    pub signal_thz: f64,
    pub idler_thz: f64,
    pub a: f64,
    pub b_s: f64,
    pub b_i: f64,
    pub singles_s_hz: f64,
    pub singles_i_hz: f64,
    pub cc_hz: f64,
    pub car: f64,
    pub car_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumTable {
    pub rows: Vec<SpectrumRow>,
    /// Adjacent pairs where the noise coefficient drops but CAR falls by
    /// more than 3σ.
    pub trend_violations: Vec<u32>,
    /// χ² of the CAR values about their weighted mean, and its degrees of
    /// freedom.
    pub car_chi2: f64,
    pub car_dof: usize,
}

impl SpectrumTable {
    /// CAR rises wherever the noise falls, within statistics.
    pub fn car_follows_noise(&self) -> bool {
        self.trend_violations.is_empty()
    }

    /// CAR is consistent with a constant at the 5σ level of the χ²
    /// distribution.
    pub fn car_is_flat(&self) -> bool {
        let k = self.car_dof as f64;
        self.car_chi2 <= k + 5.0 * (2.0 * k).sqrt()
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), RateError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Sorts per-pair results by detuning and checks the CAR trend.
pub fn spectrum_scan(mut rows: Vec<SpectrumRow>) -> SpectrumTable {
    rows.sort_by(|x, y| x.detuning_ghz.total_cmp(&y.detuning_ghz));
    let trend_violations = rows
        .windows(2)
        .filter(|w| {
            let noise_falls = w[1].b_s + w[1].b_i < w[0].b_s + w[0].b_i;
            let sigma = w[0].car_sigma.hypot(w[1].car_sigma);
            noise_falls && w[1].car < w[0].car - 3.0 * sigma
        })
        .map(|w| w[1].pair_index)
        .collect();
    let weighted: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.car.is_finite() && r.car_sigma > 0.0)
        .map(|r| (r.car, 1.0 / (r.car_sigma * r.car_sigma)))
        .collect();
    let wsum: f64 = weighted.iter().map(|x| x.1).sum();
    let mean = if wsum > 0.0 {
        weighted.iter().map(|x| x.0 * x.1).sum::<f64>() / wsum
    } else {
        0.0
    };
    let car_chi2 = weighted.iter().map(|(c, w)| w * (c - mean).powi(2)).sum();
    SpectrumTable {
        rows,
        trend_violations,
        car_chi2,
        car_dof: weighted.len().saturating_sub(1),
    }
}
