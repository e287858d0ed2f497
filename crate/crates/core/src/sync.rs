//! Clock synchronization from the coincidence peak.
//!
//! The first 1PPS block of each side is scanned over a wide range to find the
//! initial offset ΔT₁. Every later block is scanned only within a narrow
//! window around the previous block's delay, giving the series ΔTᵢ and its
//! increments Δtᵢ. Subtracting ΔTᵢ from Bob's tags block by block removes the
//! relative clock drift.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coincidence::{delay_scan, CoincidenceError, DelayHistogram};
use crate::peak::{estimate_peak_with, find_peak_candidate, BinShape, PeakError, PeakFit};
use crate::tagstream::{TagError, TagStream, TimeTag};

/// Delays are kept on a 2⁻¹⁰ ps grid. Sums and differences of such values
/// stay exact in `f64` for magnitudes below 2⁴² ps, so the increments and the
/// reconstruction of ΔTᵢ from them hold bit for bit.
const DELAY_GRID: f64 = 1024.0;

fn snap(delay_ps: f64) -> f64 {
    (delay_ps * DELAY_GRID).round() / DELAY_GRID
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("no coincidence peak in the initial scan (max bin {max}, baseline {baseline:.3})")]
    NoPeak {
        max: u64,
        baseline: f64,
        histogram: Box<DelayHistogram>,
    },
    #[error("lost sync at block {block}: {consecutive} consecutive blocks without a peak")]
    SyncLoss { block: usize, consecutive: usize },
    #[error("Allan variance needs at least 2 delays, got {0}")]
    TooFewBlocks(usize),
    #[error("stream reaches block {block} but sync covers only {covered} blocks")]
    Coverage { block: u64, covered: usize },
    #[error("invalid sync parameter: {0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Coincidence(#[from] CoincidenceError),
    #[error(transparent)]
    Tag(#[from] TagError),
}

/// Scan settings for offset discovery and drift tracking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncParams {
    /// Half-width of the initial scan, centred on zero delay.
    pub search_range_ps: i64,
    /// Bin width of the initial coarse pass.
    pub coarse_bin_ps: u64,
    /// Half-width of the fine pass around the coarse peak.
    pub refine_halfwidth_ps: i64,
    /// Half-width of the per-block tracking window.
    pub fine_range_ps: i64,
    /// More consecutive peakless blocks than this abort tracking.
    pub max_consecutive_failures: usize,
    /// Minimum peak height above baseline, in counts, for a block to count as
    /// locked.
    pub min_peak_counts: f64,
}

impl Default for SyncParams {
    fn default() -> Self {
        SyncParams {
            search_range_ps: 1_000_000_000,
            coarse_bin_ps: 1000,
            refine_halfwidth_ps: 50_000,
            fine_range_ps: 10_000,
            max_consecutive_failures: 5,
            min_peak_counts: 10.0,
        }
    }
}

impl SyncParams {
    pub fn validate(&self) -> Result<(), SyncError> {
        if self.search_range_ps <= 0 {
            return Err(SyncError::Invalid("search_range_ps must be positive"));
        }
        if self.coarse_bin_ps == 0 {
            return Err(SyncError::Invalid("coarse_bin_ps must be positive"));
        }
        if self.refine_halfwidth_ps <= 0 {
            return Err(SyncError::Invalid("refine_halfwidth_ps must be positive"));
        }
        if self.fine_range_ps <= 0 {
            return Err(SyncError::Invalid("fine_range_ps must be positive"));
        }
        if !(self.min_peak_counts >= 0.0) {
            return Err(SyncError::Invalid("min_peak_counts must be non-negative"));
        }
        Ok(())
    }
}

/// Histogram over `[center − halfwidth, center + halfwidth]` whose bin
/// centres sit on multiples of the tagger resolution, where all tag
/// differences lie.
fn lattice_scan(
    a: &[u64],
    b: &[u64],
    center_ps: f64,
    halfwidth_ps: i64,
    resolution_ps: u64,
) -> Result<DelayHistogram, CoincidenceError> {
    let res = resolution_ps as i64;
    let lo = ((center_ps - halfwidth_ps as f64) / res as f64).floor() as i64;
    let hi = ((center_ps + halfwidth_ps as f64) / res as f64).ceil() as i64;
    let start = lo * res - res / 2;
    let end = start + (hi - lo + 1) * res;
    delay_scan(a, b, start, end, resolution_ps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialOffset {
    /// Fitted peak centre ΔT₁.
    pub delay_ps: f64,
    pub fit: PeakFit,
    /// Centre of the tallest coarse bin.
    pub coarse_peak_ps: f64,
    /// The fine histogram the fit ran on.
    pub histogram: DelayHistogram,
}

/// Finds ΔT₁ from the first block of each side: a coarse scan over
/// `±search_range_ps`, then a resolution-limited scan around the coarse peak.
pub fn find_initial_offset(
    block_a: &[u64],
    block_b: &[u64],
    resolution_ps: u64,
    params: &SyncParams,
) -> Result<InitialOffset, SyncError> {
    params.validate()?;
    if resolution_ps == 0 {
        return Err(SyncError::Invalid("resolution_ps must be positive"));
    }
    let coarse = delay_scan(
        block_a,
        block_b,
        -params.search_range_ps,
        params.search_range_ps,
        params.coarse_bin_ps,
    )?;
    let cand = find_peak_candidate(&coarse).map_err(|_| no_peak(&coarse, 0, 0.0))?;
    if !cand.significant {
        return Err(no_peak(&coarse, cand.max, cand.baseline));
    }
    let coarse_peak_ps = coarse.bin_center(cand.index);
    let fine = lattice_scan(
        block_a,
        block_b,
        coarse_peak_ps,
        params.refine_halfwidth_ps,
        resolution_ps,
    )?;
    let fit = match estimate_peak_with(&fine, BinShape::Lattice) {
        Ok(fit) => fit,
        Err(PeakError::NoPeak { max, baseline }) => return Err(no_peak(&fine, max, baseline)),
        Err(_) => return Err(no_peak(&fine, 0, 0.0)),
    };
    Ok(InitialOffset {
        delay_ps: snap(fit.center_ps),
        fit,
        coarse_peak_ps,
        histogram: fine,
    })
}

fn no_peak(h: &DelayHistogram, max: u64, baseline: f64) -> SyncError {
    SyncError::NoPeak { max, baseline, histogram: Box::new(h.clone()) }
}

/// Per-block delay series and its statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    /// ΔTᵢ, one per Alice block, in ps.
    pub delays_ps: Vec<f64>,
    /// Δtᵢ = ΔTᵢ − ΔTᵢ₋₁; the first entry is 0.
    pub increments_ps: Vec<f64>,
    /// Peak fit of each block; `None` for flagged blocks.
    pub fits: Vec<Option<PeakFit>>,
    /// Blocks where no peak was found and the previous delay was held.
    pub flagged: Vec<bool>,
    /// Allan variance over unflagged blocks, ns².
    pub allan_var_ns2: Option<f64>,
    /// Allan variance over all blocks including held values, ns².
    pub allan_var_inclusive_ns2: Option<f64>,
    pub correction_applied: bool,
    pub resolution_ps: u64,
    pub pps_period_ps: u64,
}

impl SyncResult {
    pub fn len(&self) -> usize {
        self.delays_ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays_ps.is_empty()
    }

    pub fn n_flagged(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }

    /// Delays of the blocks that found a peak.
    pub fn unflagged_delays(&self) -> Vec<f64> {
        self.delays_ps
            .iter()
            .zip(&self.flagged)
            .filter(|(_, &f)| !f)
            .map(|(&d, _)| d)
            .collect()
    }

    /// Allan deviation in ns, flagged blocks excluded.
    pub fn allan_dev_ns(&self) -> Option<f64> {
        self.allan_var_ns2.map(f64::sqrt)
    }

    pub fn allan_dev_inclusive_ns(&self) -> Option<f64> {
        self.allan_var_inclusive_ns2.map(f64::sqrt)
    }

    /// Checks the increment and reconstruction identities bit for bit.
    pub fn check_consistency(&self) -> bool {
        let n = self.delays_ps.len();
        if self.increments_ps.len() != n || self.fits.len() != n || self.flagged.len() != n {
            return false;
        }
        if n == 0 {
            return true;
        }
        let mut acc = self.delays_ps[0];
        self.increments_ps[0] == 0.0
            && (1..n).all(|i| {
                acc += self.increments_ps[i];
                self.increments_ps[i] == self.delays_ps[i] - self.delays_ps[i - 1]
                    && acc == self.delays_ps[i]
            })
    }

    /// CSV with columns `block_index,delta_T_ps,delta_t_ps,fit_fwhm_ps,flagged`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["block_index", "delta_T_ps", "delta_t_ps", "fit_fwhm_ps", "flagged"])?;
        for i in 0..self.len() {
            let fwhm = self.fits[i].map(|f| f.fwhm_ps.to_string()).unwrap_or_default();
            out.write_record([
                i.to_string(),
                self.delays_ps[i].to_string(),
                self.increments_ps[i].to_string(),
                fwhm,
                self.flagged[i].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn allan_summary(&self) -> AllanSummary {
        AllanSummary {
            n_blocks: self.len(),
            n_flagged: self.n_flagged(),
            allan_var_ns2: self.allan_var_ns2,
            allan_dev_ns: self.allan_dev_ns(),
            allan_var_inclusive_ns2: self.allan_var_inclusive_ns2,
            allan_dev_inclusive_ns: self.allan_dev_inclusive_ns(),
            peak_to_peak_ns: peak_to_peak_ns(&self.unflagged_delays()),
            correction_applied: self.correction_applied,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllanSummary {
    pub n_blocks: usize,
    pub n_flagged: usize,
    pub allan_var_ns2: Option<f64>,
    pub allan_dev_ns: Option<f64>,
    pub allan_var_inclusive_ns2: Option<f64>,
    pub allan_dev_inclusive_ns: Option<f64>,
    pub peak_to_peak_ns: Option<f64>,
    pub correction_applied: bool,
}

fn peak_to_peak_ns(delays_ps: &[f64]) -> Option<f64> {
    let max = delays_ps.iter().copied().reduce(f64::max)?;
    let min = delays_ps.iter().copied().reduce(f64::min)?;
    Some((max - min) / 1000.0)
}

/// Tracks ΔTᵢ for every Alice block, starting from `initial_delay_ps`.
///
/// Block i of Alice is scanned against Bob's whole stream within
/// `±fine_range_ps` of ΔTᵢ₋₁ (ΔT₀ is the initial delay), so the work per
/// block does not depend on the size of the offset. A block without a peak
/// keeps the previous delay and is flagged.
pub fn track_drift(
    a: &TagStream,
    b: &TagStream,
    initial_delay_ps: f64,
    params: &SyncParams,
) -> Result<SyncResult, SyncError> {
    params.validate()?;
    let resolution_ps = a.resolution_ps();
    let blocks = crate::tagstream::split_into_blocks(a);
    let n = blocks.len();
    let mut delays = Vec::with_capacity(n);
    let mut increments = Vec::with_capacity(n);
    let mut fits = Vec::with_capacity(n);
    let mut flagged = Vec::with_capacity(n);
    let mut prev = snap(initial_delay_ps);
    let mut failures = 0usize;
    for (i, block) in blocks.iter().enumerate() {
        let h = lattice_scan(block.times, b.times(), prev, params.fine_range_ps, resolution_ps)?;
        let fit = estimate_peak_with(&h, BinShape::Lattice).ok().filter(|f| {
            f.amplitude >= params.min_peak_counts
                && f.center_ps >= h.start_ps as f64
                && f.center_ps <= h.end_ps() as f64
        });
        let delay = match fit {
            Some(f) => {
                failures = 0;
                snap(f.center_ps)
            }
            None => {
                failures += 1;
                if failures > params.max_consecutive_failures {
                    return Err(SyncError::SyncLoss { block: i, consecutive: failures });
                }
                prev
            }
        };
        increments.push(if i == 0 { 0.0 } else { delay - prev });
        delays.push(delay);
        fits.push(fit);
        flagged.push(fit.is_none());
        prev = delay;
    }
    let mut result = SyncResult {
        delays_ps: delays,
        increments_ps: increments,
        fits,
        flagged,
        allan_var_ns2: None,
        allan_var_inclusive_ns2: None,
        correction_applied: false,
        resolution_ps,
        pps_period_ps: a.pps_period_ps(),
    };
    result.allan_var_inclusive_ns2 = allan_variance(&result.delays_ps).ok();
    result.allan_var_ns2 = allan_variance(&result.unflagged_delays()).ok();
    debug_assert!(result.check_consistency());
    Ok(result)
}

/// Two-sample variance at τ = 1 block:
/// `σ² = Σ (ΔTᵢ₊₁ − ΔTᵢ)² / (2(N − 1))`, input in ps, result in ns².
pub fn allan_variance(delays_ps: &[f64]) -> Result<f64, SyncError> {
    let n = delays_ps.len();
    if n < 2 {
        return Err(SyncError::TooFewBlocks(n));
    }
    // accumulate in ps² and convert once, so integer-valued inputs round only
    // at the final unit change
    let sum: f64 = delays_ps
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            d * d
        })
        .sum();
    Ok(sum / (2.0 * (n - 1) as f64) / 1e6)
}

/// Bob's stream after per-block drift removal.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrected {
    pub stream: TagStream,
    /// Tags whose corrected time would precede the epoch.
    pub dropped_before_epoch: usize,
}

/// Shifts each Bob tag by the delay of the Alice block it pairs with.
///
/// A tag at `t` in Bob block k belongs to Alice block
/// `i = ⌊(t − ΔT_k)/P⌋` and is moved to `t − ΔTᵢ`, with ΔTᵢ rounded to the
/// tagger resolution so corrected times stay on the grid. Blocks past the end
/// of the series reuse the last delay; a stream reaching more than one block
/// past the series is rejected.
pub fn apply_correction(b: &TagStream, sync: &SyncResult) -> Result<Corrected, SyncError> {
    let n = sync.len();
    let res = b.resolution_ps();
    let period = b.pps_period_ps();
    if let Some(&last) = b.times().last() {
        let block = last / period;
        if n == 0 || block > n as u64 {
            return Err(SyncError::Coverage { block, covered: n });
        }
    } else {
        let mut empty = b.clone();
        empty.metadata.insert("correction_applied".into(), "true".into());
        return Ok(Corrected { stream: empty, dropped_before_epoch: 0 });
    }
    let shifts: Vec<i64> = sync
        .delays_ps
        .iter()
        .map(|&d| (d / res as f64).round() as i64 * res as i64)
        .collect();
    let delay_of = |i: i64| sync.delays_ps[(i.max(0) as usize).min(n - 1)];
    let shift_of = |i: i64| shifts[(i.max(0) as usize).min(n - 1)];
    let mut tags = Vec::with_capacity(b.len());
    let mut dropped = 0usize;
    for tag in b.iter() {
        let k = (tag.t_ps / period) as i64;
        let aligned = tag.t_ps as f64 - delay_of(k);
        let i = (aligned / period as f64).floor() as i64;
        let t = tag.t_ps as i128 - shift_of(i) as i128;
        if t < 0 {
            dropped += 1;
            continue;
        }
        tags.push(TimeTag { t_ps: t as u64, channel: tag.channel });
    }
    let mut stream = TagStream::from_unsorted(tags, res)?.with_pps_period(period)?;
    stream.metadata = b.metadata.clone();
    stream.metadata.insert("correction_applied".into(), "true".into());
    Ok(Corrected { stream, dropped_before_epoch: dropped })
}
