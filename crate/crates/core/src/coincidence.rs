//! Coincidence counting, delay histograms and accidental estimation over
//! sorted timestamp slices.
//!
//! All functions take plain `&[u64]` picosecond times; use
//! [`TagStream::times`](crate::TagStream::times) or
//! [`TagStream::channel_times`](crate::TagStream::channel_times) to obtain
//! them. Inputs are checked for sortedness.

use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default coincidence window, about three times the 0.322 ns peak FWHM.
pub const DEFAULT_WINDOW_PS: u64 = 1000;
/// Accidental windows sit at multiples of this many windows from the peak.
pub const ACCIDENTAL_SPACING_WINDOWS: i64 = 10;

const SCAN_CHUNK: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoincidenceError {
    #[error("stream {stream} not sorted at index {index}")]
    Unsorted { stream: &'static str, index: usize },
    #[error("coincidence window must be positive")]
    ZeroWindow,
    #[error("delay range [{start}, {end}) is empty")]
    EmptyRange { start: i64, end: i64 },
    #[error("histogram bin width must be positive")]
    ZeroBin,
    #[error("at least one accidental offset is required")]
    NoOffsets,
    #[error("stream span {span_ps} ps is shorter than the accidental displacement {needed_ps} ps")]
    TooShort { span_ps: u64, needed_ps: u64 },
}

pub fn check_sorted(times: &[u64], stream: &'static str) -> Result<(), CoincidenceError> {
    match times.windows(2).position(|w| w[0] > w[1]) {
        Some(i) => Err(CoincidenceError::Unsorted { stream, index: i + 1 }),
        None => Ok(()),
    }
}

/// Counts pairs with `|t_B − t_A − delay| ≤ window/2`, matching every tag at
/// most once. Each A tag, in time order, takes the earliest unmatched B tag
/// inside its window. Because all windows have equal width this greedy
/// matching is also a maximum matching. Runs in `O(n_A + n_B)`.
pub fn count_coincidences(
    a: &[u64],
    b: &[u64],
    delay_ps: i64,
    window_ps: u64,
) -> Result<u64, CoincidenceError> {
    if window_ps == 0 {
        return Err(CoincidenceError::ZeroWindow);
    }
    check_sorted(a, "A")?;
    check_sorted(b, "B")?;
    Ok(count_sorted(a, b, delay_ps, window_ps))
}

pub(crate) fn count_sorted(a: &[u64], b: &[u64], delay_ps: i64, window_ps: u64) -> u64 {
    // compare in doubled units so that odd windows stay exact
    let w = window_ps as i128;
    let d2 = 2 * delay_ps as i128;
    let mut j = 0usize;
    let mut count = 0u64;
    for &ta in a {
        let centre = 2 * ta as i128 + d2;
        while j < b.len() && (2 * b[j] as i128) < centre - w {
            j += 1;
        }
        if j == b.len() {
            break;
        }
        if 2 * b[j] as i128 <= centre + w {
            count += 1;
            j += 1;
        }
    }
    count
}

/// Histogram of pairwise differences `t_B − t_A`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayHistogram {
    /// Lower edge of bin 0.
    pub start_ps: i64,
    pub bin_ps: u64,
    pub counts: Vec<u64>,
}

impl DelayHistogram {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn end_ps(&self) -> i64 {
        self.start_ps + (self.bin_ps as i64) * self.counts.len() as i64
    }

    pub fn bin_start(&self, i: usize) -> i64 {
        self.start_ps + (self.bin_ps as i64) * i as i64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.bin_start(i) as f64 + self.bin_ps as f64 / 2.0
    }

    /// Index of the largest bin; the lowest delay wins ties.
    pub fn argmax(&self) -> Option<usize> {
        let max = *self.counts.iter().max()?;
        self.counts.iter().position(|&c| c == max)
    }

    /// Bin index containing `delay_ps`, if inside the histogram.
    pub fn bin_of(&self, delay_ps: f64) -> Option<usize> {
        let i = ((delay_ps - self.start_ps as f64) / self.bin_ps as f64).floor();
        (i >= 0.0 && (i as usize) < self.counts.len()).then_some(i as usize)
    }

    /// CSV with one `delay_ps,count` row per bin; delay is the bin centre.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["delay_ps", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            out.write_record([self.bin_center(i).to_string(), c.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Histograms `t_B − t_A` over `[start_ps, end_ps)` with a merge-window
/// sweep: every A tag visits only the B tags inside its range.
pub fn delay_scan(
    a: &[u64],
    b: &[u64],
    start_ps: i64,
    end_ps: i64,
    bin_ps: u64,
) -> Result<DelayHistogram, CoincidenceError> {
    if bin_ps == 0 {
        return Err(CoincidenceError::ZeroBin);
    }
    if end_ps <= start_ps {
        return Err(CoincidenceError::EmptyRange { start: start_ps, end: end_ps });
    }
    check_sorted(a, "A")?;
    check_sorted(b, "B")?;
    let span = (end_ps as i128 - start_ps as i128) as u128;
    let n_bins = span.div_ceil(bin_ps as u128) as usize;
    let counts = a
        .par_chunks(SCAN_CHUNK)
        .fold(
            || vec![0u64; n_bins],
            |mut acc, chunk| {
                scan_chunk(chunk, b, start_ps, end_ps, bin_ps, &mut acc);
                acc
            },
        )
        .reduce(
            || vec![0u64; n_bins],
            |mut x, y| {
                x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                x
            },
        );
    Ok(DelayHistogram { start_ps, bin_ps, counts })
}

fn scan_chunk(a: &[u64], b: &[u64], start: i64, end: i64, bin: u64, counts: &mut [u64]) {
    let Some(&first) = a.first() else { return };
    let lo0 = first as i128 + start as i128;
    let mut j = b.partition_point(|&t| (t as i128) < lo0);
    for &ta in a {
        let lo = ta as i128 + start as i128;
        let hi = ta as i128 + end as i128;
        while j < b.len() && (b[j] as i128) < lo {
            j += 1;
        }
        let mut k = j;
        while k < b.len() && (b[k] as i128) < hi {
            let idx = ((b[k] as i128 - lo) / bin as i128) as usize;
            counts[idx] += 1;
            k += 1;
        }
    }
}

/// Delays at which accidentals are sampled: alternating sides of the peak at
/// 10, 10, 20, 20, … windows.
pub fn accidental_offsets(peak_delay_ps: i64, window_ps: u64, n_offsets: usize) -> Vec<i64> {
    let step = ACCIDENTAL_SPACING_WINDOWS * window_ps as i64;
    (0..n_offsets)
        .map(|k| {
            let m = (k / 2 + 1) as i64;
            let sign = if k % 2 == 0 { 1 } else { -1 };
            peak_delay_ps + sign * m * step
        })
        .collect()
}

/// Mean number of in-window pairs at delays displaced from the true peak.
/// For independent Poisson streams this estimates `r_A·r_B·window·T`.
pub fn estimate_accidentals(
    a: &[u64],
    b: &[u64],
    peak_delay_ps: i64,
    window_ps: u64,
    n_offsets: usize,
) -> Result<f64, CoincidenceError> {
    if n_offsets == 0 {
        return Err(CoincidenceError::NoOffsets);
    }
    if window_ps == 0 {
        return Err(CoincidenceError::ZeroWindow);
    }
    check_sorted(a, "A")?;
    check_sorted(b, "B")?;
    if a.is_empty() || b.is_empty() {
        return Ok(0.0);
    }
    let offsets = accidental_offsets(peak_delay_ps, window_ps, n_offsets);
    let needed = offsets
        .iter()
        .map(|o| o.abs_diff(peak_delay_ps))
        .max()
        .unwrap_or(0);
    let span = (a[a.len() - 1] - a[0]).min(b[b.len() - 1] - b[0]);
    if span < needed {
        return Err(CoincidenceError::TooShort { span_ps: span, needed_ps: needed });
    }
    let total: u64 = offsets
        .par_iter()
        .map(|&d| count_sorted(a, b, d, window_ps))
        .sum();
    Ok(total as f64 / n_offsets as f64)
}

/// Rate-product cross-check of [`estimate_accidentals`]: `n_A·n_B·W/T` over
/// the common span of the two streams. Exact only for uncorrelated Poisson
/// streams; the offset-window estimate also sees rate fluctuations.
pub fn accidentals_from_rates(a: &[u64], b: &[u64], window_ps: u64) -> f64 {
    let (Some(&a0), Some(&a1), Some(&b0), Some(&b1)) = (a.first(), a.last(), b.first(), b.last()) else {
        return 0.0;
    };
    let span = (a1.max(b1) - a0.min(b0)) as f64;
    if span <= 0.0 {
        return 0.0;
    }
    a.len() as f64 * b.len() as f64 * window_ps as f64 / span
}

/// Coincidences at one delay together with their accidental floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceResult {
    pub cc: u64,
    pub accidentals: f64,
    /// `cc / accidentals`; `None` when no accidentals were observed.
    pub car: Option<f64>,
    pub window_ps: u64,
    pub delay_ps: i64,
}

impl CoincidenceResult {
    /// Poisson standard error of the CAR, dominated by the accidental count.
    pub fn car_sigma(&self, n_offsets: usize) -> Option<f64> {
        let car = self.car?;
        let acc_total = self.accidentals * n_offsets as f64;
        let rel = (1.0 / self.cc.max(1) as f64 + 1.0 / acc_total).sqrt();
        Some(car * rel)
    }
}

pub fn measure_coincidences(
    a: &[u64],
    b: &[u64],
    delay_ps: i64,
    window_ps: u64,
    n_offsets: usize,
) -> Result<CoincidenceResult, CoincidenceError> {
    let cc = count_coincidences(a, b, delay_ps, window_ps)?;
    let accidentals = estimate_accidentals(a, b, delay_ps, window_ps, n_offsets)?;
    Ok(CoincidenceResult {
        cc,
        accidentals,
        car: (accidentals > 0.0).then(|| cc as f64 / accidentals),
        window_ps,
        delay_ps,
    })
}
