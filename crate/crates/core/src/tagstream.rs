//! Canonical time-tag representation and 1PPS block segmentation.
//!
//! A [`TagStream`] stores detection times (integer picoseconds from a per-run
//! epoch) and detector channel ids as two parallel columns so the coincidence
//! engine can sweep plain `&[u64]` slices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default time-tagger resolution in picoseconds.
pub const DEFAULT_RESOLUTION_PS: u64 = 156;
/// Default 1PPS period: one second in picoseconds.
pub const DEFAULT_PPS_PERIOD_PS: u64 = 1_000_000_000_000;
/// Picoseconds per second.
pub const PS_PER_S: f64 = 1.0e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TagError {
    #[error("tags not sorted at index {index}")]
    Unsorted { index: usize },
    #[error("tag {t_ps} ps at index {index} is not a multiple of the {resolution_ps} ps resolution")]
    OffGrid {
        index: usize,
        t_ps: u64,
        resolution_ps: u64,
    },
    #[error("resolution and 1PPS period must be positive")]
    ZeroPeriod,
    #[error("times and channels have different lengths ({times} vs {channels})")]
    LengthMismatch { times: usize, channels: usize },
    #[error("negative time {0} ps cannot be quantized")]
    NegativeTime(f64),
}

/// One detection event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeTag {
    pub t_ps: u64,
    pub channel: u8,
}

impl TimeTag {
    pub fn new(t_ps: u64, channel: u8) -> Self {
        Self { t_ps, channel }
    }
}

/// An immutable, sorted sequence of time tags.
///
/// Invariants (checked on construction): tags are sorted by `(t_ps, channel)`
/// and every `t_ps` is a multiple of `resolution_ps`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    times: Vec<u64>,
    channels: Vec<u8>,
    resolution_ps: u64,
    pps_period_ps: u64,
    pub metadata: BTreeMap<String, String>,
}

impl TagStream {
    /// Builds a stream from already-sorted tags, validating the invariants.
    pub fn from_tags(tags: &[TimeTag], resolution_ps: u64) -> Result<Self, TagError> {
        let times = tags.iter().map(|t| t.t_ps).collect();
        let channels = tags.iter().map(|t| t.channel).collect();
        Self::from_columns(times, channels, resolution_ps)
    }

    pub fn from_columns(
        times: Vec<u64>,
        channels: Vec<u8>,
        resolution_ps: u64,
    ) -> Result<Self, TagError> {
        if resolution_ps == 0 {
            return Err(TagError::ZeroPeriod);
        }
        if times.len() != channels.len() {
            return Err(TagError::LengthMismatch {
                times: times.len(),
                channels: channels.len(),
            });
        }
        for i in 0..times.len() {
            if times[i] % resolution_ps != 0 {
                return Err(TagError::OffGrid {
                    index: i,
                    t_ps: times[i],
                    resolution_ps,
                });
            }
            if i > 0 && (times[i - 1], channels[i - 1]) > (times[i], channels[i]) {
                return Err(TagError::Unsorted { index: i });
            }
        }
        Ok(Self {
            times,
            channels,
            resolution_ps,
            pps_period_ps: DEFAULT_PPS_PERIOD_PS,
            metadata: BTreeMap::new(),
        })
    }

    /// Sorts arbitrary tags and builds a stream. Tags must already lie on the
    /// resolution grid.
    pub fn from_unsorted(mut tags: Vec<TimeTag>, resolution_ps: u64) -> Result<Self, TagError> {
        tags.sort_unstable();
        Self::from_tags(&tags, resolution_ps)
    }

    pub fn empty(resolution_ps: u64) -> Self {
        Self {
            times: Vec::new(),
            channels: Vec::new(),
            resolution_ps: resolution_ps.max(1),
            pps_period_ps: DEFAULT_PPS_PERIOD_PS,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_pps_period(mut self, pps_period_ps: u64) -> Result<Self, TagError> {
        if pps_period_ps == 0 {
            return Err(TagError::ZeroPeriod);
        }
        self.pps_period_ps = pps_period_ps;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[u64] {
        &self.times
    }

    pub fn channels(&self) -> &[u8] {
        &self.channels
    }

    pub fn resolution_ps(&self) -> u64 {
        self.resolution_ps
    }

    pub fn pps_period_ps(&self) -> u64 {
        self.pps_period_ps
    }

    pub fn get(&self, i: usize) -> Option<TimeTag> {
        Some(TimeTag::new(*self.times.get(i)?, self.channels[i]))
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = TimeTag> + '_ {
        self.times
            .iter()
            .zip(&self.channels)
            .map(|(&t_ps, &channel)| TimeTag { t_ps, channel })
    }

    pub fn to_tags(&self) -> Vec<TimeTag> {
        self.iter().collect()
    }

    /// Times of the tags recorded on one detector channel.
    pub fn channel_times(&self, channel: u8) -> Vec<u64> {
        self.iter()
            .filter(|t| t.channel == channel)
            .map(|t| t.t_ps)
            .collect()
    }

    /// Span between first and last tag, or 0 for fewer than two tags.
    pub fn span_ps(&self) -> u64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        }
    }
}

/// The tags of one 1PPS period: `[index·period, (index+1)·period)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagBlock<'a> {
    pub index: u64,
    pub start_ps: u64,
    pub times: &'a [u64],
    pub channels: &'a [u8],
}

impl TagBlock<'_> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Splits a stream into consecutive 1PPS blocks, from block 0 up to the block
/// holding the last tag. Blocks without tags are kept so that block indices
/// are seconds since the epoch.
pub fn split_into_blocks(stream: &TagStream) -> Vec<TagBlock<'_>> {
    let Some(&last) = stream.times.last() else {
        return Vec::new();
    };
    let period = stream.pps_period_ps;
    let n_blocks = last / period + 1;
    let mut blocks = Vec::with_capacity(n_blocks as usize);
    let mut lo = 0usize;
    for index in 0..n_blocks {
        let end = (index + 1).saturating_mul(period);
        let hi = lo + stream.times[lo..].partition_point(|&t| t < end);
        blocks.push(TagBlock {
            index,
            start_ps: index * period,
            times: &stream.times[lo..hi],
            channels: &stream.channels[lo..hi],
        });
        lo = hi;
    }
    blocks
}

/// Concatenates blocks back into one tag list.
pub fn merge_blocks(blocks: &[TagBlock<'_>]) -> Vec<TimeTag> {
    blocks
        .iter()
        .flat_map(|b| {
            b.times
                .iter()
                .zip(b.channels)
                .map(|(&t_ps, &channel)| TimeTag { t_ps, channel })
        })
        .collect()
}

/// Snaps a true time onto the tagger grid, rounding half away from zero.
pub fn quantize(t_true_ps: f64, resolution_ps: u64) -> Result<u64, TagError> {
    if resolution_ps == 0 {
        return Err(TagError::ZeroPeriod);
    }
    if !(t_true_ps >= 0.0) {
        return Err(TagError::NegativeTime(t_true_ps));
    }
    let r = resolution_ps as f64;
    Ok((t_true_ps / r).round() as u64 * resolution_ps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(t: f64) -> u64 {
        (t * PS_PER_S) as u64
    }

    #[test]
    fn blocks_follow_half_open_seconds() {
        let stream = TagStream::from_columns(vec![s(0.3), s(1.2), s(1.9)], vec![0; 3], 1).unwrap();
        let blocks = split_into_blocks(&stream);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].times, &[s(0.3)]);
        assert_eq!(blocks[1].times, &[s(1.2), s(1.9)]);
    }

    #[test]
    fn boundary_tag_belongs_to_next_block() {
        let stream = TagStream::from_columns(vec![0, s(1.0)], vec![0, 0], 1).unwrap();
        let blocks = split_into_blocks(&stream);
        assert_eq!(blocks[0].times, &[0]);
        assert_eq!(blocks[1].times, &[s(1.0)]);
    }

    #[test]
    fn empty_stream_has_no_blocks() {
        assert!(split_into_blocks(&TagStream::empty(156)).is_empty());
    }

    #[test]
    fn six_hundred_seconds_make_six_hundred_blocks() {
        let times: Vec<u64> = (0..600u64).map(|k| k * 1_000_000_000_000 + 500_000_000_000).collect();
        let stream = TagStream::from_columns(times, vec![0; 600], 1).unwrap();
        assert_eq!(split_into_blocks(&stream).len(), 600);
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(312.0, 156).unwrap(), 312);
        // 233.9 / 156 = 1.4994 -> 1
        assert_eq!(quantize(233.9, 156).unwrap(), 156);
        // 234.1 / 156 = 1.5006 -> 2
        assert_eq!(quantize(234.1, 156).unwrap(), 312);
        // exact half rounds away from zero
        assert_eq!(quantize(78.0, 156).unwrap(), 156);
        assert!(matches!(quantize(-1.0, 156), Err(TagError::NegativeTime(_))));
        assert!(quantize(f64::NAN, 156).is_err());
    }

    #[test]
    fn construction_rejects_bad_streams() {
        assert_eq!(
            TagStream::from_columns(vec![312, 156], vec![0, 0], 156),
            Err(TagError::Unsorted { index: 1 })
        );
        assert!(matches!(
            TagStream::from_columns(vec![100], vec![0], 156),
            Err(TagError::OffGrid { .. })
        ));
        // equal times order by channel
        assert!(TagStream::from_columns(vec![156, 156], vec![1, 0], 156).is_err());
        assert!(TagStream::from_columns(vec![156, 156], vec![0, 1], 156).is_ok());
    }

    proptest! {
        #[test]
        fn split_then_merge_is_identity(mut raw in prop::collection::vec((0u64..5_000, 0u8..4), 0..300)) {
            raw.sort_unstable();
            let tags: Vec<TimeTag> = raw.iter().map(|&(t, c)| TimeTag::new(t * 1_000_000_000, c)).collect();
            let stream = TagStream::from_tags(&tags, 1).unwrap();
            let blocks = split_into_blocks(&stream);
            prop_assert_eq!(merge_blocks(&blocks), tags);
            for b in &blocks {
                for &t in b.times {
                    prop_assert!(t >= b.start_ps && t < b.start_ps + stream.pps_period_ps());
                }
            }
        }

        #[test]
        fn quantization_error_is_bounded(t in 0.0f64..1e15, res in 1u64..1000) {
            let q = quantize(t, res).unwrap();
            prop_assert_eq!(q % res, 0);
            prop_assert!((q as f64 - t).abs() <= res as f64 / 2.0 + 1e-3 * (1.0 + t * 1e-12));
        }
    }
}
