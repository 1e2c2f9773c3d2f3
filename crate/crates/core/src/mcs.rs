//! Multi-context suppression.
//!
//! Clips usually show very few object classes, so a class that never makes
//! it into the top-ranked detections of a clip is most likely a false
//! positive. Its scores are lowered by a constant penalty; the scores of the
//! top-ranked classes stay as they are.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::ClipDetections;

/// Mean number of classes per training clip reported for ImageNet VID.
/// Informational only.
pub const VID_CLASSES_PER_CLIP_MEAN: f64 = 1.134;
/// Standard deviation of the classes-per-clip count. Informational only.
pub const VID_CLASSES_PER_CLIP_STD: f64 = 0.356;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HighConfidenceSet {
    pub clip_id: String,
    pub classes: BTreeSet<u32>,
    /// Number of top-ranked detections inspected.
    pub cutoff_rank: usize,
}

impl HighConfidenceSet {
    pub fn contains(&self, class_id: u32) -> bool {
        self.classes.contains(&class_id)
    }
}

/// `max(1, ceil(ratio * n))`, treating products within rounding noise of an
/// integer as that integer (`0.3 * 10` is 3, not 4).
pub fn cutoff_rank(ratio: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let x = ratio * n as f64;
    let nearest = x.round();
    let rank = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (rank as usize).clamp(1, n)
}

/// Classes of the `cutoff_rank` best-scoring detections of the clip. Every
/// detection tied with the score at the cutoff counts as well.
pub fn select_high_confidence(clip: &ClipDetections, ratio: f64) -> Result<HighConfidenceSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("mcs ratio {ratio} outside (0, 1]")));
    }
    let cutoff = cutoff_rank(ratio, clip.detections.len());
    let mut classes = BTreeSet::new();
    if cutoff > 0 {
        let mut scores: Vec<f64> = clip.detections.iter().map(|d| d.score).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let threshold = scores[cutoff - 1];
        classes.extend(
            clip.detections
                .iter()
                .filter(|d| d.score >= threshold)
                .map(|d| d.class_id),
        );
    }
    Ok(HighConfidenceSet {
        clip_id: clip.clip_id.clone(),
        classes,
        cutoff_rank: cutoff,
    })
}

/// Subtracts `penalty` from every detection whose class is not in `high`.
/// Scores may go negative.
pub fn suppress(clip: &ClipDetections, high: &HighConfidenceSet, penalty: f64) -> Result<ClipDetections> {
    if !(penalty.is_finite() && penalty >= 0.0) {
        return Err(Error::Config(format!("mcs penalty {penalty} must be >= 0")));
    }
    let dets = clip
        .detections
        .iter()
        .map(|d| {
            let mut d = d.clone();
            if !high.contains(d.class_id) {
                d.score -= penalty;
            }
            d
        })
        .collect();
    Ok(clip.with_detections(dets))
}

/// Selection followed by suppression.
pub fn apply(clip: &ClipDetections, ratio: f64, penalty: f64) -> Result<ClipDetections> {
    let high = select_high_confidence(clip, ratio)?;
    suppress(clip, &high, penalty)
}
