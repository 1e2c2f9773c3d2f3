//! Mean average precision and CorLoc.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{index_ground_truth, GroundTruthRecord};
use crate::model::{iou, score_order, BBox, ClipDetections, Detection};

/// CorLoc counts a frame as localized when the overlap exceeds this.
pub const CORLOC_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<u32, f64>,
    pub mean_ap: f64,
    pub per_class_counts: BTreeMap<u32, ClassCounts>,
    pub matching_iou: f64,
    /// Classes that were detected but have no ground truth; left out of the mean.
    pub classes_without_gt: Vec<u32>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} {:>8} {:>8} {:>8} {:>8}", "class", "gt", "tp", "fp", "AP");
        for (class, counts) in &self.per_class_counts {
            match self.per_class_ap.get(class) {
                Some(ap) => {
                    let _ = writeln!(
                        s,
                        "{:>6} {:>8} {:>8} {:>8} {:>8.4}",
                        class, counts.gt, counts.tp, counts.fp, ap
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        "{:>6} {:>8} {:>8} {:>8} {:>8}",
                        class, counts.gt, counts.tp, counts.fp, "n/a"
                    );
                }
            }
        }
        let _ = writeln!(
            s,
            "mean AP @ IOU {:.2}: {:.4} over {} classes",
            self.matching_iou,
            self.mean_ap,
            self.per_class_ap.len()
        );
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Hit {
    score: f64,
    clip: String,
    frame: u32,
    bbox: BBox,
    tp: bool,
}

fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.clip.cmp(&b.clip))
        .then(a.frame.cmp(&b.frame))
        .then(a.bbox.x0.total_cmp(&b.bbox.x0))
        .then(a.bbox.y0.total_cmp(&b.bbox.y0))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

/// Per-class matching results that can be built per clip and merged.
/// Merging is associative and commutative.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApAccumulator {
    matching_iou: f64,
    gt: BTreeMap<u32, usize>,
    hits: BTreeMap<u32, Vec<Hit>>,
}

impl ApAccumulator {
    pub fn new(matching_iou: f64) -> Result<Self> {
        if !(matching_iou > 0.0 && matching_iou <= 1.0) {
            return Err(Error::Config(format!(
                "matching IOU {matching_iou} outside (0, 1]"
            )));
        }
        Ok(ApAccumulator {
            matching_iou,
            ..Default::default()
        })
    }

    /// Matches one clip's detections against the ground truth of that clip.
    pub fn add_clip(&mut self, clip_id: &str, dets: &[Detection], gt: &[&GroundTruthRecord]) {
        let mut gt_by_frame: HashMap<(u32, u32), Vec<&GroundTruthRecord>> = HashMap::new();
        for g in gt.iter().filter(|g| g.clip_id == clip_id) {
            *self.gt.entry(g.class_id).or_default() += 1;
            gt_by_frame.entry((g.frame, g.class_id)).or_default().push(g);
        }
        let mut groups: HashMap<(u32, u32), Vec<&Detection>> = HashMap::new();
        for d in dets {
            groups.entry((d.frame, d.class_id)).or_default().push(d);
        }
        let mut keys: Vec<_> = groups.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let mut group = groups.remove(&key).unwrap();
            group.sort_by(|a, b| score_order(a, b));
            let gts = gt_by_frame.get(&key).map(Vec::as_slice).unwrap_or(&[]);
            let mut taken = vec![false; gts.len()];
            let hits = self.hits.entry(key.1).or_default();
            for d in group {
                let mut best: Option<(usize, f64)> = None;
                for (i, g) in gts.iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    let o = iou(&d.bbox, &g.bbox);
                    if o >= self.matching_iou && best.is_none_or(|(_, b)| o > b) {
                        best = Some((i, o));
                    }
                }
                if let Some((i, _)) = best {
                    taken[i] = true;
                }
                hits.push(Hit {
                    score: d.score,
                    clip: clip_id.to_string(),
                    frame: d.frame,
                    bbox: d.bbox,
                    tp: best.is_some(),
                });
            }
        }
    }

    pub fn merge(mut self, other: ApAccumulator) -> Self {
        for (c, n) in other.gt {
            *self.gt.entry(c).or_default() += n;
        }
        for (c, h) in other.hits {
            self.hits.entry(c).or_default().extend(h);
        }
        self
    }

    pub fn finish(mut self) -> Result<EvalReport> {
        let mut per_class_ap = BTreeMap::new();
        let mut per_class_counts = BTreeMap::new();
        let mut classes_without_gt = Vec::new();
        let mut classes: Vec<u32> = self.gt.keys().chain(self.hits.keys()).copied().collect();
        classes.sort_unstable();
        classes.dedup();
        for class in classes {
            let npos = self.gt.get(&class).copied().unwrap_or(0);
            let mut hits = self.hits.remove(&class).unwrap_or_default();
            hits.sort_by(hit_order);
            let tp = hits.iter().filter(|h| h.tp).count();
            per_class_counts.insert(
                class,
                ClassCounts {
                    gt: npos,
                    tp,
                    fp: hits.len() - tp,
                },
            );
            if npos == 0 {
                classes_without_gt.push(class);
                continue;
            }
            per_class_ap.insert(class, average_precision(&hits, npos));
        }
        if per_class_ap.is_empty() {
            return Err(Error::Invalid("no ground truth to evaluate against".into()));
        }
        let mean_ap = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
        Ok(EvalReport {
            per_class_ap,
            mean_ap,
            per_class_counts,
            matching_iou: self.matching_iou,
            classes_without_gt,
        })
    }
}

/// All-points interpolated AP of hits sorted by descending score.
fn average_precision(hits: &[Hit], npos: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, h) in hits.iter().enumerate() {
        tp += h.tp as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap: f64 = hits
        .iter()
        .zip(&precision)
        .filter(|(h, _)| h.tp)
        .map(|(_, p)| p)
        .sum();
    (ap / npos as f64).clamp(0.0, 1.0)
}

/// Mean over classes with ground truth of the per-class AP.
pub fn mean_ap(
    dets: &[ClipDetections],
    gt: &[GroundTruthRecord],
    matching_iou: f64,
) -> Result<EvalReport> {
    let mut by_clip: BTreeMap<&str, Vec<&GroundTruthRecord>> = BTreeMap::new();
    for g in gt {
        by_clip.entry(g.clip_id.as_str()).or_default().push(g);
    }
    let mut acc = ApAccumulator::new(matching_iou)?;
    let mut seen = std::collections::HashSet::new();
    for clip in dets {
        if !seen.insert(clip.clip_id.as_str()) {
            return Err(Error::Invalid(format!("clip `{}` listed twice", clip.clip_id)));
        }
        let g = by_clip.remove(clip.clip_id.as_str()).unwrap_or_default();
        acc.add_clip(&clip.clip_id, &clip.detections, &g);
    }
    for (clip_id, g) in by_clip {
        acc.add_clip(clip_id, &[], &g);
    }
    acc.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorLoc {
    pub frames: usize,
    pub localized: usize,
    pub value: f64,
}

/// Target class per clip: the class with the most ground-truth boxes,
/// smallest id on ties.
pub fn targets_from_ground_truth(gt: &[GroundTruthRecord]) -> BTreeMap<String, u32> {
    let mut counts: BTreeMap<&str, BTreeMap<u32, usize>> = BTreeMap::new();
    for g in gt {
        *counts
            .entry(g.clip_id.as_str())
            .or_default()
            .entry(g.class_id)
            .or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(clip, per_class)| {
            let best = per_class
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(c, _)| *c)
                .unwrap();
            (clip.to_string(), best)
        })
        .collect()
}

/// Fraction of annotated frames whose single best target-class detection
/// overlaps a target-class ground-truth box with IOU above 0.5.
///
/// Annotated frames are the `(clip, frame)` pairs that carry ground truth.
pub fn corloc(
    dets: &[ClipDetections],
    gt: &[GroundTruthRecord],
    targets: &BTreeMap<String, u32>,
) -> Result<CorLoc> {
    let clips: HashMap<&str, &ClipDetections> =
        dets.iter().map(|c| (c.clip_id.as_str(), c)).collect();
    let mut frames = 0;
    let mut localized = 0;
    for ((clip_id, frame), boxes) in index_ground_truth(gt) {
        let target = *targets.get(clip_id).ok_or_else(|| {
            Error::Invalid(format!("no target class given for clip `{clip_id}`"))
        })?;
        frames += 1;
        let best = clips.get(clip_id).and_then(|c| {
            c.on_frame(frame)
                .iter()
                .filter(|d| d.class_id == target)
                .min_by(|a, b| score_order(a, b))
        });
        if let Some(d) = best {
            if boxes
                .iter()
                .any(|g| g.class_id == target && iou(&g.bbox, &d.bbox) > CORLOC_IOU)
            {
                localized += 1;
            }
        }
    }
    if frames == 0 {
        return Err(Error::Invalid("no annotated frames for CorLoc".into()));
    }
    Ok(CorLoc {
        frames,
        localized,
        value: localized as f64 / frames as f64,
    })
}
