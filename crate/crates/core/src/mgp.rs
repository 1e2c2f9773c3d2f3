//! Motion-guided propagation and key-frame interpolation.
//!
//! Every original detection is copied to the neighbouring frames inside the
//! propagation window, shifted by the mean optical flow inside its box and
//! keeping its score. Objects missed on one frame are recovered from their
//! neighbours; the duplicates this creates are merged by per-frame NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Direction, FlowSet};
use crate::model::{clamp_to_frame, iou, nms_clip, BBox, ClipDetections, Detection, Origin};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// Shift copies by the mean flow inside the box.
    MotionGuided,
    /// Copy boxes unchanged.
    Duplicate,
}

impl std::str::FromStr for PropagationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motion" | "motion_guided" => Ok(PropagationMode::MotionGuided),
            "duplicate" => Ok(PropagationMode::Duplicate),
            other => Err(Error::Config(format!(
                "unknown propagation mode `{other}` (expected motion or duplicate)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PropagationPlan {
    window: u32,
    pub mode: PropagationMode,
}

impl PropagationPlan {
    pub fn new(window: u32, mode: PropagationMode) -> Result<Self> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::Config(format!(
                "propagation window {window} must be odd and at least 1"
            )));
        }
        Ok(PropagationPlan { window, mode })
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    /// Frames covered on each side of the source frame.
    pub fn reach(&self) -> u32 {
        (self.window - 1) / 2
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationStats {
    /// Copies that landed on a frame.
    pub propagated: usize,
    /// Copies dropped because they left the frame.
    pub dropped: usize,
}

impl std::ops::AddAssign for PropagationStats {
    fn add_assign(&mut self, rhs: Self) {
        self.propagated += rhs.propagated;
        self.dropped += rhs.dropped;
    }
}

/// Shifted copies of every original detection, before any suppression.
///
/// A copy `k` frames away composes the per-step mean flows: step `k` is
/// evaluated at the box reached after step `k - 1`. Copies keep the source
/// score and record their origin.
pub fn propagated_copies(
    clip: &ClipDetections,
    flows: &FlowSet,
    plan: PropagationPlan,
) -> Result<(Vec<Detection>, PropagationStats)> {
    let mut copies = Vec::new();
    let mut stats = PropagationStats::default();
    let reach = plan.reach() as i64;
    let frame = clip.frame_rect();
    for det in clip.detections.iter().filter(|d| !d.is_derived()) {
        for dir in [Direction::Forward, Direction::Backward] {
            let mut bbox = det.bbox;
            for k in 1..=reach {
                let from = det.frame as i64 + dir.sign() * (k - 1);
                let to = from + dir.sign();
                if to < 0 || to >= clip.num_frames as i64 {
                    break;
                }
                if plan.mode == PropagationMode::MotionGuided {
                    if bbox.intersect(&frame).is_none() {
                        stats.dropped += 1;
                        break;
                    }
                    let (du, dv) = flows.step(from as u32, dir, &bbox)?;
                    bbox = bbox.translate(du, dv);
                }
                let copy = Detection {
                    frame: to as u32,
                    bbox,
                    origin: Some(Origin {
                        frame: det.frame,
                        offset: (dir.sign() * k) as i32,
                    }),
                    ..det.clone()
                };
                match clamp_to_frame(&copy, clip.width, clip.height) {
                    Ok(c) => {
                        copies.push(c);
                        stats.propagated += 1;
                    }
                    Err(_) => {
                        stats.dropped += 1;
                        break;
                    }
                }
            }
        }
    }
    Ok((copies, stats))
}

/// Propagates detections through the window and cleans every frame with NMS.
pub fn propagate(
    clip: &ClipDetections,
    flows: &FlowSet,
    plan: PropagationPlan,
    nms_iou: f64,
) -> Result<(ClipDetections, PropagationStats)> {
    let (copies, stats) = propagated_copies(clip, flows, plan)?;
    let mut all = clip.detections.clone();
    all.extend(copies);
    let merged = clip.with_detections(all);
    Ok((nms_clip(&merged, nms_iou)?, stats))
}

/// Fills the frames skipped by a detector that ran on every `stride`-th frame.
///
/// Same-class boxes on consecutive key frames are paired greedily by IOU
/// (pairs need IOU >= `match_iou`); paired boxes and scores are blended
/// linearly onto the frames between. Unpaired boxes are held up to the
/// midpoint, and frames after the last key frame repeat its detections.
pub fn interpolate_stride(clip: &ClipDetections, stride: u32, match_iou: f64) -> Result<ClipDetections> {
    if stride < 1 {
        return Err(Error::Config("frame stride must be at least 1".into()));
    }
    if stride == 1 {
        return Ok(clip.clone());
    }
    if let Some(d) = clip.detections.iter().find(|d| d.frame % stride != 0) {
        return Err(Error::Invalid(format!(
            "clip `{}`: detection on frame {} is not a multiple of stride {}",
            clip.clip_id, d.frame, stride
        )));
    }
    let mut out = clip.detections.clone();
    let last_key = (clip.num_frames - 1) / stride * stride;
    let derived = |d: &Detection, frame: u32, bbox: BBox, score: f64| Detection {
        frame,
        bbox,
        score,
        origin: Some(Origin {
            frame: d.frame,
            offset: frame as i32 - d.frame as i32,
        }),
        ..d.clone()
    };

    let mut a = 0;
    while a < last_key {
        let b = a + stride;
        let left = clip.on_frame(a);
        let right = clip.on_frame(b);
        let pairs = match_pairs(left, right, match_iou);
        let mut left_used = vec![false; left.len()];
        let mut right_used = vec![false; right.len()];
        for &(i, j) in &pairs {
            left_used[i] = true;
            right_used[j] = true;
        }
        for f in a + 1..b {
            let alpha = (f - a) as f64 / stride as f64;
            for &(i, j) in &pairs {
                let (l, r) = (&left[i], &right[j]);
                let score = (1.0 - alpha) * l.score + alpha * r.score;
                out.push(derived(l, f, l.bbox.lerp(&r.bbox, alpha), score));
            }
            if 2 * (f - a) <= stride {
                for (d, _) in left.iter().zip(&left_used).filter(|(_, used)| !**used) {
                    out.push(derived(d, f, d.bbox, d.score));
                }
            }
            if 2 * (f - a) >= stride {
                for (d, _) in right.iter().zip(&right_used).filter(|(_, used)| !**used) {
                    out.push(derived(d, f, d.bbox, d.score));
                }
            }
        }
        a = b;
    }
    for f in last_key + 1..clip.num_frames {
        for d in clip.on_frame(last_key) {
            out.push(derived(d, f, d.bbox, d.score));
        }
    }
    Ok(clip.with_detections(out))
}

/// Greedy one-to-one same-class pairing by descending IOU.
fn match_pairs(left: &[Detection], right: &[Detection], min_iou: f64) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, l) in left.iter().enumerate() {
        for (j, r) in right.iter().enumerate() {
            if l.class_id == r.class_id {
                let o = iou(&l.bbox, &r.bbox);
                if o >= min_iou {
                    cands.push((o, i, j));
                }
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut lu = vec![false; left.len()];
    let mut ru = vec![false; right.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !lu[i] && !ru[j] {
            lu[i] = true;
            ru[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowField;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn uniform_flows(n: u32, w: u32, h: u32, u: f32, v: f32) -> FlowSet {
        let mut set = FlowSet::new("c");
        for t in 0..n.saturating_sub(1) {
            set.insert_forward(t, FlowField::uniform(w, h, u, v));
        }
        set
    }

    #[test]
    fn single_step_shift() {
        let clip = ClipDetections::new("c", 3, 100, 100)
            .with_detections(vec![Detection::new(1, 0, 0.7, bx(10.0, 10.0, 20.0, 20.0))]);
        let flows = uniform_flows(3, 100, 100, 2.0, -1.0);
        let plan = PropagationPlan::new(3, PropagationMode::MotionGuided).unwrap();
        let (out, stats) = propagate(&clip, &flows, plan, 0.5).unwrap();
        assert_eq!(stats, PropagationStats { propagated: 2, dropped: 0 });
        let next = out.on_frame(2);
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].bbox, bx(12.0, 9.0, 22.0, 19.0));
        assert_eq!(next[0].score, 0.7);
        assert_eq!(next[0].origin, Some(Origin { frame: 1, offset: 1 }));
        // Backward falls back to the negated forward field.
        assert_eq!(out.on_frame(0)[0].bbox, bx(8.0, 11.0, 18.0, 21.0));
        assert_eq!(out.on_frame(1)[0], clip.detections[0]);
    }

    #[test]
    fn multi_step_composes_and_stops_at_clip_edge() {
        let clip = ClipDetections::new("c", 4, 200, 100)
            .with_detections(vec![Detection::new(0, 0, 0.7, bx(10.0, 10.0, 20.0, 20.0))]);
        let flows = uniform_flows(4, 200, 100, 3.0, 0.0);
        let plan = PropagationPlan::new(7, PropagationMode::MotionGuided).unwrap();
        let (copies, stats) = propagated_copies(&clip, &flows, plan).unwrap();
        assert_eq!(stats.propagated, 3);
        let xs: Vec<f64> = copies.iter().map(|d| d.bbox.x0).collect();
        assert_eq!(xs, vec![13.0, 16.0, 19.0]);
    }

    #[test]
    fn zero_flow_equals_duplicate() {
        let clip = ClipDetections::new("c", 5, 50, 50).with_detections(vec![
            Detection::new(2, 0, 0.7, bx(10.0, 10.0, 20.0, 20.0)),
            Detection::new(0, 1, 0.4, bx(30.0, 5.0, 45.0, 20.0)),
        ]);
        let flows = uniform_flows(5, 50, 50, 0.0, 0.0);
        let mg = PropagationPlan::new(5, PropagationMode::MotionGuided).unwrap();
        let dup = PropagationPlan::new(5, PropagationMode::Duplicate).unwrap();
        let a = propagate(&clip, &flows, mg, 0.5).unwrap();
        let b = propagate(&clip, &FlowSet::new("c"), dup, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_flow_is_an_error_in_motion_mode() {
        let clip = ClipDetections::new("c", 3, 50, 50)
            .with_detections(vec![Detection::new(0, 0, 0.7, bx(10.0, 10.0, 20.0, 20.0))]);
        let plan = PropagationPlan::new(3, PropagationMode::MotionGuided).unwrap();
        assert!(matches!(
            propagate(&clip, &FlowSet::new("c"), plan, 0.5),
            Err(Error::MissingFlow { frame: 0, .. })
        ));
    }

    #[test]
    fn boxes_leaving_the_frame_are_dropped() {
        let clip = ClipDetections::new("c", 4, 50, 50)
            .with_detections(vec![Detection::new(0, 0, 0.7, bx(40.0, 10.0, 49.0, 20.0))]);
        let flows = uniform_flows(4, 50, 50, 20.0, 0.0);
        let plan = PropagationPlan::new(7, PropagationMode::MotionGuided).unwrap();
        let (copies, stats) = propagated_copies(&clip, &flows, plan).unwrap();
        assert_eq!(stats, PropagationStats { propagated: 0, dropped: 1 });
        assert!(copies.is_empty());
    }

    #[test]
    fn window_one_is_identity_on_clean_input() {
        let clip = ClipDetections::new("c", 3, 50, 50).with_detections(vec![
            Detection::new(0, 0, 0.7, bx(10.0, 10.0, 20.0, 20.0)),
            Detection::new(1, 0, 0.6, bx(11.0, 10.0, 21.0, 20.0)),
        ]);
        let plan = PropagationPlan::new(1, PropagationMode::MotionGuided).unwrap();
        let (out, stats) = propagate(&clip, &FlowSet::new("c"), plan, 0.5).unwrap();
        assert_eq!(out, clip);
        assert_eq!(stats.propagated, 0);
    }

    #[test]
    fn even_window_rejected() {
        assert!(PropagationPlan::new(4, PropagationMode::Duplicate).is_err());
        assert!(PropagationPlan::new(0, PropagationMode::Duplicate).is_err());
        assert_eq!(PropagationPlan::new(7, PropagationMode::Duplicate).unwrap().reach(), 3);
    }

    #[test]
    fn stride_one_is_identity() {
        let clip = ClipDetections::new("c", 3, 50, 50)
            .with_detections(vec![Detection::new(1, 0, 0.7, bx(10.0, 10.0, 20.0, 20.0))]);
        assert_eq!(interpolate_stride(&clip, 1, 0.5).unwrap(), clip);
        assert!(interpolate_stride(&clip, 0, 0.5).is_err());
        // Frame 1 is not a key frame for stride 2.
        assert!(interpolate_stride(&clip, 2, 0.5).is_err());
    }

    #[test]
    fn linear_midpoint() {
        // The two boxes do not overlap, so pairing has to accept IOU 0.
        let clip = ClipDetections::new("c", 3, 50, 50).with_detections(vec![
            Detection::new(0, 4, 0.8, bx(0.0, 0.0, 10.0, 10.0)),
            Detection::new(2, 4, 0.4, bx(10.0, 0.0, 20.0, 10.0)),
        ]);
        let out = interpolate_stride(&clip, 2, 0.0).unwrap();
        let mid = out.on_frame(1);
        assert_eq!(mid.len(), 1);
        assert_eq!(mid[0].bbox, bx(5.0, 0.0, 15.0, 10.0));
        assert!((mid[0].score - 0.6).abs() < 1e-15);
    }

    #[test]
    fn unmatched_boxes_held_to_midpoint() {
        let clip = ClipDetections::new("c", 6, 100, 100).with_detections(vec![
            Detection::new(0, 1, 0.8, bx(0.0, 0.0, 10.0, 10.0)),
            Detection::new(4, 2, 0.5, bx(50.0, 50.0, 60.0, 60.0)),
        ]);
        let out = interpolate_stride(&clip, 4, 0.5).unwrap();
        let classes = |f| out.on_frame(f).iter().map(|d| d.class_id).collect::<Vec<_>>();
        assert_eq!(classes(1), vec![1]);
        assert_eq!(classes(2), vec![1, 2]);
        assert_eq!(classes(3), vec![2]);
        // Trailing frame after the last key frame repeats it.
        assert_eq!(classes(5), vec![2]);
    }
}
