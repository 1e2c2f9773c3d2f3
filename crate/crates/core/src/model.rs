//! Boxes, detection records, overlap and greedy suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates.
///
/// `(x0, y0)` is the inclusive top-left corner and `(x1, y1)` the exclusive
/// bottom-right corner, so the area is `(x1 - x0) * (y1 - y0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let reason = if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            Some("coordinates must be finite")
        } else if x1 <= x0 || y1 <= y0 {
            Some("requires x1 > x0 and y1 > y0")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                x0,
                y0,
                x1,
                y1,
                reason,
            }),
            None => Ok(BBox { x0, y0, x1, y1 }),
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    /// Intersection with another box, `None` when it has no area.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x1 > x0 && y1 > y0).then_some(BBox { x0, y0, x1, y1 })
    }

    /// Linear blend `(1 - alpha) * self + alpha * other`, coordinate-wise.
    pub fn lerp(&self, other: &BBox, alpha: f64) -> BBox {
        let mix = |a: f64, b: f64| (1.0 - alpha) * a + alpha * b;
        BBox {
            x0: mix(self.x0, other.x0),
            y0: mix(self.y0, other.y0),
            x1: mix(self.x1, other.x1),
            y1: mix(self.y1, other.y1),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    fn cmp_coords(&self, other: &BBox) -> Ordering {
        self.x0
            .total_cmp(&other.x0)
            .then(self.y0.total_cmp(&other.y0))
            .then(self.x1.total_cmp(&other.x1))
            .then(self.y1.total_cmp(&other.y1))
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = match a.intersect(b) {
        Some(i) => i.area(),
        None => return 0.0,
    };
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Where a derived detection came from: the frame holding the original
/// detection and the signed frame offset it was moved by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Origin {
    pub frame: u32,
    pub offset: i32,
}

/// One scored, classed box on one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub frame: u32,
    pub class_id: u32,
    pub score: f64,
    pub bbox: BBox,
    /// Producing model, used when fusing several detectors.
    pub source: Option<String>,
    /// Set on propagated or interpolated copies; `None` for originals.
    pub origin: Option<Origin>,
}

impl Detection {
    pub fn new(frame: u32, class_id: u32, score: f64, bbox: BBox) -> Self {
        Detection {
            frame,
            class_id,
            score,
            bbox,
            source: None,
            origin: None,
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn is_derived(&self) -> bool {
        self.origin.is_some()
    }
}

/// Suppression order: score descending, then `(class, frame, x0, y0, x1, y1)`
/// ascending so that ties resolve identically on every run.
pub fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.frame.cmp(&b.frame))
        .then(a.bbox.cmp_coords(&b.bbox))
}

/// Storage order inside a clip: `(frame, class, -score, box)`.
pub fn canonical_order(a: &Detection, b: &Detection) -> Ordering {
    a.frame
        .cmp(&b.frame)
        .then(a.class_id.cmp(&b.class_id))
        .then(b.score.total_cmp(&a.score))
        .then(a.bbox.cmp_coords(&b.bbox))
}

/// All detections of one clip plus the clip geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipDetections {
    pub clip_id: String,
    pub num_frames: u32,
    pub width: u32,
    pub height: u32,
    /// Kept in [`canonical_order`].
    pub detections: Vec<Detection>,
}

impl ClipDetections {
    pub fn new(clip_id: impl Into<String>, num_frames: u32, width: u32, height: u32) -> Self {
        ClipDetections {
            clip_id: clip_id.into(),
            num_frames,
            width,
            height,
            detections: Vec::new(),
        }
    }

    /// Same clip geometry, different detections.
    pub fn with_detections(&self, mut detections: Vec<Detection>) -> Self {
        detections.sort_by(canonical_order);
        ClipDetections {
            clip_id: self.clip_id.clone(),
            num_frames: self.num_frames,
            width: self.width,
            height: self.height,
            detections,
        }
    }

    pub fn sort(&mut self) {
        self.detections.sort_by(canonical_order);
    }

    pub fn frame_rect(&self) -> BBox {
        BBox {
            x0: 0.0,
            y0: 0.0,
            x1: self.width as f64,
            y1: self.height as f64,
        }
    }

    /// Detections grouped by frame, in frame order. Relies on canonical order.
    pub fn frames(&self) -> impl Iterator<Item = (u32, &[Detection])> {
        self.detections
            .chunk_by(|a, b| a.frame == b.frame)
            .map(|chunk| (chunk[0].frame, chunk))
    }

    pub fn on_frame(&self, frame: u32) -> &[Detection] {
        let lo = self.detections.partition_point(|d| d.frame < frame);
        let hi = self.detections.partition_point(|d| d.frame <= frame);
        &self.detections[lo..hi]
    }

    pub fn classes(&self) -> Vec<u32> {
        let mut classes: Vec<u32> = self.detections.iter().map(|d| d.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }

    /// Checks the clip invariants: frames in range, canonical order.
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Invalid(format!(
                "clip `{}` needs positive frame count and size",
                self.clip_id
            )));
        }
        if let Some(d) = self.detections.iter().find(|d| d.frame >= self.num_frames) {
            return Err(Error::Invalid(format!(
                "clip `{}`: detection on frame {} beyond {} frames",
                self.clip_id, d.frame, self.num_frames
            )));
        }
        if self
            .detections
            .windows(2)
            .any(|w| canonical_order(&w[0], &w[1]) == Ordering::Greater)
        {
            return Err(Error::Invariant(format!(
                "clip `{}` detections are not in canonical order",
                self.clip_id
            )));
        }
        Ok(())
    }
}

/// Greedy per-class non-maximum suppression on a single frame.
///
/// Returns the kept detections, unchanged, in suppression order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    if let Some(first) = dets.first() {
        if let Some(other) = dets.iter().find(|d| d.frame != first.frame) {
            return Err(Error::MixedFrames {
                first: first.frame,
                other: other.frame,
            });
        }
    }
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::Config(format!(
            "nms iou threshold {iou_thresh} outside (0, 1]"
        )));
    }
    Ok(nms_unchecked(dets, iou_thresh))
}

pub(crate) fn nms_unchecked(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| score_order(a, b));
    let mut kept: Vec<&Detection> = Vec::new();
    for cand in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) > iou_thresh);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Runs [`nms`] independently on every frame of a clip.
pub fn nms_clip(clip: &ClipDetections, iou_thresh: f64) -> Result<ClipDetections> {
    let mut out = Vec::with_capacity(clip.detections.len());
    for (_, frame_dets) in clip.frames() {
        out.extend(nms(frame_dets, iou_thresh)?);
    }
    Ok(clip.with_detections(out))
}

/// Intersects the detection box with the `width x height` frame.
///
/// Fails with [`Error::DegenerateAfterClamp`] when nothing of the box is left.
pub fn clamp_to_frame(det: &Detection, width: u32, height: u32) -> Result<Detection> {
    let frame = BBox {
        x0: 0.0,
        y0: 0.0,
        x1: width as f64,
        y1: height as f64,
    };
    match det.bbox.intersect(&frame) {
        Some(bbox) => Ok(Detection {
            bbox,
            ..det.clone()
        }),
        None => Err(Error::DegenerateAfterClamp { width, height }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let b = bx(3.0, 4.0, 17.5, 9.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 10.0, 10.0), &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        let v = iou(&bx(0.0, 0.0, 10.0, 10.0), &bx(5.0, 0.0, 15.0, 10.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 10.0, 10.0), &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn bbox_rejects_bad_coordinates() {
        assert!(BBox::new(5.0, 0.0, 5.0, 1.0).is_err());
        assert!(BBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn nms_suppresses_same_class_only() {
        // IOU of these two is 0.6.
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(2.5, 0.0, 12.5, 10.0);
        assert!((iou(&a, &b) - 0.6).abs() < 1e-12);
        let dets = vec![Detection::new(0, 1, 0.8, b), Detection::new(0, 1, 0.9, a)];
        let kept = nms(&dets, 0.5).unwrap();
        assert_eq!(kept, vec![dets[1].clone()]);

        let dets = vec![Detection::new(0, 1, 0.9, a), Detection::new(0, 2, 0.8, b)];
        assert_eq!(nms(&dets, 0.5).unwrap().len(), 2);
    }

    #[test]
    fn nms_rejects_mixed_frames() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        let dets = vec![Detection::new(0, 0, 0.5, a), Detection::new(1, 0, 0.5, a)];
        assert!(matches!(
            nms(&dets, 0.5),
            Err(Error::MixedFrames { first: 0, other: 1 })
        ));
    }

    #[test]
    fn nms_tie_break_is_deterministic() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(1.0, 0.0, 11.0, 10.0);
        let d1 = Detection::new(0, 0, 0.5, b);
        let d2 = Detection::new(0, 0, 0.5, a);
        let k1 = nms(&[d1.clone(), d2.clone()], 0.5).unwrap();
        let k2 = nms(&[d2.clone(), d1], 0.5).unwrap();
        assert_eq!(k1, k2);
        assert_eq!(k1, vec![d2]);
    }

    #[test]
    fn clamp_examples() {
        let d = Detection::new(0, 0, 1.0, bx(-5.0, 0.0, 10.0, 10.0));
        assert_eq!(clamp_to_frame(&d, 100, 100).unwrap().bbox, bx(0.0, 0.0, 10.0, 10.0));
        let inside = Detection::new(0, 0, 1.0, bx(1.0, 2.0, 30.0, 40.0));
        assert_eq!(clamp_to_frame(&inside, 100, 100).unwrap(), inside);
        let out = Detection::new(0, 0, 1.0, bx(-10.0, -10.0, -1.0, -1.0));
        assert!(matches!(
            clamp_to_frame(&out, 100, 100),
            Err(Error::DegenerateAfterClamp { .. })
        ));
    }

    #[test]
    fn frame_grouping() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        let clip = ClipDetections::new("c", 5, 10, 10).with_detections(vec![
            Detection::new(3, 0, 0.1, a),
            Detection::new(0, 0, 0.2, a),
            Detection::new(3, 1, 0.3, a),
        ]);
        let frames: Vec<_> = clip.frames().map(|(f, d)| (f, d.len())).collect();
        assert_eq!(frames, vec![(0, 1), (3, 2)]);
        assert_eq!(clip.on_frame(3).len(), 2);
        assert!(clip.on_frame(1).is_empty());
        clip.validate().unwrap();
    }
}
