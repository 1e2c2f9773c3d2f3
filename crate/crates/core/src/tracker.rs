//! High-confidence tracking: long tubelets grown from anchor detections.

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::flow::{Direction, FlowSet};
use crate::model::{clamp_to_frame, iou, score_order, BBox, ClipDetections, Detection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeletNode {
    pub frame: u32,
    pub bbox: BBox,
    pub score: f64,
    /// Whether the node sits on a still-image detection rather than on a
    /// flow-extrapolated box.
    pub snapped: bool,
}

/// One box per frame over a run of consecutive frames, for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tubelet {
    #[serde(rename = "clip")]
    pub clip_id: String,
    #[serde(rename = "class")]
    pub class_id: u32,
    /// Position of the anchor inside `nodes`.
    #[serde(rename = "anchor")]
    pub anchor_index: usize,
    pub nodes: Vec<TubeletNode>,
}

impl Tubelet {
    pub fn first_frame(&self) -> u32 {
        self.nodes[0].frame
    }

    pub fn last_frame(&self) -> u32 {
        self.nodes[self.nodes.len() - 1].frame
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn anchor(&self) -> &TubeletNode {
        &self.nodes[self.anchor_index]
    }

    pub fn node_at(&self, frame: u32) -> Option<&TubeletNode> {
        let first = self.nodes.first()?.frame;
        frame
            .checked_sub(first)
            .and_then(|i| self.nodes.get(i as usize))
    }

    pub fn scores(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.score).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Invalid(format!("clip `{}`: empty tubelet", self.clip_id)));
        }
        if self.anchor_index >= self.nodes.len() {
            return Err(Error::Invalid(format!(
                "clip `{}`: anchor index {} outside {} nodes",
                self.clip_id,
                self.anchor_index,
                self.nodes.len()
            )));
        }
        if self.nodes.windows(2).any(|w| w[1].frame != w[0].frame + 1) {
            return Err(Error::Invalid(format!(
                "clip `{}`: tubelet frames are not consecutive",
                self.clip_id
            )));
        }
        Ok(())
    }

    /// Node boxes as detections of the tubelet's class.
    pub fn to_detections(&self, source: Option<&str>) -> Vec<Detection> {
        self.nodes
            .iter()
            .map(|n| Detection {
                frame: n.frame,
                class_id: self.class_id,
                score: n.score,
                bbox: n.bbox,
                source: source.map(str::to_string),
                origin: None,
            })
            .collect()
    }
}

/// Anything that can grow a tubelet from an anchor detection.
pub trait Tracker {
    fn track(&self, anchor: &Detection, clip: &ClipDetections, flows: &FlowSet) -> Result<Tubelet>;
}

/// Moves the box along the mean flow and snaps it onto the best-overlapping
/// same-class detection of the next frame. Without a detection to snap to,
/// the confidence decays; tracking in a direction ends once it falls below
/// `stop_conf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSnapTracker {
    pub stop_conf: f64,
    pub snap_iou: f64,
    pub decay: f64,
}

impl FlowSnapTracker {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        FlowSnapTracker {
            stop_conf: cfg.track_stop_conf,
            snap_iou: cfg.snap_iou,
            decay: cfg.track_decay,
        }
    }

    fn extend(
        &self,
        anchor: &Detection,
        clip: &ClipDetections,
        flows: &FlowSet,
        dir: Direction,
    ) -> Result<Vec<TubeletNode>> {
        let mut nodes = Vec::new();
        let mut bbox = anchor.bbox;
        let mut conf = anchor.score;
        let mut frame = anchor.frame as i64;
        loop {
            let next = frame + dir.sign();
            if next < 0 || next >= clip.num_frames as i64 {
                break;
            }
            let (du, dv) = flows.step(frame as u32, dir, &bbox)?;
            let probe = Detection::new(next as u32, anchor.class_id, conf, bbox.translate(du, dv));
            let Ok(shifted) = clamp_to_frame(&probe, clip.width, clip.height) else {
                break;
            };
            let snap = clip
                .on_frame(next as u32)
                .iter()
                .filter(|d| d.class_id == anchor.class_id)
                .map(|d| (iou(&shifted.bbox, &d.bbox), d))
                .filter(|(o, _)| *o >= self.snap_iou)
                .max_by(|a, b| a.0.total_cmp(&b.0).then(score_order(a.1, b.1)));
            let node = match snap {
                Some((_, d)) => TubeletNode {
                    frame: next as u32,
                    bbox: d.bbox,
                    score: d.score,
                    snapped: true,
                },
                None => TubeletNode {
                    frame: next as u32,
                    bbox: shifted.bbox,
                    score: conf * self.decay,
                    snapped: false,
                },
            };
            if node.score < self.stop_conf {
                break;
            }
            bbox = node.bbox;
            conf = node.score;
            frame = next;
            nodes.push(node);
        }
        Ok(nodes)
    }
}

impl Tracker for FlowSnapTracker {
    fn track(&self, anchor: &Detection, clip: &ClipDetections, flows: &FlowSet) -> Result<Tubelet> {
        if !clip.on_frame(anchor.frame).contains(anchor) {
            return Err(Error::Invalid(format!(
                "anchor on frame {} is not a detection of clip `{}`",
                anchor.frame, clip.clip_id
            )));
        }
        let mut backward = self.extend(anchor, clip, flows, Direction::Backward)?;
        let forward = self.extend(anchor, clip, flows, Direction::Forward)?;
        backward.reverse();
        let anchor_index = backward.len();
        let mut nodes = backward;
        nodes.push(TubeletNode {
            frame: anchor.frame,
            bbox: anchor.bbox,
            score: anchor.score,
            snapped: true,
        });
        nodes.extend(forward);
        Ok(Tubelet {
            clip_id: clip.clip_id.clone(),
            class_id: anchor.class_id,
            anchor_index,
            nodes,
        })
    }
}

fn suppressed(cand: &Detection, existing: &[Tubelet], suppress_iou: f64) -> bool {
    existing
        .iter()
        .filter(|t| t.class_id == cand.class_id)
        .filter_map(|t| t.node_at(cand.frame))
        .any(|n| iou(&n.bbox, &cand.bbox) > suppress_iou)
}

/// First candidate (candidates sorted by descending score) that does not
/// overlap a same-class tubelet node on its frame by more than
/// `suppress_iou`.
pub fn select_anchor<'a>(
    remaining: &'a [Detection],
    existing: &[Tubelet],
    suppress_iou: f64,
) -> Option<&'a Detection> {
    remaining
        .iter()
        .find(|d| !suppressed(d, existing, suppress_iou))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorPolicy {
    pub suppress_iou: f64,
    pub min_score: f64,
}

impl AnchorPolicy {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        AnchorPolicy {
            suppress_iou: cfg.anchor_suppress_iou,
            min_score: cfg.anchor_min_score,
        }
    }
}

/// Alternates anchor selection and tracking per class until no detection
/// scoring at least `policy.min_score` is left unsuppressed. Output is
/// ordered by class, then by descending anchor score.
pub fn build_tubelets(
    clip: &ClipDetections,
    flows: &FlowSet,
    tracker: &impl Tracker,
    policy: AnchorPolicy,
) -> Result<Vec<Tubelet>> {
    let mut out = Vec::new();
    for class_id in clip.classes() {
        let mut remaining: Vec<Detection> = clip
            .detections
            .iter()
            .filter(|d| d.class_id == class_id && d.score >= policy.min_score)
            .cloned()
            .collect();
        remaining.sort_by(score_order);
        let mut tubelets: Vec<Tubelet> = Vec::new();
        let mut start = 0;
        while let Some(pos) = remaining[start..]
            .iter()
            .position(|d| !suppressed(d, &tubelets, policy.suppress_iou))
        {
            // Candidates skipped here stay suppressed: the tubelet set only grows.
            let anchor = &remaining[start + pos];
            tubelets.push(tracker.track(anchor, clip, flows)?);
            start += pos + 1;
        }
        out.extend(tubelets);
    }
    Ok(out)
}
