use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scope of min-max score normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinMaxScope {
    #[default]
    Global,
    PerClip,
}

/// Every tunable of the pipeline. Missing keys take the defaults below;
/// unknown keys are rejected when reading from a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Fraction of a clip's detections, ranked by score, whose classes count
    /// as high-confidence.
    pub mcs_ratio: f64,
    /// Score subtracted from low-confidence classes.
    pub mcs_penalty: f64,
    /// Propagation window in frames, odd; 7 reaches 3 frames each way.
    pub mgp_window: u32,
    pub nms_iou: f64,
    /// Tracking stops in a direction once confidence drops below this.
    pub track_stop_conf: f64,
    /// Confidence multiplier per tracked step without a detection to snap to.
    pub track_decay: f64,
    /// Lowest score a detection may have to seed a tubelet.
    pub anchor_min_score: f64,
    pub anchor_suppress_iou: f64,
    pub snap_iou: f64,
    pub maxpool_iou: f64,
    pub topk_k: usize,
    pub positive_range: [f64; 2],
    pub negative_range: [f64; 2],
    /// Ground-truth overlap for labelling tubelets when fitting the classifier.
    pub label_iou: f64,
    pub frame_stride: u32,
    pub num_classes: u32,
    pub matching_iou: f64,
    pub minmax_scope: MinMaxScope,
    pub greedy_epsilon: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mcs_ratio: 0.0003,
            mcs_penalty: 0.4,
            mgp_window: 7,
            nms_iou: 0.5,
            track_stop_conf: 0.1,
            track_decay: 0.5,
            anchor_min_score: 0.5,
            anchor_suppress_iou: 0.3,
            snap_iou: 0.5,
            maxpool_iou: 0.5,
            topk_k: 5,
            positive_range: [0.5, 1.0],
            negative_range: [0.0, 0.5],
            label_iou: 0.5,
            frame_stride: 1,
            num_classes: 30,
            matching_iou: 0.5,
            minmax_scope: MinMaxScope::Global,
            greedy_epsilon: 0.001,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("mcs_ratio", self.mcs_ratio),
            ("nms_iou", self.nms_iou),
            ("track_stop_conf", self.track_stop_conf),
            ("track_decay", self.track_decay),
            ("anchor_min_score", self.anchor_min_score),
            ("anchor_suppress_iou", self.anchor_suppress_iou),
            ("snap_iou", self.snap_iou),
            ("maxpool_iou", self.maxpool_iou),
            ("label_iou", self.label_iou),
            ("matching_iou", self.matching_iou),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        for (name, v) in [("mcs_ratio", self.mcs_ratio), ("nms_iou", self.nms_iou), ("matching_iou", self.matching_iou)] {
            if v == 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.mcs_penalty.is_finite() && self.mcs_penalty >= 0.0) {
            return Err(Error::Config(format!(
                "mcs_penalty = {} must be finite and non-negative",
                self.mcs_penalty
            )));
        }
        if self.mgp_window == 0 || self.mgp_window % 2 == 0 {
            return Err(Error::Config(format!(
                "mgp_window = {} must be odd and at least 1",
                self.mgp_window
            )));
        }
        if self.topk_k == 0 {
            return Err(Error::Config("topk_k must be at least 1".into()));
        }
        if self.frame_stride == 0 {
            return Err(Error::Config("frame_stride must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        for (name, r) in [
            ("positive_range", self.positive_range),
            ("negative_range", self.negative_range),
        ] {
            if !(0.0..=1.0).contains(&r[0]) || !(0.0..=1.0).contains(&r[1]) || r[0] > r[1] {
                return Err(Error::Config(format!(
                    "{name} = {r:?} must be an ordered sub-range of [0, 1]"
                )));
            }
        }
        let (p, n) = (self.positive_range, self.negative_range);
        if p[0] < n[1] && n[0] < p[1] {
            return Err(Error::Config(format!(
                "positive_range {p:?} and negative_range {n:?} overlap"
            )));
        }
        if !(self.greedy_epsilon.is_finite() && self.greedy_epsilon >= 0.0) {
            return Err(Error::Config("greedy_epsilon must be non-negative".into()));
        }
        Ok(())
    }
}
