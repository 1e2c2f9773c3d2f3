//! Temporal post-processing for per-frame video object detections.

pub mod combine;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod mcs;
pub mod mgp;
pub mod model;
pub mod pipeline;
pub mod rescoring;
pub mod synth;
pub mod tracker;

pub use config::{MinMaxScope, PipelineConfig};
pub use error::{Error, Result};
pub use flow::{Direction, FlowField, FlowSet};
pub use io::GroundTruthRecord;
pub use model::{clamp_to_frame, iou, nms, BBox, ClipDetections, Detection, Origin};
