//! Dense optical flow fields and the per-clip flow store.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::BBox;

/// Per-pixel displacement for one frame transition, stored row-major with
/// `(u, v)` interleaved exactly as in a `.flo` file.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: u32, height: u32) -> Self {
        FlowField {
            width,
            height,
            data: vec![0.0; 2 * width as usize * height as usize],
        }
    }

    pub fn uniform(width: u32, height: u32, u: f32, v: f32) -> Self {
        let mut f = Self::zeros(width, height);
        for px in f.data.chunks_exact_mut(2) {
            px[0] = u;
            px[1] = v;
        }
        f
    }

    /// Builds a field from interleaved `(u, v)` samples.
    pub fn from_interleaved(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != 2 * width as usize * height as usize {
            return Err(Error::Invalid(format!(
                "flow payload has {} values, {}x{} needs {}",
                data.len(),
                width,
                height,
                2 * width as usize * height as usize
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("flow contains non-finite values".into()));
        }
        Ok(FlowField {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn interleaved(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> (f32, f32) {
        let i = 2 * (y as usize * self.width as usize + x as usize);
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, x: u32, y: u32, u: f32, v: f32) {
        let i = 2 * (y as usize * self.width as usize + x as usize);
        self.data[i] = u;
        self.data[i + 1] = v;
    }

    /// Assigns `(u, v)` to every pixel whose center lies inside `bbox`.
    pub fn fill_box(&mut self, bbox: &BBox, u: f32, v: f32) {
        if let Some((xs, ys)) = pixel_span(bbox, self.width, self.height) {
            for y in ys {
                for x in xs.clone() {
                    self.set(x, y, u, v);
                }
            }
        }
    }

    /// Mean displacement over the pixel centers inside `bbox` clipped to the
    /// frame. A sliver that covers no pixel center samples the pixel holding
    /// the center of the clipped box.
    pub fn mean_flow(&self, bbox: &BBox) -> Result<(f64, f64)> {
        let frame = BBox {
            x0: 0.0,
            y0: 0.0,
            x1: self.width as f64,
            y1: self.height as f64,
        };
        let clipped = bbox.intersect(&frame).ok_or_else(|| {
            Error::Invalid(format!(
                "box {:?} does not intersect the {}x{} flow field",
                bbox.to_array(),
                self.width,
                self.height
            ))
        })?;
        match pixel_span(&clipped, self.width, self.height) {
            Some((xs, ys)) => {
                let (mut su, mut sv) = (0.0f64, 0.0f64);
                let n = (xs.len() * ys.len()) as f64;
                for y in ys {
                    let row = 2 * (y as usize * self.width as usize);
                    let slice = &self.data[row + 2 * xs.start as usize..row + 2 * xs.end as usize];
                    for px in slice.chunks_exact(2) {
                        su += px[0] as f64;
                        sv += px[1] as f64;
                    }
                }
                Ok((su / n, sv / n))
            }
            None => {
                let (cx, cy) = clipped.center();
                let x = (cx.floor() as u32).min(self.width - 1);
                let y = (cy.floor() as u32).min(self.height - 1);
                let (u, v) = self.get(x, y);
                Ok((u as f64, v as f64))
            }
        }
    }
}

/// Column and row ranges of pixels whose centers `(i + 0.5, j + 0.5)` fall in
/// the half-open box.
fn pixel_span(
    bbox: &BBox,
    width: u32,
    height: u32,
) -> Option<(std::ops::Range<u32>, std::ops::Range<u32>)> {
    let range = |lo: f64, hi: f64, limit: u32| {
        let start = (lo - 0.5).ceil().max(0.0).min(limit as f64) as u32;
        let end = (hi - 0.5).ceil().max(0.0).min(limit as f64) as u32;
        start..end
    };
    let xs = range(bbox.x0, bbox.x1, width);
    let ys = range(bbox.y0, bbox.y1, height);
    (!xs.is_empty() && !ys.is_empty()).then_some((xs, ys))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> i64 {
        match self {
            Direction::Forward => 1,
            Direction::Backward => -1,
        }
    }
}

/// Flow fields of one clip. Forward flow at frame `t` maps `t -> t+1`;
/// backward flow at `t` maps `t -> t-1`.
#[derive(Clone, Debug, Default)]
pub struct FlowSet {
    pub clip_id: String,
    forward: HashMap<u32, FlowField>,
    backward: HashMap<u32, FlowField>,
}

impl FlowSet {
    pub fn new(clip_id: impl Into<String>) -> Self {
        FlowSet {
            clip_id: clip_id.into(),
            ..Default::default()
        }
    }

    pub fn insert_forward(&mut self, frame: u32, field: FlowField) {
        self.forward.insert(frame, field);
    }

    pub fn insert_backward(&mut self, frame: u32, field: FlowField) {
        self.backward.insert(frame, field);
    }

    pub fn forward(&self, frame: u32) -> Option<&FlowField> {
        self.forward.get(&frame)
    }

    pub fn backward(&self, frame: u32) -> Option<&FlowField> {
        self.backward.get(&frame)
    }

    pub fn forward_frames(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.forward.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn backward_frames(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.backward.keys().copied().collect();
        v.sort_unstable();
        v
    }

    /// Displacement of a box on `frame` moving one frame in `dir`.
    ///
    /// Backward steps use the backward field when present, else the negated
    /// forward field of the same frame, else the negated forward field of the
    /// previous frame (needed on the last frame of a clip).
    pub fn step(&self, frame: u32, dir: Direction, bbox: &BBox) -> Result<(f64, f64)> {
        let missing = || Error::MissingFlow {
            clip: self.clip_id.clone(),
            frame,
            direction: match dir {
                Direction::Forward => "forward",
                Direction::Backward => "backward",
            },
        };
        match dir {
            Direction::Forward => self.forward(frame).ok_or_else(missing)?.mean_flow(bbox),
            Direction::Backward => {
                if let Some(f) = self.backward(frame) {
                    return f.mean_flow(bbox);
                }
                let fwd = self
                    .forward(frame)
                    .or_else(|| frame.checked_sub(1).and_then(|p| self.forward(p)))
                    .ok_or_else(missing)?;
                let (u, v) = fwd.mean_flow(bbox)?;
                Ok((-u, -v))
            }
        }
    }
}
