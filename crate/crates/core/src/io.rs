//! On-disk formats.
//!
//! Detections and ground truth are line-delimited JSON, one record per line:
//!
//! ```text
//! {"clip":"a","num_frames":40,"width":160,"height":120}
//! {"clip":"a","frame":0,"class":3,"score":0.9,"bbox":[0.0,0.0,10.0,10.0]}
//! {"clip":"a","frame":1,"class":3,"score":0.9,"bbox":[2.0,0.0,12.0,10.0],"source":"m1","origin":[0,1]}
//! ```
//!
//! The first line is an optional clip header. Without one, the frame count
//! is the largest frame index plus one and the size is the rounded-up extent
//! of the boxes. Ground-truth lines carry `"track"` instead of `"score"`,
//! `"source"` and `"origin"`.
//!
//! Flow files use the Middlebury `.flo` layout, little-endian: the float
//! `202021.25`, `i32` width, `i32` height, then `width * height` pairs of
//! `f32` `(u, v)` in row-major order. Forward flow for frame `t` of clip `c`
//! lives at `<dir>/<c>/<t>.flo`, optional backward flow at `<t>.bflo`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};
use serde_json::{Map, Value};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::flow::{FlowField, FlowSet};
use crate::model::{clamp_to_frame, BBox, ClipDetections, Detection, Origin};

pub const FLOW_MAGIC: f32 = 202021.25;
pub const FLOW_HEADER_LEN: usize = 12;

/// One annotated object box.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRecord {
    pub clip_id: String,
    pub frame: u32,
    pub class_id: u32,
    pub track_id: u64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ClipHeader {
    num_frames: u32,
    width: u32,
    height: u32,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn object(&self, text: &str) -> Result<Map<String, Value>> {
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(map)) => Ok(map),
            Ok(_) => Err(self.err("<record>", "expected a JSON object")),
            Err(e) => Err(self.err("<record>", e.to_string())),
        }
    }

    fn check_keys(&self, obj: &Map<String, Value>, allowed: &[&str]) -> Result<()> {
        match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(self.err(k, "unknown field")),
            None => Ok(()),
        }
    }

    fn get<'v>(&self, obj: &'v Map<String, Value>, key: &str) -> Result<&'v Value> {
        obj.get(key).ok_or_else(|| self.err(key, "missing field"))
    }

    fn string(&self, obj: &Map<String, Value>, key: &str) -> Result<String> {
        match self.get(obj, key)? {
            Value::String(s) if !s.is_empty() => Ok(s.clone()),
            Value::String(_) => Err(self.err(key, "must not be empty")),
            _ => Err(self.err(key, "expected a string")),
        }
    }

    fn uint(&self, obj: &Map<String, Value>, key: &str, max: u64) -> Result<u64> {
        match self.get(obj, key)?.as_u64() {
            Some(v) if v <= max => Ok(v),
            Some(v) => Err(self.err(key, format!("{v} exceeds {max}"))),
            None => Err(self.err(key, "expected a non-negative integer")),
        }
    }

    fn u32(&self, obj: &Map<String, Value>, key: &str) -> Result<u32> {
        self.uint(obj, key, u32::MAX as u64).map(|v| v as u32)
    }

    fn real(&self, obj: &Map<String, Value>, key: &str) -> Result<f64> {
        self.get(obj, key)?
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(key, "expected a finite number"))
    }

    fn bbox(&self, obj: &Map<String, Value>) -> Result<BBox> {
        let arr = self
            .get(obj, "bbox")?
            .as_array()
            .filter(|a| a.len() == 4)
            .ok_or_else(|| self.err("bbox", "expected [x0, y0, x1, y1]"))?;
        let mut c = [0.0; 4];
        for (slot, v) in c.iter_mut().zip(arr) {
            *slot = v
                .as_f64()
                .ok_or_else(|| self.err("bbox", "coordinates must be numbers"))?;
        }
        BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| self.err("bbox", e.to_string()))
    }

    fn header(&self, obj: &Map<String, Value>) -> Result<(String, ClipHeader)> {
        self.check_keys(obj, &["clip", "num_frames", "width", "height"])?;
        let clip = self.string(obj, "clip")?;
        let header = ClipHeader {
            num_frames: self.u32(obj, "num_frames")?,
            width: self.u32(obj, "width")?,
            height: self.u32(obj, "height")?,
        };
        for (k, v) in [
            ("num_frames", header.num_frames),
            ("width", header.width),
            ("height", header.height),
        ] {
            if v == 0 {
                return Err(self.err(k, "must be positive"));
            }
        }
        Ok((clip, header))
    }
}

fn is_header(obj: &Map<String, Value>) -> bool {
    obj.contains_key("num_frames")
}

/// Groups parsed records per clip in first-appearance order, attaching the
/// header (or inferred metadata) of each clip.
struct ClipAccumulator<T> {
    order: Vec<String>,
    records: HashMap<String, Vec<(usize, T)>>,
    headers: HashMap<String, ClipHeader>,
}

impl<T> ClipAccumulator<T> {
    fn new() -> Self {
        ClipAccumulator {
            order: Vec::new(),
            records: HashMap::new(),
            headers: HashMap::new(),
        }
    }

    fn touch(&mut self, clip: &str) {
        if !self.records.contains_key(clip) {
            self.order.push(clip.to_string());
            self.records.insert(clip.to_string(), Vec::new());
        }
    }

    fn header(&mut self, ctx: &LineCtx, clip: String, header: ClipHeader) -> Result<()> {
        self.touch(&clip);
        if self.headers.insert(clip, header).is_some() {
            return Err(ctx.err("clip", "duplicate clip header"));
        }
        Ok(())
    }

    fn push(&mut self, clip: String, line: usize, rec: T) {
        self.touch(&clip);
        self.records.get_mut(&clip).unwrap().push((line, rec));
    }
}

pub fn parse_detections(path: &Path, text: &str, num_classes: u32) -> Result<Vec<ClipDetections>> {
    let mut acc = ClipAccumulator::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let ctx = LineCtx { path, line: idx + 1 };
        let obj = ctx.object(raw)?;
        if is_header(&obj) {
            let (clip, header) = ctx.header(&obj)?;
            acc.header(&ctx, clip, header)?;
            continue;
        }
        ctx.check_keys(&obj, &["clip", "frame", "class", "score", "bbox", "source", "origin"])?;
        let clip = ctx.string(&obj, "clip")?;
        let frame = ctx.u32(&obj, "frame")?;
        let class_id = ctx.u32(&obj, "class")?;
        if class_id >= num_classes {
            return Err(ctx.err(
                "class",
                format!("class {class_id} outside the {num_classes} configured classes"),
            ));
        }
        let score = ctx.real(&obj, "score")?;
        let bbox = ctx.bbox(&obj)?;
        let source = match obj.get("source") {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(ctx.err("source", "expected a string")),
        };
        let origin = match obj.get("origin") {
            None => None,
            Some(v) => {
                let pair = v
                    .as_array()
                    .filter(|a| a.len() == 2)
                    .and_then(|a| Some((a[0].as_u64()?, a[1].as_i64()?)))
                    .filter(|(f, o)| *f <= u32::MAX as u64 && i32::try_from(*o).is_ok())
                    .ok_or_else(|| ctx.err("origin", "expected [source_frame, offset]"))?;
                Some(Origin {
                    frame: pair.0 as u32,
                    offset: pair.1 as i32,
                })
            }
        };
        acc.push(
            clip,
            idx + 1,
            Detection {
                frame,
                class_id,
                score,
                bbox,
                source,
                origin,
            },
        );
    }

    let mut clips = Vec::with_capacity(acc.order.len());
    for clip_id in acc.order {
        let records = acc.records.remove(&clip_id).unwrap_or_default();
        let header = match acc.headers.remove(&clip_id) {
            Some(h) => h,
            None => ClipHeader {
                num_frames: records.iter().map(|(_, d)| d.frame + 1).max().unwrap_or(1),
                width: records
                    .iter()
                    .map(|(_, d)| d.bbox.x1.ceil().max(1.0) as u32)
                    .max()
                    .unwrap_or(1),
                height: records
                    .iter()
                    .map(|(_, d)| d.bbox.y1.ceil().max(1.0) as u32)
                    .max()
                    .unwrap_or(1),
            },
        };
        let mut dets = Vec::with_capacity(records.len());
        for (line, d) in records {
            let ctx = LineCtx { path, line };
            if d.frame >= header.num_frames {
                return Err(ctx.err(
                    "frame",
                    format!("frame {} beyond the clip's {} frames", d.frame, header.num_frames),
                ));
            }
            let d = clamp_to_frame(&d, header.width, header.height)
                .map_err(|e| ctx.err("bbox", e.to_string()))?;
            dets.push(d);
        }
        let clip = ClipDetections::new(clip_id, header.num_frames, header.width, header.height)
            .with_detections(dets);
        clips.push(clip);
    }
    Ok(clips)
}

pub fn read_detections(path: impl AsRef<Path>, num_classes: u32) -> Result<Vec<ClipDetections>> {
    let path = path.as_ref();
    parse_detections(path, &read_text(path)?, num_classes)
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    clip: &'a str,
    num_frames: u32,
    width: u32,
    height: u32,
}

#[derive(Serialize)]
struct DetectionOut<'a> {
    clip: &'a str,
    frame: u32,
    class: u32,
    score: f64,
    bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    origin: Option<(u32, i32)>,
}

fn push_line<T: Serialize>(out: &mut String, value: &T) {
    out.push_str(&serde_json::to_string(value).expect("record serializes"));
    out.push('\n');
}

/// Canonical text form: a header per clip followed by its detections in
/// canonical order.
pub fn format_detections(clips: &[ClipDetections]) -> String {
    let mut out = String::new();
    for clip in clips {
        push_line(
            &mut out,
            &HeaderOut {
                clip: &clip.clip_id,
                num_frames: clip.num_frames,
                width: clip.width,
                height: clip.height,
            },
        );
        let mut dets: Vec<&Detection> = clip.detections.iter().collect();
        dets.sort_by(|a, b| crate::model::canonical_order(a, b));
        for d in dets {
            push_line(
                &mut out,
                &DetectionOut {
                    clip: &clip.clip_id,
                    frame: d.frame,
                    class: d.class_id,
                    score: d.score,
                    bbox: d.bbox.to_array(),
                    source: d.source.as_deref(),
                    origin: d.origin.map(|o| (o.frame, o.offset)),
                },
            );
        }
    }
    out
}

pub fn write_detections(clips: &[ClipDetections], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), format_detections(clips).as_bytes())
}

pub fn parse_ground_truth(path: &Path, text: &str) -> Result<Vec<GroundTruthRecord>> {
    let mut out = Vec::new();
    let mut seen: HashSet<(String, u32, u64)> = HashSet::new();
    let mut track_class: HashMap<(String, u64), u32> = HashMap::new();
    let mut headers: HashMap<String, ClipHeader> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let ctx = LineCtx { path, line: idx + 1 };
        let obj = ctx.object(raw)?;
        if is_header(&obj) {
            let (clip, header) = ctx.header(&obj)?;
            if headers.insert(clip, header).is_some() {
                return Err(ctx.err("clip", "duplicate clip header"));
            }
            continue;
        }
        ctx.check_keys(&obj, &["clip", "frame", "class", "track", "bbox"])?;
        let rec = GroundTruthRecord {
            clip_id: ctx.string(&obj, "clip")?,
            frame: ctx.u32(&obj, "frame")?,
            class_id: ctx.u32(&obj, "class")?,
            track_id: ctx.uint(&obj, "track", u64::MAX)?,
            bbox: ctx.bbox(&obj)?,
        };
        if !seen.insert((rec.clip_id.clone(), rec.frame, rec.track_id)) {
            return Err(ctx.err(
                "track",
                format!("track {} annotated twice on frame {}", rec.track_id, rec.frame),
            ));
        }
        let class = track_class
            .entry((rec.clip_id.clone(), rec.track_id))
            .or_insert(rec.class_id);
        if *class != rec.class_id {
            return Err(ctx.err(
                "class",
                format!(
                    "track {} changes class from {} to {}",
                    rec.track_id, class, rec.class_id
                ),
            ));
        }
        if let Some(h) = headers.get(&rec.clip_id) {
            if rec.frame >= h.num_frames {
                return Err(ctx.err("frame", "frame beyond the clip header's frame count"));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthRecord>> {
    let path = path.as_ref();
    parse_ground_truth(path, &read_text(path)?)
}

#[derive(Serialize)]
struct GroundTruthOut<'a> {
    clip: &'a str,
    frame: u32,
    class: u32,
    track: u64,
    bbox: [f64; 4],
}

pub fn format_ground_truth(records: &[GroundTruthRecord]) -> String {
    let mut out = String::new();
    for r in records {
        push_line(
            &mut out,
            &GroundTruthOut {
                clip: &r.clip_id,
                frame: r.frame,
                class: r.class_id,
                track: r.track_id,
                bbox: r.bbox.to_array(),
            },
        );
    }
    out
}

pub fn write_ground_truth(records: &[GroundTruthRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), format_ground_truth(records).as_bytes())
}

pub fn read_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    PipelineConfig::from_json(&read_text(path)?)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
}

pub fn encode_flow(field: &FlowField) -> Vec<u8> {
    let payload = field.interleaved();
    let mut out = Vec::with_capacity(FLOW_HEADER_LEN + 4 * payload.len());
    out.extend_from_slice(&FLOW_MAGIC.to_le_bytes());
    out.extend_from_slice(&(field.width() as i32).to_le_bytes());
    out.extend_from_slice(&(field.height() as i32).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flow(path: &Path, bytes: &[u8]) -> Result<FlowField> {
    let err = |message: String| Error::Flow {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < FLOW_HEADER_LEN {
        return Err(err(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)).to_bits() != FLOW_MAGIC.to_bits() {
        return Err(err("bad magic number".into()));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(err(format!("invalid dimensions {width}x{height}")));
    }
    let expected = (width as u64) * (height as u64) * 8;
    let actual = (bytes.len() - FLOW_HEADER_LEN) as u64;
    if actual != expected {
        return Err(err(format!(
            "payload is {actual} bytes, {width}x{height} needs {expected}"
        )));
    }
    let data: Vec<f32> = bytes[FLOW_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FlowField::from_interleaved(width as u32, height as u32, data).map_err(|e| err(e.to_string()))
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flow(path, &bytes)
}

pub fn write_flow(field: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_flow(field))
}

pub fn flow_path(dir: &Path, clip_id: &str, frame: u32, backward: bool) -> PathBuf {
    let ext = if backward { "bflo" } else { "flo" };
    dir.join(clip_id).join(format!("{frame}.{ext}"))
}

/// Loads every flow file of one clip. A missing clip directory yields an
/// empty set; missing transitions are reported when they are used.
pub fn load_flow_set(dir: impl AsRef<Path>, clip: &ClipDetections) -> Result<FlowSet> {
    let clip_dir = dir.as_ref().join(&clip.clip_id);
    let mut set = FlowSet::new(clip.clip_id.clone());
    let entries = match fs::read_dir(&clip_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(set),
        Err(e) => return Err(Error::io(&clip_dir, e)),
    };
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        files.push(entry.map_err(|e| Error::io(&clip_dir, e))?.path());
    }
    files.sort();
    for path in files {
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        let backward = match ext {
            "flo" => false,
            "bflo" => true,
            _ => continue,
        };
        let Ok(frame) = stem.parse::<u32>() else {
            continue;
        };
        let field = read_flow(&path)?;
        if field.width() != clip.width || field.height() != clip.height {
            return Err(Error::Flow {
                path,
                message: format!(
                    "dimensions {}x{} do not match clip `{}` ({}x{})",
                    field.width(),
                    field.height(),
                    clip.clip_id,
                    clip.width,
                    clip.height
                ),
            });
        }
        if backward {
            set.insert_backward(frame, field);
        } else {
            set.insert_forward(frame, field);
        }
    }
    Ok(set)
}

pub fn write_flow_set(dir: impl AsRef<Path>, set: &FlowSet) -> Result<()> {
    let dir = dir.as_ref();
    for frame in set.forward_frames() {
        write_flow(set.forward(frame).unwrap(), flow_path(dir, &set.clip_id, frame, false))?;
    }
    for frame in set.backward_frames() {
        write_flow(set.backward(frame).unwrap(), flow_path(dir, &set.clip_id, frame, true))?;
    }
    Ok(())
}

/// Reads a file of one JSON document per line.
pub fn read_json_lines<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_json_lines<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for item in items {
        push_line(&mut out, item);
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        field: "<document>".into(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("document serializes");
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Ground truth grouped by `(clip, frame)`.
pub(crate) fn index_ground_truth(
    gt: &[GroundTruthRecord],
) -> BTreeMap<(&str, u32), Vec<&GroundTruthRecord>> {
    let mut map: BTreeMap<(&str, u32), Vec<&GroundTruthRecord>> = BTreeMap::new();
    for r in gt {
        map.entry((r.clip_id.as_str(), r.frame)).or_default().push(r);
    }
    map
}
