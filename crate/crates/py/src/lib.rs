//! Python bindings: boxes, detections, clips, and the main operations.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tubekit::combine::Source;
use tubekit::pipeline::{self, FlowProvider, PipelineInputs, Stages};
use tubekit::{eval, io, mcs as tk_mcs, synth, Error};

type Coords = (f64, f64, f64, f64);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Invariant(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn bbox((x0, y0, x1, y1): Coords) -> PyResult<tubekit::BBox> {
    tubekit::BBox::new(x0, y0, x1, y1).map_err(to_py)
}

#[pyclass(name = "BBox", frozen, from_py_object)]
#[derive(Clone)]
struct PyBBox(tubekit::BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> PyResult<Self> {
        Ok(PyBBox(bbox((x0, y0, x1, y1))?))
    }

    #[getter]
    fn coords(&self) -> Coords {
        let b = self.0;
        (b.x0, b.y0, b.x1, b.y1)
    }

    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBBox) -> f64 {
        tubekit::iou(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        let b = self.0;
        format!("BBox({}, {}, {}, {})", b.x0, b.y0, b.x1, b.y1)
    }
}

#[pyclass(name = "Detection", frozen, from_py_object)]
#[derive(Clone)]
struct PyDetection(tubekit::Detection);

#[pymethods]
impl PyDetection {
    #[new]
    #[pyo3(signature = (frame, class_id, score, bbox, source=None))]
    fn new(frame: u32, class_id: u32, score: f64, bbox: Coords, source: Option<String>) -> PyResult<Self> {
        let mut d = tubekit::Detection::new(frame, class_id, score, self::bbox(bbox)?);
        d.source = source;
        Ok(PyDetection(d))
    }

    #[getter]
    fn frame(&self) -> u32 {
        self.0.frame
    }

    #[getter]
    fn class_id(&self) -> u32 {
        self.0.class_id
    }

    #[getter]
    fn score(&self) -> f64 {
        self.0.score
    }

    #[getter]
    fn bbox(&self) -> Coords {
        let b = self.0.bbox;
        (b.x0, b.y0, b.x1, b.y1)
    }

    #[getter]
    fn source(&self) -> Option<String> {
        self.0.source.clone()
    }

    /// `(frame, offset)` of the detection this one was propagated from.
    #[getter]
    fn origin(&self) -> Option<(u32, i32)> {
        self.0.origin.map(|o| (o.frame, o.offset))
    }

    fn __repr__(&self) -> String {
        let d = &self.0;
        format!(
            "Detection(frame={}, class_id={}, score={}, bbox={:?})",
            d.frame,
            d.class_id,
            d.score,
            d.bbox.to_array()
        )
    }
}

#[pyclass(name = "ClipDetections", frozen, from_py_object)]
#[derive(Clone)]
struct PyClip(tubekit::ClipDetections);

#[pymethods]
impl PyClip {
    #[new]
    fn new(clip_id: String, num_frames: u32, width: u32, height: u32, detections: Vec<PyDetection>) -> PyResult<Self> {
        let clip = tubekit::ClipDetections::new(clip_id, num_frames, width, height)
            .with_detections(detections.into_iter().map(|d| d.0).collect());
        clip.validate().map_err(to_py)?;
        Ok(PyClip(clip))
    }

    #[getter]
    fn clip_id(&self) -> String {
        self.0.clip_id.clone()
    }

    #[getter]
    fn num_frames(&self) -> u32 {
        self.0.num_frames
    }

    #[getter]
    fn size(&self) -> (u32, u32) {
        (self.0.width, self.0.height)
    }

    #[getter]
    fn detections(&self) -> Vec<PyDetection> {
        self.0.detections.iter().cloned().map(PyDetection).collect()
    }

    fn __len__(&self) -> usize {
        self.0.detections.len()
    }

    fn __repr__(&self) -> String {
        format!("ClipDetections({:?}, {} detections)", self.0.clip_id, self.0.detections.len())
    }
}

fn unwrap_clips(clips: Vec<PyClip>) -> Vec<tubekit::ClipDetections> {
    clips.into_iter().map(|c| c.0).collect()
}

#[pyfunction]
fn iou(a: Coords, b: Coords) -> PyResult<f64> {
    Ok(tubekit::iou(&bbox(a)?, &bbox(b)?))
}

/// Greedy per-class NMS over the detections of one frame.
#[pyfunction]
#[pyo3(signature = (detections, iou_thresh=0.5))]
fn nms(detections: Vec<PyDetection>, iou_thresh: f64) -> PyResult<Vec<PyDetection>> {
    let dets: Vec<_> = detections.into_iter().map(|d| d.0).collect();
    Ok(tubekit::nms(&dets, iou_thresh)
        .map_err(to_py)?
        .into_iter()
        .map(PyDetection)
        .collect())
}

#[pyfunction]
#[pyo3(signature = (clip, ratio=0.0003, penalty=0.4))]
fn mcs(clip: PyClip, ratio: f64, penalty: f64) -> PyResult<PyClip> {
    Ok(PyClip(tk_mcs::apply(&clip.0, ratio, penalty).map_err(to_py)?))
}

#[pyfunction]
#[pyo3(signature = (path, num_classes=30))]
fn read_detections(path: PathBuf, num_classes: u32) -> PyResult<Vec<PyClip>> {
    Ok(io::read_detections(path, num_classes)
        .map_err(to_py)?
        .into_iter()
        .map(PyClip)
        .collect())
}

#[pyfunction]
fn write_detections(clips: Vec<PyClip>, path: PathBuf) -> PyResult<()> {
    io::write_detections(&unwrap_clips(clips), path).map_err(to_py)
}

/// Mean AP against a ground-truth file. Returns a dict with `mean_ap`,
/// `per_class_ap` and `classes_without_gt`.
#[pyfunction]
#[pyo3(signature = (clips, gt_path, matching_iou=0.5))]
fn mean_ap<'py>(py: Python<'py>, clips: Vec<PyClip>, gt_path: PathBuf, matching_iou: f64) -> PyResult<Bound<'py, PyDict>> {
    let gt = io::read_ground_truth(gt_path).map_err(to_py)?;
    let r = eval::mean_ap(&unwrap_clips(clips), &gt, matching_iou).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("mean_ap", r.mean_ap)?;
    out.set_item("per_class_ap", r.per_class_ap)?;
    out.set_item("classes_without_gt", r.classes_without_gt)?;
    Ok(out)
}

/// CorLoc with each clip's most frequent ground-truth class as target.
#[pyfunction]
fn corloc(clips: Vec<PyClip>, gt_path: PathBuf) -> PyResult<f64> {
    let gt = io::read_ground_truth(gt_path).map_err(to_py)?;
    let targets = eval::targets_from_ground_truth(&gt);
    Ok(eval::corloc(&unwrap_clips(clips), &gt, &targets).map_err(to_py)?.value)
}

/// Writes synthetic fixtures; `spec_json` overrides defaults. Returns the
/// number of files written.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_json=None))]
fn synthesize(out_dir: PathBuf, spec_json: Option<&str>) -> PyResult<usize> {
    let spec: synth::SynthSpec = match spec_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => synth::SynthSpec::default(),
    };
    let m = synth::write_fixtures(&spec, out_dir).map_err(to_py)?;
    Ok(m.files.len() + 1)
}

/// Runs the pipeline on detection files and writes the run directory.
/// Returns the mean AP when the `eval` stage ran.
#[pyfunction]
#[pyo3(signature = (dets, out_dir, flow_dir=None, gt=None, stages="mcs,mgp,track,rescore,combine,eval", config_json=None))]
fn run_pipeline(
    py: Python<'_>,
    dets: Vec<PathBuf>,
    out_dir: PathBuf,
    flow_dir: Option<PathBuf>,
    gt: Option<PathBuf>,
    stages: &str,
    config_json: Option<&str>,
) -> PyResult<Option<f64>> {
    let cfg = match config_json {
        Some(s) => tubekit::PipelineConfig::from_json(s).map_err(to_py)?,
        None => tubekit::PipelineConfig::default(),
    };
    let stages: Stages = stages.parse().map_err(to_py)?;
    let mut inputs = PipelineInputs {
        flows: flow_dir.map_or(FlowProvider::None, FlowProvider::Dir),
        ..Default::default()
    };
    for (id, path) in pipeline::source_ids(&dets).into_iter().zip(&dets) {
        inputs
            .sources
            .push(Source::new(id, io::read_detections(path, cfg.num_classes).map_err(to_py)?));
    }
    let mut files = dets.clone();
    if let Some(g) = gt {
        inputs.ground_truth = Some(io::read_ground_truth(&g).map_err(to_py)?);
        files.push(g);
    }
    let output = py
        .detach(|| pipeline::run_pipeline(&cfg, &stages, &inputs))
        .map_err(to_py)?;
    pipeline::write_run(&out_dir, &cfg, &stages, &files, &output).map_err(to_py)?;
    Ok(output.report.map(|r| r.mean_ap))
}

#[pymodule]
pub fn tubekit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyClip>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(mcs, m)?)?;
    m.add_function(wrap_pyfunction!(read_detections, m)?)?;
    m.add_function(wrap_pyfunction!(write_detections, m)?)?;
    m.add_function(wrap_pyfunction!(mean_ap, m)?)?;
    m.add_function(wrap_pyfunction!(corloc, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
