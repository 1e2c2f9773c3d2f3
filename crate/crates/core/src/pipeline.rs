//! The full post-processing chain: suppression and propagation on the
//! detection stream, tracking and rescoring on the tubelet stream, then
//! fusion and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::combine::{combine, minmax_normalize, Source};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{mean_ap, EvalReport};
use crate::flow::FlowSet;
use crate::io::{self, GroundTruthRecord};
use crate::mcs;
use crate::mgp::{self, PropagationMode, PropagationPlan, PropagationStats};
use crate::model::ClipDetections;
use crate::rescoring::{self, BayesClassifier1D, RescoreParams, Statistic};
use crate::tracker::{build_tubelets, AnchorPolicy, FlowSnapTracker, Tubelet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Mcs,
    Mgp,
    Track,
    Rescore,
    Combine,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Mcs,
        Stage::Mgp,
        Stage::Track,
        Stage::Rescore,
        Stage::Combine,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mcs => "mcs",
            Stage::Mgp => "mgp",
            Stage::Track => "track",
            Stage::Rescore => "rescore",
            Stage::Combine => "combine",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Ordered, duplicate-free stage selection.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stages(Vec<Stage>);

impl Stages {
    /// Stages must be listed in pipeline order, and rescoring needs tracking.
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        for w in stages.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!(
                    "stage `{}` cannot follow `{}`; order is mcs,mgp,track,rescore,combine,eval",
                    w[1], w[0]
                )));
            }
        }
        if stages.contains(&Stage::Rescore) && !stages.contains(&Stage::Track) {
            return Err(Error::Config("stage `rescore` needs `track`".into()));
        }
        Ok(Stages(stages))
    }

    pub fn all() -> Self {
        Stages(Stage::ALL.to_vec())
    }

    pub fn has(&self, s: Stage) -> bool {
        self.0.contains(&s)
    }

    pub fn as_slice(&self) -> &[Stage] {
        &self.0
    }
}

impl FromStr for Stages {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let list = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(Stage::from_str)
            .collect::<Result<Vec<_>>>()?;
        Stages::new(list)
    }
}

/// Where optical flow comes from.
#[derive(Clone, Debug, Default)]
pub enum FlowProvider {
    #[default]
    None,
    Dir(PathBuf),
    Memory(HashMap<String, FlowSet>),
}

impl FlowProvider {
    fn load(&self, clip: &ClipDetections) -> Result<FlowSet> {
        match self {
            FlowProvider::None => Err(Error::Config("this stage needs optical flow".into())),
            FlowProvider::Dir(dir) => io::load_flow_set(dir, clip),
            FlowProvider::Memory(map) => Ok(map
                .get(&clip.clip_id)
                .cloned()
                .unwrap_or_else(|| FlowSet::new(clip.clip_id.clone()))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineInputs {
    pub sources: Vec<Source>,
    pub ground_truth: Option<Vec<GroundTruthRecord>>,
    pub flows: FlowProvider,
    /// Pretrained tubelet classifier; fitted from ground truth when absent.
    pub classifier: Option<BayesClassifier1D>,
}

/// Intermediate results of one source.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceArtifacts {
    pub id: String,
    pub mcs: Option<Vec<ClipDetections>>,
    pub mgp: Option<Vec<ClipDetections>>,
    pub tubelets: Option<Vec<Tubelet>>,
    pub classifier: Option<BayesClassifier1D>,
    pub rescored: Option<Vec<Tubelet>>,
    pub propagation: PropagationStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub detections: Vec<ClipDetections>,
    pub sources: Vec<SourceArtifacts>,
    pub report: Option<EvalReport>,
    /// Human-readable remarks, such as skipped steps.
    pub notes: Vec<String>,
    /// Wall time per stage in seconds.
    pub timings: BTreeMap<String, f64>,
}

fn in_stage<T>(stage: Stage, context: impl FnOnce() -> String, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.name(),
        context: context(),
        source: Box::new(e),
    })
}

fn per_clip<T, F>(clips: &[ClipDetections], stage: Stage, source: &str, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&ClipDetections) -> Result<T> + Sync,
{
    clips
        .par_iter()
        .map(|c| in_stage(stage, || format!("source `{source}`, clip `{}`", c.clip_id), f(c)))
        .collect()
}

fn tubelet_detections(clips: &[ClipDetections], tubelets: &[Tubelet], id: &str) -> Vec<ClipDetections> {
    let mut by_clip: HashMap<&str, Vec<_>> = HashMap::new();
    for t in tubelets {
        by_clip
            .entry(t.clip_id.as_str())
            .or_default()
            .extend(t.to_detections(Some(&format!("{id}:tubelet"))));
    }
    clips
        .iter()
        .map(|c| c.with_detections(by_clip.remove(c.clip_id.as_str()).unwrap_or_default()))
        .collect()
}

fn union(sources: &[Vec<ClipDetections>]) -> Vec<ClipDetections> {
    let mut order: Vec<String> = Vec::new();
    let mut pooled: HashMap<String, ClipDetections> = HashMap::new();
    for clips in sources {
        for c in clips {
            match pooled.get_mut(&c.clip_id) {
                Some(p) => p.detections.extend(c.detections.iter().cloned()),
                None => {
                    order.push(c.clip_id.clone());
                    pooled.insert(c.clip_id.clone(), c.clone());
                }
            }
        }
    }
    order
        .into_iter()
        .map(|id| {
            let mut c = pooled.remove(&id).unwrap();
            c.sort();
            c
        })
        .collect()
}

/// Runs the selected stages. Clips are processed in parallel on the current
/// rayon pool; results do not depend on the pool size.
pub fn run_pipeline(cfg: &PipelineConfig, stages: &Stages, inputs: &PipelineInputs) -> Result<PipelineOutput> {
    cfg.validate()?;
    if inputs.sources.is_empty() {
        return Err(Error::Config("pipeline needs at least one detection source".into()));
    }
    if stages.has(Stage::Eval) && inputs.ground_truth.is_none() {
        return Err(Error::Config("stage `eval` needs ground truth".into()));
    }
    if stages.has(Stage::Rescore) && inputs.classifier.is_none() && inputs.ground_truth.is_none() {
        return Err(Error::Config("stage `rescore` needs a classifier or ground truth".into()));
    }
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let mut clock = |stage: Stage, since: Instant| {
        *timings.entry(stage.name().into()).or_default() += since.elapsed().as_secs_f64();
    };
    let mut notes = Vec::new();
    let mut artifacts = Vec::new();
    let mut streams: Vec<Source> = Vec::new();
    let params = RescoreParams {
        statistic: Statistic::TopK,
        k: cfg.topk_k,
        positive_range: cfg.positive_range,
        negative_range: cfg.negative_range,
    };

    for src in &inputs.sources {
        let id = src.id.as_str();
        let mut art = SourceArtifacts {
            id: src.id.clone(),
            ..Default::default()
        };
        let base = if stages.has(Stage::Mcs) {
            let t = Instant::now();
            let out = per_clip(&src.clips, Stage::Mcs, id, |c| mcs::apply(c, cfg.mcs_ratio, cfg.mcs_penalty))?;
            clock(Stage::Mcs, t);
            art.mcs = Some(out.clone());
            out
        } else {
            src.clips.clone()
        };

        let mut det_stream = base.clone();
        if stages.has(Stage::Mgp) {
            let t = Instant::now();
            let plan = in_stage(Stage::Mgp, || format!("source `{id}`"), PropagationPlan::new(cfg.mgp_window, PropagationMode::MotionGuided))?;
            let out = per_clip(&det_stream, Stage::Mgp, id, |c| {
                let dense = mgp::interpolate_stride(c, cfg.frame_stride, cfg.nms_iou)?;
                mgp::propagate(&dense, &inputs.flows.load(&dense)?, plan, cfg.nms_iou)
            })?;
            clock(Stage::Mgp, t);
            det_stream = out.iter().map(|(c, _)| c.clone()).collect();
            for (_, s) in out {
                art.propagation += s;
            }
            art.mgp = Some(det_stream.clone());
        }

        let mut tube_stream = None;
        if stages.has(Stage::Track) {
            let t = Instant::now();
            let tracker = FlowSnapTracker::from_config(cfg);
            let policy = AnchorPolicy::from_config(cfg);
            let per = per_clip(&base, Stage::Track, id, |c| {
                let tubes = build_tubelets(c, &inputs.flows.load(c)?, &tracker, policy)?;
                Ok(tubes
                    .iter()
                    .map(|tb| rescoring::spatial_max_pool(tb, c, cfg.maxpool_iou))
                    .collect::<Vec<_>>())
            })?;
            clock(Stage::Track, t);
            let mut tubes: Vec<Tubelet> = per.into_iter().flatten().collect();
            art.tubelets = Some(tubes.clone());

            if stages.has(Stage::Rescore) {
                let t = Instant::now();
                let ctx = || format!("source `{id}`");
                let clf = match (inputs.classifier, &inputs.ground_truth) {
                    (Some(c), _) => Some(c),
                    (None, Some(gt)) => {
                        match rescoring::fit_from_ground_truth(&tubes, gt, cfg.label_iou, params.statistic, params.k) {
                            Ok(c) => Some(c),
                            Err(Error::Invalid(msg)) => {
                                notes.push(format!("source `{id}`: rescoring skipped: {msg}"));
                                None
                            }
                            Err(e) => return in_stage(Stage::Rescore, ctx, Err(e)),
                        }
                    }
                    (None, None) => unreachable!("checked above"),
                };
                if let Some(clf) = clf {
                    let rescored = in_stage(Stage::Rescore, ctx, rescoring::rescore(&tubes, &clf, params))?;
                    tubes = rescored.into_iter().map(|r| r.tubelet).collect();
                    art.classifier = Some(clf);
                    art.rescored = Some(tubes.clone());
                }
                clock(Stage::Rescore, t);
            }
            tube_stream = Some(tubelet_detections(&base, &tubes, id));
        }

        if stages.has(Stage::Combine) {
            let t = Instant::now();
            let mut parts = vec![Source::new(id, minmax_normalize(&det_stream, cfg.minmax_scope))];
            if let Some(ts) = tube_stream {
                parts.push(Source::new(format!("{id}:tubelet"), minmax_normalize(&ts, cfg.minmax_scope)));
            }
            let fused = in_stage(Stage::Combine, || format!("source `{id}`"), combine(&parts, cfg.nms_iou))?;
            clock(Stage::Combine, t);
            streams.push(Source::new(id, fused));
        } else {
            streams.push(Source::new(id, det_stream));
        }
        artifacts.push(art);
    }

    let detections = if stages.has(Stage::Combine) {
        let t = Instant::now();
        let out = in_stage(Stage::Combine, || "all sources".into(), combine(&streams, cfg.nms_iou))?;
        clock(Stage::Combine, t);
        out
    } else if streams.len() == 1 {
        streams.pop().unwrap().clips
    } else {
        union(&streams.into_iter().map(|s| s.clips).collect::<Vec<_>>())
    };

    let report = if stages.has(Stage::Eval) {
        let t = Instant::now();
        let gt = inputs.ground_truth.as_deref().unwrap();
        let r = in_stage(Stage::Eval, || "final detections".into(), mean_ap(&detections, gt, cfg.matching_iou))?;
        clock(Stage::Eval, t);
        Some(r)
    } else {
        None
    };

    Ok(PipelineOutput {
        detections,
        sources: artifacts,
        report,
        notes,
        timings,
    })
}

/// Run record written next to the outputs. Holds no timings, so identical
/// runs give identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub stages: Vec<String>,
    pub config: PipelineConfig,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file, relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    pub propagation: BTreeMap<String, PropagationStats>,
    pub notes: Vec<String>,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes the final detections, per-source artifacts, the report, the
/// manifest and `timings.json` under `out_dir`.
pub fn write_run(
    out_dir: impl AsRef<Path>,
    cfg: &PipelineConfig,
    stages: &Stages,
    input_files: &[PathBuf],
    output: &PipelineOutput,
) -> Result<RunManifest> {
    let out_dir = out_dir.as_ref();
    let mut outputs = BTreeMap::new();
    let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
        io::write_atomic(&out_dir.join(&rel), &bytes)?;
        outputs.insert(rel, hex::encode(Sha256::digest(&bytes)));
        Ok(())
    };
    let lines = |items: &[Tubelet]| -> Result<Vec<u8>> {
        let mut s = String::new();
        for t in items {
            s.push_str(&serde_json::to_string(t).map_err(|e| Error::Invariant(e.to_string()))?);
            s.push('\n');
        }
        Ok(s.into_bytes())
    };

    put("detections.jsonl".into(), io::format_detections(&output.detections).into_bytes())?;
    let mut propagation = BTreeMap::new();
    for art in &output.sources {
        let id = &art.id;
        if let Some(c) = &art.mcs {
            put(format!("{id}.mcs.jsonl"), io::format_detections(c).into_bytes())?;
        }
        if let Some(c) = &art.mgp {
            put(format!("{id}.mgp.jsonl"), io::format_detections(c).into_bytes())?;
            propagation.insert(id.clone(), art.propagation);
        }
        if let Some(t) = &art.tubelets {
            put(format!("{id}.tubelets.jsonl"), lines(t)?)?;
        }
        if let Some(c) = &art.classifier {
            put(format!("{id}.classifier.json"), pretty(c)?)?;
        }
        if let Some(t) = &art.rescored {
            put(format!("{id}.rescored.jsonl"), lines(t)?)?;
        }
    }
    if let Some(r) = &output.report {
        put("report.json".into(), pretty(r)?)?;
    }
    let mut inputs = BTreeMap::new();
    for p in input_files {
        inputs.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        stages: stages.as_slice().iter().map(|s| s.name().to_string()).collect(),
        config: cfg.clone(),
        inputs,
        outputs,
        propagation,
        notes: output.notes.clone(),
    };
    io::write_json(&manifest, out_dir.join("manifest.json"))?;
    io::write_json(&output.timings, out_dir.join("timings.json"))?;
    Ok(manifest)
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Source id derived from a detections path: the file stem, made unique by
/// a numeric suffix.
pub fn source_ids(paths: &[PathBuf]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    paths
        .iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "source".into());
            let n = seen.entry(stem.clone()).or_default();
            *n += 1;
            if *n == 1 {
                stem
            } else {
                format!("{stem}_{}", *n - 1)
            }
        })
        .collect()
}
