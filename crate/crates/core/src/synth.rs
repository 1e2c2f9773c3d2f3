//! Synthetic clips with exact flow, ground truth and a simulated detector.
//!
//! Objects are rigid boxes, each confined to its own horizontal lane so that
//! boxes never overlap and the mean flow inside a box equals the object's
//! displacement. Background flow is zero, or a constant pan.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`)
//! seeded per `(seed, clip, stream)` through [`substream_seed`]; stream 0
//! drives the scene, stream `1 + i` drives detector instance `i`. The same
//! spec and seed always produce byte-identical fixtures.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::mean_ap;
use crate::flow::{FlowField, FlowSet};
use crate::io::{self, GroundTruthRecord};
use crate::mcs;
use crate::model::{BBox, ClipDetections, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreDist {
    pub mean: f64,
    pub std: f64,
}

impl ScoreDist {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.std == 0.0 {
            self.mean
        } else {
            Normal::new(self.mean, self.std).expect("validated").sample(rng)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpClasses {
    /// Uniform over all classes.
    #[default]
    Any,
    /// Uniform over the classes present in the clip.
    InClip,
}

/// Runs of confident wrong-class detections on the objects of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstModel {
    /// Probability that a clip contains one burst.
    pub clip_prob: f64,
    /// Burst length in frames.
    pub length: u32,
    pub score: ScoreDist,
}

impl Default for BurstModel {
    fn default() -> Self {
        BurstModel {
            clip_prob: 1.0,
            length: 3,
            score: ScoreDist { mean: 0.9, std: 0.03 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorModel {
    /// Per object-frame probability of missing the object, i.i.d.
    pub miss_prob: f64,
    pub true_score: ScoreDist,
    pub false_score: ScoreDist,
    /// Standard deviation of the per-coordinate box noise, pixels.
    pub box_jitter: f64,
    /// Expected false positives per frame (Poisson).
    pub fp_rate: f64,
    pub fp_classes: FpClasses,
    pub burst: Option<BurstModel>,
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel {
            miss_prob: 0.2,
            true_score: ScoreDist { mean: 0.8, std: 0.1 },
            false_score: ScoreDist { mean: 0.3, std: 0.15 },
            box_jitter: 1.0,
            fp_rate: 0.2,
            fp_classes: FpClasses::Any,
            burst: None,
        }
    }
}

impl DetectorModel {
    /// Perfect detector: every object found, exact boxes, score 1.
    pub fn noiseless() -> Self {
        DetectorModel {
            miss_prob: 0.0,
            true_score: ScoreDist { mean: 1.0, std: 0.0 },
            false_score: ScoreDist { mean: 0.0, std: 0.0 },
            box_jitter: 0.0,
            fp_rate: 0.0,
            fp_classes: FpClasses::Any,
            burst: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_clips: u32,
    pub frames_per_clip: u32,
    pub width: u32,
    pub height: u32,
    pub num_classes: u32,
    /// Inclusive range of objects per clip.
    pub objects_per_clip: [u32; 2],
    /// Distinct classes drawn per clip.
    pub classes_per_clip: u32,
    /// Inclusive range of object side lengths, pixels.
    pub object_size: [f64; 2],
    /// Range of object speeds, pixels per frame.
    pub speed: [f64; 2],
    /// Standard deviation of per-frame velocity noise.
    pub motion_jitter: f64,
    /// Constant background flow modelling a moving camera.
    pub camera_pan: Option<[f64; 2]>,
    pub detector: DetectorModel,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_clips: 4,
            frames_per_clip: 60,
            width: 160,
            height: 120,
            num_classes: 30,
            objects_per_clip: [1, 2],
            classes_per_clip: 1,
            object_size: [16.0, 32.0],
            speed: [0.5, 3.0],
            motion_jitter: 0.0,
            camera_pan: None,
            detector: DetectorModel::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_clips == 0 || self.frames_per_clip == 0 || self.width == 0 || self.height == 0 {
            return bad("clip count, frame count and frame size must be positive".into());
        }
        let [lo, hi] = self.objects_per_clip;
        if lo == 0 || lo > hi {
            return bad(format!("objects_per_clip {:?} must be a range of positive counts", self.objects_per_clip));
        }
        if self.classes_per_clip == 0 || self.classes_per_clip >= self.num_classes {
            return bad("classes_per_clip must be in [1, num_classes)".into());
        }
        let [smin, smax] = self.object_size;
        if !(smin > 0.0 && smin <= smax && smax.is_finite()) {
            return bad(format!("object_size {:?} invalid", self.object_size));
        }
        if smax > self.width as f64 || smin > 0.8 * self.height as f64 / hi as f64 {
            return bad("objects do not fit into their lanes".into());
        }
        let [vmin, vmax] = self.speed;
        if !(vmin >= 0.0 && vmin <= vmax && vmax.is_finite()) {
            return bad(format!("speed {:?} invalid", self.speed));
        }
        if !(self.motion_jitter >= 0.0 && self.motion_jitter.is_finite()) {
            return bad("motion_jitter must be >= 0".into());
        }
        if let Some(p) = self.camera_pan {
            if !p.iter().all(|v| v.is_finite()) {
                return bad("camera_pan must be finite".into());
            }
        }
        let d = &self.detector;
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(d.miss_prob) {
            return bad("miss_prob must be in [0, 1]".into());
        }
        for s in [d.true_score, d.false_score]
            .into_iter()
            .chain(d.burst.map(|b| b.score))
        {
            if !(s.mean.is_finite() && s.std >= 0.0 && s.std.is_finite()) {
                return bad(format!("score distribution {s:?} invalid"));
            }
        }
        if !(d.box_jitter >= 0.0 && d.box_jitter.is_finite() && d.fp_rate >= 0.0 && d.fp_rate.is_finite()) {
            return bad("box_jitter and fp_rate must be >= 0".into());
        }
        if let Some(b) = d.burst {
            if !prob(b.clip_prob) || b.length == 0 || b.length > self.frames_per_clip {
                return bad("burst needs clip_prob in [0, 1] and 1 <= length <= frames".into());
            }
        }
        Ok(())
    }
}

/// Seed of an independent random stream.
pub fn substream_seed(seed: u64, clip: u32, stream: u32) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(((clip as u64) << 32) | stream as u64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub class_id: u32,
    /// Ground-truth box on every frame of the clip.
    pub boxes: Vec<BBox>,
}

/// Ground-truth scene of one synthetic clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub index: u32,
    pub clip_id: String,
    pub num_frames: u32,
    pub width: u32,
    pub height: u32,
    pub classes: Vec<u32>,
    pub num_classes: u32,
    pub pan: (f64, f64),
    pub tracks: Vec<Track>,
}

impl SynthClip {
    pub fn empty_detections(&self) -> ClipDetections {
        ClipDetections::new(self.clip_id.clone(), self.num_frames, self.width, self.height)
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthRecord> {
        let mut out = Vec::new();
        for f in 0..self.num_frames {
            for t in &self.tracks {
                out.push(GroundTruthRecord {
                    clip_id: self.clip_id.clone(),
                    frame: f,
                    class_id: t.class_id,
                    track_id: t.track_id,
                    bbox: t.boxes[f as usize],
                });
            }
        }
        out
    }

    fn field(&self, frame: u32, to: u32, sign: f64) -> FlowField {
        let mut f = FlowField::uniform(
            self.width,
            self.height,
            (sign * self.pan.0) as f32,
            (sign * self.pan.1) as f32,
        );
        for t in &self.tracks {
            let (a, b) = (t.boxes[frame as usize], t.boxes[to as usize]);
            f.fill_box(&a, (b.x0 - a.x0) as f32, (b.y0 - a.y0) as f32);
        }
        f
    }

    /// Exact forward and backward flow of the scene.
    pub fn flows(&self) -> FlowSet {
        let mut set = FlowSet::new(self.clip_id.clone());
        for t in 0..self.num_frames {
            if t + 1 < self.num_frames {
                set.insert_forward(t, self.field(t, t + 1, 1.0));
            }
            if t > 0 {
                set.insert_backward(t, self.field(t, t - 1, -1.0));
            }
        }
        set
    }

    /// Zero flow everywhere: the scene as seen by a flow estimator that
    /// reports no motion.
    pub fn zero_flows(&self) -> FlowSet {
        let mut set = FlowSet::new(self.clip_id.clone());
        for t in 0..self.num_frames.saturating_sub(1) {
            set.insert_forward(t, FlowField::zeros(self.width, self.height));
        }
        set
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn generate_scene(spec: &SynthSpec, index: u32) -> Result<SynthClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(spec.seed, index, 0));
    let mut all: Vec<u32> = (0..spec.num_classes).collect();
    all.shuffle(&mut rng);
    let classes: Vec<u32> = all[..spec.classes_per_clip as usize].to_vec();
    let n_obj = rng.random_range(spec.objects_per_clip[0]..=spec.objects_per_clip[1]);
    let lane_h = spec.height as f64 / n_obj as f64;
    let (w_img, n) = (spec.width as f64, spec.frames_per_clip as usize);
    let mut tracks = Vec::with_capacity(n_obj as usize);
    for k in 0..n_obj {
        let class_id = if (k as usize) < classes.len() {
            classes[k as usize]
        } else {
            classes[rng.random_range(0..classes.len())]
        };
        let w = uniform(&mut rng, spec.object_size[0], spec.object_size[1]);
        let h = uniform(&mut rng, spec.object_size[0], spec.object_size[1].min(0.8 * lane_h));
        let lane_top = k as f64 * lane_h;
        let (xmax, ymin, ymax) = (w_img - w, lane_top, lane_top + lane_h - h);
        let mut x = uniform(&mut rng, 0.0, xmax);
        let mut y = uniform(&mut rng, ymin, ymax);
        let speed = uniform(&mut rng, spec.speed[0], spec.speed[1]);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
        let jitter = (spec.motion_jitter > 0.0)
            .then(|| Normal::new(0.0, spec.motion_jitter).expect("validated"));
        let mut boxes = Vec::with_capacity(n);
        for f in 0..n {
            boxes.push(BBox::new(x, y, x + w, y + h)?);
            if f + 1 == n {
                break;
            }
            let (jx, jy) = match &jitter {
                Some(j) => (j.sample(&mut rng), j.sample(&mut rng)),
                None => (0.0, 0.0),
            };
            let mut nx = x + vx + jx;
            if nx < 0.0 || nx > xmax {
                vx = -vx;
                nx = x + vx + jx;
            }
            let mut ny = y + vy + jy;
            if ny < ymin || ny > ymax {
                vy = -vy;
                ny = y + vy + jy;
            }
            x = nx.clamp(0.0, xmax);
            y = ny.clamp(ymin, ymax);
        }
        tracks.push(Track {
            track_id: k as u64,
            class_id,
            boxes,
        });
    }
    Ok(SynthClip {
        index,
        clip_id: format!("clip{index:04}"),
        num_frames: spec.frames_per_clip,
        width: spec.width,
        height: spec.height,
        classes,
        num_classes: spec.num_classes,
        pan: spec.camera_pan.map_or((0.0, 0.0), |p| (p[0], p[1])),
        tracks,
    })
}

fn jittered(rng: &mut impl Rng, b: &BBox, sigma: f64, clip: &SynthClip) -> Option<BBox> {
    let b = if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("validated");
        let c = [
            b.x0 + n.sample(rng),
            b.y0 + n.sample(rng),
            b.x1 + n.sample(rng),
            b.y1 + n.sample(rng),
        ];
        BBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3])).ok()?
    } else {
        *b
    };
    b.intersect(&BBox {
        x0: 0.0,
        y0: 0.0,
        x1: clip.width as f64,
        y1: clip.height as f64,
    })
}

/// Runs a simulated detector over a scene. `instance` picks the random
/// stream, so different instances miss independently.
pub fn simulate_detector(scene: &SynthClip, model: &DetectorModel, seed: u64, instance: u32) -> ClipDetections {
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, scene.index, 1 + instance));
    let mut dets = Vec::new();
    let burst = model.burst.and_then(|b| {
        (rng.random::<f64>() < b.clip_prob).then(|| {
            let start = rng.random_range(0..=scene.num_frames - b.length);
            let others: Vec<u32> = (0..scene.num_classes)
                .filter(|c| !scene.classes.contains(c))
                .collect();
            let class_id = others[rng.random_range(0..others.len())];
            (b, start, class_id)
        })
    });
    let fp_count = (model.fp_rate > 0.0).then(|| Poisson::new(model.fp_rate).expect("validated"));
    for f in 0..scene.num_frames {
        for t in &scene.tracks {
            let missed = rng.random::<f64>() < model.miss_prob;
            let score = model.true_score.sample(&mut rng);
            let bbox = jittered(&mut rng, &t.boxes[f as usize], model.box_jitter, scene);
            if let (false, Some(bbox)) = (missed, bbox) {
                dets.push(Detection::new(f, t.class_id, score, bbox));
            }
        }
        if let Some((b, start, class_id)) = burst {
            if (start..start + b.length).contains(&f) {
                for t in &scene.tracks {
                    let score = b.score.sample(&mut rng);
                    if let Some(bbox) = jittered(&mut rng, &t.boxes[f as usize], model.box_jitter, scene) {
                        dets.push(Detection::new(f, class_id, score, bbox));
                    }
                }
            }
        }
        let n_fp = fp_count.as_ref().map_or(0, |p| p.sample(&mut rng) as u64);
        for _ in 0..n_fp {
            let side = uniform(&mut rng, 8.0, 32.0_f64.min(scene.width as f64).min(scene.height as f64));
            let x = uniform(&mut rng, 0.0, scene.width as f64 - side);
            let y = uniform(&mut rng, 0.0, scene.height as f64 - side);
            let class_id = match model.fp_classes {
                FpClasses::Any => rng.random_range(0..scene.num_classes),
                FpClasses::InClip => scene.classes[rng.random_range(0..scene.classes.len())],
            };
            let score = model.false_score.sample(&mut rng);
            if let Ok(bbox) = BBox::new(x, y, x + side, y + side) {
                dets.push(Detection::new(f, class_id, score, bbox));
            }
        }
    }
    scene.empty_detections().with_detections(dets)
}

/// Scenes, detections and ground truth of a whole synthetic set. Flow is
/// rasterized on demand through [`SynthClip::flows`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub scenes: Vec<SynthClip>,
    pub detections: Vec<ClipDetections>,
    pub ground_truth: Vec<GroundTruthRecord>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut data = SynthData {
        scenes: Vec::new(),
        detections: Vec::new(),
        ground_truth: Vec::new(),
    };
    for i in 0..spec.num_clips {
        let scene = generate_scene(spec, i)?;
        data.detections.push(simulate_detector(&scene, &spec.detector, spec.seed, 0));
        data.ground_truth.extend(scene.ground_truth());
        data.scenes.push(scene);
    }
    Ok(data)
}

/// Generator identification recorded in fixture manifests.
pub const GENERATOR: &str = "ChaCha8Rng::seed_from_u64(splitmix64 substream of (seed, clip, stream))";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub spec: SynthSpec,
    pub generator: String,
    pub version: String,
    /// SHA-256 of every written file, keyed by path relative to the output
    /// directory.
    pub files: BTreeMap<String, String>,
}

/// Writes `detections.jsonl`, `gt.jsonl`, `flows/` and `manifest.json`.
pub fn write_fixtures(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<FixtureManifest> {
    let out_dir = out_dir.as_ref();
    let data = generate(spec)?;
    let mut files = BTreeMap::new();
    let mut put = |rel: String, bytes: &[u8]| -> Result<()> {
        io::write_atomic(&out_dir.join(&rel), bytes)?;
        files.insert(rel, hex::encode(Sha256::digest(bytes)));
        Ok(())
    };
    put("detections.jsonl".into(), io::format_detections(&data.detections).as_bytes())?;
    put("gt.jsonl".into(), io::format_ground_truth(&data.ground_truth).as_bytes())?;
    for scene in &data.scenes {
        let flows = scene.flows();
        for f in flows.forward_frames() {
            put(
                format!("flows/{}/{f}.flo", scene.clip_id),
                &io::encode_flow(flows.forward(f).unwrap()),
            )?;
        }
        for f in flows.backward_frames() {
            put(
                format!("flows/{}/{f}.bflo", scene.clip_id),
                &io::encode_flow(flows.backward(f).unwrap()),
            )?;
        }
    }
    let manifest = FixtureManifest {
        spec: spec.clone(),
        generator: GENERATOR.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        files,
    };
    io::write_json(&manifest, out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McsChoice {
    pub ratio: f64,
    pub penalty: f64,
    pub mean_ap: f64,
}

/// Exhaustive search over `(ratio, penalty)` for the best mean AP. Points
/// are visited in ascending lexicographic order and only a strictly better
/// score replaces the incumbent.
pub fn grid_search_mcs(
    clips: &[ClipDetections],
    gt: &[GroundTruthRecord],
    ratios: &[f64],
    penalties: &[f64],
    matching_iou: f64,
) -> Result<McsChoice> {
    if ratios.is_empty() || penalties.is_empty() {
        return Err(Error::Config("grid search needs nonempty ratio and penalty grids".into()));
    }
    let mut ratios = ratios.to_vec();
    let mut penalties = penalties.to_vec();
    ratios.sort_by(f64::total_cmp);
    penalties.sort_by(f64::total_cmp);
    let mut best: Option<McsChoice> = None;
    for &ratio in &ratios {
        let selected = clips
            .iter()
            .map(|c| mcs::select_high_confidence(c, ratio))
            .collect::<Result<Vec<_>>>()?;
        for &penalty in &penalties {
            let suppressed = clips
                .iter()
                .zip(&selected)
                .map(|(c, h)| mcs::suppress(c, h, penalty))
                .collect::<Result<Vec<_>>>()?;
            let score = mean_ap(&suppressed, gt, matching_iou)?.mean_ap;
            if best.is_none_or(|b| score > b.mean_ap) {
                best = Some(McsChoice {
                    ratio,
                    penalty,
                    mean_ap: score,
                });
            }
        }
    }
    Ok(best.unwrap())
}
