//! Independent reference implementations used to check the library.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubekit::{BBox, ClipDetections, Detection, GroundTruthRecord};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Overlap from the four interval intersections.
pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Quadratic NMS: repeatedly keep the strongest remaining box and drop every
/// same-class box overlapping it by more than `thr`. Ties on score go to the
/// lower class, then the lexicographically smaller box.
pub fn nms_ref(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut rest: Vec<Detection> = dets.to_vec();
    let mut kept = Vec::new();
    while !rest.is_empty() {
        let mut best = 0;
        for i in 1..rest.len() {
            let (a, b) = (&rest[i], &rest[best]);
            let key = |d: &Detection| (d.class_id, d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1);
            if a.score > b.score
                || (a.score == b.score && key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less))
            {
                best = i;
            }
        }
        let top = rest.remove(best);
        rest.retain(|d| d.class_id != top.class_id || iou_ref(&d.bbox, &top.bbox) <= thr);
        kept.push(top);
    }
    kept
}

/// Per-class AP by literal PR-curve construction. Detections must have
/// distinct scores. Returns `(per_class_ap, mean_ap)` over classes with
/// ground truth.
pub fn mean_ap_ref(dets: &[ClipDetections], gt: &[GroundTruthRecord], thr: f64) -> (BTreeMap<u32, f64>, f64) {
    let mut classes: Vec<u32> = gt.iter().map(|g| g.class_id).collect();
    classes.sort();
    classes.dedup();
    let mut aps = BTreeMap::new();
    for &c in &classes {
        let gts: Vec<&GroundTruthRecord> = gt.iter().filter(|g| g.class_id == c).collect();
        let mut ds: Vec<(&str, &Detection)> = dets
            .iter()
            .flat_map(|clip| clip.detections.iter().map(move |d| (clip.clip_id.as_str(), d)))
            .filter(|(_, d)| d.class_id == c)
            .collect();
        ds.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
        let mut used = vec![false; gts.len()];
        let mut tp = Vec::new();
        for (clip, d) in &ds {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.clip_id != *clip || g.frame != d.frame {
                    continue;
                }
                let o = iou_ref(&g.bbox, &d.bbox);
                if o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    tp.push(true);
                }
                None => tp.push(false),
            }
        }
        let n = gts.len() as f64;
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        let mut hits = 0.0;
        for (i, &t) in tp.iter().enumerate() {
            if t {
                hits += 1.0;
            }
            precision.push(hits / (i + 1) as f64);
            recall.push(hits / n);
        }
        // Sum over recall steps of the best precision at that recall or beyond.
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..tp.len() {
            if tp[i] {
                let interp = (i..tp.len()).map(|j| precision[j]).fold(0.0, f64::max);
                ap += (recall[i] - prev_recall) * interp;
                prev_recall = recall[i];
            }
        }
        aps.insert(c, ap);
    }
    let mean = if aps.is_empty() {
        0.0
    } else {
        aps.values().sum::<f64>() / aps.len() as f64
    };
    (aps, mean)
}

/// Direct per-frame CorLoc: the top-scoring target-class detection of each
/// annotated frame must overlap a target-class box by more than 0.5.
pub fn corloc_ref(dets: &[ClipDetections], gt: &[GroundTruthRecord], targets: &BTreeMap<String, u32>) -> f64 {
    let mut frames: Vec<(&str, u32)> = gt.iter().map(|g| (g.clip_id.as_str(), g.frame)).collect();
    frames.sort();
    frames.dedup();
    let mut ok = 0;
    for &(clip, frame) in &frames {
        let target = targets[clip];
        let top = dets
            .iter()
            .filter(|c| c.clip_id == clip)
            .flat_map(|c| c.detections.iter())
            .filter(|d| d.frame == frame && d.class_id == target)
            .fold(None::<&Detection>, |best, d| match best {
                Some(b) if b.score >= d.score => Some(b),
                _ => Some(d),
            });
        if let Some(d) = top {
            if gt
                .iter()
                .any(|g| g.clip_id == clip && g.frame == frame && g.class_id == target && iou_ref(&g.bbox, &d.bbox) > 0.5)
            {
                ok += 1;
            }
        }
    }
    ok as f64 / frames.len() as f64
}

pub fn gaussian_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Posterior of the positive class straight from the densities.
pub fn posterior_ref(x: f64, pos: (f64, f64), neg: (f64, f64), prior: f64) -> f64 {
    let p = gaussian_pdf(x, pos.0, pos.1) * prior;
    let n = gaussian_pdf(x, neg.0, neg.1) * (1.0 - prior);
    p / (p + n)
}

pub fn random_box(rng: &mut impl Rng, w: f64, h: f64) -> BBox {
    let x0 = rng.random_range(0.0..w - 2.0);
    let y0 = rng.random_range(0.0..h - 2.0);
    let x1 = rng.random_range(x0 + 1.0..=w);
    let y1 = rng.random_range(y0 + 1.0..=h);
    BBox::new(x0, y0, x1, y1).unwrap()
}

/// Small random evaluation instance with distinct detection scores.
/// Boxes live on a coarse grid so that overlaps are frequent.
pub fn random_eval_instance(
    rng: &mut impl Rng,
    max_dets: usize,
    max_gt: usize,
    classes: u32,
) -> (Vec<ClipDetections>, Vec<GroundTruthRecord>) {
    let frames = 2;
    let snap = |rng: &mut dyn rand::RngCore| {
        let x0 = rng.random_range(0..6) as f64 * 4.0;
        let y0 = rng.random_range(0..6) as f64 * 4.0;
        let w = rng.random_range(2..5) as f64 * 4.0;
        let h = rng.random_range(2..5) as f64 * 4.0;
        BBox::new(x0, y0, x0 + w, y0 + h).unwrap()
    };
    let n_gt = rng.random_range(1..=max_gt);
    let mut gt = Vec::new();
    for k in 0..n_gt {
        gt.push(GroundTruthRecord {
            clip_id: "r".into(),
            frame: rng.random_range(0..frames),
            class_id: rng.random_range(0..classes),
            track_id: k as u64,
            bbox: snap(rng),
        });
    }
    let n_det = rng.random_range(0..=max_dets);
    let mut dets = Vec::new();
    let mut scores: Vec<f64> = (0..n_det).map(|i| (i as f64 + 1.0) / (n_det as f64 + 1.0)).collect();
    for i in (1..scores.len()).rev() {
        let j = rng.random_range(0..=i);
        scores.swap(i, j);
    }
    for s in scores {
        let bbox = if !gt.is_empty() && rng.random_bool(0.6) {
            let g = &gt[rng.random_range(0..gt.len())];
            let dx = rng.random_range(-1..=1) as f64 * 2.0;
            let d = g.bbox.translate(dx, 0.0);
            d.intersect(&BBox::new(0.0, 0.0, 40.0, 40.0).unwrap()).unwrap_or(g.bbox)
        } else {
            snap(rng)
        };
        let (frame, class_id) = if rng.random_bool(0.7) && !gt.is_empty() {
            let g = &gt[rng.random_range(0..gt.len())];
            (g.frame, g.class_id)
        } else {
            (rng.random_range(0..frames), rng.random_range(0..classes))
        };
        dets.push(Detection::new(frame, class_id, s, bbox));
    }
    let clip = ClipDetections::new("r", frames, 40, 40).with_detections(dets);
    (vec![clip], gt)
}
