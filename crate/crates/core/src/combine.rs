//! Fusing detection streams: min-max normalization, NMS combination and
//! greedy score averaging across models.

use std::collections::{BTreeMap, HashMap};

use crate::config::MinMaxScope;
use crate::error::{Error, Result};
use crate::model::{iou, nms_unchecked, score_order, ClipDetections, Detection};

/// A named detection stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub id: String,
    pub clips: Vec<ClipDetections>,
}

impl Source {
    pub fn new(id: impl Into<String>, clips: Vec<ClipDetections>) -> Self {
        Source {
            id: id.into(),
            clips,
        }
    }
}

fn remap(clips: &mut [ClipDetections], lo: f64, hi: f64) {
    for clip in clips {
        for d in &mut clip.detections {
            d.score = if hi > lo { (d.score - lo) / (hi - lo) } else { 0.5 };
        }
    }
}

fn extent<'a>(dets: impl Iterator<Item = &'a Detection>) -> Option<(f64, f64)> {
    dets.fold(None, |acc, d| match acc {
        None => Some((d.score, d.score)),
        Some((lo, hi)) => Some((lo.min(d.score), hi.max(d.score))),
    })
}

/// Affine map of scores onto `[0, 1]` over the whole set or per clip.
/// A scope whose scores are all equal maps to 0.5.
pub fn minmax_normalize(clips: &[ClipDetections], scope: MinMaxScope) -> Vec<ClipDetections> {
    let mut out = clips.to_vec();
    match scope {
        MinMaxScope::Global => {
            if let Some((lo, hi)) = extent(clips.iter().flat_map(|c| &c.detections)) {
                remap(&mut out, lo, hi);
            }
        }
        MinMaxScope::PerClip => {
            for clip in &mut out {
                if let Some((lo, hi)) = extent(clip.detections.iter()) {
                    remap(std::slice::from_mut(clip), lo, hi);
                }
            }
        }
    }
    for clip in &mut out {
        clip.sort();
    }
    out
}

/// Pools the per-frame detections of every source and keeps the NMS
/// survivors. Detections without a source are tagged with their stream id.
pub fn combine(sources: &[Source], nms_iou: f64) -> Result<Vec<ClipDetections>> {
    if !(nms_iou > 0.0 && nms_iou <= 1.0) {
        return Err(Error::Config(format!("nms iou {nms_iou} outside (0, 1]")));
    }
    let mut order: Vec<String> = Vec::new();
    let mut pooled: HashMap<String, ClipDetections> = HashMap::new();
    for src in sources {
        for clip in &src.clips {
            let entry = pooled.entry(clip.clip_id.clone()).or_insert_with(|| {
                order.push(clip.clip_id.clone());
                clip.with_detections(Vec::new())
            });
            if (entry.num_frames, entry.width, entry.height) != (clip.num_frames, clip.width, clip.height) {
                return Err(Error::Invalid(format!(
                    "clip `{}` has different geometry in source `{}`",
                    clip.clip_id, src.id
                )));
            }
            entry.detections.extend(clip.detections.iter().map(|d| {
                let mut d = d.clone();
                d.source.get_or_insert_with(|| src.id.clone());
                d
            }));
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut clip = pooled.remove(&id).unwrap();
        clip.sort();
        let mut kept = Vec::with_capacity(clip.detections.len());
        for (_, frame) in clip.frames() {
            kept.extend(nms_unchecked(frame, nms_iou));
        }
        out.push(clip.with_detections(kept));
    }
    Ok(out)
}

/// Averages the scores of several sources. Boxes are grouped per frame and
/// class: each box, strongest first, collects the best-overlapping unclaimed
/// box (IOU >= `match_iou`) of every other source and takes the mean score of
/// its group. Unmatched boxes keep their own score.
pub fn average_sources(sources: &[&Source], match_iou: f64) -> Vec<ClipDetections> {
    let mut order: Vec<String> = Vec::new();
    let mut geometry: HashMap<String, ClipDetections> = HashMap::new();
    let mut pool: BTreeMap<(String, u32, u32), Vec<(usize, &Detection)>> = BTreeMap::new();
    for (si, src) in sources.iter().enumerate() {
        for clip in &src.clips {
            geometry.entry(clip.clip_id.clone()).or_insert_with(|| {
                order.push(clip.clip_id.clone());
                clip.with_detections(Vec::new())
            });
            for d in &clip.detections {
                pool.entry((clip.clip_id.clone(), d.frame, d.class_id))
                    .or_default()
                    .push((si, d));
            }
        }
    }
    let mut averaged: HashMap<String, Vec<Detection>> = HashMap::new();
    for ((clip_id, _, _), mut group) in pool {
        group.sort_by(|a, b| score_order(a.1, b.1).then(a.0.cmp(&b.0)));
        let mut claimed = vec![false; group.len()];
        let out = averaged.entry(clip_id).or_default();
        for lead in 0..group.len() {
            if claimed[lead] {
                continue;
            }
            claimed[lead] = true;
            let (lead_src, lead_det) = group[lead];
            let mut sum = lead_det.score;
            let mut n = 1usize;
            for si in (0..sources.len()).filter(|&s| s != lead_src) {
                let best = (0..group.len())
                    .filter(|&j| !claimed[j] && group[j].0 == si)
                    .map(|j| (j, iou(&lead_det.bbox, &group[j].1.bbox)))
                    .filter(|(_, o)| *o >= match_iou)
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                if let Some((j, _)) = best {
                    claimed[j] = true;
                    sum += group[j].1.score;
                    n += 1;
                }
            }
            out.push(Detection {
                score: sum / n as f64,
                ..lead_det.clone()
            });
        }
    }
    order
        .into_iter()
        .map(|id| {
            let dets = averaged.remove(&id).unwrap_or_default();
            geometry[&id].with_detections(dets)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyAverage {
    /// Source ids in the order they were accepted.
    pub selected: Vec<String>,
    pub averaged: Vec<ClipDetections>,
    /// Score after each accepted step.
    pub trace: Vec<f64>,
}

/// Greedy model averaging: start from the best single source, then keep
/// adding the source whose averaged result scores best, while the gain is at
/// least `epsilon`.
pub fn greedy_average<F>(
    sources: &[Source],
    match_iou: f64,
    epsilon: f64,
    mut evaluate: F,
) -> Result<GreedyAverage>
where
    F: FnMut(&[ClipDetections]) -> Result<f64>,
{
    if sources.is_empty() {
        return Err(Error::Invalid("greedy averaging needs at least one source".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in sources.iter().enumerate() {
        let score = evaluate(&s.clips)?;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    let (first, mut current) = best.unwrap();
    let mut chosen = vec![first];
    let mut averaged = sources[first].clips.clone();
    let mut trace = vec![current];
    loop {
        let mut step: Option<(usize, f64, Vec<ClipDetections>)> = None;
        for i in (0..sources.len()).filter(|i| !chosen.contains(i)) {
            let mut set: Vec<&Source> = chosen.iter().map(|&c| &sources[c]).collect();
            set.push(&sources[i]);
            let cand = average_sources(&set, match_iou);
            let score = evaluate(&cand)?;
            if step.as_ref().is_none_or(|(_, b, _)| score > *b) {
                step = Some((i, score, cand));
            }
        }
        match step {
            Some((i, score, cand)) if score - current >= epsilon => {
                chosen.push(i);
                current = score;
                averaged = cand;
                trace.push(score);
            }
            _ => break,
        }
    }
    Ok(GreedyAverage {
        selected: chosen.iter().map(|&i| sources[i].id.clone()).collect(),
        averaged,
        trace,
    })
}
