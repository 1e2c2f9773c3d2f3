//! Tubelet re-scoring: spatial max-pooling, score statistics, a 1-D Gaussian
//! Bayes classifier over one statistic, and min-max remapping of scores into
//! separate ranges for positive and negative tubelets.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{index_ground_truth, GroundTruthRecord};
use crate::model::{iou, score_order, ClipDetections};
use crate::tracker::Tubelet;

/// Lower bound on fitted variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeletStats {
    pub mean: f64,
    pub median: f64,
    /// k-th largest score, or the smallest when the tubelet is shorter than k.
    pub top_k_value: f64,
    pub k: usize,
    pub length: usize,
}

/// Which statistic feeds the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Median,
    #[default]
    TopK,
}

impl TubeletStats {
    pub fn get(&self, which: Statistic) -> f64 {
        match which {
            Statistic::Mean => self.mean,
            Statistic::Median => self.median,
            Statistic::TopK => self.top_k_value,
        }
    }
}

pub fn score_stats(scores: &[f64], k: usize) -> Result<TubeletStats> {
    if scores.is_empty() {
        return Err(Error::Invalid("statistics of an empty tubelet".into()));
    }
    if k == 0 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(TubeletStats {
        mean: sorted.iter().sum::<f64>() / n as f64,
        median,
        top_k_value: sorted[k.min(n) - 1],
        k,
        length: n,
    })
}

pub fn stats(tubelet: &Tubelet, k: usize) -> Result<TubeletStats> {
    score_stats(&tubelet.scores(), k)
}

/// Replaces each node with the best-scoring same-class detection that
/// overlaps it by at least `maxpool_iou`, when that detection outscores it.
pub fn spatial_max_pool(tubelet: &Tubelet, clip: &ClipDetections, maxpool_iou: f64) -> Tubelet {
    let mut out = tubelet.clone();
    for node in &mut out.nodes {
        let best = clip
            .on_frame(node.frame)
            .iter()
            .filter(|d| d.class_id == tubelet.class_id && iou(&d.bbox, &node.bbox) >= maxpool_iou)
            .min_by(|a, b| score_order(a, b));
        if let Some(d) = best {
            if d.score > node.score {
                node.bbox = d.bbox;
                node.score = d.score;
                node.snapped = true;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

/// Gaussian class-conditional densities over one tubelet statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesClassifier1D {
    pub pos_mean: f64,
    pub pos_var: f64,
    pub neg_mean: f64,
    pub neg_var: f64,
    pub prior_pos: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub label: Label,
    pub posterior_pos: f64,
}

fn gaussian_fit(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.max(VARIANCE_FLOOR))
}

/// Maximum-likelihood Gaussian fits of both classes; the prior is the
/// positive sample fraction.
pub fn fit_classifier(pos: &[f64], neg: &[f64]) -> Result<BayesClassifier1D> {
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::Invalid(format!(
            "classifier fit needs at least 2 samples per class, got {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("classifier samples must be finite".into()));
    }
    let (pos_mean, pos_var) = gaussian_fit(pos);
    let (neg_mean, neg_var) = gaussian_fit(neg);
    Ok(BayesClassifier1D {
        pos_mean,
        pos_var,
        neg_mean,
        neg_var,
        prior_pos: pos.len() as f64 / (pos.len() + neg.len()) as f64,
    })
}

impl BayesClassifier1D {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.pos_mean, self.neg_mean].iter().all(|v| v.is_finite())
            && self.pos_var >= VARIANCE_FLOOR
            && self.neg_var >= VARIANCE_FLOOR
            && self.pos_var.is_finite()
            && self.neg_var.is_finite()
            && self.prior_pos > 0.0
            && self.prior_pos < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid classifier {self:?}")))
        }
    }

    fn log_joint(mean: f64, var: f64, prior: f64, x: f64) -> f64 {
        prior.ln() - 0.5 * (2.0 * PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
    }

    pub fn posterior_pos(&self, x: f64) -> f64 {
        let lp = Self::log_joint(self.pos_mean, self.pos_var, self.prior_pos, x);
        let ln = Self::log_joint(self.neg_mean, self.neg_var, 1.0 - self.prior_pos, x);
        1.0 / (1.0 + (ln - lp).exp())
    }

    /// Positive iff the posterior is at least one half.
    pub fn classify(&self, x: f64) -> Classification {
        let posterior_pos = self.posterior_pos(x);
        Classification {
            label: if posterior_pos >= 0.5 {
                Label::Positive
            } else {
                Label::Negative
            },
            posterior_pos,
        }
    }
}

pub fn classify(classifier: &BayesClassifier1D, statistic: f64) -> Classification {
    classifier.classify(statistic)
}

/// A tubelet after classification and score remapping.
#[derive(Clone, Debug, PartialEq)]
pub struct RescoredTubelet {
    pub tubelet: Tubelet,
    pub label: Label,
    pub posterior_pos: f64,
    pub statistic: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescoreParams {
    pub statistic: Statistic,
    pub k: usize,
    pub positive_range: [f64; 2],
    pub negative_range: [f64; 2],
}

impl Default for RescoreParams {
    fn default() -> Self {
        RescoreParams {
            statistic: Statistic::TopK,
            k: 5,
            positive_range: [0.5, 1.0],
            negative_range: [0.0, 0.5],
        }
    }
}

/// Classifies every tubelet and min-max maps the node scores of each
/// `(clip, class, label)` group onto the label's range. A group whose scores
/// are all equal maps to the middle of the range.
pub fn rescore(
    tubelets: &[Tubelet],
    classifier: &BayesClassifier1D,
    params: RescoreParams,
) -> Result<Vec<RescoredTubelet>> {
    classifier.validate()?;
    let mut out = Vec::with_capacity(tubelets.len());
    for t in tubelets {
        let statistic = stats(t, params.k)?.get(params.statistic);
        let c = classifier.classify(statistic);
        out.push(RescoredTubelet {
            tubelet: t.clone(),
            label: c.label,
            posterior_pos: c.posterior_pos,
            statistic,
        });
    }
    let mut ranges: BTreeMap<(String, u32, bool), (f64, f64)> = BTreeMap::new();
    for r in &out {
        let key = (r.tubelet.clip_id.clone(), r.tubelet.class_id, r.label == Label::Positive);
        let e = ranges.entry(key).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        for n in &r.tubelet.nodes {
            e.0 = e.0.min(n.score);
            e.1 = e.1.max(n.score);
        }
    }
    for r in &mut out {
        let key = (r.tubelet.clip_id.clone(), r.tubelet.class_id, r.label == Label::Positive);
        let (lo, hi) = ranges[&key];
        let [a, b] = match r.label {
            Label::Positive => params.positive_range,
            Label::Negative => params.negative_range,
        };
        for n in &mut r.tubelet.nodes {
            n.score = if hi > lo {
                a + (n.score - lo) / (hi - lo) * (b - a)
            } else {
                (a + b) / 2.0
            };
        }
    }
    Ok(out)
}

/// Positive iff at least half of the nodes overlap a same-class ground-truth
/// box on their frame by `label_iou` or more.
pub fn label_tubelets(tubelets: &[Tubelet], gt: &[GroundTruthRecord], label_iou: f64) -> Vec<Label> {
    let index = index_ground_truth(gt);
    tubelets
        .iter()
        .map(|t| {
            let hits = t
                .nodes
                .iter()
                .filter(|n| {
                    index
                        .get(&(t.clip_id.as_str(), n.frame))
                        .is_some_and(|g| {
                            g.iter()
                                .any(|r| r.class_id == t.class_id && iou(&r.bbox, &n.bbox) >= label_iou)
                        })
                })
                .count();
            if 2 * hits >= t.nodes.len() {
                Label::Positive
            } else {
                Label::Negative
            }
        })
        .collect()
}

/// Labels tubelets from ground truth and fits the classifier on the chosen
/// statistic.
pub fn fit_from_ground_truth(
    tubelets: &[Tubelet],
    gt: &[GroundTruthRecord],
    label_iou: f64,
    statistic: Statistic,
    k: usize,
) -> Result<BayesClassifier1D> {
    let labels = label_tubelets(tubelets, gt, label_iou);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (t, label) in tubelets.iter().zip(labels) {
        let s = stats(t, k)?.get(statistic);
        match label {
            Label::Positive => pos.push(s),
            Label::Negative => neg.push(s),
        }
    }
    fit_classifier(&pos, &neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, Detection};
    use crate::tracker::TubeletNode;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn tube(clip: &str, class_id: u32, scores: &[f64]) -> Tubelet {
        Tubelet {
            clip_id: clip.into(),
            class_id,
            anchor_index: 0,
            nodes: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| TubeletNode {
                    frame: i as u32,
                    bbox: bx(0.0, 0.0, 10.0, 10.0),
                    score: s,
                    snapped: true,
                })
                .collect(),
        }
    }

    #[test]
    fn stats_examples() {
        let s = score_stats(&[0.9], 3).unwrap();
        assert_eq!((s.mean, s.median, s.top_k_value), (0.9, 0.9, 0.9));
        let s = score_stats(&[0.2, 0.4, 0.9], 2).unwrap();
        assert_eq!(s.top_k_value, 0.4);
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert_eq!(s.median, 0.4);
        let s = score_stats(&[0.3; 6], 4).unwrap();
        assert_eq!((s.mean, s.median, s.top_k_value), (0.3, 0.3, 0.3));
        // Shorter than k: smallest score.
        assert_eq!(score_stats(&[0.5, 0.7], 5).unwrap().top_k_value, 0.5);
        assert_eq!(score_stats(&[0.1, 0.2, 0.3, 0.4], 1).unwrap().median, 0.25);
        assert!(score_stats(&[], 1).is_err());
    }

    #[test]
    fn max_pool_replaces_with_better_detection() {
        let t = Tubelet {
            clip_id: "c".into(),
            class_id: 1,
            anchor_index: 0,
            nodes: vec![TubeletNode {
                frame: 0,
                bbox: bx(0.0, 0.0, 10.0, 10.0),
                score: 0.3,
                snapped: false,
            }],
        };
        // IOU 0.7 with the node: area 10x7 inside.
        let better = Detection::new(0, 1, 0.8, bx(0.0, 0.0, 10.0, 7.0));
        assert!((iou(&better.bbox, &t.nodes[0].bbox) - 0.7).abs() < 1e-12);
        let other_class = Detection::new(0, 2, 0.99, bx(0.0, 0.0, 10.0, 10.0));
        let clip = ClipDetections::new("c", 1, 20, 20).with_detections(vec![better.clone(), other_class]);
        let pooled = spatial_max_pool(&t, &clip, 0.5);
        assert_eq!(pooled.nodes[0].bbox, better.bbox);
        assert_eq!(pooled.nodes[0].score, 0.8);
        // Threshold 1 trusts the tubelet box alone.
        assert_eq!(spatial_max_pool(&t, &clip, 1.0), t);
        let empty = ClipDetections::new("c", 1, 20, 20);
        assert_eq!(spatial_max_pool(&t, &empty, 0.5), t);
    }

    #[test]
    fn classifier_symmetry_and_ties() {
        let c = BayesClassifier1D {
            pos_mean: 0.75,
            pos_var: 0.01,
            neg_mean: 0.25,
            neg_var: 0.01,
            prior_pos: 0.5,
        };
        assert_eq!(c.classify(0.8).label, Label::Positive);
        let mid = c.classify(0.5);
        assert_eq!(mid.posterior_pos, 0.5);
        assert_eq!(mid.label, Label::Positive);
        assert_eq!(c.classify(0.49).label, Label::Negative);
    }

    #[test]
    fn identical_samples_are_uninformative() {
        let s = [0.1, 0.4, 0.5, 0.9];
        let c = fit_classifier(&s, &s[..3]).unwrap();
        assert!(c.prior_pos > 0.5);
        let c = fit_classifier(&s, &s).unwrap();
        for x in [-1.0, 0.0, 0.3, 0.7, 2.0] {
            assert!((c.posterior_pos(x) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_needs_two_samples_and_floors_variance() {
        assert!(fit_classifier(&[0.5], &[0.1, 0.2]).is_err());
        let c = fit_classifier(&[0.5, 0.5], &[0.1, 0.2]).unwrap();
        assert_eq!(c.pos_var, VARIANCE_FLOOR);
        assert_eq!(c.prior_pos, 0.5);
    }

    #[test]
    fn rescore_examples() {
        let clf = BayesClassifier1D {
            pos_mean: 0.6,
            pos_var: 0.01,
            neg_mean: 0.1,
            neg_var: 0.01,
            prior_pos: 0.5,
        };
        let params = RescoreParams {
            k: 1,
            ..Default::default()
        };
        let pos = tube("c", 1, &[0.3, 0.5, 0.7]);
        let neg = tube("c", 2, &[0.1, 0.1, 0.1]);
        let out = rescore(&[pos, neg], &clf, params).unwrap();
        assert_eq!(out[0].label, Label::Positive);
        assert_eq!(out[0].tubelet.scores(), vec![0.5, 0.75, 1.0]);
        assert_eq!(out[1].label, Label::Negative);
        assert_eq!(out[1].tubelet.scores(), vec![0.25, 0.25, 0.25]);

        let neg2 = tube("c", 3, &[0.1, 0.9]);
        let params = RescoreParams {
            k: 2,
            ..Default::default()
        };
        let out = rescore(&[neg2], &clf, params).unwrap();
        assert_eq!(out[0].label, Label::Negative);
        assert_eq!(out[0].tubelet.scores(), vec![0.0, 0.5]);

        let single = tube("c", 4, &[0.4]);
        let clf_pos = BayesClassifier1D {
            pos_mean: 0.4,
            ..clf
        };
        let out = rescore(&[single], &clf_pos, params).unwrap();
        assert_eq!(out[0].tubelet.scores(), vec![0.75]);
    }

    #[test]
    fn labels_from_ground_truth() {
        let t = tube("c", 1, &[0.9, 0.9, 0.9, 0.9]);
        let gt: Vec<GroundTruthRecord> = (0..2)
            .map(|f| GroundTruthRecord {
                clip_id: "c".into(),
                frame: f,
                class_id: 1,
                track_id: 0,
                bbox: bx(0.0, 0.0, 10.0, 10.0),
            })
            .collect();
        assert_eq!(label_tubelets(&[t.clone()], &gt, 0.5), vec![Label::Positive]);
        assert_eq!(label_tubelets(&[t], &gt[..1], 0.5), vec![Label::Negative]);
    }
}
