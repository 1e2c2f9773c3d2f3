mod common;

use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use tubekit::combine::{greedy_average, minmax_normalize, Source};
use tubekit::config::MinMaxScope;
use tubekit::eval::{mean_ap, ApAccumulator};
use tubekit::mgp::{propagate, PropagationMode, PropagationPlan};
use tubekit::rescoring::{fit_classifier, rescore, Label, RescoreParams};
use tubekit::tracker::{Tubelet, TubeletNode};
use tubekit::{io, iou, mcs, nms, BBox, ClipDetections, Detection, FlowField, FlowSet};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..90.0f64, 0.0..90.0f64, 1.0..40.0f64, 1.0..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(100.0), (y + h).min(100.0)).unwrap())
}

fn frame_dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0..3u32, 0.0..1.0f64, bbox()), 0..max)
        .prop_map(|v| v.into_iter().map(|(c, s, b)| Detection::new(0, c, s, b)).collect())
}

fn clip(max: usize) -> impl Strategy<Value = ClipDetections> {
    prop::collection::vec((0..6u32, 0..4u32, -1.0..2.0f64, bbox()), 1..max).prop_map(|v| {
        ClipDetections::new("p", 6, 100, 100)
            .with_detections(v.into_iter().map(|(f, c, s, b)| Detection::new(f, c, s, b)).collect())
    })
}

proptest! {
    #[test]
    fn iou_bounds_and_symmetry(a in bbox(), b in bbox()) {
        let o = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(o, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        prop_assert!((o - iou_ref(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn nms_matches_reference_and_is_idempotent(dets in frame_dets(25), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr).unwrap();
        let want = nms_ref(&dets, thr);
        let mut a = kept.clone();
        let mut b = want;
        a.sort_by(tubekit::model::score_order);
        b.sort_by(tubekit::model::score_order);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(nms(&kept, thr).unwrap(), kept.clone());
        for (i, x) in kept.iter().enumerate() {
            prop_assert!(dets.contains(x));
            for y in &kept[i + 1..] {
                prop_assert!(x.class_id != y.class_id || iou(&x.bbox, &y.bbox) <= thr);
            }
        }
    }

    #[test]
    fn mean_ap_is_rank_based(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gt) = random_eval_instance(&mut rng, 20, 5, 3);
        let base = mean_ap(&dets, &gt, 0.5).unwrap();
        let warped: Vec<ClipDetections> = dets
            .iter()
            .map(|c| {
                let mut c = c.clone();
                for d in &mut c.detections {
                    d.score = (3.0 * d.score).exp() - 7.0;
                }
                c
            })
            .collect();
        prop_assert_eq!(mean_ap(&warped, &gt, 0.5).unwrap().per_class_ap, base.per_class_ap.clone());
        let (aps, _) = mean_ap_ref(&dets, &gt, 0.5);
        for (c, ap) in aps {
            prop_assert!((base.per_class_ap[&c] - ap).abs() < 1e-9);
        }
    }

    #[test]
    fn adding_a_missed_match_never_hurts(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gt) = random_eval_instance(&mut rng, 12, 5, 2);
        let before = mean_ap(&dets, &gt, 0.5).unwrap();
        let g = &gt[0];
        let mut more = dets.clone();
        more[0].detections.push(Detection::new(g.frame, g.class_id, 0.0, g.bbox));
        more[0].sort();
        let after = mean_ap(&more, &gt, 0.5).unwrap();
        prop_assert!(after.per_class_ap[&g.class_id] >= before.per_class_ap[&g.class_id] - 1e-12);
    }

    #[test]
    fn accumulator_merge_is_order_free(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<_> = (0..3).map(|_| random_eval_instance(&mut rng, 10, 4, 2)).collect();
        let acc = |order: &[usize]| {
            let mut total = ApAccumulator::new(0.5).unwrap();
            for &i in order {
                let (dets, gt) = &parts[i];
                let mut a = ApAccumulator::new(0.5).unwrap();
                let gt: Vec<_> = gt.iter().map(|g| tubekit::GroundTruthRecord { clip_id: format!("c{i}"), ..g.clone() }).collect();
                let refs: Vec<_> = gt.iter().collect();
                a.add_clip(&format!("c{i}"), &dets[0].detections, &refs);
                total = total.merge(a);
            }
            total.finish().unwrap()
        };
        let a = acc(&[0, 1, 2]);
        let b = acc(&[2, 0, 1]);
        prop_assert_eq!(a.per_class_counts, b.per_class_counts);
        for (c, v) in &a.per_class_ap {
            prop_assert!((v - b.per_class_ap[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn minmax_preserves_order(c in clip(30)) {
        for scope in [MinMaxScope::Global, MinMaxScope::PerClip] {
            let out = minmax_normalize(std::slice::from_ref(&c), scope);
            let before: Vec<f64> = c.detections.iter().map(|d| d.score).collect();
            let after: Vec<f64> = out[0].detections.iter().map(|d| d.score).collect();
            prop_assert!(after.iter().all(|s| (0.0..=1.0).contains(s)));
            for i in 0..before.len() {
                for j in 0..before.len() {
                    if before[i] < before[j] {
                        prop_assert!(after[i] <= after[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn mcs_touches_only_scores(c in clip(40), ratio in 0.001..1.0f64, penalty in 0.0..1.0f64) {
        let high = mcs::select_high_confidence(&c, ratio).unwrap();
        let out = mcs::suppress(&c, &high, penalty).unwrap();
        prop_assert_eq!(out.detections.len(), c.detections.len());
        type Key = (u32, u32, [u64; 4]);
        let group = |dets: &[Detection], undo: bool| {
            let mut m: std::collections::BTreeMap<Key, Vec<f64>> = Default::default();
            for d in dets {
                let s = if undo && !high.contains(d.class_id) { d.score + penalty } else { d.score };
                m.entry((d.frame, d.class_id, d.bbox.to_array().map(f64::to_bits))).or_default().push(s);
            }
            for v in m.values_mut() {
                v.sort_by(f64::total_cmp);
            }
            m
        };
        let (before, after) = (group(&c.detections, false), group(&out.detections, true));
        prop_assert!(before.keys().eq(after.keys()));
        for (k, v) in &before {
            for (a, b) in v.iter().zip(&after[k]) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        let top = c.detections.iter().map(|d| d.score).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(c.detections.iter().filter(|d| d.score == top).all(|d| high.contains(d.class_id)));
    }

    #[test]
    fn window_one_is_nms_only(c in clip(30)) {
        let plan = PropagationPlan::new(1, PropagationMode::MotionGuided).unwrap();
        let (out, stats) = propagate(&c, &FlowSet::new("p"), plan, 0.5).unwrap();
        prop_assert_eq!(stats.propagated, 0);
        prop_assert_eq!(out, tubekit::model::nms_clip(&c, 0.5).unwrap());
    }

    #[test]
    fn zero_flow_modes_agree(c in clip(20), w in prop::sample::select(vec![3u32, 5, 7])) {
        let mut flows = FlowSet::new("p");
        for t in 0..5 {
            flows.insert_forward(t, FlowField::zeros(100, 100));
        }
        let a = propagate(&c, &flows, PropagationPlan::new(w, PropagationMode::MotionGuided).unwrap(), 0.5).unwrap();
        let b = propagate(&c, &flows, PropagationPlan::new(w, PropagationMode::Duplicate).unwrap(), 0.5).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn detections_round_trip(c in clip(30)) {
        let text = io::format_detections(std::slice::from_ref(&c));
        let back = io::parse_detections(Path::new("mem"), &text, 30).unwrap();
        prop_assert_eq!(back, vec![c]);
    }

    #[test]
    fn flow_round_trip(w in 1..16u32, h in 1..16u32, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..w * h * 2).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        let f = FlowField::from_interleaved(w, h, data).unwrap();
        prop_assert_eq!(io::decode_flow(Path::new("mem"), &io::encode_flow(&f)).unwrap(), f);
    }

    #[test]
    fn posterior_matches_density_ratio(
        pos in prop::collection::vec(0.0..1.0f64, 2..20),
        neg in prop::collection::vec(0.0..1.0f64, 2..20),
        x in -0.5..1.5f64,
    ) {
        let clf = fit_classifier(&pos, &neg).unwrap();
        let want = posterior_ref(x, (clf.pos_mean, clf.pos_var), (clf.neg_mean, clf.neg_var), clf.prior_pos);
        if want.is_finite() {
            prop_assert!((clf.posterior_pos(x) - want).abs() < 1e-9);
        }
        prop_assert!((0.0..=1.0).contains(&clf.posterior_pos(x)));
    }

    #[test]
    fn rescored_scores_land_in_label_ranges(scores in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 1..8), 1..10)) {
        let b = BBox::new(0.0, 0.0, 5.0, 5.0).unwrap();
        let tubes: Vec<Tubelet> = scores.iter().map(|s| Tubelet {
            clip_id: "p".into(),
            class_id: 0,
            anchor_index: 0,
            nodes: s.iter().enumerate().map(|(f, &score)| TubeletNode { frame: f as u32, bbox: b, score, snapped: true }).collect(),
        }).collect();
        let clf = fit_classifier(&[0.7, 0.9], &[0.1, 0.3]).unwrap();
        let out = rescore(&tubes, &clf, RescoreParams::default()).unwrap();
        let max_neg = out.iter().filter(|r| r.label == Label::Negative).flat_map(|r| r.tubelet.scores()).fold(f64::NEG_INFINITY, f64::max);
        let min_pos = out.iter().filter(|r| r.label == Label::Positive).flat_map(|r| r.tubelet.scores()).fold(f64::INFINITY, f64::min);
        prop_assert!(min_pos >= max_neg);
        for r in &out {
            for s in r.tubelet.scores() {
                match r.label {
                    Label::Positive => prop_assert!((0.5..=1.0).contains(&s)),
                    Label::Negative => prop_assert!((0.0..=0.5).contains(&s)),
                }
            }
        }
    }

    #[test]
    fn greedy_trace_never_drops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (base, gt) = random_eval_instance(&mut rng, 15, 5, 2);
        let sources: Vec<Source> = (0..3).map(|i| {
            let (other, _) = random_eval_instance(&mut rng, 15, 5, 2);
            let mut c = base[0].clone();
            c.detections.extend(other[0].detections.iter().cloned());
            c.sort();
            Source::new(format!("s{i}"), vec![c])
        }).collect();
        let g = greedy_average(&sources, 0.5, 0.001, |c| Ok(mean_ap(c, &gt, 0.5)?.mean_ap)).unwrap();
        prop_assert!(g.trace.windows(2).all(|w| w[1] - w[0] >= 0.001));
        prop_assert_eq!(g.selected.len(), g.trace.len());
    }
}
