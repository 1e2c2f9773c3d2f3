"""Smoke test for the tubekit_py extension module.

Build and install first, e.g. `pip install ./crates/py` or
`maturin develop -m crates/py/Cargo.toml`, then run this script.
"""

import json
import sys
import tempfile
from pathlib import Path

import tubekit_py as tk


def main() -> int:
    a = tk.BBox(0, 0, 10, 10)
    b = tk.BBox(5, 0, 15, 10)
    assert abs(a.iou(b) - 1 / 3) < 1e-12
    assert tk.iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0

    dets = [
        tk.Detection(0, 1, 0.9, (0, 0, 10, 10)),
        tk.Detection(0, 1, 0.8, (1, 0, 11, 10)),
        tk.Detection(0, 2, 0.7, (1, 0, 11, 10)),
    ]
    kept = tk.nms(dets, 0.5)
    assert [d.score for d in kept] == [0.9, 0.7], kept

    clip = tk.ClipDetections("c", 1, 20, 20, dets)
    suppressed = tk.mcs(clip, 0.3, 0.4)
    scores = sorted(round(d.score, 6) for d in suppressed.detections)
    assert scores == [0.3, 0.8, 0.9], scores

    try:
        tk.BBox(5, 0, 1, 1)
    except ValueError:
        pass
    else:
        raise AssertionError("inverted box accepted")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        spec = {"num_clips": 2, "frames_per_clip": 20, "detector": {"miss_prob": 0.0, "true_score": {"mean": 1.0, "std": 0.0},
                "false_score": {"mean": 0.0, "std": 0.0}, "box_jitter": 0.0, "fp_rate": 0.0}}
        n = tk.synthesize(str(tmp / "fx"), json.dumps(spec))
        assert n > 3
        clips = tk.read_detections(str(tmp / "fx" / "detections.jsonl"))
        assert len(clips) == 2
        report = tk.mean_ap(clips, str(tmp / "fx" / "gt.jsonl"))
        assert report["mean_ap"] == 1.0, report
        assert tk.corloc(clips, str(tmp / "fx" / "gt.jsonl")) == 1.0
        tk.write_detections(clips, str(tmp / "copy.jsonl"))
        assert len(tk.read_detections(str(tmp / "copy.jsonl"))) == 2
        m = tk.run_pipeline(
            [str(tmp / "fx" / "detections.jsonl")],
            str(tmp / "run"),
            flow_dir=str(tmp / "fx" / "flows"),
            gt=str(tmp / "fx" / "gt.jsonl"),
        )
        assert m == 1.0, m
        assert (tmp / "run" / "manifest.json").exists()

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
