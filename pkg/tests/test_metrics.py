"""OBO / relative-MAE metrics, range buckets, and report plumbing."""

import numpy as np
import pytest

from skimfocus.metrics import (
    bucket_label,
    compute_report,
    mae,
    obo,
    write_report_csv,
    write_report_json,
)

# 10-item fixture with hand-computed expectations (kept in sync by hand):
# pred, gt, |pred-gt|, rel err, obo hit
FIXTURE = [
    ("v0", 5.2, 5),   # 0.2 / 0.04  hit
    ("v1", 7.1, 5),   # 2.1 / 0.42  miss
    ("v2", 3.0, 3),   # 0.0 / 0.0   hit
    ("v3", 0.4, 1),   # 0.6 / 0.6   hit
    ("v4", 10.0, 12), # 2.0 / 1/6   miss
    ("v5", 19.5, 20), # 0.5 / 0.025 hit
    ("v6", 2.0, 4),   # 2.0 / 0.5   miss
    ("v7", 6.0, 5),   # 1.0 / 0.2   hit (boundary: exactly 1)
    ("v8", 0.0, 2),   # 2.0 / 1.0   miss
    ("v9", 30.0, 25), # 5.0 / 0.2   miss
]
HAND_MAE = (0.04 + 0.42 + 0.0 + 0.6 + 2.0 / 12 + 0.025 + 0.5 + 0.2 + 1.0 + 0.2) / 10
HAND_OBO = 5 / 10


def test_obo_basic():
    assert obo([5.2], [5]) == 1.0
    assert obo([7.1, 3.0], [5, 3]) == 0.5


def test_obo_boundary_exactly_one_counts():
    assert obo([6.0], [5]) == 1.0
    assert obo([6.0000001], [5]) == 0.0


def test_mae_basic():
    assert mae([6], [5]) == pytest.approx(0.2)
    assert mae([3, 7], [3, 7]) == 0.0


def test_fixture_hand_computed_exact():
    preds = [p for _, p, _ in FIXTURE]
    gts = [g for _, _, g in FIXTURE]
    assert abs(mae(preds, gts) - HAND_MAE) <= 1e-9
    assert abs(obo(preds, gts) - HAND_OBO) <= 1e-9


def test_mae_excludes_zero_counts(caplog):
    import logging

    with caplog.at_level(logging.WARNING):
        value = mae([1.0, 5.0], [0, 5])
    assert value == 0.0
    assert "zero ground-truth" in caplog.text
    with pytest.raises(ValueError, match="all ground-truth counts are zero"):
        mae([1.0], [0])


def test_empty_inputs_error():
    with pytest.raises(ValueError):
        obo([], [])
    with pytest.raises(ValueError):
        mae([], [])


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    preds = rng.uniform(1, 20, size=30)
    gts = rng.integers(1, 20, size=30).astype(float)
    perm = rng.permutation(30)
    assert mae(preds, gts) == pytest.approx(mae(preds[perm], gts[perm]))
    assert obo(preds, gts) == pytest.approx(obo(preds[perm], gts[perm]))


def test_mae_scale_invariance():
    rng = np.random.default_rng(1)
    preds = rng.uniform(1, 20, size=20)
    gts = rng.integers(1, 20, size=20).astype(float)
    assert mae(preds * 3.0, gts * 3.0) == pytest.approx(mae(preds, gts))


def test_bucket_labels():
    assert bucket_label(1) == "1-5"
    assert bucket_label(5) == "1-5"
    assert bucket_label(6) == "6-10"
    assert bucket_label(10) == "6-10"
    assert bucket_label(11) == "11-20"
    assert bucket_label(20) == "11-20"
    assert bucket_label(21) == ">20"


def test_report_buckets_sum_to_n():
    per_video = [(vid, "action_00", p, float(g)) for vid, p, g in FIXTURE]
    report = compute_report(per_video)
    assert sum(b["n"] for b in report.range_buckets.values()) == report.n == 10
    assert report.mae == pytest.approx(HAND_MAE)
    assert report.obo == pytest.approx(HAND_OBO)


def test_perfect_predictor():
    per_video = [(f"v{i}", "a", float(i + 1), float(i + 1)) for i in range(8)]
    report = compute_report(per_video)
    assert report.mae == 0.0
    assert report.obo == 1.0


def test_report_writers(tmp_path):
    import csv
    import json

    per_video = [(vid, "action_00", p, float(g)) for vid, p, g in FIXTURE]
    report = compute_report(per_video)
    write_report_json(report, tmp_path / "r.json")
    payload = json.loads((tmp_path / "r.json").read_text())
    assert payload["n"] == 10 and abs(payload["mae"] - HAND_MAE) < 1e-12
    write_report_csv(report, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 10
    assert rows[0]["id"] == "v0" and rows[0]["obo_hit"] == "1"
    assert rows[7]["obo_hit"] == "1"  # |6-5| = 1 counts
