"""Counting metrics (OBO accuracy, relative MAE), per-count-range breakdown,
and whole-manifest evaluation in standard or specified-action mode."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import load_sequence, read_manifest
from .model import SkimFocusNet, count_video

log = logging.getLogger(__name__)

DEFAULT_BUCKET_EDGES = (5, 10, 20)  # [1,5], (5,10], (10,20], (20,inf)


def obo(preds, gts) -> float:
    """Fraction of items with |prediction - truth| <= 1 (raw predictions,
    no rounding)."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.size == 0 or preds.shape != gts.shape:
        raise ValueError(f"obo needs matching non-empty inputs, got {preds.shape} and {gts.shape}")
    return float(np.mean(np.abs(preds - gts) <= 1.0))


def mae(preds, gts) -> float:
    """Mean relative absolute error |c_hat - c| / c; zero-count items are
    excluded with a logged warning (the relative error is undefined there)."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.size == 0 or preds.shape != gts.shape:
        raise ValueError(f"mae needs matching non-empty inputs, got {preds.shape} and {gts.shape}")
    keep = gts > 0
    for i in np.flatnonzero(~keep):
        log.warning("mae: excluding item %d with zero ground-truth count", i)
    if not keep.any():
        raise ValueError("mae undefined: all ground-truth counts are zero")
    return float(np.mean(np.abs(preds[keep] - gts[keep]) / gts[keep]))


def bucket_label(count: float, edges=DEFAULT_BUCKET_EDGES) -> str:
    lo = 1
    for hi in edges:
        if count <= hi:
            return f"{lo}-{hi}"
        lo = hi + 1
    return f">{edges[-1]}"


@dataclass
class MetricsReport:
    per_video: list  # (id, class_label, prediction, ground truth)
    mae: float
    obo: float
    range_buckets: dict = field(default_factory=dict)  # label -> {"mae","obo","n"}

    @property
    def n(self) -> int:
        return len(self.per_video)


def compute_report(per_video, bucket_edges=DEFAULT_BUCKET_EDGES) -> MetricsReport:
    """per_video: iterable of (id, class_label, prediction, ground_truth)."""
    per_video = list(per_video)
    preds = [p for _, _, p, _ in per_video]
    gts = [g for _, _, _, g in per_video]
    buckets = {}
    for item in per_video:
        buckets.setdefault(bucket_label(item[3], bucket_edges), []).append(item)
    range_buckets = {}
    for label, items in sorted(buckets.items()):
        b_preds = [p for _, _, p, _ in items]
        b_gts = [g for _, _, _, g in items]
        try:
            b_mae = mae(b_preds, b_gts)
        except ValueError:
            b_mae = float("nan")
        range_buckets[label] = {"mae": b_mae, "obo": obo(b_preds, b_gts), "n": len(items)}
    return MetricsReport(per_video=per_video, mae=mae(preds, gts), obo=obo(preds, gts), range_buckets=range_buckets)


def evaluate(
    model: SkimFocusNet,
    manifest_path,
    root,
    mode: str = "standard",
    exemplars_manifest=None,
    sample_seed: int = 0,
) -> MetricsReport:
    """Count every video in the manifest and aggregate metrics.  Specified
    mode resolves each entry's exemplar_id against the exemplar manifest."""
    entries = read_manifest(manifest_path)
    exemplars = {}
    if mode == "specified":
        if exemplars_manifest is None:
            raise ValueError("missing exemplar")
        exemplars = {e["id"]: e for e in read_manifest(exemplars_manifest)}
    per_video = []
    for entry in entries:
        seq = load_sequence(entry, root)
        exemplar = None
        if mode == "specified":
            if "exemplar_id" not in entry:
                raise ValueError(f"missing exemplar for video {entry['id']}")
            exemplar = load_sequence(exemplars[entry["exemplar_id"]], root)
        result = count_video(model, seq, mode=mode, exemplar=exemplar, sample_seed=sample_seed)
        per_video.append((seq.id, seq.class_label, result.count, float(seq.count)))
    return compute_report(per_video)


def write_report_json(report: MetricsReport, path) -> None:
    payload = {
        "n": report.n,
        "mae": report.mae,
        "obo": report.obo,
        "range_buckets": report.range_buckets,
        "per_video": [
            {"id": vid, "class": cls, "pred": pred, "gt": gt}
            for vid, cls, pred, gt in report.per_video
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "class", "gt", "pred", "abs_err", "rel_err", "obo_hit"])
        for vid, cls, pred, gt in report.per_video:
            abs_err = abs(pred - gt)
            rel_err = abs_err / gt if gt > 0 else ""
            writer.writerow([vid, cls, f"{gt:.10g}", f"{pred:.10g}", f"{abs_err:.10g}",
                             f"{rel_err:.10g}" if rel_err != "" else "", int(abs_err <= 1.0)])
