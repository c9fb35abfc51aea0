"""Annotated feature sequences, ground-truth density maps, and the
contextual / fine-grained view decomposition.

A sequence is a (T_raw x d_in) float32 feature matrix plus a list of
half-open repetition intervals [s, e).  Counting targets are density maps:
each repetition contributes unit mass, so the sum of a map over a span is
the repetition count in that span.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"SFNF"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class AnnotatedSequence:
    """A frame-feature sequence with per-repetition cycle annotations."""

    id: str
    class_label: str
    features: np.ndarray  # (T_raw, d_in) float32
    cycles: tuple  # ((s, e), ...) half-open, sorted, non-overlapping
    source: str = "synthetic"

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        object.__setattr__(self, "features", feats)
        cycles = tuple((int(s), int(e)) for s, e in self.cycles)
        object.__setattr__(self, "cycles", cycles)
        prev_end = 0
        for s, e in cycles:
            if not (0 <= s < e <= feats.shape[0]):
                raise ValueError(f"cycle [{s},{e}) out of bounds for T_raw={feats.shape[0]}")
            if s < prev_end:
                raise ValueError(f"cycle [{s},{e}) overlaps or is out of order")
            prev_end = e

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    @property
    def count(self) -> int:
        return len(self.cycles)


@dataclass(frozen=True)
class ViewConfig:
    """Knobs for the view decomposition: downsample rate R, contextual view
    length N_S, fine-grained view length N_F."""

    downsample_rate: int = 4
    context_len: int = 256
    view_len: int = 64

    def __post_init__(self):
        if self.downsample_rate < 1 or self.context_len < 1 or self.view_len < 1:
            raise ValueError("downsample_rate, context_len and view_len must be >= 1")


@dataclass(frozen=True)
class ViewPlan:
    """Decomposition of a downsampled sequence into one contextual view and
    M consecutive fine-grained views, with padding masks."""

    downsample_rate: int
    contextual_indices: np.ndarray  # (N_S,) raw-frame indices
    pad_mask_context: np.ndarray  # (N_S,) bool, True = real frame
    fine_views: list  # M arrays of shape (N_F,)
    pad_mask_fine: list  # M bool arrays of shape (N_F,)

    @property
    def num_views(self) -> int:
        return len(self.fine_views)


@dataclass(frozen=True)
class DensityMap:
    """Per-frame scalar map; the sum over non-masked positions is a count."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.shape != mask.shape or values.ndim != 1:
            raise ValueError(f"values/mask shape mismatch: {values.shape} vs {mask.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)


def cycle_frame_mass(s: int, e: int) -> np.ndarray:
    """Unit mass of one cycle [s, e) spread over its raw frames as a
    truncated, renormalized Gaussian (center (s+e)/2, sigma (e-s)/6)."""
    t = np.arange(s, e, dtype=np.float64)
    mu = (s + e) / 2.0
    sigma = (e - s) / 6.0
    w = np.exp(-0.5 * ((t + 0.5 - mu) / sigma) ** 2)
    return w / w.sum()


def raw_frame_mass(seq: AnnotatedSequence) -> np.ndarray:
    """Accumulated per-raw-frame repetition mass (sums to the cycle count)."""
    raw = np.zeros(seq.n_frames, dtype=np.float64)
    for s, e in seq.cycles:
        raw[s:e] += cycle_frame_mass(s, e)
    return raw


def build_gt_density(seq: AnnotatedSequence, target_indices, mask=None) -> DensityMap:
    """Re-bin the raw-frame repetition mass onto the selected frame indices.

    Each raw frame's mass goes to the nearest selected index (ties toward the
    lower index).  Frames outside the selected indices' coverage window
    (half a local spacing beyond the extremes) are dropped, so view tilings
    partition the mass additively.  Masked positions receive exactly 0.
    """
    idx = np.asarray(target_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty view")
    if mask is None:
        mask = np.ones(idx.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    sel = idx[mask]
    if sel.size == 0:
        raise ValueError("empty view")
    if np.any(np.diff(sel) <= 0):
        raise ValueError("target_indices must be strictly increasing where non-masked")

    raw = raw_frame_mass(seq)
    t = np.arange(seq.n_frames, dtype=np.float64)
    if sel.size == 1:
        lo, hi = sel[0] - 0.5, sel[0] + 0.5
        bins = np.zeros(seq.n_frames, dtype=np.int64)
    else:
        mids = (sel[:-1] + sel[1:]) / 2.0
        lo = sel[0] - (sel[1] - sel[0]) / 2.0
        hi = sel[-1] + (sel[-1] - sel[-2]) / 2.0
        # midpoint exactly hit -> lower index
        bins = np.searchsorted(mids, t, side="left")
    inside = (t >= lo) & (t < hi)
    per_sel = np.bincount(bins[inside], weights=raw[inside], minlength=sel.size)

    values = np.zeros(idx.size, dtype=np.float64)
    values[mask] = per_sel
    return DensityMap(values, mask)


def decompose(seq: AnnotatedSequence, cfg: ViewConfig) -> ViewPlan:
    """Downsample by R and carve the result into a contextual view (length
    N_S) plus M consecutive fine-grained views (length N_F, zero-padded)."""
    if seq.n_frames == 0:
        raise ValueError("empty sequence")
    ds = np.arange(0, seq.n_frames, cfg.downsample_rate, dtype=np.int64)
    n_ds = ds.size

    n_f = cfg.view_len
    num_views = -(-n_ds // n_f)
    fine_views, pad_mask_fine = [], []
    for i in range(num_views):
        chunk = ds[i * n_f : (i + 1) * n_f]
        view = np.zeros(n_f, dtype=np.int64)
        m = np.zeros(n_f, dtype=bool)
        view[: chunk.size] = chunk
        m[: chunk.size] = True
        fine_views.append(view)
        pad_mask_fine.append(m)

    n_s = cfg.context_len
    ctx = np.zeros(n_s, dtype=np.int64)
    ctx_mask = np.zeros(n_s, dtype=bool)
    if n_ds <= n_s:
        ctx[:n_ds] = ds
        ctx_mask[:n_ds] = True
    else:
        k = np.arange(n_s, dtype=np.int64)
        ctx[:] = ds[(k * n_ds) // n_s]
        ctx_mask[:] = True

    return ViewPlan(
        downsample_rate=cfg.downsample_rate,
        contextual_indices=ctx,
        pad_mask_context=ctx_mask,
        fine_views=fine_views,
        pad_mask_fine=pad_mask_fine,
    )


def count_from_density(density: DensityMap) -> float:
    """Sum of the map over non-masked positions (no clamping)."""
    return float(density.values[density.mask].sum())


# ---------------------------------------------------------------------------
# On-disk formats: feature files and dataset manifests
# ---------------------------------------------------------------------------


def write_features(path, features: np.ndarray) -> None:
    """Binary feature file: magic 'SFNF', u32 version, u32 T_raw, u32 d_in,
    then T_raw*d_in float32 little-endian values, row-major."""
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {feats.shape}")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, feats.shape[0], feats.shape[1]))
        f.write(feats.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"bad feature file magic {magic!r} in {path}")
        version, t_raw, d_in = struct.unpack("<III", f.read(12))
        if version != FEATURE_VERSION:
            raise ValueError(f"unsupported feature file version {version}")
        payload = f.read(4 * t_raw * d_in)
    feats = np.frombuffer(payload, dtype="<f4", count=t_raw * d_in)
    return feats.reshape(t_raw, d_in).astype(np.float32)


def write_manifest(path, entries) -> None:
    """Dataset manifest: one JSON object per line, keys sorted so identical
    content is byte-identical."""
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")


def read_manifest(path) -> list:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def load_sequence(entry: dict, root) -> AnnotatedSequence:
    """Materialize one manifest entry (feature paths are relative to root)."""
    root = Path(root)
    features = read_features(root / entry["features_file"])
    return AnnotatedSequence(
        id=entry["id"],
        class_label=entry["class"],
        features=features,
        cycles=tuple((int(s), int(e)) for s, e in entry["cycles"]),
        source=entry.get("source", "manifest"),
    )
