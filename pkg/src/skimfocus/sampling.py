"""Informative-frame sampling from the contextual confidence map.

Three strategies: random (seeded baseline), uniform (evenly spread over the
non-masked frames), and top_nc (the N_C highest-confidence frames, ties
toward the lower index).  All return strictly increasing non-masked indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("random", "uniform", "top_nc")


@dataclass(frozen=True)
class InstructiveFrames:
    indices: np.ndarray  # sorted positions into the contextual view
    features: np.ndarray  # corresponding raw-input rows (N_C x d_in)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and np.any(np.diff(idx) <= 0):
            raise ValueError("instructive frame indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)


def sample_indices(confidence: np.ndarray, mask: np.ndarray, strategy: str, n_frames: int, seed: int = 0) -> np.ndarray:
    """Pick n_frames positions in the contextual view, in temporal order."""
    confidence = np.asarray(confidence, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    valid = np.flatnonzero(mask)
    if n_frames > valid.size:
        raise ValueError(f"cannot sample {n_frames} frames from {valid.size} available")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")

    if strategy == "random":
        rng = np.random.default_rng(seed)
        picked = rng.choice(valid, size=n_frames, replace=False)
        return np.sort(picked)
    if strategy == "uniform":
        k = np.arange(n_frames, dtype=np.int64)
        return valid[(k * valid.size) // n_frames]
    if strategy == "top_nc":
        conf = confidence[valid]
        # stable sort on descending confidence -> ties toward lower index
        order = np.argsort(-conf, kind="stable")[:n_frames]
        return np.sort(valid[order])
    raise ValueError(f"unknown sampling strategy {strategy!r}")


def sample_instructive(
    confidence: np.ndarray,
    mask: np.ndarray,
    source_rows: np.ndarray,
    strategy: str,
    n_frames: int,
    seed: int = 0,
) -> InstructiveFrames:
    """Sample positions and gather the matching raw-input rows (the focus
    encoder re-encodes raw frames; skim embeddings are not reused)."""
    idx = sample_indices(confidence, mask, strategy, n_frames, seed)
    return InstructiveFrames(indices=idx, features=np.asarray(source_rows)[idx])
