"""Synthetic repetitive feature sequences with exact cycle annotations, and
the multi-action composite builder (composite video + class-matched exemplar).

Each action class owns a fixed random waveform template; a cycle renders the
template at a randomly drawn length by phase resampling.  Idle stretches
between cycles are low-amplitude drift, so repetitions stand out against a
non-repetitive background.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AnnotatedSequence, write_features, write_manifest

TEMPLATE_LEN = 64  # phase resolution of each class waveform


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 6
    d_in: int = 16
    cycle_len_range: tuple = (12, 32)
    cycles_range: tuple = (3, 10)
    idle_len_range: tuple = (0, 6)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.cycle_len_range[0] > self.cycle_len_range[1] or self.cycle_len_range[0] < 2:
            raise ValueError(f"bad cycle_len_range {self.cycle_len_range}")
        if self.cycles_range[0] > self.cycles_range[1] or self.cycles_range[0] < 0:
            raise ValueError(f"bad cycles_range {self.cycles_range}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass(frozen=True)
class MultiRepUnit:
    """Basic data unit: a multi-action composite annotated only for the
    target class, paired with a pure exemplar of that class."""

    composite: AnnotatedSequence
    exemplar: AnnotatedSequence
    target_class: str
    segment_layout: tuple  # ((class_label, start, end), ...)

    def __post_init__(self):
        if self.exemplar.class_label != self.target_class:
            raise ValueError("exemplar class does not match target class")
        pos = 0
        for _, s, e in self.segment_layout:
            if s != pos or e <= s:
                raise ValueError("segment_layout must tile the composite exactly")
            pos = e
        if pos != self.composite.n_frames:
            raise ValueError("segment_layout does not cover the composite")


def class_name(class_id: int) -> str:
    return f"action_{class_id:02d}"


def class_template(class_id: int, cfg: SynthConfig) -> np.ndarray:
    """Fixed per-class waveform template, (TEMPLATE_LEN x d_in), unit-norm rows."""
    rng = np.random.default_rng([cfg.seed, 0xC1A5, class_id])
    phase = np.arange(TEMPLATE_LEN) / TEMPLATE_LEN
    template = np.zeros((TEMPLATE_LEN, cfg.d_in))
    for harmonic in (1, 2, 3):
        amp = rng.normal(0.0, 1.0, size=cfg.d_in) / harmonic
        shift = rng.uniform(0.0, 1.0, size=cfg.d_in)
        template += amp * np.sin(2 * np.pi * harmonic * (phase[:, None] + shift))
    # a steady identity coordinate per class (appearance signature), so class
    # membership is linearly readable on top of the oscillating waveform
    template[:, class_id % cfg.d_in] += 1.5
    norms = np.linalg.norm(template, axis=1, keepdims=True)
    return template / np.maximum(norms, 1e-8)


def class_tempo(class_id: int, cfg: SynthConfig) -> float:
    """Characteristic cycle length of a class: each class repeats at its own
    tempo drawn from a narrow band inside the global range, making cycle
    frequency a class signature instead of iid noise."""
    lo, hi = cfg.cycle_len_range
    return lo + (hi - lo) * ((class_id % cfg.num_classes) + 0.5) / cfg.num_classes


def render_cycle(template: np.ndarray, length: int) -> np.ndarray:
    """Resample one template period to `length` frames by phase interpolation."""
    phases = (np.arange(length) + 0.5) / length * TEMPLATE_LEN
    closed = np.vstack([template, template[:1]])  # wrap for interpolation
    base = np.arange(TEMPLATE_LEN + 1, dtype=np.float64)
    out = np.empty((length, template.shape[1]))
    for j in range(template.shape[1]):
        out[:, j] = np.interp(phases, base, closed[:, j])
    return out


def _idle_block(rng: np.random.Generator, length: int, d_in: int) -> np.ndarray:
    """Low-amplitude drifting background (non-repetitive)."""
    if length == 0:
        return np.zeros((0, d_in))
    steps = rng.normal(0.0, 0.08, size=(length, d_in))
    drift = np.cumsum(steps, axis=0)
    return 0.15 * rng.normal(0.0, 1.0, size=(1, d_in)) + drift


def generate_sequence(class_id: int, n_cycles: int, cfg: SynthConfig, seed: int) -> AnnotatedSequence:
    """Render a single-class repetitive sequence with exact cycle intervals."""
    if n_cycles < 0:
        raise ValueError("n_cycles must be >= 0")
    rng = np.random.default_rng([cfg.seed, class_id, seed])
    template = class_template(class_id, cfg)
    lo, hi = cfg.cycle_len_range
    center = class_tempo(class_id, cfg)
    half = max(1, round((hi - lo) / (2 * cfg.num_classes)))
    clo = max(lo, round(center) - half)
    chi = min(hi, round(center) + half)
    glo, ghi = cfg.idle_len_range

    blocks, cycles = [], []
    pos = 0

    def idle(length):
        nonlocal pos
        blocks.append(_idle_block(rng, length, cfg.d_in))
        pos += length

    idle(int(rng.integers(glo, ghi + 1)))
    for _ in range(n_cycles):
        length = int(rng.integers(clo, chi + 1))
        blocks.append(render_cycle(template, length))
        cycles.append((pos, pos + length))
        pos += length
        idle(int(rng.integers(glo, ghi + 1)))
    if n_cycles == 0:
        idle(max(lo, 8))  # keep zero-cycle sequences non-empty

    feats = np.vstack(blocks)
    if cfg.noise_std > 0:
        feats = feats + rng.normal(0.0, cfg.noise_std, size=feats.shape)
    return AnnotatedSequence(
        id=f"{class_name(class_id)}_s{seed}",
        class_label=class_name(class_id),
        features=feats.astype(np.float32),
        cycles=tuple(cycles),
    )


def compose_multirep(
    target: AnnotatedSequence,
    distractor_pool: list,
    exemplar_pool: list,
    cfg: SynthConfig,
    seed: int,
) -> MultiRepUnit:
    """Interleave the target sequence with distractor clips from other classes.

    The target is cut only at cycle boundaries (no annotated cycle is ever
    severed), clips from 3-5 other classes are inserted at random positions,
    and total distractor length is drawn so target frames keep roughly half
    of the composite.  Only target-class cycles stay annotated.
    """
    rng = np.random.default_rng([cfg.seed, 0xD15C, seed])

    other = {}
    for s in distractor_pool:
        if s.class_label != target.class_label:
            other.setdefault(s.class_label, []).append(s)
    if len(other) < 3:
        raise ValueError("insufficient distractors")
    exemplars = [s for s in exemplar_pool if s.class_label == target.class_label]
    if not exemplars:
        raise ValueError("insufficient distractors")

    n_classes = int(rng.choice([3, 4, 5]))
    n_classes = min(n_classes, len(other))
    chosen = list(rng.choice(sorted(other), size=n_classes, replace=False))

    # distractor budget keeps the target fraction within 0.5 +/- 0.1
    frac = rng.uniform(0.42, 0.58)
    total_len = int(round(target.n_frames * (1.0 - frac) / frac))
    # one "rival" distractor takes most of the budget, so the target class is
    # not reliably the longest-running class and the exemplar stays informative
    rival = rng.uniform(0.85, 0.95)
    shares = np.concatenate([[rival], rng.dirichlet(np.ones(n_classes - 1)) * (1.0 - rival)])
    wants = np.maximum(4, np.round(shares * total_len).astype(int))
    # trim the largest clip so rounding never pushes the target share
    # outside its band
    wants[int(np.argmax(wants))] -= int(wants.sum()) - total_len
    clips = []
    for label, want in zip(chosen, wants):
        want = int(want)
        src = other[label][int(rng.integers(len(other[label])))]
        feats = src.features
        if want > feats.shape[0]:  # a distractor clip may repeat within a unit
            feats = np.vstack([feats] * -(-want // feats.shape[0]))
        start = int(rng.integers(0, feats.shape[0] - want + 1))
        clips.append((label, feats[start : start + want]))
    # split the rival into several chunks so the target is not the only
    # dispersed class (chunk-boundary density must not identify the target)
    rival_label, rival_feats = clips[0]
    n_pieces = int(rng.integers(2, 5))
    if rival_feats.shape[0] >= 2 * n_pieces:
        edges = [0] + sorted(
            rng.choice(np.arange(1, rival_feats.shape[0]), size=n_pieces - 1, replace=False).tolist()
        ) + [rival_feats.shape[0]]
        clips[0:1] = [
            (rival_label, rival_feats[edges[i] : edges[i + 1]])
            for i in range(n_pieces)
            if edges[i + 1] > edges[i]
        ]
    rng.shuffle(clips)

    # cut the target at cycle boundaries into as many chunks as insertion slots
    boundaries = sorted({e for _, e in target.cycles[:-1]} or set())
    n_cuts = min(len(clips), len(boundaries))
    cut_points = sorted(rng.choice(boundaries, size=n_cuts, replace=False)) if n_cuts else []
    chunk_edges = [0] + list(int(c) for c in cut_points) + [target.n_frames]
    chunks = [(chunk_edges[i], chunk_edges[i + 1]) for i in range(len(chunk_edges) - 1)]

    # assign each clip to one of the len(chunks)+1 gaps around the chunks
    gaps = [[] for _ in range(len(chunks) + 1)]
    for clip in clips:
        gaps[int(rng.integers(len(gaps)))].append(clip)

    blocks, layout, cycles = [], [], []
    pos = 0

    def emit(label, feats):
        nonlocal pos
        blocks.append(feats)
        layout.append((label, pos, pos + feats.shape[0]))
        pos += feats.shape[0]

    for i, (cs, ce) in enumerate(chunks):
        for label, feats in gaps[i]:
            emit(label, feats)
        offset = pos - cs
        for s, e in target.cycles:
            if cs <= s and e <= ce:
                cycles.append((s + offset, e + offset))
        emit(target.class_label, target.features[cs:ce])
    for label, feats in gaps[len(chunks)]:
        emit(label, feats)

    composite = AnnotatedSequence(
        id=f"{target.id}_multi{seed}",
        class_label=target.class_label,
        features=np.vstack(blocks).astype(np.float32),
        cycles=tuple(cycles),
        source="multirep",
    )
    exemplar = exemplars[int(rng.integers(len(exemplars)))]
    return MultiRepUnit(
        composite=composite,
        exemplar=exemplar,
        target_class=target.class_label,
        segment_layout=tuple(layout),
    )


def target_fraction(unit: MultiRepUnit) -> float:
    tgt = sum(e - s for label, s, e in unit.segment_layout if label == unit.target_class)
    return tgt / unit.composite.n_frames


# ---------------------------------------------------------------------------
# Dataset builder
# ---------------------------------------------------------------------------

EXEMPLARS_PER_CLASS = 3


def _write_sequence(seq: AnnotatedSequence, features_dir: Path, root: Path) -> dict:
    rel = f"features/{seq.id}.sfnf"
    write_features(features_dir / f"{seq.id}.sfnf", seq.features)
    return {
        "id": seq.id,
        "class": seq.class_label,
        "features_file": rel,
        "cycles": [[s, e] for s, e in seq.cycles],
    }


def build_dataset(split_spec: dict, cfg: SynthConfig, out_dir, multi_action: bool = False) -> dict:
    """Emit class-stratified train/val/test manifests plus feature files.

    With multi_action=True each item is a multi-action composite whose
    manifest entry carries an exemplar_id; exemplars (3 per class, held out
    of all splits) land in exemplars.jsonl.  Pure function of (cfg, spec).
    """
    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([cfg.seed, 0xDA7A])
    clo, chi = cfg.cycles_range
    manifests = {}
    item_seed = 0

    exemplar_pool = []
    exemplar_entries = []
    if multi_action:
        for class_id in range(cfg.num_classes):
            for j in range(EXEMPLARS_PER_CLASS):
                seq = generate_sequence(class_id, int(rng.integers(clo, chi + 1)), cfg, seed=900000 + item_seed)
                seq = AnnotatedSequence(
                    id=f"exemplar_{class_name(class_id)}_{j}",
                    class_label=seq.class_label,
                    features=seq.features,
                    cycles=seq.cycles,
                    source="exemplar",
                )
                exemplar_pool.append(seq)
                exemplar_entries.append(_write_sequence(seq, features_dir, out_dir))
                item_seed += 1
        path = out_dir / "exemplars.jsonl"
        write_manifest(path, exemplar_entries)
        manifests["exemplars"] = path

    for split, n_items in split_spec.items():
        entries = []
        for i in range(n_items):
            class_id = i % cfg.num_classes
            if multi_action:
                # draw a frame budget instead of a count, so composite length
                # carries no information about the cycle count: a trained
                # model cannot count by regressing on video length and must
                # identify which class's cycles to count
                budget = rng.uniform(165.0, 205.0)
                n_cycles = max(2, int(round(budget / class_tempo(class_id, cfg))))
            else:
                n_cycles = int(rng.integers(clo, chi + 1))
            seq = generate_sequence(class_id, n_cycles, cfg, seed=item_seed)
            seq = AnnotatedSequence(
                id=f"{split}_{seq.id}",
                class_label=seq.class_label,
                features=seq.features,
                cycles=seq.cycles,
            )
            item_seed += 1
            if multi_action:
                pool = []
                for other_id in range(cfg.num_classes):
                    if other_id == class_id:
                        continue
                    pool.append(generate_sequence(other_id, int(rng.integers(clo, chi + 1)), cfg, seed=item_seed))
                    item_seed += 1
                unit = compose_multirep(seq, pool, exemplar_pool, cfg, seed=item_seed)
                item_seed += 1
                entry = _write_sequence(unit.composite, features_dir, out_dir)
                entry["exemplar_id"] = unit.exemplar.id
                entry["present"] = sorted({label for label, _, _ in unit.segment_layout})
                entries.append(entry)
            else:
                entries.append(_write_sequence(seq, features_dir, out_dir))
        path = out_dir / f"{split}.jsonl"
        write_manifest(path, entries)
        manifests[split] = path
    return manifests
