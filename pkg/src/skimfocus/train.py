"""Joint optimization of both branches (total loss = skim MSE + focus MSE),
with ablation toggles, a cosine-decayed Adam optimizer, per-epoch validation
metrics, and a deterministic data pipeline.

Each step samples one fine-grained view per video (full M-view pass at
evaluation time), so step cost stays bounded for long videos.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .data import build_gt_density, decompose, load_sequence, read_manifest
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, SkimFocusNet, gather_view
from .nn import mse_masked, save_checkpoint
from .synth import SynthConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"  # or "constant"
    # guidance-gate weights start from a structured comparison kernel; a
    # reduced step size keeps that structure from being overwritten before
    # the rest of the network learns to read the gated representation
    gate_lr_scale: float = 0.1
    # fraction of extra specified-mode training samples that pair a composite
    # with an exemplar of a class absent from it (density target: all zeros)
    absent_exemplar_frac: float = 0.25
    seed: int = 0
    mode: str = "standard"  # "specified" trains with exemplar-driven skim
    # ablations
    skim_enabled: bool = True
    lsag_enabled: bool = True
    feature_adaption_enabled: bool = True
    long_short_enabled: bool = True
    # model hyperparameters
    d: int = 64
    heads: int = 4
    encoder_blocks: int = 2
    skim_blocks: int = 1
    lsag_blocks: int = 2  # B
    bottleneck_ratio: int = 4  # gate MLP hidden width = 2d / ratio
    downsample_rate: int = 2  # R
    context_len: int = 128  # N_S
    n_instructive: int = 8  # N_C
    view_len: int = 32  # N_F
    sampling: str = "top_nc"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def model_config(self, d_in: int) -> ModelConfig:
        return ModelConfig(
            d_in=d_in,
            d=self.d,
            heads=self.heads,
            encoder_blocks=self.encoder_blocks,
            skim_blocks=self.skim_blocks,
            lsag_blocks=self.lsag_blocks,
            bottleneck_ratio=self.bottleneck_ratio,
            downsample_rate=self.downsample_rate,
            context_len=self.context_len,
            n_instructive=self.n_instructive,
            view_len=self.view_len,
            sampling=self.sampling,
            skim_enabled=self.skim_enabled,
            lsag_enabled=self.lsag_enabled,
            feature_adaption_enabled=self.feature_adaption_enabled,
            long_short_enabled=self.long_short_enabled,
        )

    def digest(self) -> str:
        blob = repr(sorted(asdict(self).items())).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    skim: float
    focus: float

    def __post_init__(self):
        if not np.isfinite(self.total):
            raise ValueError("non-finite loss")


def compute_loss(skim_pair, view_pairs):
    """Total loss tensor plus its breakdown.

    skim_pair: (prediction Tensor, target array, mask) or None when the skim
    branch is disabled (its term is then exactly 0).  view_pairs: list of
    (prediction Tensor, target array, mask); the focus term is averaged over
    the views present.
    """
    if not view_pairs:
        raise ValueError("compute_loss needs at least one fine-grained view")
    focus_terms = [mse_masked(pred, target, mask) for pred, target, mask in view_pairs]
    focus = focus_terms[0]
    for term in focus_terms[1:]:
        focus = focus + term
    focus = focus / float(len(focus_terms))
    if skim_pair is not None:
        pred, target, mask = skim_pair
        skim = mse_masked(pred, target, mask)
        total = skim + focus
        breakdown = LossBreakdown(total=float(total.data), skim=float(skim.data), focus=float(focus.data))
    else:
        total = focus
        breakdown = LossBreakdown(total=float(total.data), skim=0.0, focus=float(focus.data))
    return total, breakdown


class Adam:
    """Adam with optional cosine learning-rate decay over total steps."""

    def __init__(self, store, learning_rate, total_steps, schedule="cosine", betas=(0.9, 0.999), eps=1e-8, lr_scales=None):
        self.store = store
        self.learning_rate = learning_rate
        self.total_steps = max(total_steps, 1)
        self.schedule = schedule
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}
        # per-parameter learning-rate multipliers keyed by name substring
        self.scale = {n: 1.0 for n, _ in store.items()}
        for pattern, factor in (lr_scales or {}).items():
            for n in self.scale:
                if pattern in n:
                    self.scale[n] = factor

    def current_lr(self) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        frac = min(self.step_count / self.total_steps, 1.0)
        return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))

    def step(self):
        lr = self.current_lr()
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        for name, tensor in self.store.items():
            if tensor.grad is None:
                continue
            g = tensor.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**t)
            v_hat = self.v[name] / (1 - b2**t)
            tensor.data = tensor.data - lr * self.scale[name] * m_hat / (np.sqrt(v_hat) + self.eps)
        self.store.zero_grad()


@dataclass
class TrainItem:
    """One video with every per-step quantity precomputed."""

    seq_id: str
    gt_count: float
    ctx_rows: np.ndarray
    ctx_mask: np.ndarray
    skim_target: np.ndarray
    view_rows: list
    view_masks: list
    view_targets: list

    @property
    def num_views(self) -> int:
        return len(self.view_rows)


def prepare_item(seq, model_cfg: ModelConfig, exemplar=None) -> TrainItem:
    """Precompute views, masks, and ground-truth density maps for one video.
    The skim branch reads the exemplar's contextual view when one is given."""
    view_cfg = model_cfg.view_config()
    plan = decompose(seq, view_cfg)
    source = exemplar if exemplar is not None else seq
    src_plan = decompose(source, view_cfg) if source is not seq else plan
    ctx_rows = gather_view(source, src_plan.contextual_indices, src_plan.pad_mask_context)
    skim_target = build_gt_density(source, src_plan.contextual_indices, src_plan.pad_mask_context)
    view_rows, view_masks, view_targets = [], [], []
    for indices, mask in zip(plan.fine_views, plan.pad_mask_fine):
        view_rows.append(gather_view(seq, indices, mask))
        view_masks.append(mask)
        view_targets.append(build_gt_density(seq, indices, mask).values.astype(np.float32))
    return TrainItem(
        seq_id=seq.id,
        gt_count=float(seq.count),
        ctx_rows=ctx_rows,
        ctx_mask=src_plan.pad_mask_context,
        skim_target=skim_target.values.astype(np.float32),
        view_rows=view_rows,
        view_masks=view_masks,
        view_targets=view_targets,
    )


def load_items(
    manifest_path,
    root,
    model_cfg: ModelConfig,
    mode: str,
    exemplars_manifest=None,
    absent_exemplar_frac: float = 0.0,
    seed: int = 0,
) -> list:
    entries = read_manifest(manifest_path)
    exemplars = {}
    if mode == "specified":
        if exemplars_manifest is None:
            raise ValueError("missing exemplar")
        exemplars = {e["id"]: e for e in read_manifest(exemplars_manifest)}
    items = []
    for entry in entries:
        seq = load_sequence(entry, root)
        exemplar = None
        if mode == "specified":
            exemplar = load_sequence(exemplars[entry["exemplar_id"]], root)
        items.append(prepare_item(seq, model_cfg, exemplar))
    if mode == "specified" and absent_exemplar_frac > 0.0:
        items.extend(
            _absent_exemplar_items(
                entries, exemplars, root, model_cfg, absent_exemplar_frac, seed
            )
        )
    return items


def _absent_exemplar_items(entries, exemplars, root, model_cfg, frac, seed) -> list:
    """Counter-example items for specified counting: the same composites
    paired with an exemplar whose class does not occur in them, with an
    all-zero density target.  Without these the specification is never
    load-bearing during training — a model that ignores the exemplar can
    fit every positive sample — so the guidance pathway gets no gradient."""
    by_class = {}
    for e in exemplars.values():
        by_class.setdefault(e["class"], []).append(e)
    for group in by_class.values():
        group.sort(key=lambda e: e["id"])
    candidates = []
    for entry in entries:
        absent = sorted(set(by_class) - set(entry.get("present", [entry["class"]])))
        if absent:
            candidates.append((entry, absent))
    rng = np.random.default_rng([seed, 0xAB5E])
    n_neg = min(int(round(frac * len(entries))), len(candidates))
    picks = rng.choice(len(candidates), size=n_neg, replace=False) if n_neg else []
    items = []
    for i in sorted(int(p) for p in picks):
        entry, absent = candidates[i]
        cls = absent[int(rng.integers(len(absent)))]
        ex_entry = by_class[cls][int(rng.integers(len(by_class[cls])))]
        item = prepare_item(load_sequence(entry, root), model_cfg, load_sequence(ex_entry, root))
        item.seq_id += ":absent"
        item.gt_count = 0.0
        item.view_targets = [np.zeros_like(t) for t in item.view_targets]
        items.append(item)
    return items


def item_loss(model: SkimFocusNet, item: TrainItem, view_idx: int, sample_seed: int = 0):
    """Forward one video on a single fine-grained view; returns the loss
    tensor and its breakdown."""
    skim_pair = None
    if model.cfg.skim_enabled:
        z, skim_out, _ = model.guidance_from(item.ctx_rows, item.ctx_mask, sample_seed)
        skim_pair = (skim_out.confidence, item.skim_target, item.ctx_mask)
    else:
        z = model.zero_guidance()
    density = model.view_density(item.view_rows[view_idx], item.view_masks[view_idx], z)
    view_pair = (density, item.view_targets[view_idx], item.view_masks[view_idx])
    return compute_loss(skim_pair, [view_pair])


@dataclass
class TrainResult:
    checkpoint_path: Path
    trace_path: Path
    best_val_mae: float
    best_val_obo: float
    trace: list  # dict rows


def train(
    cfg: TrainConfig,
    train_manifest,
    val_manifest,
    root,
    out_dir,
    exemplars_manifest=None,
) -> TrainResult:
    """Deterministic training loop: fixed data order and view choices given
    the seed, per-epoch validation, best-val checkpoint retained."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    probe = load_sequence(read_manifest(train_manifest)[0], root)
    model_cfg = cfg.model_config(d_in=probe.d_in)
    model = SkimFocusNet(model_cfg, seed=cfg.seed)
    items = load_items(
        train_manifest,
        root,
        model_cfg,
        cfg.mode,
        exemplars_manifest,
        absent_exemplar_frac=cfg.absent_exemplar_frac,
        seed=cfg.seed,
    )

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = max(len(items) // cfg.batch_size, 1)
    opt = Adam(
        model.store,
        cfg.learning_rate,
        total_steps=cfg.epochs * steps_per_epoch,
        schedule=cfg.lr_schedule,
        lr_scales={".adapt.": cfg.gate_lr_scale},
    )

    trace = []
    best = (float("inf"), -1.0, None)  # (val mae, val obo, state)
    checkpoint_path = out_dir / "model.sfnc"
    trace_path = out_dir / "trace.csv"

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        epoch_losses = []
        for step in range(steps_per_epoch):
            batch = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if batch.size == 0:
                continue
            model.store.zero_grad()
            totals = np.zeros(3)
            for item_idx in batch:
                item = items[item_idx]
                view_idx = int(rng.integers(item.num_views))
                loss, breakdown = item_loss(model, item, view_idx, sample_seed=int(rng.integers(2**31)))
                if not np.isfinite(loss.data):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} step {step} on video {item.seq_id}: {breakdown}"
                    )
                (loss / float(batch.size)).backward()
                totals += (breakdown.total, breakdown.skim, breakdown.focus)
            opt.step()
            epoch_losses.append(totals / batch.size)

        mean_losses = np.mean(epoch_losses, axis=0)
        val_report = evaluate(model, val_manifest, root, mode=cfg.mode, exemplars_manifest=exemplars_manifest)
        row = {
            "epoch": epoch,
            "L": float(mean_losses[0]),
            "L_S": float(mean_losses[1]),
            "L_F": float(mean_losses[2]),
            "val_MAE": val_report.mae,
            "val_OBO": val_report.obo,
        }
        trace.append(row)
        log.info("epoch %d: L=%.4f val_MAE=%.4f val_OBO=%.4f", epoch, row["L"], row["val_MAE"], row["val_OBO"])
        if val_report.mae < best[0]:
            best = (val_report.mae, val_report.obo, model.store.state())

    if best[2] is not None:
        model.store.load_state(best[2])
    save_checkpoint(checkpoint_path, model.store, config_digest=cfg.digest())
    with open(trace_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "L", "L_S", "L_F", "val_MAE", "val_OBO"])
        for row in trace:
            writer.writerow(
                [row["epoch"]] + [f"{row[k]:.10g}" for k in ("L", "L_S", "L_F", "val_MAE", "val_OBO")]
            )
    return TrainResult(
        checkpoint_path=checkpoint_path,
        trace_path=trace_path,
        best_val_mae=best[0],
        best_val_obo=best[1],
        trace=trace,
    )


def ablate(
    grid: dict,
    base_cfg: TrainConfig,
    train_manifest,
    val_manifest,
    test_manifest,
    root,
    out_dir,
    exemplars_manifest=None,
) -> list:
    """Full cartesian grid over TrainConfig field overrides; one train+eval
    per cell, MAE/OBO rows written to ablation.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(grid)
    cells = [()]
    for name in names:
        cells = [prev + (value,) for prev in cells for value in grid[name]]

    rows = []
    for cell_idx, cell in enumerate(cells):
        overrides = dict(zip(names, cell))
        cfg = replace(base_cfg, **overrides)
        cell_dir = out_dir / f"cell_{cell_idx:03d}"
        result = train(cfg, train_manifest, val_manifest, root, cell_dir, exemplars_manifest)
        from .nn import load_checkpoint

        probe = load_sequence(read_manifest(test_manifest)[0], root)
        model = SkimFocusNet(cfg.model_config(d_in=probe.d_in), seed=cfg.seed)
        _, state = load_checkpoint(result.checkpoint_path)
        model.store.load_state(state)
        report = evaluate(model, test_manifest, root, mode=cfg.mode, exemplars_manifest=exemplars_manifest)
        rows.append({**overrides, "mae": report.mae, "obo": report.obo})

    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(names + ["mae", "obo"])
        for row in rows:
            writer.writerow([row[n] for n in names] + [f"{row['mae']:.10g}", f"{row['obo']:.10g}"])
    return rows
