"""Command-line entry point for the counting pipeline.

Subcommands cover the full artifact flow: dataset synthesis (``synth``,
``compose-multirep``), training (``train``, ``ablate``), evaluation
(``eval``), inference (``predict``), diagnostics (``gradcheck``) and
visualisation (``plot``).

Configuration is layered: dataclass defaults < flat ``key=value`` config
file < ``--set key=value`` overrides.  Unknown keys are rejected, and every
run writes a resolved-config snapshot into its output directory so any run
can be reproduced from its artifacts alone.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import load_sequence, read_manifest
from .metrics import evaluate, write_report_csv, write_report_json
from .model import ModelConfig, SkimFocusNet, count_video
from .nn import ParamStore, grad_check, load_checkpoint, mse_masked
from .synth import SynthConfig, build_dataset
from .train import TrainConfig, ablate, train

ENV_OUT_ROOT = "SKIMFOCUS_OUT"

log = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad invocation: maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    """argparse parser that raises instead of calling sys.exit(2)."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    """Parse a raw string into the declared type of a TrainConfig field."""
    if name not in _TRAIN_FIELDS:
        raise UsageError(f"unknown config key {name!r} (valid: {', '.join(sorted(_TRAIN_FIELDS))})")
    typ = _TRAIN_FIELDS[name].type
    raw = raw.strip()
    if typ == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"config key {name!r} expects a boolean, got {raw!r}")
    if typ == "int":
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"config key {name!r} expects an integer, got {raw!r}")
    if typ == "float":
        try:
            return float(raw)
        except ValueError:
            raise UsageError(f"config key {name!r} expects a number, got {raw!r}")
    return raw


def _parse_kv_line(line: str):
    if "=" not in line:
        raise UsageError(f"expected key=value, got {line!r}")
    key, _, value = line.partition("=")
    return key.strip(), value


def read_config_file(path) -> dict:
    """Flat key=value file; blank lines and #-comments ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, raw = _parse_kv_line(line)
        values[key] = _coerce(key, raw)
    return values


def resolve_train_config(config_path, overrides) -> TrainConfig:
    """Defaults < config file < command-line overrides."""
    values = {}
    if config_path:
        values.update(read_config_file(config_path))
    for item in overrides or []:
        key, raw = _parse_kv_line(item)
        values[key] = _coerce(key, raw)
    try:
        return TrainConfig(**values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc))


def write_snapshot(out_dir, cfg: TrainConfig) -> Path:
    """Resolved-config snapshot, itself valid as a --config file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.txt"
    lines = [f"{name} = {getattr(cfg, name)}" for name in sorted(_TRAIN_FIELDS)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _default_out(sub: str, explicit) -> Path:
    if explicit:
        return Path(explicit)
    root = os.environ.get(ENV_OUT_ROOT, "runs")
    return Path(root) / sub


def _dataset_paths(data_dir, split: str):
    data_dir = Path(data_dir)
    manifest = data_dir / f"{split}.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest for split {split!r} at {manifest}")
    exemplars = data_dir / "exemplars.jsonl"
    return manifest, exemplars if exemplars.exists() else None


def _load_model(checkpoint, cfg: TrainConfig, manifest, root) -> SkimFocusNet:
    probe = load_sequence(read_manifest(manifest)[0], root)
    model = SkimFocusNet(cfg.model_config(d_in=probe.d_in), seed=cfg.seed)
    digest, state = load_checkpoint(checkpoint)
    if digest and digest != cfg.digest():
        log.warning("checkpoint digest %s does not match resolved config digest %s", digest, cfg.digest())
    model.store.load_state(state)
    return model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _parse_splits(spec: str) -> dict:
    splits = {}
    for part in spec.split(","):
        key, raw = _parse_kv_line(part)
        try:
            splits[key] = int(raw)
        except ValueError:
            raise UsageError(f"split size for {key!r} must be an integer, got {raw!r}")
    if not splits:
        raise UsageError("empty --splits spec")
    return splits


def cmd_synth(args, multi_action: bool = False) -> int:
    out = _default_out("dataset", args.out)
    cfg = SynthConfig(
        num_classes=args.num_classes,
        d_in=args.d_in,
        cycle_len_range=tuple(args.cycle_len),
        cycles_range=tuple(args.cycles),
        idle_len_range=tuple(args.idle_len),
        noise_std=args.noise_std,
        seed=args.seed,
    )
    splits = _parse_splits(args.splits)
    manifests = build_dataset(splits, cfg, out, multi_action=multi_action or args.multi_action)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {**dataclasses.asdict(cfg), "splits": splits, "multi_action": multi_action or args.multi_action}
    (out / "resolved_config.txt").write_text(
        "\n".join(f"{k} = {v}" for k, v in sorted(snapshot.items())) + "\n", encoding="utf-8"
    )
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_train_config(args.config, args.set)
    out = _default_out("train", args.out)
    manifest, exemplars = _dataset_paths(args.data, "train")
    val_manifest, _ = _dataset_paths(args.data, "val")
    if cfg.mode == "specified" and exemplars is None:
        raise FileNotFoundError(f"missing exemplar manifest in {args.data} (required for specified mode)")
    write_snapshot(out, cfg)
    result = train(cfg, manifest, val_manifest, args.data, out, exemplars_manifest=exemplars)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"trace: {result.trace_path}")
    print(f"best val MAE {result.best_val_mae:.4f} OBO {result.best_val_obo:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_train_config(args.config, args.set)
    out = _default_out("eval", args.out)
    manifest, exemplars = _dataset_paths(args.data, args.split)
    model = _load_model(args.checkpoint, cfg, manifest, args.data)
    write_snapshot(out, cfg)
    report = evaluate(model, manifest, args.data, mode=cfg.mode, exemplars_manifest=exemplars)
    write_report_json(report, out / "report.json")
    write_report_csv(report, out / "report.csv")
    print(f"n={report.n} MAE={report.mae:.4f} OBO={report.obo:.4f}")
    return 0


def cmd_predict(args) -> int:
    cfg = resolve_train_config(args.config, args.set)
    out = _default_out("predict", args.out)
    manifest, exemplars = _dataset_paths(args.data, args.split)
    model = _load_model(args.checkpoint, cfg, manifest, args.data)
    write_snapshot(out, cfg)

    exemplar_entries = {e["id"]: e for e in read_manifest(exemplars)} if exemplars else {}
    wanted = set(args.ids.split(",")) if args.ids else None
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as f:
        for entry in read_manifest(manifest):
            if wanted is not None and entry["id"] not in wanted:
                continue
            seq = load_sequence(entry, args.data)
            exemplar = None
            if cfg.mode == "specified":
                if "exemplar_id" not in entry:
                    raise ValueError(f"missing exemplar for video {entry['id']}")
                exemplar = load_sequence(exemplar_entries[entry["exemplar_id"]], args.data)
            result = count_video(model, seq, mode=cfg.mode, exemplar=exemplar)
            record = {
                "id": seq.id,
                "count": result.count,
                "per_view_sums": result.per_view_sums,
                "density_maps": [d.tolist() for d in result.view_densities],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")
            if args.plots:
                from .plots import plot_density

                plot_density(seq, result, out / f"{seq.id}.png")
            n += 1
    if wanted is not None and n < len(wanted):
        raise ValueError(f"requested ids not all present in split {args.split!r}")
    print(f"wrote {n} predictions to {out / 'predictions.jsonl'}")
    return 0


def cmd_gradcheck(args) -> int:
    """Finite-difference verification of the composed model at small width."""
    cfg = ModelConfig(
        d_in=6, d=8, heads=2, encoder_blocks=1, skim_blocks=1, lsag_blocks=1,
        context_len=16, n_instructive=4, view_len=8, downsample_rate=1,
    )
    net = SkimFocusNet(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(cfg.view_len, cfg.d))
    z = rng.normal(size=(cfg.d,))
    mask = np.ones(cfg.view_len, bool)
    target = rng.normal(size=(cfg.view_len,))
    ctx = rng.normal(size=(cfg.context_len, cfg.d_in)).astype(np.float32)
    ctx_mask = np.ones(cfg.context_len, bool)
    ctx_target = rng.normal(size=(cfg.context_len,))
    view = rng.normal(size=(cfg.view_len, cfg.d_in)).astype(np.float32)

    from .autograd import Tensor

    checks = {
        "lsag+decoder": (
            [n for n in net.store.names() if n.startswith("focus.lsag") or n.startswith("focus.decoder")],
            lambda: mse_masked(net.focus_decoder(net.lsag(Tensor(x), Tensor(z), mask), mask), target, mask),
        ),
        "skim-branch": (
            [n for n in net.store.names() if n.startswith("skim.")],
            lambda: mse_masked(net.skim_forward(ctx, ctx_mask).confidence, ctx_target, ctx_mask),
        ),
        "encoder+view": (
            [n for n in net.store.names() if n.startswith("focus.encoder")],
            lambda: mse_masked(net.view_density(view, mask, Tensor(z)), target, mask),
        ),
    }
    worst = 0.0
    failed = False
    for name, (param_names, loss_fn) in checks.items():
        sub = ParamStore()
        sub._params = {n: net.store[n] for n in param_names}
        report = grad_check(loss_fn, sub, tolerance=args.tolerance)
        worst = max(worst, report.max_error)
        status = "ok" if report.passed else "FAIL"
        print(f"{name}: max relative error {report.max_error:.3e} [{status}]")
        failed = failed or not report.passed
    if failed:
        raise RuntimeError(f"gradient check failed: max relative error {worst:.3e} > {args.tolerance:g}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_train_config(args.config, args.set)
    out = _default_out("ablate", args.out)
    grid = {}
    for item in args.vary:
        key, raw = _parse_kv_line(item)
        grid[key.strip()] = [_coerce(key.strip(), v) for v in raw.split(",")]
    if not grid:
        raise UsageError("ablate requires at least one --vary key=v1,v2")
    train_manifest, exemplars = _dataset_paths(args.data, "train")
    val_manifest, _ = _dataset_paths(args.data, "val")
    test_manifest, _ = _dataset_paths(args.data, args.split)
    write_snapshot(out, cfg)
    rows = ablate(grid, cfg, train_manifest, val_manifest, test_manifest, args.data, out,
                  exemplars_manifest=exemplars)
    for row in rows:
        print(" ".join(f"{k}={v}" for k, v in row.items()))
    print(f"ablation table: {Path(out) / 'ablation.csv'}")
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_density

    cfg = resolve_train_config(args.config, args.set)
    out = _default_out("plot", args.out)
    manifest, exemplars = _dataset_paths(args.data, args.split)
    model = _load_model(args.checkpoint, cfg, manifest, args.data)
    write_snapshot(out, cfg)
    exemplar_entries = {e["id"]: e for e in read_manifest(exemplars)} if exemplars else {}
    wanted = set(args.ids.split(",")) if args.ids else None
    n = 0
    for entry in read_manifest(manifest):
        if wanted is not None and entry["id"] not in wanted:
            continue
        seq = load_sequence(entry, args.data)
        exemplar = None
        if cfg.mode == "specified":
            exemplar = load_sequence(exemplar_entries[entry["exemplar_id"]], args.data)
        result = count_video(model, seq, mode=cfg.mode, exemplar=exemplar)
        path = plot_density(seq, result, out / f"{seq.id}.png")
        print(path)
        n += 1
    if n == 0:
        raise ValueError("no videos matched; nothing to plot")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def _add_config_args(p):
    p.add_argument("--config", help="flat key=value config file (keys are training-config fields)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override a config key (repeatable; applied after --config)")


def _add_synth_args(p):
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT_ROOT}/dataset)")
    p.add_argument("--splits", default="train=200,val=20,test=50",
                   help="comma-separated split sizes, e.g. train=200,val=20,test=50")
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--d-in", type=int, default=16, help="input feature dimensionality")
    p.add_argument("--cycle-len", type=int, nargs=2, default=(12, 32), metavar=("LO", "HI"))
    p.add_argument("--cycles", type=int, nargs=2, default=(3, 10), metavar=("LO", "HI"))
    p.add_argument("--idle-len", type=int, nargs=2, default=(0, 6), metavar=("LO", "HI"))
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="skimfocus", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    p = sub.add_parser("synth",
                       help="generate a single-action synthetic dataset")
    _add_synth_args(p)
    p.add_argument("--multi-action", action="store_true",
                   help="compose multi-action sequences (same as compose-multirep)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compose-multirep",
                       help="generate a multi-action composite dataset with exemplars")
    _add_synth_args(p)
    p.set_defaults(func=lambda a: cmd_synth(a, multi_action=True), multi_action=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory (train.jsonl, val.jsonl, features/)")
    p.add_argument("--out", help=f"run directory (default ${ENV_OUT_ROOT}/train)")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT_ROOT}/eval)")
    _add_config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict",
                       help="per-video counts, per-view sums and density maps as JSON lines")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ids", help="comma-separated video ids (default: whole split)")
    p.add_argument("--plots", action="store_true", help="also render a density plot per video")
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT_ROOT}/predict)")
    _add_config_args(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of analytic gradients at small width")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate",
                       help="train/evaluate over a grid of config overrides")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--vary", action="append", metavar="KEY=V1,V2", default=[],
                   help="grid axis over a config key (repeatable)")
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT_ROOT}/ablate)")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot",
                       help="render observed-vs-predicted density curves per video")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ids", help="comma-separated video ids (default: whole split)")
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT_ROOT}/plot)")
    _add_config_args(p)
    p.set_defaults(func=cmd_plot)

    return parser


def run(argv) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse exits directly for --help
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
