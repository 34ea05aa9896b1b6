"""Command line interface: ``oneshotseg {gen,train,eval,sweep}``.

Option precedence is command-line flag, then the matching section of the
``--config`` YAML file, then the built-in default.  Exit codes: 0 success,
2 usage error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import yaml

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, GenConfig, generate_dataset, load_dataset, make_splits, save_dataset
from .encoder import EncoderConfig
from .inference import ANNOTATIONS, PROTOTYPE_MODES, evaluate, export_predictions
from .metrics import aggregate_runs, write_report_csv
from .model import ModelConfig
from .trainer import DESK_LR0, REFERENCE_LAMBDA_MCL, TrainConfig, run_training

log = logging.getLogger("oneshotseg")

EXIT_USAGE = 2
EXIT_RUNTIME = 3

LAMBDA_GRID = (0.01, 0.05, 0.075, 0.09, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0)
LR_MULTIPLIERS = (1, 2, 4)
BATCH_GRID = (1, 2, 4)

# published PASCAL-5i mean-IoU (%), kept in summaries for orientation only
PASCAL_REFERENCE = {
    "base": 46.4,
    "support": 51.3,
    "pseudo": 52.0,
    "fused": 52.6,
    "scribble": 51.9,
    "bbox": 50.9,
}

DEFAULTS = {
    "gen": dict(classes=16, per_class=50, size=64, seed=7, force=False),
    "train": dict(
        split=0, episodes=20_000, lr=DESK_LR0, batch_size=1, lambda_mcl=REFERENCE_LAMBDA_MCL, momentum=0.9,
        weight_decay=1e-4, poly_power=0.9, seed=0, no_mcl=False, no_pff=False, no_spt=False,
        freeze_encoder=False, loss_reduction="mean", no_flip=False, val_every=5000, val_episodes=50,
        encoder_widths="16,32,64,64", no_plots=False, force=False,
    ),
    "eval": dict(
        prototype="fused", annotation="dense", shots=1, include_pseudo=False, runs=3, episodes=200, seed=0,
        per_episode_iou=False, export_masks=False, no_plots=False, force=False,
    ),
    "sweep": dict(
        param="lambda_mcl", values=None, lrs=None, batch_sizes=None, split=0, episodes=2000, eval_episodes=100,
        eval_runs=1, seed=0, lr=DESK_LR0, lambda_mcl=REFERENCE_LAMBDA_MCL, encoder_widths="16,32,64,64",
        no_plots=False, force=False,
    ),
}


class UsageError(Exception):
    pass


def _csv_floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="YAML file with gen/train/eval/sweep sections")
    common.add_argument("--log-level", default=argparse.SUPPRESS, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser = argparse.ArgumentParser(prog="oneshotseg", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="render the synthetic dataset to a directory")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--classes", type=int, default=None, help="number of classes, multiple of 4 (16)")
    g.add_argument("--per-class", type=int, default=None, help="images per class (50)")
    g.add_argument("--size", type=int, default=None, help="image side, multiple of 8 (64)")
    g.add_argument("--seed", type=int, default=None, help="generator seed (7)")
    g.add_argument("--force", action="store_true", default=None, help="overwrite a non-empty output directory")

    t = sub.add_parser("train", parents=[common], help="episodic training on one split")
    t.add_argument("--data", type=Path, required=True, help="dataset directory written by gen")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--split", type=int, default=None, help="held-out split 0..3 (0)")
    t.add_argument("--episodes", type=int, default=None, help="training episodes (20000)")
    t.add_argument("--lr", type=float, default=None, help=f"initial learning rate ({DESK_LR0})")
    t.add_argument("--batch-size", type=int, default=None, help="episodes per update (1)")
    t.add_argument("--lambda-mcl", type=float, default=None, help="multi-class loss weight (0.1)")
    t.add_argument("--momentum", type=float, default=None, help="SGD momentum (0.9)")
    t.add_argument("--weight-decay", type=float, default=None, help="L2 weight decay (1e-4)")
    t.add_argument("--poly-power", type=float, default=None, help="poly schedule power (0.9)")
    t.add_argument("--seed", type=int, default=None, help="training seed (0)")
    t.add_argument("--no-mcl", action="store_true", default=None, help="disable multi-class label guidance")
    t.add_argument("--no-pff", action="store_true", default=None, help="single 3x3 conv fusion instead of the pyramid")
    t.add_argument("--no-spt", action="store_true", default=None, help="disable the self-prototype support branch")
    t.add_argument("--freeze-encoder", action="store_true", default=None, help="train post-encoder parameters only")
    t.add_argument("--loss-reduction", choices=["mean", "sum"], default=None, help="pixel loss reduction (mean)")
    t.add_argument("--no-flip", action="store_true", default=None, help="disable random horizontal flips")
    t.add_argument("--val-every", type=int, default=None, help="validate on training classes every N episodes (5000)")
    t.add_argument("--val-episodes", type=int, default=None, help="episodes per validation (50)")
    t.add_argument("--encoder-widths", default=None, help="comma-separated stage widths (16,32,64,64)")
    t.add_argument("--no-plots", action="store_true", default=None, help="skip figure rendering")
    t.add_argument("--force", action="store_true", default=None)

    e = sub.add_parser("eval", parents=[common], help="episodic evaluation of a checkpoint on the held-out classes")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--prototype", choices=PROTOTYPE_MODES, default=None, help="query guidance (fused)")
    e.add_argument("--annotation", choices=ANNOTATIONS, default=None, help="support annotation type (dense)")
    e.add_argument("--shots", type=int, default=None, help="support images per episode (1)")
    e.add_argument("--include-pseudo", action="store_true", default=None, help="k-shot: add the pseudo-prototype")
    e.add_argument("--runs", type=int, default=None, help="independent runs (3)")
    e.add_argument("--episodes", type=int, default=None, help="episodes per run (200)")
    e.add_argument("--seed", type=int, default=None, help="seed of the first run (0)")
    e.add_argument("--per-episode-iou", action="store_true", default=None, help="average per-episode IoUs instead of pooling counts")
    e.add_argument("--export-masks", action="store_true", default=None, help="write first-run masks as PNG")
    e.add_argument("--no-plots", action="store_true", default=None)
    e.add_argument("--force", action="store_true", default=None)

    s = sub.add_parser("sweep", parents=[common], help="short trainings over lambda_mcl or an lr x batch grid")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--param", choices=["lambda_mcl", "lr_batch"], default=None, help="swept parameter (lambda_mcl)")
    s.add_argument("--values", default=None, help="comma-separated lambda values (11-point grid)")
    s.add_argument("--lrs", default=None, help="comma-separated learning rates (lr x 1,2,4)")
    s.add_argument("--batch-sizes", default=None, help="comma-separated batch sizes (1,2,4)")
    s.add_argument("--split", type=int, default=None)
    s.add_argument("--episodes", type=int, default=None, help="training episodes per point (2000)")
    s.add_argument("--eval-episodes", type=int, default=None, help="evaluation episodes per run (100)")
    s.add_argument("--eval-runs", type=int, default=None, help="evaluation runs per point (1)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--lr", type=float, default=None, help="learning rate for the lambda sweep")
    s.add_argument("--lambda-mcl", type=float, default=None, help="lambda for the lr x batch sweep")
    s.add_argument("--encoder-widths", default=None)
    s.add_argument("--no-plots", action="store_true", default=None)
    s.add_argument("--force", action="store_true", default=None)
    return parser


def resolve(args: argparse.Namespace, file_config: dict) -> dict:
    """Merge flag > config file section > default for the active command."""
    defaults = DEFAULTS[args.command]
    section = file_config.get(args.command, {}) or {}
    unknown = set(section) - set(defaults)
    if unknown:
        raise UsageError(f"unknown keys in [{args.command}] config section: {sorted(unknown)}")
    opts = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        opts[key] = flag if flag is not None else section.get(key, default)
    for key in ("out", "data", "checkpoint"):
        if hasattr(args, key):
            opts[key] = getattr(args, key)
    return opts


def load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict) or set(data) - set(DEFAULTS):
        raise UsageError(f"config {path} must map sections {sorted(DEFAULTS)} to options")
    return data


def prepare_output(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_run_manifest(out: Path, command: str, opts: dict, config_path, started: str, artifacts, checkpoint=None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config_path": str(config_path) if config_path else None,
        "seed": opts.get("seed"),
        "checkpoint": str(checkpoint) if checkpoint else None,
        "output_dir": str(out),
        "options": {k: str(v) if isinstance(v, Path) else v for k, v in opts.items()},
        "started": started,
        "finished": _now(),
        "artifacts": sorted(str(Path(a).relative_to(out)) if Path(a).is_relative_to(out) else str(a) for a in artifacts),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _widths(text) -> tuple:
    widths = tuple(int(v) for v in str(text).split(","))
    if len(widths) != 4:
        raise UsageError("--encoder-widths needs four comma-separated integers")
    return widths


def cmd_gen(opts: dict, config_path=None) -> int:
    started = _now()
    out = prepare_output(opts["out"], opts["force"])
    cfg = GenConfig(opts["classes"], opts["per_class"], opts["size"], opts["seed"])
    try:
        cfg.validate()
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    ds = generate_dataset(cfg)
    manifest = save_dataset(ds, out)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    log.info("wrote %d samples to %s (manifest sha256 %s)", len(ds), out, digest[:12])
    write_run_manifest(out, "gen", opts, config_path, started, [manifest])
    return 0


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(
        episodes=opts["episodes"], lr0=opts["lr"], momentum=opts["momentum"], weight_decay=opts["weight_decay"],
        poly_power=opts["poly_power"], batch_size=opts["batch_size"], lambda_mcl=opts["lambda_mcl"],
        seed=opts["seed"], use_pff=not opts["no_pff"], use_mcl=not opts["no_mcl"], use_spt=not opts["no_spt"],
        freeze_encoder=opts["freeze_encoder"], loss_reduction=opts["loss_reduction"], hflip=not opts["no_flip"],
        val_every=opts["val_every"], val_episodes=opts["val_episodes"],
    )


def loss_rows(trace, every: int, lrs=None) -> list[dict]:
    rows = []
    for start in range(0, len(trace), every):
        chunk = trace[start : start + every]
        means = [sum(t[i] for t in chunk) / len(chunk) for i in range(4)]
        rows.append({"episode": start + len(chunk), "l_q": means[0], "l_s": means[1], "l_seg": means[2], "total": means[3]})
    return rows


def _write_csv(path: Path, rows: list[dict], columns=None) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns or list(rows[0]) if rows else columns or [])
        writer.writeheader()
        writer.writerows(rows)
    return path


def cmd_train(opts: dict, config_path=None) -> int:
    started = _now()
    try:
        cfg = _train_config(opts)
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = prepare_output(opts["out"], opts["force"])
    ds = load_dataset(opts["data"])
    split = make_splits(ds.config.num_classes, opts["split"])
    mcfg = ModelConfig(encoder=EncoderConfig(channel_widths=_widths(opts["encoder_widths"])))
    ckpt = run_training(ds, split, cfg, mcfg)
    ckpt_path = save_checkpoint(ckpt, out / "checkpoint.ckpt")
    rows = loss_rows(ckpt.history["loss_trace"], 100)
    artifacts = [ckpt_path, _write_csv(out / "loss.csv", rows, ["episode", "l_q", "l_s", "l_seg", "total"])]
    if ckpt.history["validation"]:
        artifacts.append(_write_csv(out / "validation.csv", ckpt.history["validation"]))
    if not opts["no_plots"]:
        from .plotting import plot_loss_curve

        artifacts.append(plot_loss_curve(rows, out / "loss_curve.png", f"split {split.split_index}, {cfg.arm}"))
    write_run_manifest(out, "train", opts, config_path, started, artifacts, ckpt_path)
    log.info("checkpoint written to %s", ckpt_path)
    return 0


def cmd_eval(opts: dict, config_path=None) -> int:
    started = _now()
    if opts["shots"] < 1 or opts["runs"] < 1 or opts["episodes"] < 1:
        raise UsageError("--shots, --runs and --episodes must be positive")
    out = prepare_output(opts["out"], opts["force"])
    ckpt = load_checkpoint(opts["checkpoint"])
    ds = load_dataset(opts["data"])
    split = make_splits(ds.config.num_classes, ckpt.split_index)
    settings = dict(
        prototype=opts["prototype"], shots=opts["shots"], include_pseudo=opts["include_pseudo"],
        annotation=opts["annotation"], accumulate=not opts["per_episode_iou"],
    )
    reports, details = [], []
    for r in range(opts["runs"]):
        reports.append(
            evaluate(ckpt.model, ds, split, episodes=opts["episodes"], seed=opts["seed"] + r,
                     details=details if r == 0 else None, **settings)
        )
        log.info("run %d: mean-IoU %.4f binary-IoU %.4f", r, reports[-1].mean_iou, reports[-1].binary_iou)
    agg = aggregate_runs(reports)
    artifacts = [write_report_csv(out / "report.csv", reports, agg)]
    arm = opts["annotation"] if opts["annotation"] != "dense" else opts["prototype"]
    summary = {
        "split": split.split_index,
        "test_classes": list(split.test_classes),
        "settings": settings,
        "runs": agg.runs,
        "episodes_per_run": agg.episodes_per_run,
        "mean_iou": agg.mean_iou,
        "binary_iou": agg.binary_iou,
        "per_class_iou": {str(k): v for k, v in agg.per_class_iou.items()},
        "per_run": [{"seed": r.seed, "mean_iou": r.mean_iou, "binary_iou": r.binary_iou} for r in reports],
        "pascal5i_reference_mean_iou": PASCAL_REFERENCE.get(arm) if opts["shots"] == 1 else None,
        "checkpoint": str(opts["checkpoint"]),
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    artifacts.append(summary_path)
    if opts["export_masks"]:
        export_predictions(details, out)
        artifacts += [out / "episodes.jsonl", out / "masks"]
    if not opts["no_plots"]:
        from .plotting import plot_examples, plot_per_class_iou

        title = f"split {split.split_index}, {opts['prototype']}, {opts['annotation']}, {opts['shots']}-shot"
        artifacts.append(plot_per_class_iou(agg.per_class_iou, agg.mean_iou, out / "per_class_iou.png", title))
        artifacts.append(plot_examples(details, out / "examples.png"))
    write_run_manifest(out, "eval", opts, config_path, started, artifacts, opts["checkpoint"])
    log.info("mean-IoU %.4f over %d runs x %d episodes", agg.mean_iou, agg.runs, agg.episodes_per_run)
    return 0


SWEEP_COLUMNS = ("param", "lambda_mcl", "lr", "batch_size", "mean_iou", "binary_iou")


def cmd_sweep(opts: dict, config_path=None) -> int:
    started = _now()
    out = prepare_output(opts["out"], opts["force"])
    ds = load_dataset(opts["data"])
    split = make_splits(ds.config.num_classes, opts["split"])
    mcfg = ModelConfig(encoder=EncoderConfig(channel_widths=_widths(opts["encoder_widths"])))
    base = TrainConfig(episodes=opts["episodes"], lr0=opts["lr"], lambda_mcl=opts["lambda_mcl"], seed=opts["seed"], val_every=0)
    if opts["param"] == "lambda_mcl":
        grid = [(v, base.lr0, 1) for v in (_csv_floats(opts["values"]) or LAMBDA_GRID)]
    else:
        lrs = _csv_floats(opts["lrs"]) or [base.lr0 * m for m in LR_MULTIPLIERS]
        batches = [int(b) for b in (_csv_floats(opts["batch_sizes"]) or BATCH_GRID)]
        grid = [(base.lambda_mcl, lr, b) for lr in lrs for b in batches]
    rows = []
    for lam, lr, bs in grid:
        cfg = replace(base, lambda_mcl=lam, lr0=lr, batch_size=bs, episodes=base.episodes)
        ckpt = run_training(ds, split, cfg, mcfg)
        _, agg = aggregate_reports(ckpt.model, ds, split, opts)
        rows.append({"param": opts["param"], "lambda_mcl": lam, "lr": lr, "batch_size": bs,
                     "mean_iou": f"{agg.mean_iou:.6f}", "binary_iou": f"{agg.binary_iou:.6f}"})
        log.info("lambda %.3g lr %.3g batch %d -> mean-IoU %.4f", lam, lr, bs, agg.mean_iou)
    key = (lambda r: r["lambda_mcl"]) if opts["param"] == "lambda_mcl" else (lambda r: (r["lr"], r["batch_size"]))
    rows.sort(key=key)
    artifacts = [_write_csv(out / "sweep.csv", rows, SWEEP_COLUMNS)]
    if not opts["no_plots"]:
        from .plotting import plot_sweep

        artifacts.append(plot_sweep(rows, opts["param"], out / "sweep.png"))
    write_run_manifest(out, "sweep", opts, config_path, started, artifacts)
    return 0


def aggregate_reports(model, ds, split, opts):
    reports = [evaluate(model, ds, split, episodes=opts["eval_episodes"], seed=opts["seed"] + r) for r in range(opts["eval_runs"])]
    return reports, aggregate_runs(reports)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.config = getattr(args, "config", None)
    logging.basicConfig(level=getattr(args, "log_level", "INFO"), format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        opts = resolve(args, load_config_file(args.config))
        return COMMANDS[args.command](opts, args.config)
    except UsageError as exc:
        print(f"oneshotseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"oneshotseg {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
