"""Command-line entry points: ``smartmim pretrain`` and ``smartmim eval <task>``."""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import read_manifest
from .config import config_dict, dump_config, parse_config
from .errors import SmartError
from .phantoms import SHAPE_CLASSES, VolumeSample, load_volume, phantom_set, write_raw_volume

log = logging.getLogger("smartmim")

EVAL_TASKS = ("cluster", "probe", "finetune", "localize", "attention", "plot")
# phantom classes used when no --data is given
TASK_CLASSES = {"cluster": ("sphere", "box", "shell"), "plot": ("sphere", "box", "shell"),
                "probe": ("sphere", "box"), "finetune": ("sphere", "box"),
                "localize": ("sphere",), "attention": ("sphere",)}


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    code_version: str
    seed: int
    started: str
    finished: str = ""
    outputs: list = dataclasses.field(default_factory=list)
    status: str = "running"

    def write(self, path: Path):
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _setup_logging(out: Path, name: str) -> Path:
    path = out / f"{name}.log"
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    root = logging.getLogger("smartmim")
    root.handlers.clear()
    root.setLevel(logging.INFO)
    for h in (logging.StreamHandler(sys.stdout), logging.FileHandler(path, mode="w")):
        h.setFormatter(fmt)
        root.addHandler(h)
    return path


# ---------------------------------------------------------------- pretrain

def cmd_pretrain(args) -> int:
    from .train import Pretrainer

    overrides = list(args.set or [])
    if args.steps is not None:
        overrides.append(f"train.steps={args.steps}")
    cfg = parse_config(args.config, overrides, profile=args.profile)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("pretrain", config_dict(cfg), __version__, cfg.seed, _now())
    outputs = [_setup_logging(out, "pretrain")]
    cfg_path = out / "config.ini"
    cfg_path.write_text(dump_config(cfg))
    outputs.append(cfg_path)

    if args.resume:
        trainer = Pretrainer.load(args.resume)
        log.info("resumed from %s at step %d", args.resume, trainer.step)
    else:
        trainer = Pretrainer(cfg)
    records = out / "steps.jsonl"
    if trainer.step == 0 and records.exists():
        records.unlink()
    outputs.append(records)
    ckpt = out / "checkpoint.smrt"

    def report(rec):
        if rec.step % args.log_every == 0 or rec.step == cfg.total_steps - 1:
            log.info("step %d total %.4f amip %.4f ampd %.4f aitd %.4f gitd %.4f lr %.2e m %.5f",
                     rec.step, rec.total, rec.amip, rec.ampd, rec.aitd, rec.gitd, rec.lr, rec.momentum)
        if args.save_every and (rec.step + 1) % args.save_every == 0:
            trainer.save(ckpt)

    trainer.run(records_path=records, callback=report)
    trainer.save(ckpt)
    outputs.append(ckpt)
    manifest.outputs = [str(p) for p in outputs]
    manifest.finished, manifest.status = _now(), "ok"
    manifest.write(out / "manifest.json")
    log.info("wrote %s", out / "manifest.json")
    return 0


# ---------------------------------------------------------------- eval

def eval_volumes(task: str, cfg, n: int, seed: int, data: Optional[Sequence[str]] = None) -> list:
    """Volumes for an eval task: files given with ``--data`` or seeded phantoms."""
    if data:
        return [load_volume(p) for p in data]
    d = cfg.data
    return phantom_set(n, seed, grid_size=d.phantom_size, n_structures=1,
                       structure_classes=TASK_CLASSES[task], intensity_contrast=d.contrast,
                       size_range=(d.size_min, d.size_max))


def _eval_task(task: str, net, cfg, vols: list, args, out: Path) -> tuple[object, list]:
    from . import evaluation as ev

    header = {"task": task, "checkpoint": str(Path(args.checkpoint).name), "role": args.role,
              "n": len(vols), "seed": args.seed}
    extra = []
    if task in ("cluster", "plot"):
        fm = ev.extract_features(net, vols, args.source)
        header["source"] = fm.source
        if task == "plot":
            extra = list(ev.embedding_plot(fm, out / "embedding"))
        report = ev.cluster_metrics(fm)
        header["definition"] = report.definition
    elif task == "probe":
        fm = ev.extract_features(net, vols, args.source)
        report = ev.linear_probe(fm, folds=args.folds, seed=args.seed, mode=args.metric_mode)
        header.update(source=fm.source, metric_mode=args.metric_mode)
    elif task == "finetune":
        fcfg = ev.FinetuneConfig(steps=args.ft_steps, data_fraction=args.data_fraction,
                                 seed=args.seed, metric_mode=args.metric_mode)
        report = ev.finetune(net, vols, fcfg)
        header.update(metric_mode=args.metric_mode, data_fraction=args.data_fraction)
    elif task == "localize":
        dscs = [ev.zero_shot_localize(net, v, percentile=args.percentile) for v in vols]
        report = ev.localization_report(dscs, args.percentile)
        header["percentile"] = args.percentile
    else:  # attention
        vol = vols[0]
        att = ev.attention_volume(net, vol)
        path = out / "attention.vol"
        write_raw_volume(path, VolumeSample(att.values.astype(np.float32), vol.spacing, vol.label, vol.roi))
        extra = [path]
        crop = ev._crop_for(net, vol)[None]
        cells = ev.satt_cells(net, crop)[0]
        report = {"degenerate": att.degenerate, "satt_cells": cells.tolist()}
        if vol.roi is not None:
            size = net.cfg.img_size
            off = [(s - size) // 2 for s in vol.roi.shape]
            roi = vol.roi[off[0]:off[0] + size, off[1]:off[1] + size, off[2]:off[2] + size]
            if roi.any():
                mass, frac = ev.satt_mass_ratio(cells, roi)
                report.update(roi_mass=mass, roi_cell_fraction=frac)
        header["percentile"] = args.percentile
    return ev.write_report(report, out / task, header), extra


def cmd_eval(args) -> int:
    from .train import load_encoder

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise SmartError(f"checkpoint not found: {ckpt}")
    read_manifest(ckpt)  # verifies header and checksum before any compute
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [_setup_logging(out, f"eval-{args.task}")]
    net, cfg = load_encoder(ckpt, args.role)
    manifest = RunManifest(f"eval {args.task}", config_dict(cfg), __version__, args.seed, _now())
    vols = eval_volumes(args.task, cfg, args.n, args.seed, args.data)
    log.info("evaluating %s on %d volumes", args.task, len(vols))
    files, extra = _eval_task(args.task, net, cfg, vols, args, out)
    outputs += list(files) + list(extra)
    manifest.outputs = [str(p) for p in outputs]
    manifest.finished, manifest.status = _now(), "ok"
    manifest.write(out / f"manifest-{args.task}.json")
    for p in files:
        log.info("wrote %s", p)
    return 0


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smartmim", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("pretrain", help="co-distillation pretraining")
    pt.add_argument("--config", help="sectioned key=value config file")
    pt.add_argument("--profile", default="desk", help="built-in defaults: desk or paper")
    pt.add_argument("--steps", type=int, help="shorthand for --set train.steps=N")
    pt.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override (repeatable)")
    pt.add_argument("--out", required=True, help="output directory")
    pt.add_argument("--resume", help="checkpoint to continue from")
    pt.add_argument("--save-every", type=int, default=0)
    pt.add_argument("--log-every", type=int, default=10)
    pt.set_defaults(func=cmd_pretrain)

    ev = sub.add_parser("eval", help="downstream evaluation of a checkpoint")
    ev.add_argument("task", choices=EVAL_TASKS)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--data", nargs="+", help="volume files (raw or NIfTI); default: seeded phantoms")
    ev.add_argument("--n", type=int, default=30, help="number of phantoms when --data is absent")
    ev.add_argument("--seed", type=int, default=1234)
    ev.add_argument("--role", choices=("teacher", "student"), default="teacher")
    ev.add_argument("--source", choices=("cls", "global_pool"), default="cls")
    ev.add_argument("--percentile", type=float, default=90.0)
    ev.add_argument("--metric-mode", choices=("threshold", "average"), default="threshold")
    ev.add_argument("--folds", type=int, default=3)
    ev.add_argument("--ft-steps", type=int, default=60)
    ev.add_argument("--data-fraction", type=float, default=1.0)
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SmartError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
