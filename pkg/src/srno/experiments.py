"""Desk-scale experiments: a full train/eval/diagnose run and the sampling-mode ablation.

Each run lives in its own directory and is reused when its ``summary.json``
records the same settings, so repeated invocations only re-evaluate.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import data, diagnostics
from . import evaluate as ev
from . import train as tr
from .config import desk_config, model_config_dict
from .corpus import build_corpus
from .model import SRNO

log = logging.getLogger(__name__)

DESK_EPOCHS = 72
DESK_STEPS_PER_EPOCH = 100
EVAL_SCALES = (2.0, 3.0, 4.0, 6.0, 8.0)


def desk_settings(mode: str = "random", epochs: int = DESK_EPOCHS,
                  steps_per_epoch: int = DESK_STEPS_PER_EPOCH, seed: int = 0):
    return desk_config(sample_mode=mode, epochs=epochs, steps_per_epoch=steps_per_epoch,
                       warmup_epochs=max(1, epochs // 20), checkpoint_every=max(1, epochs // 4),
                       seed=seed)


def ensure_corpus(root) -> tuple[Path, Path]:
    root = Path(root)
    train_dir, val_dir = root / "train", root / "val"
    if train_dir.is_dir() and val_dir.is_dir() and data.list_images(train_dir) and data.list_images(val_dir):
        return train_dir, val_dir
    return build_corpus(root)


def desk_run(root, mode: str = "random", epochs: int = DESK_EPOCHS,
             steps_per_epoch: int = DESK_STEPS_PER_EPOCH, seed: int = 0, force: bool = False) -> dict:
    """Train (or reuse) a desk model, then evaluate and run diagnostics on held-out tiles."""
    root = Path(root)
    train_dir, val_dir = ensure_corpus(root / "corpus")
    mcfg, tcfg = desk_settings(mode, epochs, steps_per_epoch, seed)
    run_dir = root / f"desk-{mode}"
    settings = {"model": model_config_dict(mcfg), "train": tr.config_dict(tcfg)}
    summary_path = run_dir / "summary.json"
    last = run_dir / "last.ckpt"

    cached = None
    if summary_path.exists() and last.exists() and not force:
        cached = json.loads(summary_path.read_text())
        if cached.get("settings") != settings:
            cached = None
    if cached is None:
        dataset = data.load_dataset(train_dir)
        model = SRNO(mcfg, seed=seed)
        t0, c0 = time.perf_counter(), time.process_time()
        tr.train(model, tcfg, dataset, run_dir)
        train_seconds = time.perf_counter() - t0
        train_cpu_seconds = time.process_time() - c0
    else:
        train_seconds = cached["train_seconds"]
        train_cpu_seconds = cached["train_cpu_seconds"]
        model = SRNO.from_checkpoint(last)

    report = ev.evaluate(model, val_dir, EVAL_SCALES)
    (run_dir / "eval.csv").write_text(report.to_csv())
    (run_dir / "eval.txt").write_text(report.to_text())

    paths = data.list_images(val_dir)
    images = [data.load_image(p) for p in paths]
    names = [p.stem for p in paths]
    ranks = diagnostics.rank_trace(model, images, names)
    diagnostics.write_rank_csv(ranks, run_dir / "ranks.csv")
    basis_dir = run_dir / "basis"
    for t in range(1, mcfg.T + 1):
        diagnostics.dump_basis(model, images[0], t, [0, 1, 2, 3], basis_dir, prefix=f"{names[0]}_")

    summary = {
        "settings": settings,
        "train_seconds": train_seconds,
        "train_cpu_seconds": train_cpu_seconds,
        "steps": tcfg.epochs * tcfg.steps_per_epoch,
        "final_loss": _final_loss(run_dir / "metrics.csv"),
        "eval": report.summary(),
        "ranks": [list(r) for r in ranks],
        "params": model.num_params(),
    }
    summary_path.write_text(json.dumps(summary, indent=2))
    return summary


def _final_loss(metrics_path: Path, window: int = 100) -> float:
    with metrics_path.open() as fh:
        losses = [float(r["loss"]) for r in csv.DictReader(fh)]
    return float(np.mean(losses[-window:]))


def sampling_ablation(root, epochs: int = DESK_EPOCHS, steps_per_epoch: int = DESK_STEPS_PER_EPOCH,
                      seed: int = 0) -> str:
    """Train with random and sequential pixel sampling; write and return a comparison table."""
    results = {m: desk_run(root, m, epochs, steps_per_epoch, seed) for m in ("random", "sequential")}
    header = ["mode", "train_cpu_min", "final_loss"] + [f"x{s:g}" for s in EVAL_SCALES]
    rows = []
    for mode, res in results.items():
        psnrs = {e["scale"]: e["psnr"] for e in res["eval"]}
        rows.append([mode, f"{res['train_cpu_seconds'] / 60:.1f}", f"{res['final_loss']:.5f}"]
                    + [f"{psnrs[s]:.3f}" for s in EVAL_SCALES])
    bic = {e["scale"]: e["bicubic_psnr"] for e in results["random"]["eval"]}
    rows.append(["bicubic", "", ""] + [f"{bic[s]:.3f}" for s in EVAL_SCALES])
    root = Path(root)
    with (root / "sampling_ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    widths = [max(len(str(r[i])) for r in [header] + rows) + 2 for i in range(len(header))]
    text = "\n".join("".join(str(c).rjust(wd) for c, wd in zip(r, widths)) for r in [header] + rows) + "\n"
    (root / "sampling_ablation.txt").write_text(text)
    return text
