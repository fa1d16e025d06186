"""Command-line entry point: ``srno {train,eval,infer,bench,diag,corpus,desk}``.

Data goes to stdout, logs to stderr. Any failure exits nonzero.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import data, diagnostics
from . import evaluate as ev
from .config import config_from_dict, parse_config
from .errors import CheckpointError, ConfigError, NumericError, ShapeError

log = logging.getLogger("srno")


def _floats(text: str):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _ints(text: str):
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}")
    return [int(v) for v in vals]


def _load_model(path):
    from .model import SRNO

    return SRNO.from_checkpoint(path)


def cmd_train(args):
    from . import train as tr
    from .model import SRNO

    mcfg, tcfg = parse_config(args.config) if args.config else config_from_dict({})
    dataset = data.load_dataset(args.data)
    val = data.load_dataset(args.val) if args.val else None
    model = SRNO(mcfg, seed=tcfg.seed)
    log.info("training %d params on %d images -> %s", model.num_params(), len(dataset), args.out)
    last = tr.train(model, tcfg, dataset, args.out, val_set=val, resume=args.resume,
                    max_steps=args.max_steps)
    print(last)


def cmd_eval(args):
    model = _load_model(args.model)
    report = ev.evaluate(model, args.data, args.scales, tile=args.tile, dump_dir=args.dump_dir)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    sys.stdout.write(report.to_text())


def cmd_infer(args):
    from .model import upscale_size

    model = _load_model(args.model)
    img = data.load_image(args.input)
    if args.size:
        out_h, out_w = args.size
        if out_h < 1 or out_w < 1:
            raise ValueError(f"--size must be positive, got {out_h} {out_w}")
    else:
        if args.scale <= 0:
            raise ValueError(f"--scale must be > 0, got {args.scale}")
        out_h, out_w = upscale_size(img.height, img.width, args.scale)
    t0 = time.perf_counter()
    pred = model.predict(img, out_h, out_w, tile=args.tile)
    ms = 1e3 * (time.perf_counter() - t0)
    data.save_image(pred, args.out)
    print(f"{args.out}\t{out_h}x{out_w}\t{ms:.1f} ms")


def cmd_bench(args):
    model = _load_model(args.model)
    rows = ev.bench_runtime(model, args.sizes, repeats=args.repeats)
    sys.stdout.write(ev.format_bench(rows))


def cmd_diag(args):
    model = _load_model(args.model)
    images = [data.load_image(p) for p in args.input]
    names = [Path(p).stem for p in args.input]
    if args.what == "rank":
        rows = diagnostics.rank_trace(model, images, names, scale=args.scale, tol=args.tol)
        if args.out:
            diagnostics.write_rank_csv(rows, args.out)
        print("image,layer,rank")
        for r in rows:
            print(",".join(str(v) for v in r))
    else:
        out_dir = Path(args.out or "basis")
        layers = args.layer or list(range(1, model.cfg.T + 1))
        for name, img in zip(names, images):
            for t in layers:
                for p in diagnostics.dump_basis(model, img, t, args.columns, out_dir, scale=args.scale,
                                                prefix=f"{name}_"):
                    print(p)


def cmd_corpus(args):
    from .corpus import build_corpus

    for d in build_corpus(args.out):
        print(d)


def cmd_desk(args):
    from . import experiments as ex

    if args.mode == "both":
        sys.stdout.write(ex.sampling_ablation(args.out, args.epochs, args.steps_per_epoch, args.seed))
    else:
        summary = ex.desk_run(args.out, args.mode, args.epochs, args.steps_per_epoch, args.seed,
                              force=args.force)
        sys.stdout.write((Path(args.out) / f"desk-{args.mode}" / "eval.txt").read_text())
        log.info("trained %d steps in %.1f min", summary["steps"], summary["train_seconds"] / 60)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srno", description="Super-resolution neural operator toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("-c", "--config", help="JSON config (default: paper-scale settings)")
    t.add_argument("-d", "--data", required=True, help="directory of training images")
    t.add_argument("-o", "--out", required=True, help="run directory")
    t.add_argument("--val", help="directory of validation images")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--max-steps", type=int, help="stop after this many global steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR against bicubic on a directory of HR images")
    e.add_argument("-m", "--model", required=True)
    e.add_argument("-d", "--data", required=True)
    e.add_argument("--scales", type=_floats, default=[2.0, 3.0, 4.0])
    e.add_argument("--tile", type=int, help="evaluate HR grid in independent tiles (approximate)")
    e.add_argument("--csv", help="also write the report as CSV")
    e.add_argument("--dump-dir", help="write predicted PNGs here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="super-resolve one image")
    i.add_argument("-m", "--model", required=True)
    i.add_argument("-i", "--input", required=True)
    g = i.add_mutually_exclusive_group(required=True)
    g.add_argument("--scale", type=float)
    g.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    i.add_argument("-o", "--out", required=True)
    i.add_argument("--tile", type=int)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="runtime versus query count")
    b.add_argument("-m", "--model", required=True)
    b.add_argument("--sizes", type=_ints, default=[4096, 16384, 65536])
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("diag", help="latent ranks or basis images")
    d.add_argument("what", choices=["rank", "basis"])
    d.add_argument("-m", "--model", required=True)
    d.add_argument("-i", "--input", required=True, nargs="+")
    d.add_argument("--scale", type=float, default=2.0)
    d.add_argument("--tol", type=float, default=1e-4)
    d.add_argument("--layer", type=_ints)
    d.add_argument("--columns", type=_ints, default=[0, 1, 2, 3])
    d.add_argument("-o", "--out", help="rank CSV path or basis directory")
    d.set_defaults(func=cmd_diag)

    c = sub.add_parser("corpus", help="build the desk corpus from bundled sample images")
    c.add_argument("-o", "--out", required=True)
    c.set_defaults(func=cmd_corpus)

    k = sub.add_parser("desk", help="desk-scale train + eval + diagnostics run")
    k.add_argument("-o", "--out", default="runs")
    k.add_argument("--mode", choices=["random", "sequential", "both"], default="random")
    k.add_argument("--epochs", type=int, default=None)
    k.add_argument("--steps-per-epoch", type=int, default=None)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--force", action="store_true", help="retrain even if a matching run exists")
    k.set_defaults(func=cmd_desk)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "desk":
        from . import experiments as ex

        args.epochs = args.epochs or ex.DESK_EPOCHS
        args.steps_per_epoch = args.steps_per_epoch or ex.DESK_STEPS_PER_EPOCH
    try:
        args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 1
    except (CheckpointError, data.ImageIOError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return 1
    except (ShapeError, NumericError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
