"""Command-line entry point: ``epifusion {gen,field,train,eval,attn,ablate}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .ablation import SUITES, run_suite, write_rows
from .epipolar import FeatureGrid, epipolar_field, write_field, write_pgm
from .exceptions import DegenerateGeometry, FormatError, NonFinite
from .geometry import load_cameras
from .model import TrainConfig, load_checkpoint, save_checkpoint
from .synthetic import RenderConfig, Rig, generate_dataset, make_rig, read_dataset, standard_rig, write_dataset
from .training import dump_attention, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("epifusion")


class UsageError(Exception):
    pass


def _pixel(text):
    try:
        u, v = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected u,v but got {text!r}")
    return np.array([u, v])


def _rig(cams: int, seed: int, size: int = 128) -> Rig:
    if cams == 2:
        return standard_rig(seed)
    return make_rig(cams, image_size=(size, size), seed=seed)


def _split_seeds(seed: int):
    # same streams as standard_dataset: train first, test second
    return np.random.SeedSequence(seed).spawn(2)


def cmd_gen(args) -> int:
    if args.cams < 2:
        raise UsageError("--cams must be at least 2")
    if args.frames < 1:
        raise UsageError("--frames must be positive")
    rig = _rig(args.cams, args.seed)
    render = RenderConfig(occlude_fraction=args.occlude, occlude_joints=args.occlude_joints)
    render.validate(rig.n_views, 8)
    train_ss, test_ss = _split_seeds(args.seed)
    out = Path(args.out)
    if args.test_frames:
        write_dataset(out / "train", generate_dataset(rig, args.frames, train_ss, render))
        write_dataset(out / "test", generate_dataset(rig, args.test_frames, test_ss, render))
    else:
        write_dataset(out, generate_dataset(rig, args.frames, train_ss, render))
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_field(args) -> int:
    if args.cameras:
        cams = load_cameras(args.cameras)
    elif args.data:
        cams = read_dataset(args.data).rig.cameras
    else:
        cams = standard_rig(args.seed).cameras
    if len(cams) < 2:
        raise FormatError("need at least two cameras")
    if not 0 <= args.src < len(cams) or not 0 <= args.dst < len(cams) or args.src == args.dst:
        raise UsageError("--src and --dst must be distinct camera indices")
    if args.gamma <= 0:
        raise UsageError("--gamma must be positive")
    c1, c2 = cams[args.src], cams[args.dst]
    grid = FeatureGrid.for_image(c2.height, c2.width, args.stride)
    fld = epipolar_field(c1, c2, args.query, grid, args.gamma)
    write_field(args.out, fld.scores, fld.gamma, fld.query)
    if args.pgm:
        write_pgm(args.pgm, fld.scores)
    if fld.degenerate:
        log.warning("query ray is parallel to the baseline; wrote a uniform field")
    return EXIT_OK


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)
    data = read_dataset(args.data)
    out = Path(args.out)
    csv_path = args.csv or out.with_suffix(".csv")
    model, _ = train(config, data, csv_path=csv_path)
    save_checkpoint(out, model)
    log.info("wrote %s and %s", out, csv_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    data = read_dataset(args.data)
    report = evaluate(model, data, args.decode)
    report.save(args.report)
    report.write_tables(str(Path(args.report).with_suffix("")))
    print(json.dumps({"mpjpe_mm": report.mpjpe_mean, "jdr_percent": report.jdr_mean}))
    return EXIT_OK


def cmd_attn(args) -> int:
    model = load_checkpoint(args.ckpt)
    data = read_dataset(args.data)
    try:
        paths = dump_attention(model, data, args.frame, args.view, args.query, args.out)
    except IndexError as exc:
        raise UsageError(str(exc)) from exc
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    if args.epochs is not None:
        base = replace(base, epochs=args.epochs, milestones=tuple(m for m in base.milestones if m < args.epochs))
    if args.data:
        train_set = read_dataset(Path(args.data) / "train")
        test_set = read_dataset(Path(args.data) / "test")
    else:
        seed = base.seed
        rig = standard_rig(seed)
        tr, te = _split_seeds(seed)
        train_set = generate_dataset(rig, args.frames, tr)
        test_set = generate_dataset(rig, args.test_frames, te)
    suites = list(SUITES) if args.suite == "all" else [args.suite]
    out = Path(args.out)
    rows, cache = [], {}
    for suite in suites:
        rows += run_suite(suite, base, train_set, test_set, cache=cache)
        write_rows(out, rows)
    log.info("wrote %s", out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epifusion", description="Two-view geometry-aware fusion toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a multi-view skeleton dataset")
    g.add_argument("--cams", type=int, default=2)
    g.add_argument("--frames", type=int, default=2000)
    g.add_argument("--test-frames", type=int, default=0, help="also write a test split; output gets train/ and test/")
    g.add_argument("--occlude", type=float, default=0.25, help="fraction of frames with occluded joints")
    g.add_argument("--occlude-joints", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("field", help="emit the epipolar field of one query pixel")
    f.add_argument("--query", type=_pixel, required=True, metavar="U,V")
    f.add_argument("--gamma", type=float, default=10.0)
    f.add_argument("--out", required=True)
    f.add_argument("--pgm", help="also write an 8-bit PGM image")
    f.add_argument("--cameras", help="camera JSON file; defaults to the standard rig")
    f.add_argument("--data", help="take cameras from a dataset directory")
    f.add_argument("--src", type=int, default=0)
    f.add_argument("--dst", type=int, default=1)
    f.add_argument("--stride", type=int, default=8)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_field)

    t = sub.add_parser("train", help="train a fusion model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--csv", help="per-epoch log; defaults to the checkpoint path with .csv")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="JSON report path; CSV tables are written alongside")
    e.add_argument("--decode", choices=("gaussian", "quarter"), default="gaussian")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attn", help="dump cross-view attention and the matching epipolar field")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--frame", type=int, required=True)
    a.add_argument("--view", type=int, required=True)
    a.add_argument("--query", type=_pixel, required=True, metavar="U,V")
    a.add_argument("--out", default="attention")
    a.set_defaults(func=cmd_attn)

    b = sub.add_parser("ablate", help="run an ablation sweep")
    b.add_argument("--suite", choices=sorted(SUITES) + ["all"], required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--data", help="directory with train/ and test/ splits; generated when omitted")
    b.add_argument("--frames", type=int, default=2000)
    b.add_argument("--test-frames", type=int, default=400)
    b.add_argument("--epochs", type=int)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"epifusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFinite as exc:
        where = f" at step {exc.step}" if exc.step is not None else ""
        print(f"epifusion: numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DegenerateGeometry, OSError, ValueError) as exc:
        print(f"epifusion: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
