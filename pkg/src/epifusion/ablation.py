"""Ablation sweeps over field sharpness, depth, heads and positional-encoding arms."""
from __future__ import annotations

import csv
import logging
from dataclasses import replace

import numpy as np

from .model import TrainConfig
from .training import CSV_SCHEMA, evaluate, train

log = logging.getLogger(__name__)

SUITES = {
    "gamma": ("gamma", (1.0, 10.0, 100.0, 1000.0)),
    "layers": ("layers", (1, 2, 3, 4)),
    "heads": ("heads", (1, 2, 4, 8)),
    "pe": ("arm", ("full", "gpe-no-lpos", "learnable-3d-pe", "no-3d-pe", "single-view")),
}

ABLATION_COLUMNS = (
    "schema",
    "suite",
    "value",
    "pe_mode",
    "cross_view",
    "gamma",
    "layers",
    "heads",
    "epochs",
    "seed",
    "n_train",
    "n_test",
    "final_train_loss",
    "mpjpe_mm",
    "mpjpe_occluded_mm",
    "mpjpe_visible_mm",
    "jdr_percent",
)


def arm_config(base: TrainConfig, suite: str, value) -> TrainConfig:
    """Config of one sweep point; the ``pe`` suite's ``single-view`` arm masks cross-view attention."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    if suite == "pe":
        if value == "single-view":
            return replace(base, pe_mode="no-3d-pe", cross_view=False)
        return replace(base, pe_mode=value, cross_view=True)
    key = SUITES[suite][0]
    return replace(base, **{key: type(getattr(base, key))(value)})


def run_point(config: TrainConfig, train_set, test_set, suite="", value="") -> dict:
    model, history = train(config, train_set)
    report = evaluate(model, test_set)
    return dict(
        schema=CSV_SCHEMA,
        suite=suite,
        value=value,
        pe_mode=config.pe_mode,
        cross_view=config.cross_view,
        gamma=config.gamma,
        layers=config.layers,
        heads=config.heads,
        epochs=config.epochs,
        seed=config.seed,
        n_train=len(train_set),
        n_test=len(test_set),
        final_train_loss=history[-1]["train_loss"] if config.epochs else "",
        mpjpe_mm=report.mpjpe_mean,
        mpjpe_occluded_mm=report.mpjpe_occluded,
        mpjpe_visible_mm=report.mpjpe_visible,
        jdr_percent=report.jdr_mean,
    )


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != ABLATION_COLUMNS:
            raise ValueError(f"{path}: unexpected ablation columns {reader.fieldnames}")
        return list(reader)


def run_suite(suite: str, base: TrainConfig, train_set, test_set, out=None, values=None, cache=None) -> list[dict]:
    """Train and evaluate every point of ``suite``; rows are written to ``out`` when given.

    ``cache`` maps ``TrainConfig.to_text()`` to an already computed row so
    that identical configurations shared between suites train only once.
    """
    key, default = SUITES.get(suite, (None, None))
    if key is None:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    rows = []
    for value in default if values is None else values:
        cfg = arm_config(base, suite, value)
        text = cfg.to_text()
        if cache is not None and text in cache:
            row = dict(cache[text], suite=suite, value=value)
        else:
            log.info("ablation %s = %s", suite, value)
            row = run_point(cfg, train_set, test_set, suite, value)
            if cache is not None:
                cache[text] = row
        rows.append(row)
        if out is not None:
            write_rows(out, rows)
    return rows
