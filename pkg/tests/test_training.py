import csv

import numpy as np
import pytest
import torch
from sklearn.base import clone

from epifusion.ablation import ABLATION_COLUMNS, arm_config, read_rows, run_suite, write_rows
from epifusion.estimator import TransFusionEstimator
from epifusion.exceptions import NonFinite
from epifusion.model import TrainConfig, parameter_checksum
from epifusion.synthetic import generate_dataset
from epifusion.training import (
    EPOCH_COLUMNS,
    EvalReport,
    attention_grids,
    build_model,
    dump_attention,
    evaluate,
    evaluate_heatmaps,
    lr_at,
    predict_heatmaps,
    train,
)
from epifusion.epipolar import epipolar_field, read_field

SMALL = dict(d=8, heads=2, layers=1, d_ff=16, d_head=8, epochs=2, milestones=(1,), batch_size=4)


@pytest.fixture(scope="module")
def data(rig):
    return generate_dataset(rig, 12, seed=3, frames_per_sequence=6)


@pytest.fixture(scope="module")
def trained(data):
    return train(TrainConfig(**SMALL), data)


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0, milestones=(2, 4), lr_decay=0.1)
    assert [lr_at(cfg, e) for e in range(6)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])


def test_zero_lr_leaves_parameters_identical(data):
    cfg = TrainConfig(**dict(SMALL, lr=0.0))
    before = parameter_checksum(build_model(cfg))
    model, _ = train(cfg, data)
    assert parameter_checksum(model) == before


def test_training_is_deterministic(data, trained):
    again, hist = train(TrainConfig(**SMALL), data)
    assert parameter_checksum(again) == parameter_checksum(trained[0])
    assert hist == trained[1]


def test_loss_decreases(data, trained):
    _, hist = trained
    assert hist[-1]["probe_loss"] < hist[0]["probe_loss"]
    assert [h["epoch"] for h in hist] == [0, 1, 2]


def test_history_csv(tmp_path, data):
    train(TrainConfig(**dict(SMALL, epochs=1)), data, csv_path=tmp_path / "h.csv")
    with open(tmp_path / "h.csv") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == EPOCH_COLUMNS
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert rows[0]["train_loss"] == "" and float(rows[1]["train_loss"]) > 0


def test_non_finite_aborts_with_step(data):
    model = build_model(TrainConfig(**SMALL))
    with torch.no_grad():
        model.head.final.bias.fill_(float("inf"))
    with pytest.raises(NonFinite) as err:
        train(TrainConfig(**SMALL), data, model=model)
    assert err.value.step == 0


def test_predicted_heatmap_shape(data, trained):
    hm = predict_heatmaps(trained[0], data)
    assert hm.shape == (12, 2, 8, 32, 32)
    assert np.all(np.isfinite(hm))


def test_oracle_and_constant_baselines(data):
    oracle = evaluate_heatmaps(data, data.heatmaps.astype(np.float64))
    assert oracle.mpjpe_mean < 2.0
    assert oracle.jdr_mean == 100.0
    const = evaluate_heatmaps(data, np.ones(data.heatmaps.shape), "quarter")
    assert const.mpjpe_mean > 100.0
    assert const.jdr_mean < 5.0


def test_report_round_trip_and_tables(tmp_path, data, trained):
    rep = evaluate(trained[0], data)
    assert 0 <= rep.jdr_mean <= 100 and rep.mpjpe_mean >= 0
    assert set(rep.per_sequence) == {"0", "1"}
    rep.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == rep
    rep.write_tables(tmp_path / "r")
    summary = (tmp_path / "r_summary.csv").read_text().splitlines()
    assert summary[0] == "schema,joint,jdr_percent,mpjpe_mm" and len(summary) == 10
    seqs = (tmp_path / "r_sequences.csv").read_text().splitlines()
    assert seqs[0] == "schema,metric,seq0,seq1,average"


def test_attention_grids(tmp_path, data, trained):
    model = trained[0]
    attn, fld = attention_grids(model, data, frame=3, view=0, query=(60.0, 70.0))
    assert attn.shape == (1, 2, 16, 16)
    np.testing.assert_allclose(attn.sum(axis=(2, 3)), 1.0, atol=1e-6)
    paths = dump_attention(model, data, 3, 1, (60.0, 70.0), tmp_path)
    assert len(paths) == 3
    grid, gamma, query = read_field(paths[-1])
    assert grid.shape == (16, 16)
    cams = data.rig.cameras
    direct = epipolar_field(cams[1], cams[0], query, model_grid(model), gamma)
    np.testing.assert_array_equal(grid, direct.scores.astype(np.float32))
    with pytest.raises(IndexError):
        attention_grids(model, data, frame=99, view=0, query=(10.0, 10.0))
    with pytest.raises(IndexError):
        attention_grids(model, data, frame=0, view=2, query=(10.0, 10.0))


def model_grid(model):
    from epifusion.epipolar import FeatureGrid

    return FeatureGrid.for_image(model.config.image_size, model.config.image_size, model.config.patch)


def test_estimator_api(data):
    est = TransFusionEstimator(**dict(SMALL, epochs=1))
    params = est.get_params()
    assert params["d"] == 8 and params["decode"] == "gaussian"
    assert clone(est).get_params() == params
    est.fit(data)
    pred = est.predict(data)
    assert pred.shape == (12, 8, 3)
    assert est.score(data) == pytest.approx(-est.evaluate(data).mpjpe_mean)
    assert est.to_config() == TrainConfig(**dict(SMALL, epochs=1))
    with pytest.raises(TypeError):
        est.fit(np.zeros((3, 3)))


def test_estimator_save_load(tmp_path, data):
    est = TransFusionEstimator(**dict(SMALL, epochs=1)).fit(data)
    est.save(tmp_path / "m.tfz")
    back = TransFusionEstimator.load(tmp_path / "m.tfz")
    assert back.get_params() == est.get_params()
    np.testing.assert_array_equal(back.predict_heatmaps(data), est.predict_heatmaps(data))


def test_ablation_arms():
    base = TrainConfig()
    assert arm_config(base, "gamma", 100).gamma == 100.0
    assert arm_config(base, "heads", 8).heads == 8
    single = arm_config(base, "pe", "single-view")
    assert single.pe_mode == "no-3d-pe" and not single.cross_view
    assert arm_config(base, "pe", "learnable-3d-pe").effective_lpos_weight == 0.0
    with pytest.raises(ValueError):
        arm_config(base, "depth", 2)


def test_ablation_suite_csv(tmp_path, data):
    cfg = TrainConfig(**dict(SMALL, epochs=1, milestones=()))
    cache = {}
    rows = run_suite("layers", cfg, data, data, out=tmp_path / "a.csv", values=(1, 2), cache=cache)
    assert [r["layers"] for r in rows] == [1, 2]
    back = read_rows(tmp_path / "a.csv")
    assert len(back) == 2 and tuple(back[0]) == ABLATION_COLUMNS
    # the layers=1 point equals the base config and is served from the cache
    again = run_suite("heads", cfg, data, data, values=(2,), cache=cache)
    assert again[0]["mpjpe_mm"] == rows[0]["mpjpe_mm"] and again[0]["suite"] == "heads"
    write_rows(tmp_path / "b.csv", rows + again)
    assert len(read_rows(tmp_path / "b.csv")) == 3
