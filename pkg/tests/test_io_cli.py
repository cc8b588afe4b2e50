"""Dataset files, ASL ingestion, the command-line interface, and SVG plots."""

import csv
import json

import numpy as np
import pytest

from svbfit import (
    AslPcaslDesign,
    DesignGrid,
    InvariantViolation,
    ParseError,
    SeriesDataset,
    TagMismatch,
    asl_differenced,
    cli_main,
    expand_asl_times,
    load_dataset,
    save_dataset,
)
from svbfit.svgplot import polyline_plot


def grid_dataset(n_series=3, n_points=8, seed=0):
    rng = np.random.default_rng(seed)
    return SeriesDataset(
        model_name="biexp",
        design=DesignGrid(times=np.linspace(0, 5, n_points)),
        values=rng.normal(size=(n_series, n_points)),
        units="arb",
    )


def asl_design():
    return AslPcaslDesign(
        plds=np.array([0.25, 0.5, 0.75, 1.0, 1.25, 1.5]), label_duration=1.8
    )


# --- dataset round trips ------------------------------------------------------


def test_dataset_round_trip_identity(tmp_path):
    ds = grid_dataset()
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.model_name == ds.model_name
    assert back.units == ds.units
    assert np.array_equal(back.values, ds.values)
    assert np.array_equal(back.design.times, ds.design.times)


def test_dataset_round_trip_asl_metadata(tmp_path):
    design = asl_design()
    ds = SeriesDataset(
        model_name="asl-pcasl",
        design=design,
        values=np.ones((4, 6)),
        mask=np.array([1, 1, 0, 1], dtype=bool),
        slice_index_per_voxel=np.array([0, 1, 2, 0]),
    )
    save_dataset(ds, tmp_path / "asl")
    back = load_dataset(tmp_path / "asl")
    assert np.array_equal(back.design.plds, design.plds)
    assert back.design.label_duration == design.label_duration
    assert np.array_equal(back.mask, ds.mask)
    assert np.array_equal(back.slice_index_per_voxel, ds.slice_index_per_voxel)


def test_dataset_values_full_precision(tmp_path):
    values = np.array([[1 / 3, np.pi, 1e-17]])
    ds = SeriesDataset(model_name="biexp",
                       design=DesignGrid(times=np.array([0.0, 1.0, 2.0])),
                       values=values)
    save_dataset(ds, tmp_path / "p")
    back = load_dataset(tmp_path / "p")
    assert np.array_equal(back.values, values)


def test_load_minimal_two_point_dataset(tmp_path):
    (tmp_path / "m.json").write_text(
        json.dumps({"model": "linear", "times": [0.0, 1.0]})
    )
    (tmp_path / "m.csv").write_text("1.5,2.5\n")
    ds = load_dataset(tmp_path / "m")
    assert ds.n_series == 1 and ds.n_timepoints == 2
    assert np.array_equal(ds.values, [[1.5, 2.5]])


def test_load_rejects_ragged_rows(tmp_path):
    (tmp_path / "r.json").write_text(
        json.dumps({"model": "linear", "times": [0.0, 1.0, 2.0]})
    )
    (tmp_path / "r.csv").write_text("1,2,3\n4,5\n")
    with pytest.raises(InvariantViolation, match="row 2"):
        load_dataset(tmp_path / "r")


def test_load_rejects_missing_and_malformed(tmp_path):
    with pytest.raises(ParseError):
        load_dataset(tmp_path / "absent")
    (tmp_path / "b.json").write_text("{not json")
    (tmp_path / "b.csv").write_text("1\n")
    with pytest.raises(ParseError):
        load_dataset(tmp_path / "b")


def test_dataset_rejects_bad_shapes():
    with pytest.raises(InvariantViolation):
        SeriesDataset(model_name="biexp",
                      design=DesignGrid(times=np.array([0.0, 1.0])),
                      values=np.zeros(4))
    with pytest.raises(InvariantViolation):
        SeriesDataset(model_name="biexp",
                      design=DesignGrid(times=np.array([0.0, 1.0])),
                      values=np.zeros((2, 2)), mask=np.array([True]))


# --- ASL helpers ----------------------------------------------------------------


def test_asl_differenced_control_equals_label():
    design = AslPcaslDesign(plds=np.array([0.25, 0.5]), label_duration=1.8)
    ds = SeriesDataset(
        model_name="asl-pcasl", design=design,
        values=np.array([[3.0, 3.0, 7.0, 7.0]]),
        column_tags=("control", "label", "control", "label"),
    )
    diffed = asl_differenced(ds)
    assert np.array_equal(diffed.values, [[0.0, 0.0]])
    assert diffed.column_tags is None


def test_asl_differenced_subtracts_pairs():
    design = AslPcaslDesign(plds=np.array([0.25]), label_duration=1.8)
    ds = SeriesDataset(
        model_name="asl-pcasl", design=design,
        values=np.array([[3.0, 1.0]]),
        column_tags=("control", "label"),
    )
    assert np.array_equal(asl_differenced(ds).values, [[2.0]])


def test_asl_differenced_repeat_layout():
    # 6 delays x 8 repeats, interleaved control/label: 96 columns -> 48
    design = AslPcaslDesign(
        plds=np.tile(np.array([0.25, 0.5, 0.75, 1.0, 1.25, 1.5]), 8),
        label_duration=1.8,
    )
    tags = ("control", "label") * 48
    rng = np.random.default_rng(1)
    values = rng.normal(size=(2, 96))
    ds = SeriesDataset(model_name="asl-pcasl", design=design,
                       values=values, column_tags=tags)
    diffed = asl_differenced(ds)
    assert diffed.values.shape == (2, 48)
    assert np.allclose(diffed.values, values[:, 0::2] - values[:, 1::2])


def test_asl_differenced_rejects_bad_tags():
    design = AslPcaslDesign(plds=np.array([0.25]), label_duration=1.8)
    plain = SeriesDataset(model_name="asl-pcasl", design=design,
                          values=np.ones((1, 1)))
    with pytest.raises(TagMismatch):
        asl_differenced(plain)
    unbalanced = SeriesDataset(
        model_name="asl-pcasl",
        design=AslPcaslDesign(plds=np.array([0.25, 0.5]), label_duration=1.8),
        values=np.ones((1, 4)),
        column_tags=("control", "control", "control", "label"),
    )
    with pytest.raises(TagMismatch):
        asl_differenced(unbalanced)


def test_expand_asl_times():
    design = asl_design()
    base = expand_asl_times(design, 0)
    assert np.allclose(base, 1.8 + design.plds)
    slice2 = expand_asl_times(design, 2)
    assert abs(slice2[0] - (1.8 + 0.25 + 2 * 0.0452)) < 1e-12
    assert abs(slice2[0] - 2.1404) < 1e-12
    with pytest.raises(InvariantViolation):
        expand_asl_times(design, -1)


# --- SVG plotting ----------------------------------------------------------------


def test_polyline_plot_one_polyline_per_trace():
    svg = polyline_plot([np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.5, 0.25])])
    assert svg.startswith("<svg") or svg.lstrip().startswith("<?xml")
    assert svg.count("<polyline") == 2
    assert "epoch" in svg and "free energy" in svg


def test_polyline_plot_rejects_empty():
    with pytest.raises(ValueError):
        polyline_plot([])


# --- CLI ---------------------------------------------------------------------------


def test_cli_simulate_then_fit(tmp_path):
    data = tmp_path / "sim"
    assert cli_main([
        "simulate", "--seed", "0", "--n_realizations", "2",
        "--n_points", "30", "--out", str(data),
    ]) == 0
    out_csv = tmp_path / "fit.csv"
    out_json = tmp_path / "fit.json"
    assert cli_main([
        "fit", "--data", str(data),
        "--prior_mean", "10,1,10,10,0", "--prior_sd", "2,2,2,2,2",
        "--max_epochs", "20", "--batch_size", "10", "--seed", "1",
        "--out_csv", str(out_csv), "--out_json", str(out_json),
    ]) == 0
    with open(out_csv) as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 2
    assert "A1_mean" in rows[0] and "noise_lambda_sd" in rows[0]
    payload = json.loads(out_json.read_text())
    assert len(payload) == 2 and not payload[0]["failed"]


def test_cli_usage_errors_exit_1():
    assert cli_main(["no-such-command"]) == 1
    assert cli_main(["fit"]) == 1  # missing required flags


def test_cli_data_errors_exit_2(tmp_path):
    assert cli_main([
        "fit", "--data", str(tmp_path / "missing"),
        "--prior_mean", "0", "--prior_sd", "1",
        "--seed", "0", "--out_csv", str(tmp_path / "o.csv"),
    ]) == 2


def test_cli_model_error_exit_2(tmp_path):
    (tmp_path / "u.json").write_text(
        json.dumps({"model": "no-such-model", "times": [0.0, 1.0]})
    )
    (tmp_path / "u.csv").write_text("1,2\n")
    assert cli_main([
        "fit", "--data", str(tmp_path / "u"),
        "--prior_mean", "0", "--prior_sd", "1",
        "--seed", "0", "--out_csv", str(tmp_path / "o.csv"),
    ]) == 2


def test_cli_plot(tmp_path):
    traces = tmp_path / "t.csv"
    traces.write_text("0,1,2,3\n-1,-0.5,0,0.5\n")
    out = tmp_path / "p.svg"
    assert cli_main(["plot", "--traces", str(traces), "--out", str(out)]) == 0
    assert out.read_text().count("<polyline") == 2


def test_cli_asl_fit(tmp_path):
    design = AslPcaslDesign(plds=np.array([0.25, 0.5, 0.75, 1.0]),
                            label_duration=1.8)
    from svbfit import get_model
    from svbfit.models import model_evaluate

    model = get_model("asl-pcasl")
    truth = np.array([10.0, 1.3])
    signal = model_evaluate(model, truth, design)
    rng = np.random.default_rng(0)
    values = np.vstack([signal + rng.normal(0, 0.01, 4) for _ in range(2)])
    ds = SeriesDataset(model_name="asl-pcasl", design=design, values=values,
                       slice_index_per_voxel=np.array([0, 1]))
    save_dataset(ds, tmp_path / "asl")
    out_csv = tmp_path / "asl_fit.csv"
    assert cli_main([
        "asl-fit", "--data", str(tmp_path / "asl"),
        "--prior_mean", "10,1.3,-9", "--prior_sd", "2,0.5,1",
        "--max_epochs", "20", "--seed", "1",
        "--out_csv", str(out_csv),
    ]) == 0
    with open(out_csv) as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 2


def test_cli_sweep_and_init_study(tmp_path):
    sweep_out = tmp_path / "sweep.csv"
    assert cli_main([
        "sweep", "--n_points", "30", "--n_realizations", "2",
        "--learning_rates", "0.05,0.1", "--batch_sizes", "10,N",
        "--max_epochs", "10", "--seed", "0", "--out", str(sweep_out),
    ]) == 0
    with open(sweep_out) as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 4  # 2 learning rates x 2 batch sizes
    study_out = tmp_path / "study.csv"
    assert cli_main([
        "init-study", "--n_points", "30", "--n_realizations", "2",
        "--priors", "informative", "--inits", "true,wrong",
        "--max_epochs", "10", "--seed", "0", "--out", str(study_out),
    ]) == 0
    with open(study_out) as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 2
