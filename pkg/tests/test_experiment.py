import json

import numpy as np
import pytest

from noddish.errors import ParseError
from noddish.experiment import MSE_BIN_EDGES, ExperimentSpec, run_experiment

SMALL = {"n_orientations": 2, "nu_ic_levels": [0.7, 0.9], "draws": 2, "root_seed": 3}


def _run(tmp_path, name, **kw):
    doc = {**SMALL, **kw, "output_dir": str(tmp_path / name)}
    return run_experiment(doc)


def test_fanning_outputs(tmp_path):
    res = _run(tmp_path, "fan", sweep="fanning", kappas=[32.0], beta_ratios=[0.0, 0.5],
               rotations_deg=[0.0])
    assert len(res.voxel_rows) == 2 * 2 * 2 * 2
    labels = [(r["kappa"], r["beta"]) for r in res.summary_rows]
    assert labels == [(32.0, 0.0), (32.0, 16.0), (32.0, "all")]
    assert res.summary_rows[-1]["n_voxels"] == 16
    errs = [r["nu_ic_abs_error"] for r in res.voxel_rows]
    assert res.summary_rows[-1]["nu_ic_abs_error_mean"] == pytest.approx(np.mean(errs))
    assert [f.name for f in res.files] == ["voxels.csv", "summary.csv", "summary.txt"]
    assert "kappa" in res.files[2].read_text()


def test_crossing_outputs(tmp_path):
    res = _run(tmp_path, "cross", sweep="crossing", angles_deg=[90.0])
    assert len(res.voxel_rows) == 8
    assert {"angular_error_deg", "peak_count", "converged"} <= set(res.voxel_rows[0])
    per_angle = [r for r in res.summary_rows if r["nu_ic"] == "all"]
    assert len(per_angle) == 1 and per_angle[0]["n_voxels"] == 8


def test_subsample_outputs(tmp_path):
    res = _run(tmp_path, "sub", sweep="subsample", kappas=[32.0], beta_ratios=[0.0],
               rotations_deg=[0.0], angles_deg=[90.0], directions_per_shell=[30, 90],
               max_b=[2000.0, 3000.0], draws=1)
    keys = [(r["directions_per_shell"], r["max_b"]) for r in res.summary_rows]
    assert keys[0] == (90, 3000.0) and len(keys) == 4
    assert res.summary_rows[0]["nu_ic_pearson_vs_full"] == pytest.approx(1.0)
    assert res.summary_rows[0]["b1000_mean_rel_diff_max"] < 1e-14
    first = res.summary_rows[0]
    hist = [first[f"mse_hist_{i:02d}"] for i in range(len(MSE_BIN_EDGES) - 1)]
    assert sum(hist) <= first["n_high_nu_ic"]


def test_reports_are_byte_identical(tmp_path):
    a = _run(tmp_path, "a", sweep="crossing", angles_deg=[60.0])
    b = _run(tmp_path, "b", sweep="crossing", angles_deg=[60.0])
    for fa, fb in zip(a.files, b.files):
        assert fa.read_bytes() == fb.read_bytes()
    c = _run(tmp_path, "c", sweep="crossing", angles_deg=[60.0], root_seed=4)
    assert c.files[0].read_bytes() != a.files[0].read_bytes()


def test_spec_file_resolves_output_dir(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"sweep": "crossing", "output_dir": "out", "draws": 1}))
    spec = ExperimentSpec.load(path)
    assert spec.output_dir == tmp_path / "out"
    assert spec.draws == 1 and spec.snr == 20.0


@pytest.mark.parametrize("doc", [
    [],
    {"sweep": "diagonal", "output_dir": "x"},
    {"sweep": "crossing"},
    {"sweep": "crossing", "output_dir": "x", "colour": 1},
    {"sweep": "crossing", "output_dir": "x", "draws": "3"},
    {"sweep": "crossing", "output_dir": "x", "draws": True},
    {"sweep": "crossing", "output_dir": "x", "kappas": [1, "a"]},
    {"sweep": "crossing", "output_dir": "x", "model": "dti"},
    {"sweep": "crossing", "output_dir": "x", "draws": 0},
])
def test_spec_validation(doc):
    with pytest.raises(ParseError):
        ExperimentSpec.from_dict(doc)


def test_spec_json_syntax_error(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text('{"sweep": "crossing",\n "draws": 1,,}')
    with pytest.raises(ParseError) as exc:
        ExperimentSpec.load(path)
    assert exc.value.line == 2


def test_subsample_mse_ranking(tmp_path):
    # full sampling gives the lowest full-signal MSE, 30 directions the highest
    res = run_experiment({"sweep": "subsample", "output_dir": str(tmp_path / "rank"),
                          "kappas": [32.0], "beta_ratios": [0.0], "rotations_deg": [0.0]})
    mse = {(r["directions_per_shell"], r["max_b"]): r["mse_mean"] for r in res.summary_rows}
    ranked = sorted(mse, key=mse.get)
    assert ranked[0] == (90, 3000.0)
    assert set(ranked[-2:]) == {(30, 3000.0), (30, 2000.0)}
    low = {(r["directions_per_shell"], r["max_b"]): r["low_mse_fraction"] for r in res.summary_rows}
    assert max(low, key=low.get) == (90, 3000.0)
