import json

import numpy as np
import pytest

from bltail.cli import main
from bltail.experiments import (ConfigError, ExperimentConfig, Report, build_operator, emit_report, load_config,
                                rows_to_csv, run)

FAST = {"h": 0.125, "reduced_n_lat": 32, "reduced_depth": 3.0}


def test_config_fail_fast():
    with pytest.raises(ConfigError):
        ExperimentConfig("bogus")
    with pytest.raises(ConfigError):
        ExperimentConfig("tail", knobs={"not_a_knob": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig("discontinuity-lab")  # default operator is two-dimensional
    with pytest.raises(ConfigError):
        ExperimentConfig("tail", params={"xi": [2, 4]})
    with pytest.raises(ConfigError):
        ExperimentConfig("tail", psi={"terms": [[1.0, [1, 0, 0], 0.0]]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "tail", "extra": 1})


def test_build_operator_kinds():
    F = build_operator({"kind": "perturbed", "base": {"kind": "laplacian", "d": 3}, "eta1": [1, 0, 0], "eps": 0.5})
    assert F(-np.diag([1.0, 0, 0])) == 1.5
    P = build_operator({"kind": "pucci", "d": 2, "Lambda": 2})
    assert P(np.diag([1.0, -1.0])) == -1.0  # elliptic sign: F = -P+
    with pytest.raises(ConfigError):
        build_operator({"kind": "nope"})


def test_toml_and_json_configs_agree(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('kind = "dirichlet"\n[params]\nalpha = [0.5]\nN = 2\n')
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"kind": "dirichlet", "params": {"alpha": [0.5], "N": 2}}))
    a, b = run(load_config(toml)), run(load_config(js))
    assert a.rows == b.rows and a.rows[0]["q"] == 2


def test_emit_report_empty_and_rows(tmp_path):
    paths = emit_report(Report("tail"), tmp_path / "empty")
    assert set(paths) == {"manifest"}
    assert sorted(p.name for p in (tmp_path / "empty").iterdir()) == ["manifest.json"]
    rows = [{"t": k / 50, "mu": float(np.cos(k)), "uncertainty": 1e-6} for k in range(50)]
    paths = emit_report(Report("continuity-sweep", rows), tmp_path / "full")
    raw = open(paths["results.csv"], "rb").read()
    assert raw.count(b"\r\n") == 51
    with pytest.raises(FileExistsError):
        emit_report(Report("continuity-sweep", rows), tmp_path / "full")
    emit_report(Report("continuity-sweep", rows), tmp_path / "full", force=True)
    man = json.loads((tmp_path / "full" / "manifest.json").read_text())
    assert set(man["files"]) == {"results.csv", "results.json"}
    assert man["verdict_factor"] == 3.0


def test_csv_quoting():
    text = rows_to_csv([{"a": "x,y", "b": [1.5, 2.0]}])
    assert text == 'a,b\r\n"x,y",1.5 2.0\r\n'


def test_replay_is_bitwise(tmp_path):
    cfg = {"kind": "mxi", "psi": {"terms": [[1.0, [1, 0], 0.0], [0.3, [0, 1], 0.5]]},
           "operator": {"kind": "pucci", "d": 2, "Lambda": 2}, "params": {"xi": [1, 1], "n_samples": 4},
           "knobs": FAST}
    csvs = []
    for k, threads in enumerate((1, 1, 3)):
        rep = run(ExperimentConfig.from_dict(cfg), threads)
        csvs.append(open(emit_report(rep, tmp_path / str(k))["results.csv"], "rb").read())
    assert csvs[0] == csvs[1] == csvs[2]


def test_continuity_sweep_constant_and_laplacian():
    rep = run(ExperimentConfig("continuity-sweep", psi={"terms": [[0.3, [0, 0], 0.0], [1.0, [1, 0], 0.0]]},
                               params={"t_list": [0.2, 0.1], "scan_points": 3}, knobs=FAST))
    assert len(rep.rows) == 7
    for r in rep.rows:
        assert abs(r["mu"] - 0.3) <= 1e-3
        assert "uncertainty" in r
    assert rep.summary["one_sided_agree"]


def test_discontinuity_lab_zero_delta_and_laplacian_eta2():
    rep = run(ExperimentConfig("discontinuity-lab", operator={"kind": "laplacian", "d": 3},
                               params={"delta_ladder": [0.0, 0.5]}, knobs=FAST))
    r0, r1 = rep.rows
    assert abs(r0["split"]) <= r0["uncertainty"] + 1e-12
    assert r0["verdict"] == "below resolution"
    assert abs(r1["L_eta2"] - r1["m_mean"]) <= 1e-6
    assert r1["L_eta1"] < r0["L_eta1"]
    assert rep.verdict == "discontinuity detected"


def test_cli_dirichlet_and_exit_codes(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["dirichlet", "--alpha", "1.4142135623730951", "--N", "10", "--out", str(out)]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["rows"][0]["q"] == 5
    assert main(["dirichlet", "--alpha", "0.5", "--N", "2", "--out", str(out)]) == 1
    assert "exists" in capsys.readouterr().err
    assert main(["tail", "--xi", "2,4"]) == 1


def test_cli_inconclusive_exit_code(capsys):
    # a split of zero at delta = 0 alone can never be resolved
    code = main(["discont", "--operator", '{"kind": "laplacian", "d": 3}', "--h", "0.125",
                 "--param", "delta_ladder=[0.0]", "--param", "n_samples=4"])
    capsys.readouterr()
    assert code == 2
