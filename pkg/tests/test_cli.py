import json

import numpy as np
import pytest

from bayescond.cli import main
from bayescond.experiments import ConfigError, ExperimentConfig, run_fig1
from bayescond.formats import load_array, read_csv, read_pgm


def write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_fig1_outputs(tmp_path):
    cfg = write(tmp_path / "c.json", {"parameters": {"resolution": 32}})
    assert main(["fig1", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "9"]) == 0
    meta, header, rows = read_csv(tmp_path / "o" / "fig1_discrepancy.csv")
    assert meta["seed"] == "9" and "config_hash" in meta and "version" in meta
    means = [r[1] for r in rows]
    assert [r[0] for r in rows] == [0.9, 0.5, 0.1, 0.01]
    assert all(b > a for a, b in zip(means, means[1:]))
    pgms = sorted((tmp_path / "o").glob("*.pgm"))
    assert len(pgms) == 12
    img = read_pgm(pgms[0])
    assert img.shape == (32, 32) and img.max() == 255
    assert "seed=9" in pgms[0].read_text().splitlines()[1]
    manifest = json.loads((tmp_path / "o" / "fig1_manifest.json").read_text())
    assert manifest["atom_seed"] == 42 and manifest["provenance"]["seed"] == 9


def test_fig1_uninformative(tmp_path):
    cfg = ExperimentConfig("fig1", {"resolution": 24, "sigma0": 1e8}, tmp_path)
    run_fig1(cfg)
    _, _, rows = read_csv(tmp_path / "fig1_discrepancy.csv")
    assert max(r[2] for r in rows) < 1e-5


def test_reproducible_csv(tmp_path):
    cfg = write(tmp_path / "c.json", {"parameters": {"sizes": [[4, 4], [8, 8]]}})
    for d in ("a", "b"):
        assert main(["dc-check", "--config", str(cfg), "--out", str(tmp_path / d), "--seed", "4"]) == 0
    assert (tmp_path / "a" / "dc_check.csv").read_bytes() == (tmp_path / "b" / "dc_check.csv").read_bytes()


def test_dc_check_rows(tmp_path):
    cfg = write(tmp_path / "c.json", {"parameters": {"sizes": [[4, 4], [64, 64]], "lambdas": [0, 1.0]}})
    assert main(["dc-check", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    _, header, rows = read_csv(tmp_path / "dc_check.csv")
    for r in rows:
        if r[3] == 0:
            assert r[4] == 0 and (r[5] == 0 or np.isnan(r[5]))
        assert r[4] < 1e-8
    big = [r for r in rows if r[1] == "64x64"]
    assert big and all(np.isnan(r[5]) for r in big)
    timings = json.loads((tmp_path / "dc_check_timings.json").read_text())
    assert any(t["variant"] == "fourier_filter" and t["dims"] == "64x64" for t in timings["timings"])


def test_sample_accuracy_small(tmp_path):
    cfg = write(tmp_path / "c.json", {
        "experiment": "sample_accuracy",
        "parameters": {"n_chains": 200, "schedule": {"kind": "VP", "T": 200}},
        "seed": 2,
    })
    assert main(["sample-accuracy", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    _, header, rows = read_csv(tmp_path / "sample_accuracy.csv")
    assert header[:4] == ["mode", "tv", "mse_single", "mse_avg10"]
    assert {r[0] for r in rows} == {"bayesian", "post_conditioned"}
    x = load_array(tmp_path / "samples_bayesian.bcnd")
    assert x.shape == (200, 2)
    _, hh, hrows = read_csv(tmp_path / "sample_accuracy_hist.csv")
    assert len(hrows) == 12 and sum(r[hh.index("exact")] for r in hrows) == pytest.approx(1)


def test_sample_accuracy_custom_problem(tmp_path):
    cfg = write(tmp_path / "c.json", {
        "prior": {"kind": "discrete", "atoms": [[-1.0, 0.0], [1.0, 1.0]]},
        "operator": {"variant": "identity", "d": 2},
        "y": [0.8, 0.9], "sigma0": 0.5, "n_chains": 100,
        "schedule": {"kind": "VE", "T": 100}, "corrector": {"snr": 0.16},
    })
    assert main(["sample-accuracy", "--config", str(cfg), "--out", str(tmp_path)]) == 0


def test_train_linear_small(tmp_path):
    cfg = write(tmp_path / "c.json", {"d": 2, "n_samples": 20000, "n_grid": 4, "n_heldout": 2000})
    assert main(["train-linear", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    _, header, rows = read_csv(tmp_path / "train_linear.csv")
    assert len(rows) == 4 and all(r[2] < 0.05 for r in rows)
    manifest = json.loads((tmp_path / "estimator" / "manifest.json").read_text())
    assert manifest["d"] == 2 and len(manifest["t_grid"]) == 4 and manifest["prior_hash"]


def test_verify_exit_codes(tmp_path):
    ok = write(tmp_path / "ok.json", {"checks": ["adjoint_identity", "sr_woodbury_inverse"]})
    assert main(["verify", "--config", str(ok), "--out", str(tmp_path / "a")]) == 0
    report = json.loads((tmp_path / "a" / "verify_report.json").read_text())
    assert report["ok"] and len(report["checks"]) == 2
    bad = write(tmp_path / "bad.json", {"fault": "kt_sign", "checks": ["optimal_combination"]})
    assert main(["verify", "--config", str(bad), "--out", str(tmp_path / "b")]) == 1


def test_config_errors(tmp_path):
    assert main(["fig1", "--config", str(tmp_path / "missing.json")]) == 3
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["fig1", "--config", str(tmp_path / "bad.json")]) == 2
    other = write(tmp_path / "other.json", {"experiment": "verify"})
    assert main(["fig1", "--config", str(other)]) == 2
    assert main(["nope", "--config", str(other)]) == 2
    assert main(["fig1", "--config", str(other), "--seed", "-1"]) == 2
    sched = write(tmp_path / "s.json", {"schedule": {"kind": "XX", "T": 3}})
    assert main(["sample-accuracy", "--config", str(sched), "--out", str(tmp_path)]) == 2
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"parameters": {}, "extra": 1}, "fig1")


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write(tmp_path / "c.json", {"resolution": 8})
    assert main(["fig1", "--config", str(cfg), "--out", str(blocker / "sub")]) == 3


def test_thread_env(tmp_path, monkeypatch):
    cfg = write(tmp_path / "c.json", {"resolution": 16})
    main(["fig1", "--config", str(cfg), "--out", str(tmp_path / "a")])
    monkeypatch.setenv("BAYESCOND_THREADS", "4")
    main(["fig1", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "fig1_fields.csv").read_bytes() == (tmp_path / "b" / "fig1_fields.csv").read_bytes()
    monkeypatch.setenv("BAYESCOND_THREADS", "many")
    assert main(["fig1", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 2


def test_diverging_mode_recorded(tmp_path):
    # post-conditioning with a plain VE predictor is explicitly unstable here; the run must record it
    cfg = write(tmp_path / "c.json", {
        "prior": {"kind": "discrete", "atoms": [[-1.0, 0.0], [1.0, 1.0]]},
        "operator": {"variant": "identity", "d": 2},
        "y": [0.8, 0.9], "sigma0": 0.5, "n_chains": 50,
        "schedule": {"kind": "VE", "T": 1000},
    })
    assert main(["sample-accuracy", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    _, header, rows = read_csv(tmp_path / "sample_accuracy.csv")
    status = {r[0]: r[header.index("status")] for r in rows}
    assert status["bayesian"] == "ok"
    assert status["post_conditioned"].startswith("diverged_t")
