import csv
import io
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from nvkm import volterra
from nvkm.checkpoint import checkpoint_load
from nvkm.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, parse_times, resolve_config
from nvkm.validation import check_integrals

TINY = {
    "data": {"source": "synthetic", "n": 200, "split": {"fraction": 0.5}},
    "model": {"order": 1, "n_basis": 20},
    "training": {"epochs_phase1": 360, "epochs_phase2": 40, "batch_size": 80, "samples": 4},
    "seed": 3,
}


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps({**TINY, "output_dir": str(root / "a")}))
    start = time.perf_counter()
    code = main(["train", str(cfg_path)])
    seconds = time.perf_counter() - start
    return root, code, seconds


def test_tiny_training_run_completes(tiny_run):
    root, code, seconds = tiny_run
    assert code == EXIT_OK
    assert seconds < 300
    for name in ("model.ckpt", "trace.csv", "train.csv", "test.csv", "config.json"):
        assert (root / "a" / name).exists()
    trace = (root / "a" / "trace.csv").read_text().splitlines()
    assert trace[0] == "step,phase,elbo" and len(trace) - 1 == 500


def test_resolved_config_reproduces_run(tiny_run, capsys):
    root, _, _ = tiny_run
    resolved = json.loads((root / "a" / "config.json").read_text())
    assert resolve_config(resolved) == resolved
    code, _, _ = _run(["train", root / "a" / "config.json", "--output-dir", root / "b"], capsys)
    assert code == EXIT_OK
    for name in ("model.ckpt", "trace.csv", "train.csv", "test.csv"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_missing_data_file_names_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"source": "csv", "path": str(tmp_path / "nope.csv")}}))
    code, _, err = _run(["train", cfg], capsys)
    assert code == EXIT_DATA
    assert "nope.csv" in err and json.loads(err)["error"] == "data"


def test_missing_data_file_through_entry_point(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"source": "csv", "path": "absent.csv"}}))
    proc = subprocess.run([sys.executable, "-m", "nvkm", "train", str(cfg)], capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == EXIT_DATA
    assert "absent.csv" in proc.stderr


def test_usage_errors(tmp_path, capsys):
    assert _run(["frobnicate"], capsys)[0] == EXIT_USAGE
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {}}))
    assert _run(["train", cfg], capsys)[0] == EXIT_USAGE
    cfg.write_text(json.dumps({"data": {"source": "synthetic"}, "model": {"colour": 1}}))
    assert _run(["train", cfg], capsys)[0] == EXIT_USAGE
    cfg.write_text("{not json")
    assert _run(["train", cfg], capsys)[0] == EXIT_USAGE


def test_parse_times():
    np.testing.assert_array_equal(parse_times("-1:1:3"), [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(parse_times("0.5,2"), [0.5, 2.0])


def _read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_predict_band_and_header(tiny_run, capsys):
    root, _, _ = tiny_run
    code, out, _ = _run(["predict", root / "a" / "model.ckpt", "--times=-10:10:21", "--samples", 5], capsys)
    assert code == EXIT_OK
    assert out.splitlines()[0] == "output,t,mean,sd,lower,upper"
    rows = _read_csv(out)
    assert len(rows) == 21
    for r in rows:
        m, s, lo, hi = (float(r[k]) for k in ("mean", "sd", "lower", "upper"))
        assert hi - lo == pytest.approx(4 * s, rel=1e-12)
        assert m == pytest.approx((lo + hi) / 2, rel=1e-12, abs=1e-12)


def test_predict_single_sample_sd_is_noise(tiny_run, capsys):
    root, _, _ = tiny_run
    model = checkpoint_load(root / "a" / "model.ckpt")
    noise = float(model.noise(0)) * model.metadata["standardization"]["scale"][0]
    _, out, _ = _run(["predict", root / "a" / "model.ckpt", "--times", "0,1,2", "--samples", 1], capsys)
    for r in _read_csv(out):
        assert float(r["sd"]) == pytest.approx(noise, rel=1e-12)


def test_predict_deterministic(tiny_run, capsys):
    root, _, _ = tiny_run
    argv = ["predict", root / "a" / "model.ckpt", "--times-from", root / "a" / "test.csv", "--samples", 3, "--seed", 4]
    assert _run(argv, capsys)[1] == _run(argv, capsys)[1]


def test_evaluate_report(tiny_run, capsys, tmp_path):
    root, _, _ = tiny_run
    argv = ["evaluate", root / "a" / "model.ckpt", "--data", root / "a" / "test.csv", "--samples", 10, "--seed", 2]
    a = tmp_path / "m1.csv"
    b = tmp_path / "m2.csv"
    assert _run(argv + ["-o", a], capsys)[0] == EXIT_OK
    _, summary, _ = _run(argv + ["-o", b], capsys)
    assert a.read_bytes() == b.read_bytes()
    rows = _read_csv(a.read_text())
    assert [r["output"] for r in rows] == ["y", "all"]
    assert all(r["samples"] == "10" and r["seed"] == "2" for r in rows)
    assert int(rows[0]["n"]) == 100
    assert 0 <= float(rows[0]["nmse"]) < 1.0
    assert "S=10" in summary


def test_evaluate_overfit_model_on_its_training_data(tmp_path, capsys):
    # 30 points with one input inducing point each side of every datum
    cfg = {
        "data": {"source": "synthetic", "n": 60, "split": {"fraction": 0.5}},
        "model": {"order": 1, "n_basis": 20, "n_input_inducing": 40},
        "training": {"epochs_phase1": 1500, "epochs_phase2": 50, "batch_size": 30, "samples": 4},
        "seed": 1,
        "output_dir": str(tmp_path / "overfit"),
    }
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert _run(["train", tmp_path / "c.json"], capsys)[0] == EXIT_OK
    _, out, _ = _run(["evaluate", tmp_path / "overfit" / "model.ckpt", "--data", tmp_path / "overfit" / "train.csv"], capsys)
    assert float(_read_csv(out)[0]["nmse"]) < 0.01


def test_evaluate_rejects_wrong_output_count(tiny_run, capsys, tmp_path):
    root, _, _ = tiny_run
    p = tmp_path / "two.csv"
    p.write_text("t,a,b\n0,1,2\n1,2,3\n")
    schema = json.dumps({"time": "t", "outputs": ["a", "b"]})
    code, _, _ = _run(["evaluate", root / "a" / "model.ckpt", "--data", p, "--schema", schema], capsys)
    assert code == EXIT_DATA


def _prior_rows(tmp_path, capsys, order, seed=0, draws=100):
    cfg = tmp_path / f"p{order}.json"
    cfg.write_text(json.dumps({"model": {"order": order, "vk_range": 2.0}, "seed": seed}))
    code, out, _ = _run(["sample-prior", cfg, "--draws", draws, "--points", 41], capsys)
    assert code == EXIT_OK
    return out


def test_sample_prior_contents_and_determinism(tmp_path, capsys):
    out = _prior_rows(tmp_path, capsys, order=2, draws=3)
    assert out == _prior_rows(tmp_path, capsys, order=2, draws=3)
    rows = _read_csv(out)
    kinds = {(r["kind"], r["order"]) for r in rows}
    assert kinds == {("input", ""), ("vk_diagonal", "1"), ("vk_diagonal", "2"), ("output", "")}


def test_sample_prior_kernel_decays_at_edge(tmp_path, capsys):
    rows = _read_csv(_prior_rows(tmp_path, capsys, order=1, draws=100))
    diag = [r for r in rows if r["kind"] == "vk_diagonal"]
    s = np.array([float(r["t"]) for r in diag])
    v = np.array([float(r["value"]) for r in diag])
    edge = np.abs(v[np.isclose(np.abs(s), 2.0)])
    centre = np.abs(v[np.isclose(s, 0.0)])
    # E|G(edge)| = eps * E|G(0)| for the decayed prior; allow three standard errors
    bound = 0.01 * centre.mean() + 3 * edge.std() / np.sqrt(len(edge))
    assert edge.mean() <= bound
    assert centre.mean() > 0.3


def test_validate_quick(capsys):
    start = time.perf_counter()
    code, out, _ = _run(["validate", "--level", "quick"], capsys)
    assert code == EXIT_OK, out
    assert time.perf_counter() - start < 120
    assert "[FAIL]" not in out and out.count("[PASS]") >= 8


def test_sign_error_in_integral_is_caught(monkeypatch):
    original = volterra.eval_I1a

    def broken(t, alpha, theta1, theta2, beta2):
        return original(t, alpha, theta1, -theta2, beta2)

    monkeypatch.setattr(volterra, "eval_I1a", broken)
    results = check_integrals(n_draws=20, seed=0)
    assert not all(r.passed for r in results)
