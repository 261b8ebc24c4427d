import csv
import json

import pytest

from mmelab import data as D
from mmelab.cli import main
from mmelab.runs import RunManifest, sha256_file

FAST = ["--max-iters", "60", "--eval-every", "20"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def kv(stdout):
    return dict(line.split("=", 1) for line in stdout.splitlines())


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", "--out", str(out), "--seed", "0"]) == 0
    return out


def test_gen_writes_files(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--out", tmp_path, "--seed", "1")
    assert code == 0
    path = kv(out)["dataset"]
    assert path.endswith("dataset.csv")
    rows = (tmp_path / "dataset.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 200 + 4 * 100
    truth = (tmp_path / "dataset.truth.csv").read_text().splitlines()
    assert len(truth) == 1 + 4 * (100 - 6)
    spec = json.loads((tmp_path / "spec.json").read_text())
    assert spec["K"] == 4 and spec["seed"] == 1


def test_gen_is_byte_identical(tmp_path, capsys):
    for sub in ("a", "b"):
        run(capsys, "gen", "--out", tmp_path / sub, "--seed", "3")
    for name in ("dataset.csv", "dataset.truth.csv", "spec.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_insufficient_targets(tmp_path, capsys):
    code, out, err = run(capsys, "gen", "--out", tmp_path, "--shots", "3", "--n-target", "5")
    assert code == 2 and out == "" and "n_target" in err


def test_train_writes_artifacts(dataset, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--data", dataset, "--method", "mme", "--lambda", "0.1", "--temp", "0.05", "--shots", "3", "--out", tmp_path, *FAST)
    assert code == 0
    res = kv(out)
    assert set(res) == {"run_dir", "test_acc"}
    run_dir = tmp_path / "mme-cosine-s3-seed0"
    assert res["run_dir"] == str(run_dir)
    for name in ("metrics.jsonl", "summary.json", "model.json", "manifest.json"):
        assert (run_dir / name).is_file()
    summary = json.loads((run_dir / "summary.json").read_text())
    assert float(res["test_acc"]) == summary["test_at_best"]
    assert {"config", "best_val", "test_at_best", "iters_run", "wall_time_ms"} <= set(summary)
    man = RunManifest.load(run_dir)
    assert man.dataset_sha256 == sha256_file(dataset / "dataset.csv")
    assert all((run_dir / p).is_file() for p in man.artifacts.values())


def test_train_rerun_is_identical(dataset, tmp_path, capsys):
    for sub in ("a", "b"):
        run(capsys, "train", "--data", dataset, "--method", "ent", "--out", tmp_path / sub, *FAST)
    for name in ("metrics.jsonl", "model.json"):
        assert (tmp_path / "a/ent-cosine-s3-seed0" / name).read_bytes() == (tmp_path / "b/ent-cosine-s3-seed0" / name).read_bytes()


def test_lambda_zero_matches_source_plus_target(dataset, tmp_path, capsys):
    run(capsys, "train", "--data", dataset, "--method", "mme", "--lambda", "0", "--out", tmp_path, *FAST)
    run(capsys, "train", "--data", dataset, "--method", "s+t", "--out", tmp_path, *FAST)
    a = json.loads((tmp_path / "mme-cosine-s3-seed0/summary.json").read_text())
    b = json.loads((tmp_path / "s+t-cosine-s3-seed0/summary.json").read_text())
    for key in ("best_val", "test_at_best", "best_iter", "iters_run"):
        assert a[key] == b[key]


def test_dann_metrics_have_domain_loss(dataset, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--data", dataset, "--method", "dann", "--out", tmp_path, *FAST)
    assert code == 0
    recs = [json.loads(line) for line in (tmp_path / "dann-cosine-s3-seed0/metrics.jsonl").read_text().splitlines()]
    assert all(isinstance(r["domain_loss"], float) for r in recs)


def test_train_missing_data(tmp_path, capsys):
    code, out, err = run(capsys, "train", "--data", tmp_path / "nope.csv", "--out", tmp_path)
    assert code == 2 and out == "" and err


def test_train_shots_mismatch(dataset, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", dataset, "--shots", "1", "--out", tmp_path)
    assert code == 2 and "shots" in err


def test_train_malformed_data(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,x1,label,domain,split\n1.0,2.0,0,source,weird\n")
    code, _, err = run(capsys, "train", "--data", bad, "--out", tmp_path)
    assert code == 2 and "line 2" in err


def test_numerical_abort_exit_code(dataset, tmp_path, capsys):
    code, out, err = run(capsys, "train", "--data", dataset, "--method", "s+t", "--lr", "1e300", "--out", tmp_path, *FAST)
    assert code == 3 and out == ""
    diag = json.loads((tmp_path / "abort.json").read_text())
    assert diag["iter"] >= 0 and "non-finite" in diag["error"]


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert main(["train", "--data", str(dataset), "--out", str(out), *FAST]) == 0
    return out / "mme-cosine-s3-seed0"


def test_analyze_eig(trained, tmp_path, capsys):
    code, out, _ = run(capsys, "analyze", "--what", "eig", "--run", trained, "--out", tmp_path / "eig.json")
    assert code == 0 and kv(out)["report"] == str(tmp_path / "eig.json")
    rep = json.loads((tmp_path / "eig.json").read_text())
    ev = rep["eigenvalues"]
    assert len(ev) == 16 and all(a >= b for a, b in zip(ev, ev[1:])) and min(ev) >= 0
    assert rep["cumulative_mass"][-1] == pytest.approx(1.0)


def test_analyze_entropy_curve(trained, tmp_path, capsys):
    code, _, _ = run(capsys, "analyze", "--what", "entropy", "--run", trained, "--out", tmp_path / "c.csv")
    assert code == 0
    rows = list(csv.reader((tmp_path / "c.csv").open()))
    assert rows[0] == ["iter", "unlabeled_entropy_mean"] and len(rows) == 1 + 4


def test_analyze_adist_with_checkpoint(trained, dataset, tmp_path, capsys):
    code, _, _ = run(capsys, "analyze", "--what", "adist", "--checkpoint", trained / "model.json", "--data", dataset, "--out", tmp_path / "a.json")
    assert code == 0
    rep = json.loads((tmp_path / "a.json").read_text())
    assert rep["a_distance"] == pytest.approx(2 * (1 - 2 * rep["domain_clf_error"]))


def test_analyze_hdiv_identical_sets_is_zero(trained, tmp_path, capsys):
    ds = D.generate(D.ShiftTaskSpec(n_source_per_class=94, seed=0))
    ds.source_x, ds.source_y = ds.unlabeled_x.copy(), ds.unlabeled_y.copy()
    D.write_dataset(ds, tmp_path / "same.csv")
    code, _, _ = run(capsys, "analyze", "--what", "hdiv", "--checkpoint", trained / "model.json", "--data", tmp_path / "same.csv", "--out", tmp_path / "h.json")
    assert code == 0
    assert json.loads((tmp_path / "h.json").read_text())["h_div_estimate"] == 0.0


def test_analyze_missing_artifact(tmp_path, capsys):
    code, out, _ = run(capsys, "analyze", "--what", "eig", "--run", tmp_path / "none", "--out", tmp_path / "x.json")
    assert code == 2 and out == ""


def test_sweep_rows_and_reproducibility(dataset, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MME_LAB_THREADS", "1")
    for sub in ("a", "b"):
        code, out, _ = run(capsys, "sweep", "--param", "lambda", "--values", "0.3,0.1", "--seeds", "2", "--data", dataset, "--out", tmp_path / sub, *FAST)
        assert code == 0
    rows = list(csv.reader((tmp_path / "a/sweep.csv").open()))
    assert rows[0] == ["param", "value", "seed", "val_acc", "test_acc", "status"]
    assert [(r[1], r[2]) for r in rows[1:]] == [("0.1", "0"), ("0.1", "1"), ("0.3", "0"), ("0.3", "1")]
    assert (tmp_path / "a/sweep.csv").read_bytes() == (tmp_path / "b/sweep.csv").read_bytes()
    assert (tmp_path / "a/lambda=0.1/mme-cosine-s3-seed1/summary.json").is_file()


def test_sweep_parallel_matches_serial(dataset, tmp_path, capsys, monkeypatch):
    args = ("sweep", "--values", "0.1,1.0", "--seeds", "1", "--data", dataset, *FAST)
    monkeypatch.setenv("MME_LAB_THREADS", "1")
    run(capsys, *args, "--out", tmp_path / "serial")
    monkeypatch.setenv("MME_LAB_THREADS", "2")
    run(capsys, *args, "--out", tmp_path / "par")
    assert (tmp_path / "serial/sweep.csv").read_bytes() == (tmp_path / "par/sweep.csv").read_bytes()


def test_sweep_child_failure_exit_one(dataset, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MME_LAB_THREADS", "1")
    code, _, err = run(capsys, "sweep", "--param", "lr", "--values", "0.01,1e300", "--data", dataset, "--method", "s+t", "--out", tmp_path, *FAST)
    assert code == 1 and "failed" in err
    rows = list(csv.reader((tmp_path / "sweep.csv").open()))
    assert [r[-1] for r in rows[1:]] == ["ok", "failed"]


def test_sweep_bad_values(dataset, tmp_path, capsys):
    code, _, _ = run(capsys, "sweep", "--values", "a,b", "--data", dataset, "--out", tmp_path)
    assert code == 2


def test_stdout_is_machine_readable(dataset, tmp_path, capsys):
    _, out, _ = run(capsys, "train", "--data", dataset, "--out", tmp_path, "--seed", "1", *FAST)
    for line in out.splitlines():
        key, _, value = line.partition("=")
        assert key.isidentifier() and value
