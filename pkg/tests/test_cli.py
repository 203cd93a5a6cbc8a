import csv
import json
import math
import subprocess
import sys

import pytest

from conftest import make_cifar_archive, tiny_config
from ressl.cli import main
from ressl.config import ExperimentConfig, load_config
from ressl.evaluation import read_embeddings


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, json.loads(out) if code == 0 else None, json.loads(err) if code else None


@pytest.fixture
def cfg_file(tmp_path, ingested_cifar):
    path = tmp_path / "cfg.yaml"
    tiny_config(dataset={"name": "cifar10", "root_path": str(ingested_cifar)}).save(path)
    return path


@pytest.fixture
def pretrained(tmp_path, capsys, cfg_file):
    code, out, _ = run(capsys, "pretrain", "--config", cfg_file, "--out", tmp_path / "run")
    assert code == 0
    return out


def test_ingest(tmp_path, capsys):
    make_cifar_archive(tmp_path / "cifar-10-python.tar.gz", fine=False, per_class_train=3, per_class_test=2)
    code, out, _ = run(capsys, "ingest", "--dataset", "cifar10", "--root", tmp_path, "--no-verify",
                       "--lenient-counts")
    assert code == 0
    assert out["train"]["count"] == 30 and out["test"]["count"] == 20


def test_ingest_missing_archive(tmp_path, capsys):
    code, _, err = run(capsys, "ingest", "--dataset", "cifar10", "--root", tmp_path)
    assert code == 1 and err["error"] == "io" and "cifar-10-python.tar.gz" in err["path"]


def test_pretrain_is_reproducible(tmp_path, capsys, cfg_file, pretrained):
    code, out, _ = run(capsys, "pretrain", "--config", cfg_file, "--out", tmp_path / "again")
    assert code == 0
    a = open(pretrained["metrics"]).read()
    assert a and a == open(out["metrics"]).read()
    assert pretrained["steps"] == 16


def test_pretrain_overrides(tmp_path, capsys, cfg_file):
    code, out, _ = run(capsys, "pretrain", "--config", cfg_file, "--out", tmp_path / "o", "--epochs", "1",
                       "--queue-capacity", "32", "--seed", "3")
    assert code == 0 and out["steps"] == 8
    saved = load_config(tmp_path / "o" / "config.yaml")
    assert (saved.queue_capacity, saved.seed, saved.epochs) == (32, 3, 1)


@pytest.mark.parametrize("argv", [
    ["pretrain", "--tau-t", "0.2", "--tau-s", "0.1"],
    ["pretrain", "--no-such-flag"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(tmp_path, capsys, cfg_file, argv):
    code, _, err = run(capsys, *argv, "--config", cfg_file, "--out", tmp_path / "x")
    assert code == 2 and err["message"]


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("batch_size: [unclosed")
    code, _, err = run(capsys, "pretrain", "--config", bad, "--out", tmp_path / "x")
    assert code == 2 and "malformed" in err["message"]
    bad.write_text("batch_sise: 8\n")
    code, _, err = run(capsys, "pretrain", "--config", bad, "--out", tmp_path / "x")
    assert code == 2 and "batch_sise" in err["message"]


def test_missing_checkpoint_names_path(tmp_path, capsys):
    missing = tmp_path / "gone.ckpt"
    for cmd in ("knn", "linear-eval"):
        code, _, err = run(capsys, cmd, "--checkpoint", missing)
        assert code != 0 and err["path"] == str(missing)


def test_knn_and_linear_eval(tmp_path, capsys, pretrained):
    code, out, _ = run(capsys, "knn", "--checkpoint", pretrained["checkpoint"], "--k", "5",
                       "--out", tmp_path / "knn.json")
    assert code == 0 and out["kind"] == "knn"
    assert json.loads((tmp_path / "knn.json").read_text())["top1"] == out["top1"]
    code, out, _ = run(capsys, "linear-eval", "--checkpoint", pretrained["checkpoint"], "--epochs", "3",
                       "--milestones", "1,2", "--batch-size", "16", "--out", tmp_path / "lin")
    assert code == 0 and out["kind"] == "linear" and (tmp_path / "lin" / "eval.json").exists()


def test_export_embeddings(tmp_path, capsys, pretrained):
    code, out, _ = run(capsys, "export-embeddings", "--checkpoint", pretrained["checkpoint"], "--split", "test",
                       "--out", tmp_path / "emb.bin")
    assert code == 0
    ids, labels, vecs = read_embeddings(out["embeddings"])
    assert vecs.shape == (40, 16)


def test_sweep_orders_rows_and_writes_table(tmp_path, capsys, cfg_file):
    code, out, _ = run(capsys, "sweep", "--config", cfg_file, "--axis", "tau_t", "--values", "0.07,0.04",
                       "--budget-epochs", "1", "--out", tmp_path / "sw")
    assert code == 0
    assert [r["value"] for r in out["rows"]] == [0.04, 0.07]
    assert all(r["status"] == "ok" for r in out["rows"])
    table = list(csv.DictReader(open(out["table"])))
    assert [float(r["value"]) for r in table] == [0.04, 0.07]
    assert len({r["config_hash"] for r in table}) == 2
    # a finished sweep reruns from the stored rows
    code, again, _ = run(capsys, "sweep", "--config", cfg_file, "--axis", "tau_t", "--values", "0.04,0.07",
                         "--budget-epochs", "1", "--out", tmp_path / "sw")
    assert again["rows"] == out["rows"]


def test_sweep_records_failed_row(tmp_path, capsys, cfg_file, monkeypatch):
    from ressl import trainer

    real = trainer.Trainer.run

    def flaky(self, *a, **kw):
        if self.config.tau_t == 0.05:
            raise RuntimeError("boom")
        return real(self, *a, **kw)

    monkeypatch.setattr(trainer.Trainer, "run", flaky)
    code, out, _ = run(capsys, "sweep", "--config", cfg_file, "--axis", "tau_t", "--values", "0.04,0.05",
                       "--budget-epochs", "1", "--out", tmp_path / "sw")
    assert code == 0
    ok, bad = out["rows"]
    assert ok["status"] == "ok" and bad["status"] == "failed" and "boom" in bad["error"]
    assert (tmp_path / "sw" / "tau_t=0.05" / "error.txt").exists()


def test_sweep_bad_values(tmp_path, capsys, cfg_file):
    code, _, err = run(capsys, "sweep", "--config", cfg_file, "--axis", "queue_capacity", "--values", "a,b",
                       "--out", tmp_path)
    assert code == 2


def test_plot_lr_schedule_peaks_after_warmup(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    ExperimentConfig(epochs=200).save(cfg)
    code, out, _ = run(capsys, "plot", "--kind", "lr_curve", "--config", cfg, "--steps-per-epoch", "10",
                       "--out", tmp_path / "p")
    assert code == 0
    rows = list(csv.DictReader(open(out["csv"])))
    assert len(rows) == 2000
    lrs = [float(r["lr"]) for r in rows]
    peak = max(range(len(lrs)), key=lrs.__getitem__)
    assert float(rows[peak]["epoch"]) == 5.0
    assert lrs[peak] == pytest.approx(0.06)


def test_plot_curves_from_metrics(tmp_path, capsys, pretrained):
    for kind, col in (("loss_curve", "loss"), ("entropy_curve", "teacher_entropy"), ("lr_curve", "lr")):
        code, out, _ = run(capsys, "plot", "--kind", kind, pretrained["metrics"], "--out", tmp_path / kind)
        assert code == 0
        rows = list(csv.DictReader(open(out["csv"])))
        assert rows and all(math.isfinite(float(r[col])) for r in rows)


def test_plot_sweep_bar(tmp_path, capsys):
    table = tmp_path / "sweep.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "top1", "config_hash", "status", "error", "collapse_warning"])
        w.writerow(["tau_t", "0.01", "40.0", "a", "ok", "", "False"])
        w.writerow(["tau_t", "0.04", "55.0", "b", "ok", "", "False"])
        w.writerow(["tau_t", "0.07", "", "c", "failed", "x", ""])
    code, out, _ = run(capsys, "plot", "--kind", "sweep_bar", table, "--out", tmp_path / "bar")
    assert code == 0
    assert len(list(csv.DictReader(open(out["csv"])))) == 3


def test_console_script_exit_codes():
    proc = subprocess.run([sys.executable, "-m", "ressl.cli", "pretrain", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "usage"
