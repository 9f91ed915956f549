import csv
import io
import json

import numpy as np
import pytest
from fake_scene import small_config
from PIL import Image

from wrfgs.cli import EXIT_ABORT, EXIT_INVALID, heatmap, main
from wrfgs.dataset import Dataset, read_spectrum
from wrfgs.exceptions import NumericalAbort
from wrfgs.train.loop import Trainer
from wrfgs.train.metrics import MetricReport


def _write_config(path, task="spectrum", **train):
    path.write_text(json.dumps(small_config(task, **train).model_dump(mode="json")), encoding="utf-8")
    return path


def _run(*argv):
    err = io.StringIO()
    return main([str(a) for a in argv], stderr=err), err.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for task in ("spectrum", "rssi", "csi"):
        config = _write_config(root / f"{task}.json", task)
        code, err = _run("gen", "--config", config, "--out", root / f"{task}-data")
        assert code == 0, err
        code, err = _run(
            "train", "--config", config, "--dataset", root / f"{task}-data", "--out", root / f"{task}-run"
        )
        assert code == 0, err
    return root


def test_help_and_usage_errors(capsys):
    assert _run("--help")[0] == 0
    assert "wrfgs" in capsys.readouterr().out
    code, err = _run()
    assert code == EXIT_INVALID
    assert "error" in err
    assert _run("render", "--checkpoint", "x")[0] == EXIT_INVALID
    assert _run("train", "--dataset", "d", "--out", "o", "--pipeline", "nerf")[0] == EXIT_INVALID


def test_invalid_config_exits_2(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[train]\neta = 1.5\n", encoding="utf-8")
    code, err = _run("gen", "--config", path, "--out", tmp_path / "data")
    assert code == EXIT_INVALID
    assert f"{path}:2" in err
    assert _run("gen", "--threads", "0", "--out", tmp_path / "data")[0] == EXIT_INVALID


def test_gen_flags_override_config(tmp_path):
    config = _write_config(tmp_path / "c.json")
    code, _ = _run(
        "gen", "--config", config, "--out", tmp_path / "data", "--task", "rssi",
        "--n-train", "3", "--n-eval", "1", "--seed", "5",
    )
    assert code == 0
    dataset = Dataset.load(tmp_path / "data")
    assert dataset.manifest.task == "rssi"
    assert dataset.manifest.split_seed == 5
    assert (len(dataset.train_records), len(dataset.eval_records)) == (3, 1)


def test_train_outputs(workspace):
    run = workspace / "spectrum-run"
    assert (run / "checkpoint.wrfgs").is_file()
    assert len((run / "loss.log").read_text(encoding="utf-8").splitlines()) == 3
    report = MetricReport.read_csv(run / "metrics.csv")
    assert len(report.ssim_per_sample) == 2


def test_render_writes_spectrum_and_heatmap(workspace, tmp_path):
    code, err = _run(
        "render", "--checkpoint", workspace / "spectrum-run" / "checkpoint.wrfgs",
        "--tx", "4.5", "2.5", "1.8", "--out", tmp_path, "--heatmap",
    )
    assert code == 0, err
    values = read_spectrum(tmp_path / "spectrum_0000.wspc")
    assert values.shape == (9, 36)
    image = np.asarray(Image.open(tmp_path / "heatmap_0000.png"))
    assert image.shape == (9, 36)
    assert np.unravel_index(np.argmax(image), image.shape) == np.unravel_index(
        np.argmax(values), values.shape
    )
    with (tmp_path / "render.csv").open(newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert float(rows[0]["scale_max"]) == pytest.approx(float(values.max()))


def test_render_query_file(workspace, tmp_path):
    query = tmp_path / "query.csv"
    query.write_text("x,y,z\n4.5,2.5,1.8\n1.0,1.0,2.0\n", encoding="utf-8")
    code, _ = _run(
        "render", "--checkpoint", workspace / "spectrum-run" / "checkpoint.wrfgs",
        "--query", query, "--out", tmp_path / "out",
    )
    assert code == 0
    assert (tmp_path / "out" / "spectrum_0001.wspc").is_file()
    assert not (tmp_path / "out" / "heatmap_0000.png").exists()
    query.write_text("x,y\n1,2\n", encoding="utf-8")
    code, _ = _run(
        "render", "--checkpoint", workspace / "spectrum-run" / "checkpoint.wrfgs",
        "--query", query, "--out", tmp_path / "out",
    )
    assert code == EXIT_INVALID


def test_heatmap_scaling():
    values = np.array([[0.0, 1.0], [0.5, 2.0]])
    image, low, high = heatmap(values)
    np.testing.assert_array_equal(image, [[0, 127], [63, 255]])
    assert (low, high) == (0.0, 2.0)
    assert np.all(heatmap(np.ones((2, 2)))[0] == 0)


def test_eval_summary_is_recomputable(workspace, tmp_path):
    code, err = _run(
        "eval", "--checkpoint", workspace / "spectrum-run" / "checkpoint.wrfgs",
        "--dataset", workspace / "spectrum-data", "--out", tmp_path, "--split", "train",
    )
    assert code == 0, err
    report = MetricReport.read_csv(tmp_path / "metrics.csv")
    assert len(report.record_ids) == 4
    summary = (tmp_path / "summary.csv").read_text(encoding="utf-8").splitlines()
    assert summary[0] == "metric,statistic,value"
    expected = report.summaries()["ssim"]
    rows = {tuple(line.split(",")[:2]): float(line.split(",")[2]) for line in summary[1:]}
    assert rows[("ssim", "median")] == expected.median
    assert rows[("ssim", "p90")] == expected.p90


def test_eval_rejects_empty_split_and_mismatch(workspace, tmp_path):
    config = _write_config(tmp_path / "c.json")
    assert _run("gen", "--config", config, "--out", tmp_path / "data", "--n-eval", "0")[0] == 0
    code, err = _run(
        "eval", "--checkpoint", workspace / "spectrum-run" / "checkpoint.wrfgs",
        "--dataset", tmp_path / "data", "--out", tmp_path / "out",
    )
    assert code == EXIT_INVALID
    assert "empty" in err
    code, _ = _run(
        "eval", "--checkpoint", workspace / "rssi-run" / "checkpoint.wrfgs",
        "--dataset", workspace / "spectrum-data", "--out", tmp_path / "out",
    )
    assert code == EXIT_INVALID


def test_predict_rssi(workspace, tmp_path):
    query = tmp_path / "query.csv"
    query.write_text("x,y,z\n4.5,2.5,1.8\n1.0,1.0,2.0\n", encoding="utf-8")
    out = tmp_path / "rssi.csv"
    code, err = _run(
        "predict-rssi", "--checkpoint", workspace / "rssi-run" / "checkpoint.wrfgs",
        "--query", query, "--out", out,
    )
    assert code == 0, err
    with out.open(newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [row["query"] for row in rows] == ["0", "1"]
    assert all(float(row["rssi_db"]) >= -100.0 for row in rows)
    code, _ = _run(
        "predict-rssi", "--checkpoint", workspace / "spectrum-run" / "checkpoint.wrfgs",
        "--tx", "1", "1", "1", "--out", out,
    )
    assert code == EXIT_INVALID


def test_predict_csi(workspace, tmp_path):
    dataset = Dataset.load(workspace / "csi-data")
    uplink = tmp_path / "uplink.csv"
    with uplink.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([f"up_re_{k}" for k in range(26)] + [f"up_im_{k}" for k in range(26)])
        for record in dataset.eval_records:
            writer.writerow([*record.uplink.real, *record.uplink.imag])
    out = tmp_path / "csi.csv"
    code, err = _run(
        "predict-csi", "--checkpoint", workspace / "csi-run" / "checkpoint.wrfgs",
        "--uplink", uplink, "--out", out,
    )
    assert code == 0, err
    with out.open(newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    assert len(rows[0]) == 1 + 2 * 26
    assert all(np.isfinite(float(v)) for v in rows[0].values())


def test_missing_checkpoint_exits_2(tmp_path):
    code, err = _run("predict-rssi", "--checkpoint", tmp_path / "nope", "--tx", "1", "1", "1", "--out", tmp_path / "o.csv")
    assert code == EXIT_INVALID
    assert "can not read" in err


def test_numerical_abort_exits_3(workspace, tmp_path, monkeypatch):
    def abort(self):
        raise NumericalAbort("non-finite loss at iteration 1", tmp_path / "nan_dump.json")

    monkeypatch.setattr(Trainer, "run", abort)
    code, err = _run(
        "train", "--config", workspace / "rssi.json", "--dataset", workspace / "rssi-data",
        "--out", tmp_path,
    )
    assert code == EXIT_ABORT
    assert "numerical abort" in err


def test_eval_replays_training_metrics(workspace, tmp_path):
    code, _ = _run(
        "eval", "--checkpoint", workspace / "rssi-run" / "checkpoint.wrfgs",
        "--dataset", workspace / "rssi-data", "--out", tmp_path, "--threads", "2",
    )
    assert code == 0
    logged = MetricReport.read_csv(workspace / "rssi-run" / "metrics.csv")
    replayed = MetricReport.read_csv(tmp_path / "metrics.csv")
    assert replayed.record_ids == logged.record_ids
    np.testing.assert_allclose(replayed.rssi_abs_error_db, logged.rssi_abs_error_db, rtol=0, atol=1e-9)


def test_unwritable_out_exits_2(workspace, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("", encoding="utf-8")
    code, err = _run(
        "predict-rssi", "--checkpoint", workspace / "rssi-run" / "checkpoint.wrfgs",
        "--tx", "4.5", "2.5", "1.8", "--out", blocker / "rssi.csv",
    )
    assert code == EXIT_INVALID
    assert "can not write" in err


def test_non_finite_tx_exits_2(workspace, tmp_path):
    code, err = _run(
        "predict-rssi", "--checkpoint", workspace / "rssi-run" / "checkpoint.wrfgs",
        "--tx", "nan", "2.5", "1.8", "--out", tmp_path / "rssi.csv",
    )
    assert code == EXIT_INVALID
    assert "3-vector" in err
    assert not (tmp_path / "rssi.csv").exists()
