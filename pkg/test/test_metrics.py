import numpy as np
import pytest

from wrfgs.exceptions import MetricError, ShapeMismatchError
from wrfgs.train.metrics import MetricReport, cea, summarize


def _gt():
    rng = np.random.default_rng(0)
    return rng.normal(size=26) + 1j * rng.normal(size=26)


def test_cea_exact_prediction_is_capped():
    gt = _gt()
    assert cea(gt, gt) == 300.0


def test_cea_zero_prediction():
    assert cea(np.zeros(26), _gt()) == pytest.approx(0.0)


def test_cea_scaled_prediction():
    gt = _gt()
    assert cea(gt * 1.1, gt) == pytest.approx(20.0)


def test_cea_errors():
    with pytest.raises(MetricError):
        cea(_gt(), np.zeros(26))
    with pytest.raises(ShapeMismatchError):
        cea(np.ones(3), _gt())


def test_summarize_nearest_rank():
    summary = summarize([float(v) for v in range(10, 0, -1)])
    assert summary.count == 10
    assert summary.median == 5.0
    assert summary.p10 == 1.0
    assert summary.p90 == 9.0
    assert summarize([7.0]).median == 7.0
    with pytest.raises(MetricError):
        summarize([])


def test_report_rejects_ragged_columns():
    with pytest.raises(ValueError, match="records"):
        MetricReport([1, 2], ssim_per_sample=[0.5])


def test_report_round_trip(tmp_path):
    report = MetricReport([3, 1, 2], rssi_abs_error_db=[0.1, 1 / 3, 2.5])
    path = tmp_path / "metrics.csv"
    report.write_csv(path)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "id,rssi_abs_error_db"
    restored = MetricReport.read_csv(path)
    assert restored.record_ids == [3, 1, 2]
    assert restored.rssi_abs_error_db == report.rssi_abs_error_db
    assert restored.summaries() == report.summaries()


def test_summary_is_recomputable_from_rows(tmp_path):
    values = [0.91, 0.42, 0.77, 0.65, 0.88]
    report = MetricReport(list(range(5)), ssim_per_sample=values)
    report.write_summary(tmp_path / "summary.csv")
    lines = (tmp_path / "summary.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "metric,statistic,value"
    rows = {tuple(line.split(",")[:2]): float(line.split(",")[2]) for line in lines[1:]}
    assert rows[("ssim", "count")] == 5
    assert rows[("ssim", "median")] == 0.77
    assert rows[("ssim", "p10")] == 0.42
    assert rows[("ssim", "p90")] == 0.91
