"""评估指标与汇总。

百分位数统一使用最近秩法：第 p 百分位数是升序排列后第 `⌈p/100 · n⌉` 个值，
因此汇总可以从逐条记录的 CSV 重新算出。
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wrfgs.consts import CEA_CAP_DB
from wrfgs.exceptions import MetricError, ShapeMismatchError
from wrfgs.typing import ComplexArray
from wrfgs.utils import nearest_rank_percentile

__all__ = ["MetricReport", "MetricSummary", "cea", "summarize"]


def cea(pred_csi: ComplexArray, gt_csi: ComplexArray) -> float:
    """信道估计精度 `−10·log10(‖pred − gt‖² / ‖gt‖²)`，单位 dB。

    完全预测时返回封顶值 300 dB。

    Raises:
        ShapeMismatchError: 长度不一致。
        MetricError: `gt_csi` 全为 0。
    """
    pred = np.asarray(pred_csi, dtype=np.complex128)
    gt = np.asarray(gt_csi, dtype=np.complex128)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"cea of shapes {pred.shape} and {gt.shape}")
    reference = float(np.sum(np.abs(gt) ** 2))
    if reference == 0:
        raise MetricError("cea is undefined for an all-zero ground truth")
    error = float(np.sum(np.abs(pred - gt) ** 2))
    if error == 0:
        return CEA_CAP_DB
    return float(min(-10 * np.log10(error / reference), CEA_CAP_DB))


@dataclass(frozen=True)
class MetricSummary:
    """中位数与第 10、90 百分位数。"""

    count: int
    median: float
    p10: float
    p90: float


def summarize(values: list[float]) -> MetricSummary:
    """按最近秩法汇总。

    Raises:
        MetricError: `values` 为空。
    """
    if not values:
        raise MetricError("can not summarize an empty metric list")
    return MetricSummary(
        count=len(values),
        median=nearest_rank_percentile(values, 50),
        p10=nearest_rank_percentile(values, 10),
        p90=nearest_rank_percentile(values, 90),
    )


@dataclass
class MetricReport:
    """一次评估的逐记录指标。

    只有与任务对应的列表非空，非空列表的长度等于评估集大小。

    Attributes:
        record_ids: 评估记录编号。
        ssim_per_sample: 空间谱 SSIM。
        rssi_abs_error_db: RSSI 绝对误差，单位 dB。
        cea_db: CSI 的 CEA，单位 dB。
    """

    record_ids: list[int]
    ssim_per_sample: list[float] = field(default_factory=list)
    rssi_abs_error_db: list[float] = field(default_factory=list)
    cea_db: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.record_ids = [int(i) for i in self.record_ids]
        self.ssim_per_sample = [float(v) for v in self.ssim_per_sample]
        self.rssi_abs_error_db = [float(v) for v in self.rssi_abs_error_db]
        self.cea_db = [float(v) for v in self.cea_db]
        for name, values in self.columns().items():
            if len(values) != len(self.record_ids):
                raise ValueError(
                    f"{name} holds {len(values)} values for {len(self.record_ids)} records"
                )

    def columns(self) -> dict[str, list[float]]:
        """非空的指标列。"""
        all_columns = {
            "ssim": self.ssim_per_sample,
            "rssi_abs_error_db": self.rssi_abs_error_db,
            "cea_db": self.cea_db,
        }
        return {k: v for k, v in all_columns.items() if v}

    def summaries(self) -> dict[str, MetricSummary]:
        return {name: summarize(values) for name, values in self.columns().items()}

    def write_csv(self, path: Path) -> None:
        """写出逐记录 CSV，浮点数使用 `repr` 以便无损读回。"""
        columns = self.columns()
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["id", *columns])
            for row, record_id in enumerate(self.record_ids):
                writer.writerow([record_id, *(repr(v[row]) for v in columns.values())])

    def write_summary(self, path: Path) -> None:
        """写出汇总块：`metric,statistic,value`。"""
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["metric", "statistic", "value"])
            for name, summary in self.summaries().items():
                writer.writerow([name, "count", summary.count])
                writer.writerow([name, "median", repr(summary.median)])
                writer.writerow([name, "p10", repr(summary.p10)])
                writer.writerow([name, "p90", repr(summary.p90)])

    @classmethod
    def read_csv(cls, path: Path) -> "MetricReport":
        with path.open(newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        ids = [int(r[0]) for r in body]
        values = {name: [float(r[i]) for r in body] for i, name in enumerate(header) if i}
        return cls(
            ids,
            ssim_per_sample=values.get("ssim", []),
            rssi_abs_error_db=values.get("rssi_abs_error_db", []),
            cea_db=values.get("cea_db", []),
        )
