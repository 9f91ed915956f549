"""训练所需的数值部件：SSIM、损失、优化器与评估指标。

训练循环位于 [`wrfgs.train.loop`](./loop)，它依赖任务层，因此不在此处导入。
"""

from wrfgs.train.loss import (
    LossTerms,
    csi_loss,
    loss,
    rssi_loss,
    rssi_value,
    spectrum_loss,
)
from wrfgs.train.metrics import MetricReport, MetricSummary, cea, summarize
from wrfgs.train.optim import Adam
from wrfgs.train.ssim import SsimResult, ssim, ssim_with_grad

__all__ = [
    "Adam",
    "LossTerms",
    "MetricReport",
    "MetricSummary",
    "SsimResult",
    "cea",
    "csi_loss",
    "loss",
    "rssi_loss",
    "rssi_value",
    "spectrum_loss",
    "ssim",
    "ssim_with_grad",
    "summarize",
]
