"""可训练参数表。

全部可训练标量以扁平的 `名字 → 数组` 形式存放，每个参数都有形状相同的梯度槽。
高斯属性以 `gauss.` 为前缀，第一维为高斯下标；网络权重以网络名为前缀。
"""

from dataclasses import dataclass, field
from typing import Self

import numpy as np
from scipy.spatial import KDTree

from wrfgs.em import GaussianPrimitive, normalize_quaternion, to_complex
from wrfgs.typing import FloatArray, GradDict, IntArray, ParamDict

__all__ = [
    "CALIBRATION",
    "GAUSSIAN_KEYS",
    "MU",
    "OPACITY",
    "ParamStore",
    "ROT",
    "SCALE",
    "SIGNAL",
    "nearest_neighbor_scale",
]

MU = "gauss.mu"
ROT = "gauss.rot"
SCALE = "gauss.log_scale"
OPACITY = "gauss.opacity_logit"
SIGNAL = "gauss.signal"
CALIBRATION = "calibration"

GAUSSIAN_KEYS = (MU, ROT, SCALE, OPACITY, SIGNAL)
"""逐高斯参数名。"""


def nearest_neighbor_scale(points: FloatArray, k: int = 3) -> FloatArray:
    """每个点到最近 `k` 个其他点的平均距离。

    点数不足 `k + 1` 时使用全部其他点。
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        return np.ones(n)
    k_eff = min(k, n - 1)
    dist, _ = KDTree(points).query(points, k=k_eff + 1)
    return np.mean(np.asarray(dist).reshape(n, -1)[:, 1:], axis=1)


@dataclass
class ParamStore:
    """全部可训练参数及其梯度。

    Attributes:
        params: 参数表。
        grads: 梯度表，键与形状均与 `params` 相同。
        bounds: 坐标归一化使用的场景包围盒 `(2, 3)`，第一行为下界。
        step_count: 已完成的优化步数。
        csi_scale: CSI 数值的数据集级缩放因子。
    """

    params: ParamDict
    bounds: FloatArray
    grads: GradDict = field(default_factory=dict)
    step_count: int = 0
    csi_scale: float = 1.0

    def __post_init__(self) -> None:
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if np.any(self.bounds[1] <= self.bounds[0]):
            raise ValueError("scene bounds must have positive extent")
        self.zero_grad()

    @property
    def n_gaussians(self) -> int:
        return int(self.params[MU].shape[0])

    @property
    def d_sig(self) -> int:
        return int(self.params[SIGNAL].shape[1])

    @property
    def extent(self) -> FloatArray:
        return self.bounds[1] - self.bounds[0]

    def zero_grad(self) -> None:
        """将全部梯度槽清零，缺失的槽按参数形状补齐。"""
        self.grads = {name: np.zeros_like(value) for name, value in self.params.items()}

    def accumulate(self, grads: GradDict) -> None:
        """把一组梯度累加到梯度槽。"""
        for name, value in grads.items():
            self.grads[name] += value

    def normalize_points(self, points: FloatArray) -> FloatArray:
        """将包围盒内的点映射到 `[−1, 1]³`。"""
        lo, hi = self.bounds
        return 2.0 * (np.asarray(points) - lo) / (hi - lo) - 1.0

    @property
    def normalize_gain(self) -> FloatArray:
        """`normalize_points` 的逐轴导数。"""
        return 2.0 / self.extent

    def gaussians(self) -> list[GaussianPrimitive]:
        """以 `GaussianPrimitive` 列表形式查看全部高斯的静态属性。"""
        signal = to_complex(self.params[SIGNAL])
        return [
            GaussianPrimitive(
                mu=self.params[MU][i].copy(),
                rot=self.params[ROT][i].copy(),
                log_scale=self.params[SCALE][i].copy(),
                opacity_logit=float(self.params[OPACITY][i]),
                static_signal=signal[i].copy(),
            )
            for i in range(self.n_gaussians)
        ]

    def network_names(self) -> list[str]:
        return [n for n in self.params if n not in GAUSSIAN_KEYS]

    def reindex(self, source: IntArray, fresh: dict[str, FloatArray]) -> None:
        """按索引重建逐高斯参数。

        Args:
            source: 新的每个高斯来自哪个旧高斯，`-1` 表示取自 `fresh`。
            fresh: 新增高斯的属性，按 `source == -1` 的出现顺序排列。
        """
        new_rows = source < 0
        for name in GAUSSIAN_KEYS:
            old = self.params[name]
            out = np.empty((len(source), *old.shape[1:]))
            out[~new_rows] = old[source[~new_rows]]
            if np.any(new_rows):
                out[new_rows] = fresh[name]
            self.params[name] = out
            self.grads[name] = np.zeros_like(out)
        self.params[ROT] = normalize_quaternion(self.params[ROT])

    def copy(self) -> Self:
        clone = type(self)(
            {k: v.copy() for k, v in self.params.items()},
            self.bounds.copy(),
            step_count=self.step_count,
            csi_scale=self.csi_scale,
        )
        clone.grads = {k: v.copy() for k, v in self.grads.items()}
        return clone
