"""自适应密度控制：克隆、分裂与剪枝。"""

from dataclasses import dataclass, field

import numpy as np

from wrfgs.config import DensityConfig
from wrfgs.em import normalize_quaternion, quaternion_to_rotation, sigmoid
from wrfgs.log import logger
from wrfgs.scene.store import GAUSSIAN_KEYS, MU, OPACITY, ROT, SCALE, ParamStore
from wrfgs.typing import BoolArray, FloatArray, IntArray

__all__ = ["DensityResult", "DensityStats", "densify_and_prune", "should_densify"]


@dataclass
class DensityStats:
    """两次密度控制之间累积的逐高斯统计量。

    Attributes:
        grad_norm: 位置梯度范数之和。
        grad_vec: 位置梯度之和，用于决定克隆的移动方向。
        count: 累积次数。
        max_radius: 观测到的最大足迹半径，单位像素。
    """

    grad_norm: FloatArray
    grad_vec: FloatArray
    count: FloatArray
    max_radius: FloatArray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def empty(cls, n: int) -> "DensityStats":
        return cls(np.zeros(n), np.zeros((n, 3)), np.zeros(n), np.zeros(n))

    def add(self, grad_mu: FloatArray, visible: BoolArray, radius: FloatArray) -> None:
        """记录一次反向传播的位置梯度，只统计可见的高斯。"""
        self.grad_norm[visible] += np.linalg.norm(grad_mu[visible], axis=-1)
        self.grad_vec[visible] += grad_mu[visible]
        self.count[visible] += 1
        self.max_radius = np.maximum(self.max_radius, np.where(visible, radius, 0.0))

    def average(self) -> FloatArray:
        return np.divide(
            self.grad_norm, self.count, out=np.zeros_like(self.grad_norm), where=self.count > 0
        )


@dataclass
class DensityResult:
    """一次密度控制的结果。

    Attributes:
        source: 新的每个高斯来自哪个旧高斯，新生成的为 `-1`。
        cloned: 克隆数量。
        split: 分裂数量 (被分裂的原高斯个数)。
        pruned: 剪枝数量。
    """

    source: IntArray
    cloned: int
    split: int
    pruned: int


def should_densify(iteration: int, config: DensityConfig) -> bool:
    """第 `iteration` 次迭代 (从 1 开始) 之后是否执行密度控制。"""
    return (
        config.warmup < iteration <= config.until and iteration % config.interval == 0
    )


def _select_growth(
    avg: FloatArray, candidates: BoolArray, room: int
) -> BoolArray:
    """在数量上限内按梯度从大到小挑选需要增长的高斯。"""
    index = np.flatnonzero(candidates)
    if len(index) > room:
        order = np.lexsort((index, -avg[index]))
        index = np.sort(index[order[:room]])
    chosen = np.zeros_like(candidates)
    chosen[index] = True
    return chosen


def densify_and_prune(
    store: ParamStore,
    stats: DensityStats,
    config: DensityConfig,
    *,
    canvas_width: int,
    prune_by_opacity: bool,
    rng: np.random.Generator,
) -> DensityResult:
    """执行一次克隆、分裂与剪枝，原地修改 `store`。

    平均位置梯度范数超过 `τ_g` 的高斯中，最大尺度小于 `τ_s` 的被克隆，
    克隆体沿负梯度方向移动一个最大尺度；其余被分裂为两个，新中心按原高斯分布采样，
    尺度除以 `split_factor`。总数达到 `max_gaussians` 时不再增长。
    不透明度低于阈值 (仅 `prune_by_opacity`) 或足迹半径超过半个画布宽度的高斯被剪枝，
    但数量不会低于 `min_gaussians`。

    Returns:
        供优化器重排状态的索引映射与各项计数。
    """
    n = store.n_gaussians
    p = store.params
    avg = stats.average()
    scale = np.exp(p[SCALE])
    max_scale = np.max(scale, axis=1)
    tau_s = config.scale_fraction * float(np.max(store.extent))
    hot = avg > config.grad_threshold

    room = max(config.max_gaussians - n, 0)
    grow = _select_growth(avg, hot, room)
    clone = grow & (max_scale < tau_s)
    split = grow & ~clone

    fresh: dict[str, list[FloatArray]] = {name: [] for name in GAUSSIAN_KEYS}
    if np.any(clone):
        direction = -stats.grad_vec[clone]
        norm = np.linalg.norm(direction, axis=-1, keepdims=True)
        direction = np.divide(direction, norm, out=np.zeros_like(direction), where=norm > 0)
        for name in GAUSSIAN_KEYS:
            fresh[name].append(p[name][clone].copy())
        fresh[MU][-1] = fresh[MU][-1] + direction * max_scale[clone, None]

    if np.any(split):
        rot = quaternion_to_rotation(normalize_quaternion(p[ROT][split]))
        for _ in range(2):
            samples = rng.normal(0.0, 1.0, size=(int(split.sum()), 3)) * scale[split]
            for name in GAUSSIAN_KEYS:
                fresh[name].append(p[name][split].copy())
            fresh[MU][-1] = fresh[MU][-1] + np.einsum("nij,nj->ni", rot, samples)
            fresh[SCALE][-1] = fresh[SCALE][-1] - np.log(config.split_factor)

    survivors = np.flatnonzero(~split)
    n_fresh = sum(len(chunk) for chunk in fresh[MU])
    source = np.concatenate([survivors, np.full(n_fresh, -1)]).astype(np.int64)
    new_rows = {
        name: np.concatenate(chunks) if chunks else np.zeros((0, *p[name].shape[1:]))
        for name, chunks in fresh.items()
    }

    opacity = sigmoid(np.concatenate([p[OPACITY][survivors], new_rows[OPACITY]]))
    radius = np.concatenate([stats.max_radius[survivors], np.zeros(n_fresh)])
    doomed = radius > canvas_width / 2
    if prune_by_opacity:
        doomed |= opacity < config.opacity_prune
    excess = len(source) - config.min_gaussians
    if int(doomed.sum()) > max(excess, 0):
        index = np.flatnonzero(doomed)
        order = np.lexsort((index, opacity[index]))
        keep_doomed = index[order[: max(excess, 0)]]
        doomed = np.zeros_like(doomed)
        doomed[keep_doomed] = True

    keep = ~doomed
    new_keep = keep[len(survivors) :]
    store.reindex(
        source[keep],
        {name: rows[new_keep] for name, rows in new_rows.items()},
    )
    result = DensityResult(
        source=source[keep],
        cloned=int(clone.sum()),
        split=int(split.sum()),
        pruned=int(doomed.sum()),
    )
    logger.info(
        "Densified",
        cloned=result.cloned,
        split=result.split,
        pruned=result.pruned,
        total=store.n_gaussians,
    )
    return result
