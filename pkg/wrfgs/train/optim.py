"""按参数分组学习率的 Adam 优化器。"""

import numpy as np

from wrfgs.config import TrainConfig
from wrfgs.em import normalize_quaternion
from wrfgs.scene.store import (
    CALIBRATION,
    GAUSSIAN_KEYS,
    MU,
    OPACITY,
    ROT,
    SCALE,
    SIGNAL,
    ParamStore,
)
from wrfgs.typing import FloatArray, IntArray

__all__ = ["Adam"]


class Adam:
    """Adam，`β = (beta1, beta2)`，`ε = adam_eps`。

    高斯中心的学习率从 `lr_position` 按指数衰减到
    `lr_position · position_lr_final_ratio`，其余参数组使用常数学习率。
    每步之后将四元数重新归一化。

    Attributes:
        config: 训练配置。
        exp_avg: 一阶矩估计。
        exp_avg_sq: 二阶矩估计。
    """

    def __init__(self, config: TrainConfig) -> None:
        self.config = config
        self.exp_avg: dict[str, FloatArray] = {}
        self.exp_avg_sq: dict[str, FloatArray] = {}

    def learning_rate(self, name: str, step: int) -> float:
        """第 `step` 步 (从 1 开始) 参数 `name` 的学习率。"""
        cfg = self.config
        if name == MU:
            progress = min(step / cfg.iterations, 1.0)
            return cfg.lr_position * cfg.position_lr_final_ratio**progress
        return {
            SIGNAL: cfg.lr_signal,
            OPACITY: cfg.lr_opacity,
            ROT: cfg.lr_rotation,
            SCALE: cfg.lr_scale,
            CALIBRATION: cfg.lr_calibration,
        }.get(name, cfg.lr_mlp)

    def step(self, store: ParamStore) -> None:
        """用梯度槽中的梯度更新 `store`，并将 `store.step_count` 加一。"""
        cfg = self.config
        t = store.step_count + 1
        bias1 = 1.0 - cfg.beta1**t
        bias2 = 1.0 - cfg.beta2**t
        for name, param in store.params.items():
            grad = store.grads[name]
            m = self.exp_avg.setdefault(name, np.zeros_like(param))
            v = self.exp_avg_sq.setdefault(name, np.zeros_like(param))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (grad * grad)
            denom = np.sqrt(v / bias2) + cfg.adam_eps
            param -= self.learning_rate(name, t) / bias1 * m / denom
        store.params[ROT] = normalize_quaternion(store.params[ROT])
        store.step_count = t

    def remap(self, source: IntArray) -> None:
        """密度控制之后重排逐高斯的矩估计，新生成的高斯矩为 0。"""
        kept = source >= 0
        for state in (self.exp_avg, self.exp_avg_sq):
            for name in GAUSSIAN_KEYS:
                if name not in state:
                    continue
                old = state[name]
                new = np.zeros((len(source), *old.shape[1:]))
                new[kept] = old[source[kept]]
                state[name] = new

    def state_arrays(self) -> dict[str, FloatArray]:
        """以扁平的 `名字 → 数组` 形式导出状态，供检查点保存。"""
        out = {f"adam.m.{k}": v for k, v in self.exp_avg.items()}
        out.update({f"adam.v.{k}": v for k, v in self.exp_avg_sq.items()})
        return out

    def load_state(self, arrays: dict[str, FloatArray]) -> None:
        """从 `state_arrays` 的输出恢复状态。"""
        self.exp_avg = {
            k.removeprefix("adam.m."): v.copy() for k, v in arrays.items() if k.startswith("adam.m.")
        }
        self.exp_avg_sq = {
            k.removeprefix("adam.v."): v.copy() for k, v in arrays.items() if k.startswith("adam.v.")
        }
