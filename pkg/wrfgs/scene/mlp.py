"""全连接 ReLU 网络。

网络权重不保存在对象内部，而是以 `"{prefix}.{i}.weight"` / `"{prefix}.{i}.bias"`
的名字存放在参数表中，前向与反向都是参数表上的纯函数。
"""

from dataclasses import dataclass

import numpy as np

from wrfgs.typing import FloatArray, GradDict, ParamDict

__all__ = ["MlpCache", "MlpLayout"]


@dataclass
class MlpCache:
    """反向传播需要的中间结果。"""

    inputs: list[FloatArray]
    pre_activations: list[FloatArray]
    x: FloatArray


@dataclass(frozen=True)
class MlpLayout:
    """网络结构描述。

    除最后一层外每层后接 ReLU，最后一层为线性输出。

    Attributes:
        prefix: 参数名前缀。
        in_dim: 输入维度。
        widths: 各隐藏层宽度。
        out_dim: 输出维度。
        skip: 若给出，第 `skip` 个隐藏层的输出与原始输入拼接后送入下一层。
    """

    prefix: str
    in_dim: int
    widths: tuple[int, ...]
    out_dim: int
    skip: int | None = None

    @property
    def n_layers(self) -> int:
        return len(self.widths) + 1

    def layer_dims(self) -> list[tuple[int, int]]:
        """每层的 `(fan_in, fan_out)`。"""
        dims: list[tuple[int, int]] = []
        fan_in = self.in_dim
        for i, width in enumerate((*self.widths, self.out_dim)):
            dims.append((fan_in, width))
            fan_in = width + (self.in_dim if self.skip is not None and i + 1 == self.skip else 0)
        return dims

    def names(self) -> list[str]:
        return [
            f"{self.prefix}.{i}.{kind}" for i in range(self.n_layers) for kind in ("weight", "bias")
        ]

    def init(self, rng: np.random.Generator, *, last_std: float = 0.0) -> ParamDict:
        """初始化参数。

        隐藏层使用按扇入缩放的均匀分布 `U(−1/√fan_in, 1/√fan_in)`，偏置为 0。
        最后一层默认全零；`last_std > 0` 时以该标准差的正态分布初始化。
        """
        params: ParamDict = {}
        dims = self.layer_dims()
        for i, (fan_in, fan_out) in enumerate(dims):
            if i + 1 < len(dims):
                bound = 1.0 / np.sqrt(fan_in)
                weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            else:
                weight = (
                    rng.normal(0.0, last_std, size=(fan_in, fan_out))
                    if last_std > 0
                    else np.zeros((fan_in, fan_out))
                )
            params[f"{self.prefix}.{i}.weight"] = weight
            params[f"{self.prefix}.{i}.bias"] = np.zeros(fan_out)
        return params

    def forward(self, params: ParamDict, x: FloatArray) -> tuple[FloatArray, MlpCache]:
        """前向计算 `(N, in_dim) → (N, out_dim)`。"""
        h = x
        inputs: list[FloatArray] = []
        pre: list[FloatArray] = []
        last = self.n_layers - 1
        for i in range(last):
            inputs.append(h)
            z = h @ params[f"{self.prefix}.{i}.weight"] + params[f"{self.prefix}.{i}.bias"]
            pre.append(z)
            h = np.maximum(z, 0.0)
            if self.skip is not None and i + 1 == self.skip:
                h = np.concatenate([h, x], axis=-1)
        inputs.append(h)
        out = h @ params[f"{self.prefix}.{last}.weight"] + params[f"{self.prefix}.{last}.bias"]
        pre.append(out)
        return out, MlpCache(inputs, pre, x)

    def backward(
        self, params: ParamDict, cache: MlpCache, grad_out: FloatArray
    ) -> tuple[FloatArray, GradDict]:
        """反向传播，返回 `(对输入的梯度, 参数梯度)`。"""
        grads: GradDict = {}
        grad_x = np.zeros_like(cache.x)
        g = grad_out
        for i in reversed(range(self.n_layers)):
            if i + 1 < self.n_layers:
                if self.skip is not None and i + 1 == self.skip:
                    width = self.widths[i]
                    grad_x = grad_x + g[:, width:]
                    g = g[:, :width]
                g = g * (cache.pre_activations[i] > 0)
            weight = params[f"{self.prefix}.{i}.weight"]
            grads[f"{self.prefix}.{i}.weight"] = cache.inputs[i].T @ g
            grads[f"{self.prefix}.{i}.bias"] = np.sum(g, axis=0)
            g = g @ weight.T
        return grad_x + g, grads
