"""基础数值类型。

复数信号、四元数到旋转矩阵、高斯协方差组装、高斯求值以及位置编码。
所有函数均为纯函数，对数组的前导维度做批处理，可以被任意线程并发调用。

四元数约定为 `(w, x, y, z)`。复数一律以笛卡尔形式 `(re, im)` 存储。
"""

from dataclasses import dataclass, field
from typing import Self

import numpy as np
from scipy.special import expit, logit

from wrfgs.consts import COVARIANCE_EPS
from wrfgs.typing import ComplexArray, FloatArray

__all__ = [
    "ComplexSample",
    "GaussianPrimitive",
    "covariance",
    "covariance_backward",
    "eval_gaussian",
    "logit",
    "normalize_quaternion",
    "normalize_quaternion_backward",
    "positional_encode",
    "positional_encode_backward",
    "quaternion_to_rotation",
    "rotation_backward",
    "sigmoid",
    "to_complex",
    "to_pairs",
]

sigmoid = expit


@dataclass(frozen=True, slots=True)
class ComplexSample:
    """笛卡尔形式的复数采样 `re + j·im`。

    Attributes:
        re: 实部。
        im: 虚部。
    """

    re: float
    im: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.re) and np.isfinite(self.im)):
            raise ValueError(f"ComplexSample must be finite, got ({self.re}, {self.im})")

    @classmethod
    def from_complex(cls, value: complex) -> Self:
        return cls(float(value.real), float(value.imag))

    def __complex__(self) -> complex:
        return complex(self.re, self.im)

    def __add__(self, other: "ComplexSample") -> "ComplexSample":
        return ComplexSample(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "ComplexSample") -> "ComplexSample":
        return ComplexSample(self.re - other.re, self.im - other.im)

    def __mul__(self, other: "ComplexSample") -> "ComplexSample":
        return ComplexSample(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    def conj(self) -> "ComplexSample":
        return ComplexSample(self.re, -self.im)

    def abs2(self) -> float:
        """返回功率 `re² + im²`。"""
        return self.re * self.re + self.im * self.im


def to_complex(pairs: FloatArray) -> ComplexArray:
    """将最后一维为 2 的实数组 `(..., 2)` 转为复数组 `(...)`。"""
    return pairs[..., 0] + 1j * pairs[..., 1]


def to_pairs(values: ComplexArray) -> FloatArray:
    """将复数组 `(...)` 转为最后一维为 2 的实数组 `(..., 2)`。"""
    values = np.asarray(values, dtype=np.complex128)
    return np.stack([values.real, values.imag], axis=-1)


def normalize_quaternion(q: FloatArray) -> FloatArray:
    """将四元数 `(..., 4)` 归一化到单位长度。"""
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def normalize_quaternion_backward(q: FloatArray, grad_unit: FloatArray) -> FloatArray:
    """`normalize_quaternion` 的反向传播。

    Args:
        q: 归一化之前的四元数 `(..., 4)`。
        grad_unit: 损失对单位四元数的梯度 `(..., 4)`。

    Returns:
        损失对 `q` 的梯度。
    """
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    unit = q / norm
    radial = np.sum(unit * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - unit * radial) / norm


def quaternion_to_rotation(q: FloatArray) -> FloatArray:
    """单位四元数 `(..., 4)` 转旋转矩阵 `(..., 3, 3)`。"""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    rot = np.empty((*w.shape, 3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def rotation_backward(q: FloatArray, grad_rot: FloatArray) -> FloatArray:
    """`quaternion_to_rotation` 的反向传播。

    Args:
        q: 单位四元数 `(..., 4)`。
        grad_rot: 损失对旋转矩阵的梯度 `(..., 3, 3)`。

    Returns:
        损失对单位四元数的梯度 `(..., 4)`。
    """
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    g = grad_rot
    gw = 2 * (
        -z * g[..., 0, 1]
        + y * g[..., 0, 2]
        + z * g[..., 1, 0]
        - x * g[..., 1, 2]
        - y * g[..., 2, 0]
        + x * g[..., 2, 1]
    )
    gx = 2 * (
        y * g[..., 0, 1]
        + z * g[..., 0, 2]
        + y * g[..., 1, 0]
        - 2 * x * g[..., 1, 1]
        - w * g[..., 1, 2]
        + z * g[..., 2, 0]
        + w * g[..., 2, 1]
        - 2 * x * g[..., 2, 2]
    )
    gy = 2 * (
        -2 * y * g[..., 0, 0]
        + x * g[..., 0, 1]
        + w * g[..., 0, 2]
        + x * g[..., 1, 0]
        + z * g[..., 1, 2]
        - w * g[..., 2, 0]
        + z * g[..., 2, 1]
        - 2 * y * g[..., 2, 2]
    )
    gz = 2 * (
        -2 * z * g[..., 0, 0]
        - w * g[..., 0, 1]
        + x * g[..., 0, 2]
        + w * g[..., 1, 0]
        - 2 * z * g[..., 1, 1]
        + y * g[..., 1, 2]
        + x * g[..., 2, 0]
        + y * g[..., 2, 1]
    )
    return np.stack([gw, gx, gy, gz], axis=-1)


def covariance(rot: FloatArray, log_scale: FloatArray) -> FloatArray:
    """组装三维高斯协方差 `Σ = R·S·Sᵀ·Rᵀ`。

    Args:
        rot: 单位四元数 `(..., 4)`。
        log_scale: 对数尺度 `(..., 3)`。

    Returns:
        对称半正定矩阵 `(..., 3, 3)`。
    """
    m = quaternion_to_rotation(rot) * np.exp(np.asarray(log_scale))[..., None, :]
    sigma = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (sigma + np.swapaxes(sigma, -1, -2))


def covariance_backward(
    rot: FloatArray, log_scale: FloatArray, grad_sigma: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """`covariance` 的反向传播。

    Args:
        rot: 单位四元数 `(..., 4)`。
        log_scale: 对数尺度 `(..., 3)`。
        grad_sigma: 损失对 `Σ` 的梯度 `(..., 3, 3)`。

    Returns:
        `(对单位四元数的梯度, 对对数尺度的梯度)`。
    """
    scale = np.exp(np.asarray(log_scale))
    rmat = quaternion_to_rotation(rot)
    m = rmat * scale[..., None, :]
    g = 0.5 * (grad_sigma + np.swapaxes(grad_sigma, -1, -2))
    grad_m = 2.0 * g @ m
    grad_rot = rotation_backward(rot, grad_m * scale[..., None, :])
    grad_log_scale = np.sum(grad_m * rmat, axis=-2) * scale
    return grad_rot, grad_log_scale


def eval_gaussian(x: FloatArray, mu: FloatArray, sigma: FloatArray) -> float:
    """求值未归一化的三维高斯 `exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))`。

    求逆前在对角线上加 `1e-8` 以避免尺度塌缩带来的奇异。
    """
    d = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    precision = np.linalg.inv(np.asarray(sigma) + COVARIANCE_EPS * np.eye(3))
    return float(np.exp(-0.5 * d @ precision @ d))


def _band_frequencies(order: int) -> FloatArray:
    if order < 1:
        raise ValueError(f"encoding order must be >= 1, got {order}")
    return np.pi * 2.0 ** np.arange(order + 1)


def positional_encode(t: FloatArray, order: int) -> FloatArray:
    """位置编码。

    使用 `L + 1` 个频带 `π·2⁰ … π·2^L` (包含两端)。
    对每个频带依次输出全部分量的 sin，再输出全部分量的 cos，
    即 `(sin(π t₁..t_k), cos(π t₁..t_k), sin(2π t₁..t_k), …)`。

    Args:
        t: 输入 `(..., k)`。
        order: 编码阶数 `L`。

    Returns:
        长度为 `2·(L+1)·k` 的编码 `(..., 2(L+1)k)`。
    """
    t = np.asarray(t, dtype=np.float64)
    freqs = _band_frequencies(order)
    angles = t[..., None, :] * freqs[:, None]
    encoded = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return encoded.reshape(*t.shape[:-1], -1)


def positional_encode_backward(
    t: FloatArray, order: int, grad_out: FloatArray
) -> FloatArray:
    """`positional_encode` 的反向传播，返回对 `t` 的梯度。"""
    t = np.asarray(t, dtype=np.float64)
    k = t.shape[-1]
    freqs = _band_frequencies(order)
    angles = t[..., None, :] * freqs[:, None]
    grad = grad_out.reshape(*t.shape[:-1], order + 1, 2 * k)
    d_sin = grad[..., :k] * np.cos(angles)
    d_cos = -grad[..., k:] * np.sin(angles)
    return np.sum((d_sin + d_cos) * freqs[:, None], axis=-2)


@dataclass(frozen=True)
class GaussianPrimitive:
    """一个虚拟发射机。

    Attributes:
        mu: 位置，单位 m。
        rot: 单位四元数。
        log_scale: 对数尺度。
        opacity_logit: 不透明度的 logit。
        static_signal: 静态复信号，长度为 `d_sig`。
        attenuation: WRF-GS 中由网络给出的衰减因子，WRF-GS+ 中为 `None`。
    """

    mu: FloatArray
    rot: FloatArray
    log_scale: FloatArray
    opacity_logit: float
    static_signal: ComplexArray = field(
        default_factory=lambda: np.zeros(1, dtype=np.complex128)
    )
    attenuation: complex | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "rot", normalize_quaternion(self.rot))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self) -> FloatArray:
        return covariance(self.rot, self.log_scale)

    def evaluate(self, x: FloatArray) -> float:
        return eval_gaussian(x, self.mu, self.covariance)
