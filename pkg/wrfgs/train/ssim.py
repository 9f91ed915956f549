"""带解析梯度的 SSIM。

局部统计量用 11×11、σ = 1.5 的可分离高斯窗计算。窗口在仰角方向按边缘复制，
在方位角方向默认循环 (空间谱在方位角上是周期的)，也可以改为两个方向都按边缘复制。
每个方向的滤波写成一个 `n × n` 的算子矩阵 `K`，于是模糊为 `K_h · x · K_wᵀ`，
其伴随为 `K_hᵀ · y · K_w`，反向传播不需要另写边界处理。
"""

from dataclasses import dataclass
from functools import cache

import numpy as np
from scipy.ndimage import correlate1d
from scipy.signal.windows import gaussian

from wrfgs.exceptions import ShapeMismatchError
from wrfgs.typing import FloatArray

__all__ = ["SsimResult", "gaussian_window", "ssim", "ssim_with_grad"]

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
MIN_DYNAMIC_RANGE = 1e-12


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> FloatArray:
    """归一化的一维高斯窗。"""
    window = gaussian(size, sigma)
    return window / window.sum()


@cache
def _operator(n: int, wrap: bool) -> FloatArray:
    op = correlate1d(
        np.eye(n), gaussian_window(), axis=0, mode="wrap" if wrap else "nearest"
    )
    op.setflags(write=False)
    return op


@dataclass(frozen=True)
class _Blur:
    rows: FloatArray
    cols: FloatArray

    @classmethod
    def for_shape(cls, shape: tuple[int, int], wrap_azimuth: bool) -> "_Blur":
        h, w = shape
        return cls(_operator(h, False), _operator(w, wrap_azimuth))

    def __call__(self, x: FloatArray) -> FloatArray:
        return self.rows @ x @ self.cols.T

    def adjoint(self, y: FloatArray) -> FloatArray:
        return self.rows.T @ y @ self.cols


@dataclass
class SsimResult:
    """SSIM 及其对第二个参数的梯度。"""

    value: float
    grad: FloatArray


def _check(a: FloatArray, b: FloatArray) -> tuple[FloatArray, FloatArray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim of shapes {a.shape} and {b.shape}")
    if a.ndim != 2:
        raise ShapeMismatchError(f"ssim expects matrices, got shape {a.shape}")
    return a, b


@dataclass
class _Terms:
    dynamic_range: float
    mu_a: FloatArray
    mu_b: FloatArray
    num1: FloatArray
    num2: FloatArray
    den1: FloatArray
    den2: FloatArray

    @property
    def smap(self) -> FloatArray:
        return self.num1 * self.num2 / (self.den1 * self.den2)


def _terms(a: FloatArray, b: FloatArray, blur: _Blur) -> _Terms:
    dynamic_range = max(float(a.max()), float(b.max()), MIN_DYNAMIC_RANGE)
    c1 = (K1 * dynamic_range) ** 2
    c2 = (K2 * dynamic_range) ** 2
    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    return _Terms(
        dynamic_range,
        mu_a,
        mu_b,
        num1=2 * mu_a * mu_b + c1,
        num2=2 * cov + c2,
        den1=mu_a * mu_a + mu_b * mu_b + c1,
        den2=var_a + var_b + c2,
    )


def ssim(a: FloatArray, b: FloatArray, *, wrap_azimuth: bool = True) -> float:
    """两幅非负图像的平均局部 SSIM，对两个参数对称。

    Raises:
        ShapeMismatchError: 形状不一致或不是二维矩阵。
    """
    a, b = _check(a, b)
    return float(np.mean(_terms(a, b, _Blur.for_shape(a.shape, wrap_azimuth)).smap))


def ssim_with_grad(
    a: FloatArray, b: FloatArray, *, wrap_azimuth: bool = True
) -> SsimResult:
    """计算 `ssim(a, b)` 以及它对 `b` 的梯度。

    动态范围 `Lr = max(max a, max b, 1e-12)` 也参与求导：
    当 `max b > max a` 时，梯度的这一部分落在 `b` 的第一个最大值位置上。

    Raises:
        ShapeMismatchError: 形状不一致或不是二维矩阵。
    """
    a, b = _check(a, b)
    blur = _Blur.for_shape(a.shape, wrap_azimuth)
    t = _terms(a, b, blur)
    smap = t.smap
    scale = 1.0 / smap.size

    den = t.den1 * t.den2
    over_num1 = t.num2 / den
    over_num2 = t.num1 / den
    g_mu_b = scale * 2 * (
        t.mu_a * (over_num1 - over_num2) - t.mu_b * smap * (1 / t.den1 - 1 / t.den2)
    )
    g_ab = scale * 2 * over_num2
    g_bb = -scale * smap / t.den2
    grad = blur.adjoint(g_mu_b) + a * blur.adjoint(g_ab) + 2 * b * blur.adjoint(g_bb)

    if float(b.max()) > float(a.max()) and t.dynamic_range > MIN_DYNAMIC_RANGE:
        g_c1 = scale * np.sum(over_num1 - smap / t.den1)
        g_c2 = scale * np.sum(over_num2 - smap / t.den2)
        grad.flat[int(np.argmax(b))] += 2 * t.dynamic_range * (K1 * K1 * g_c1 + K2 * K2 * g_c2)
    return SsimResult(float(np.mean(smap)), grad)
