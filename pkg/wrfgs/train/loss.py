"""训练损失。

梯度约定：实数输出的梯度是同形状实数组；复数输出的梯度为
`∂L/∂Re + j·∂L/∂Im`，与光栅化反向的输入约定一致。
"""

from dataclasses import dataclass

import numpy as np

from wrfgs.exceptions import ShapeMismatchError
from wrfgs.train.ssim import ssim, ssim_with_grad
from wrfgs.typing import ComplexArray, FloatArray

__all__ = [
    "LossTerms",
    "csi_loss",
    "loss",
    "magnitude_field_grad",
    "rssi_loss",
    "rssi_value",
    "spectrum_loss",
]

DB_GAIN = 10.0 / np.log(10.0)
"""`d(10·log10 P)/dP · P`。"""
POWER_FLOOR = 1e-30


@dataclass
class LossTerms:
    """一次损失计算的组成部分。

    Attributes:
        total: 总损失。
        l1: 平均绝对误差项 (RSSI 为 dB 绝对误差，CSI 为均方误差)。
        ssim: SSIM 值，只有空间谱任务有意义，其余任务为 0。
    """

    total: float
    l1: float
    ssim: float = 0.0


def loss(
    pred: FloatArray, gt: FloatArray, eta: float, *, wrap_azimuth: bool = True
) -> float:
    """`(1−η)·mean|gt − pred| + η·(1 − ssim(gt, pred))`。

    Raises:
        ShapeMismatchError: 形状不一致。
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"loss of shapes {pred.shape} and {gt.shape}")
    l1 = float(np.mean(np.abs(gt - pred)))
    if eta == 0:
        return l1
    return (1 - eta) * l1 + eta * (1 - ssim(gt, pred, wrap_azimuth=wrap_azimuth))


def spectrum_loss(
    pred: FloatArray, gt: FloatArray, eta: float, *, wrap_azimuth: bool = True
) -> tuple[LossTerms, FloatArray]:
    """空间谱损失及其对 `pred` 的梯度。"""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"loss of shapes {pred.shape} and {gt.shape}")
    diff = pred - gt
    l1 = float(np.mean(np.abs(diff)))
    grad = (1 - eta) * np.sign(diff) / diff.size
    structural = ssim_with_grad(gt, pred, wrap_azimuth=wrap_azimuth)
    grad -= eta * structural.grad
    total = (1 - eta) * l1 + eta * (1 - structural.value)
    return LossTerms(total, l1, structural.value), grad


def magnitude_field_grad(field: ComplexArray, grad_magnitude: FloatArray) -> ComplexArray:
    """把对 `|R|` 的梯度转成对复场 `R` 的梯度，`R = 0` 处为 0。"""
    mag = np.abs(field)
    unit = np.divide(field, mag, out=np.zeros_like(field), where=mag > 0)
    return grad_magnitude * unit


def rssi_value(total_power: float, calibration: float) -> float:
    """未截断的 RSSI 预测 `10·log10(P) + b`。"""
    return float(DB_GAIN * np.log(max(total_power, POWER_FLOOR)) + calibration)


def rssi_loss(
    field: ComplexArray,
    calibration: float,
    target_db: float,
    *,
    coherent: bool = True,
) -> tuple[LossTerms, ComplexArray | FloatArray, float]:
    """RSSI 的 dB 绝对误差。

    相干模式下 `P = |Σ_k R_k|²`，返回对每个像素复场的梯度；
    非相干模式下 `P = Σ_k |R_k|²`，返回对每个像素功率的梯度。

    Args:
        field: 渲染得到的复场 `(H, W)`。
        calibration: 校准标量 b。
        target_db: 真值 RSSI。
        coherent: 相干或非相干叠加。

    Returns:
        `(损失, 对场或功率的梯度, 对 b 的梯度)`。
    """
    field = np.asarray(field)
    total = complex(np.sum(field))
    if coherent:
        power = abs(total) ** 2
    else:
        power = float(np.sum(np.abs(field) ** 2))
    error = rssi_value(power, calibration) - target_db
    sign = float(np.sign(error))
    terms = LossTerms(abs(error), abs(error))
    if power < POWER_FLOOR:
        zeros = np.zeros_like(field) if coherent else np.zeros(field.shape)
        return terms, zeros, sign
    if coherent:
        grad_total = sign * DB_GAIN * 2 * total / power
        return terms, np.full(field.shape, grad_total, dtype=np.complex128), sign
    return terms, np.full(field.shape, sign * DB_GAIN / power), sign


def csi_loss(
    pred: ComplexArray, gt: ComplexArray
) -> tuple[LossTerms, ComplexArray]:
    """复 CSI 的均方误差及其对 `pred` 的梯度。"""
    pred = np.asarray(pred, dtype=np.complex128)
    gt = np.asarray(gt, dtype=np.complex128)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"csi of shapes {pred.shape} and {gt.shape}")
    diff = pred - gt
    mse = float(np.mean(np.abs(diff) ** 2))
    return LossTerms(mse, mse), 2 * diff / diff.size
