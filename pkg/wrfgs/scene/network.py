"""场景网络。

- `ScenarioNetwork`: WRF-GS 的场景表示网络。MLP1 只看高斯中心，输出复衰减 δ 与特征；
  MLP2 以特征和条件输入的编码为输入，输出复信号 S。
- `DeformationNetwork`: WRF-GS+ 的形变网络，输出信号、旋转与尺度的偏移。
"""

from dataclasses import dataclass
from enum import StrEnum
from typing import Self

import numpy as np

from wrfgs.config import NetworkConfig
from wrfgs.consts import N_UPLINK
from wrfgs.em import positional_encode, positional_encode_backward, sigmoid, to_pairs
from wrfgs.exceptions import SceneError, ShapeMismatchError
from wrfgs.scene.mlp import MlpCache, MlpLayout
from wrfgs.scene.store import MU, ParamStore
from wrfgs.typing import ComplexArray, FloatArray, GradDict, ParamDict

__all__ = [
    "ConditioningInput",
    "ConditioningKind",
    "DeformationNetwork",
    "DeformationOutput",
    "ScenarioNetwork",
    "encoded_width",
]


class ConditioningKind(StrEnum):
    TX_POSITION = "tx_position"
    UPLINK_CSI = "uplink_csi"


@dataclass(frozen=True)
class ConditioningInput:
    """条件输入，恰好携带与 `kind` 对应的一种载荷。

    Attributes:
        kind: 条件类型。
        tx_position: 发射机位置，单位 m。
        uplink_csi: 26 个上行子载波的复 CSI。

    Raises:
        SceneError: 发射机位置不是有限的三维向量。
        ShapeMismatchError: 上行 CSI 的子载波数不对或含非有限值。
    """

    kind: ConditioningKind
    tx_position: FloatArray | None = None
    uplink_csi: ComplexArray | None = None

    def __post_init__(self) -> None:
        if self.kind is ConditioningKind.TX_POSITION:
            if self.tx_position is None or self.uplink_csi is not None:
                raise SceneError("TX_POSITION conditioning carries only tx_position")
            pos = np.asarray(self.tx_position, dtype=np.float64)
            if pos.shape != (3,) or not np.all(np.isfinite(pos)):
                raise SceneError(f"tx_position must be a finite 3-vector, got {pos!r}")
            object.__setattr__(self, "tx_position", pos)
        else:
            if self.uplink_csi is None or self.tx_position is not None:
                raise ShapeMismatchError("UPLINK_CSI conditioning carries only uplink_csi")
            csi = np.asarray(self.uplink_csi, dtype=np.complex128)
            if csi.shape != (N_UPLINK,) or not np.all(np.isfinite(csi)):
                raise ShapeMismatchError(f"uplink_csi must hold {N_UPLINK} finite values")
            object.__setattr__(self, "uplink_csi", csi)

    @classmethod
    def from_tx(cls, tx: FloatArray) -> Self:
        return cls(ConditioningKind.TX_POSITION, tx_position=np.asarray(tx))

    @classmethod
    def from_uplink(cls, csi: ComplexArray) -> Self:
        return cls(ConditioningKind.UPLINK_CSI, uplink_csi=np.asarray(csi))

    def encode(self, store: ParamStore, order: int) -> FloatArray:
        """归一化后做位置编码，返回一维编码向量。

        TX 位置按场景包围盒归一化到 `[−1, 1]`；上行 CSI 先除以数据集缩放因子，
        再按 `(re, im)` 展平为 52 个实数。
        """
        if self.kind is ConditioningKind.TX_POSITION:
            assert self.tx_position is not None
            raw = store.normalize_points(self.tx_position)
        else:
            assert self.uplink_csi is not None
            raw = to_pairs(self.uplink_csi / store.csi_scale).ravel()
        return positional_encode(raw[None, :], order)[0]


def encoded_width(kind: ConditioningKind, order: int) -> int:
    """条件输入编码后的长度。"""
    raw = 3 if kind is ConditioningKind.TX_POSITION else 2 * N_UPLINK
    return 2 * (order + 1) * raw


def _encode_centers(store: ParamStore, order: int) -> tuple[FloatArray, FloatArray]:
    norm = store.normalize_points(store.params[MU])
    return norm, positional_encode(norm, order)


def _centers_backward(
    store: ParamStore, norm: FloatArray, order: int, grad_enc: FloatArray
) -> FloatArray:
    return positional_encode_backward(norm, order, grad_enc) * store.normalize_gain


@dataclass
class ScenarioCache:
    norm_centers: FloatArray
    raw_attenuation: FloatArray
    attenuation: ComplexArray
    feature_width: int
    attenuation_cache: MlpCache
    signal_cache: MlpCache


@dataclass(frozen=True)
class ScenarioNetwork:
    """WRF-GS 场景表示网络。

    δ 的幅度为 `sigmoid(a₀)`，相位为 `π·tanh(a₁)`；S 为原始 `(re, im)` 输出。
    """

    attenuation_mlp: MlpLayout
    signal_mlp: MlpLayout
    order: int
    d_sig: int

    @classmethod
    def build(cls, config: NetworkConfig, cond: ConditioningKind, d_sig: int) -> Self:
        center_width = 2 * (config.encoding_order + 1) * 3
        return cls(
            MlpLayout(
                "scenario.attenuation",
                center_width,
                (config.attenuation_width,) * config.attenuation_depth,
                2 + config.feature_width,
            ),
            MlpLayout(
                "scenario.signal",
                config.feature_width + encoded_width(cond, config.encoding_order),
                config.signal_widths,
                2 * d_sig,
            ),
            config.encoding_order,
            d_sig,
        )

    @property
    def feature_width(self) -> int:
        return self.attenuation_mlp.out_dim - 2

    def init(self, rng: np.random.Generator, signal_std: float) -> ParamDict:
        """衰减输出行置零，特征输出行按扇入缩放的均匀分布初始化。"""
        params = self.attenuation_mlp.init(rng)
        last = f"{self.attenuation_mlp.prefix}.{self.attenuation_mlp.n_layers - 1}.weight"
        fan_in = params[last].shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params[last][:, 2:] = rng.uniform(-bound, bound, size=(fan_in, self.feature_width))
        params.update(self.signal_mlp.init(rng, last_std=signal_std))
        return params

    def forward(
        self, store: ParamStore, cond: ConditioningInput
    ) -> tuple[ComplexArray, ComplexArray, ScenarioCache]:
        """返回逐高斯 `(attenuation (N,), signals (N, d))`。"""
        norm, enc = _encode_centers(store, self.order)
        out1, cache1 = self.attenuation_mlp.forward(store.params, enc)
        raw = out1[:, :2]
        attenuation = sigmoid(raw[:, 0]) * np.exp(1j * np.pi * np.tanh(raw[:, 1]))
        enc_cond = np.tile(cond.encode(store, self.order), (len(enc), 1))
        out2, cache2 = self.signal_mlp.forward(
            store.params, np.concatenate([out1[:, 2:], enc_cond], axis=-1)
        )
        signals = out2[:, 0::2] + 1j * out2[:, 1::2]
        cache = ScenarioCache(norm, raw, attenuation, self.feature_width, cache1, cache2)
        return attenuation, signals, cache

    def backward(
        self,
        store: ParamStore,
        cache: ScenarioCache,
        grad_attenuation: ComplexArray,
        grad_signals: ComplexArray,
    ) -> GradDict:
        """把对 δ 与 S 的梯度传回网络权重与高斯中心。"""
        g_out2 = to_pairs(grad_signals).reshape(len(grad_signals), -1)
        g_in2, grads = self.signal_mlp.backward(store.params, cache.signal_cache, g_out2)
        g_feature = g_in2[:, : self.feature_width]

        amp = sigmoid(cache.raw_attenuation[:, 0])
        tanh = np.tanh(cache.raw_attenuation[:, 1])
        unit = np.exp(1j * np.pi * tanh)
        conj_g = np.conj(grad_attenuation)
        g_a0 = np.real(conj_g * unit) * amp * (1.0 - amp)
        g_a1 = np.real(conj_g * 1j * cache.attenuation) * np.pi * (1.0 - tanh * tanh)
        g_out1 = np.concatenate([g_a0[:, None], g_a1[:, None], g_feature], axis=-1)
        g_enc, grads1 = self.attenuation_mlp.backward(
            store.params, cache.attenuation_cache, g_out1
        )
        grads.update(grads1)
        grads[MU] = _centers_backward(store, cache.norm_centers, self.order, g_enc)
        return grads


@dataclass
class DeformationOutput:
    """形变网络的输出偏移。

    Attributes:
        d_sig: 信号偏移 `(N, d)`。
        d_rot: 四元数偏移 `(N, 4)`。
        d_scale: 对数尺度偏移 `(N, 3)`。
    """

    d_sig: ComplexArray
    d_rot: FloatArray
    d_scale: FloatArray

    def __post_init__(self) -> None:
        if not (
            np.all(np.isfinite(self.d_sig))
            and np.all(np.isfinite(self.d_rot))
            and np.all(np.isfinite(self.d_scale))
        ):
            raise FloatingPointError("deformation offsets must be finite")


@dataclass
class DeformationCache:
    norm_centers: FloatArray
    center_width: int
    mlp_cache: MlpCache


@dataclass(frozen=True)
class DeformationNetwork:
    """WRF-GS+ 形变网络，输入为编码后的高斯中心与条件输入。"""

    mlp: MlpLayout
    order: int
    d_sig: int

    @classmethod
    def build(cls, config: NetworkConfig, cond: ConditioningKind, d_sig: int) -> Self:
        center_width = 2 * (config.encoding_order + 1) * 3
        return cls(
            MlpLayout(
                "deform",
                center_width + encoded_width(cond, config.encoding_order),
                (config.deform_width,) * config.deform_depth,
                2 * d_sig + 4 + 3,
                skip=config.deform_skip,
            ),
            config.encoding_order,
            d_sig,
        )

    def init(self, rng: np.random.Generator, last_std: float = 0.0) -> ParamDict:
        """输出层默认全零，形变初始为恒等。"""
        return self.mlp.init(rng, last_std=last_std)

    def forward(
        self, store: ParamStore, cond: ConditioningInput
    ) -> tuple[DeformationOutput, DeformationCache]:
        norm, enc = _encode_centers(store, self.order)
        enc_cond = np.tile(cond.encode(store, self.order), (len(enc), 1))
        out, cache = self.mlp.forward(store.params, np.concatenate([enc, enc_cond], axis=-1))
        n_sig = 2 * self.d_sig
        offsets = DeformationOutput(
            d_sig=out[:, 0:n_sig:2] + 1j * out[:, 1:n_sig:2],
            d_rot=out[:, n_sig : n_sig + 4],
            d_scale=out[:, n_sig + 4 :],
        )
        return offsets, DeformationCache(norm, enc.shape[1], cache)

    def backward(
        self,
        store: ParamStore,
        cache: DeformationCache,
        grad_sig: ComplexArray,
        grad_rot: FloatArray,
        grad_scale: FloatArray,
    ) -> GradDict:
        g_out = np.concatenate(
            [to_pairs(grad_sig).reshape(len(grad_sig), -1), grad_rot, grad_scale], axis=-1
        )
        g_in, grads = self.mlp.backward(store.params, cache.mlp_cache, g_out)
        grads[MU] = _centers_backward(
            store, cache.norm_centers, self.order, g_in[:, : cache.center_width]
        )
        return grads
