"""真值物理模型。

天线阵列的相位模型与波束扫描空间谱，以及矩形房间的镜像源多径仿真。
用于生成合成数据集，也作为验收测试中独立的暴力参照。

阵元 `(m, n)` 位于接收机坐标系的 `D·(m, n, 0)`，阵列法向为 `+z`。
阵元信号使用物理约定 `exp(−j 2π d / λ)`，于是方位角为 `Ω_lon` 的信源
出现在 `α = Ω_lon + π` 处，与投影模块的像素列完全一致。
"""

from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from wrfgs.consts import (
    DEFAULT_HEIGHT,
    DEFAULT_WIDTH,
    N_SUBCARRIERS,
    RSSI_FLOOR_DB,
    SPEED_OF_LIGHT,
    SUBCARRIER_CENTER_HZ,
    SUBCARRIER_SPACING_HZ,
)
from wrfgs.em import normalize_quaternion, quaternion_to_rotation
from wrfgs.exceptions import SceneError
from wrfgs.typing import ComplexArray, FloatArray

__all__ = [
    "ArrayGeometry",
    "MultipathScene",
    "PropagationPath",
    "SpatialSpectrum",
    "arrival_angles",
    "beamform_spectrum",
    "csi_from_paths",
    "default_subcarriers",
    "ground_truth_csi",
    "ground_truth_rssi",
    "ground_truth_spectrum",
    "rssi_from_gains",
    "simulate_paths",
    "steering_phase",
]

WALL_NAMES = ("x_low", "x_high", "y_low", "y_high", "z_low", "z_high")
"""反射系数的墙面顺序。"""


class ArrayGeometry(BaseModel):
    """√K × √K 均匀平面阵列。

    Attributes:
        k_side: 每边天线数 √K。
        spacing: 阵元间距 D，单位 m。
        wavelength: 波长 λ，单位 m。
    """

    model_config = ConfigDict(frozen=True)

    k_side: int = Field(default=4, ge=1)
    spacing: float = Field(default=0.1635, gt=0)
    wavelength: float = Field(default=0.327, gt=0)

    @model_validator(mode="after")
    def _check_spacing(self) -> Self:
        if self.spacing >= self.wavelength:
            raise ValueError(
                f"array spacing {self.spacing} must be below the wavelength "
                f"{self.wavelength}"
            )
        return self

    @property
    def n_elements(self) -> int:
        return self.k_side * self.k_side

    def element_offsets(self) -> FloatArray:
        """阵元在接收机坐标系中的位置 `(K, 3)`，按 `(m, n)` 行优先排列。"""
        m, n = np.meshgrid(np.arange(self.k_side), np.arange(self.k_side), indexing="ij")
        offsets = np.zeros((self.n_elements, 3))
        offsets[:, 0] = m.ravel() * self.spacing
        offsets[:, 1] = n.ravel() * self.spacing
        return offsets


class MultipathScene(BaseModel):
    """轴对齐矩形房间 `[0, X]×[0, Y]×[0, Z]`。

    Attributes:
        room_extent: 房间尺寸，单位 m。
        reflection_coeff: 每面墙的复反射系数 `(re, im)`，顺序见 `WALL_NAMES`；
            只给出一个时广播到全部六面墙。
        max_reflection_order: 最大反射阶数。
        rx_position: 接收机位置，单位 m。
        rx_orientation: 接收机姿态四元数 `(w, x, y, z)`，阵列法向为本体 `+z`。
    """

    model_config = ConfigDict(frozen=True)

    room_extent: tuple[float, float, float] = (6.0, 4.0, 3.0)
    reflection_coeff: tuple[tuple[float, float], ...] = ((-0.5, 0.0),) * 6
    max_reflection_order: int = Field(default=2, ge=0, le=3)
    rx_position: tuple[float, float, float] = (3.0, 2.0, 1.0)
    rx_orientation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    @field_validator("reflection_coeff", mode="before")
    @classmethod
    def _broadcast_coeff(cls, value: object) -> object:
        if isinstance(value, Sequence) and len(value) == 2:
            first = value[0]
            if isinstance(first, int | float):
                return (tuple(value),) * 6
        if isinstance(value, Sequence) and len(value) == 1:
            return tuple(value) * 6
        return value

    @field_validator("rx_orientation")
    @classmethod
    def _normalize_orientation(
        cls, value: tuple[float, float, float, float]
    ) -> tuple[float, float, float, float]:
        norm = float(np.linalg.norm(value))
        if norm < 1e-12:
            raise ValueError("rx_orientation must be a non-zero quaternion")
        w, x, y, z = (float(v) for v in normalize_quaternion(np.asarray(value)))
        return (w, x, y, z)

    @model_validator(mode="after")
    def _check_scene(self) -> Self:
        if len(self.reflection_coeff) != 6:
            raise ValueError("reflection_coeff needs one (re, im) pair per wall")
        if any(np.hypot(*g) > 1 + 1e-12 for g in self.reflection_coeff):
            raise ValueError("reflection coefficients must satisfy |Γ| <= 1")
        if any(e <= 0 for e in self.room_extent):
            raise ValueError("room_extent must be positive")
        if not all(0 < p < e for p, e in zip(self.rx_position, self.room_extent, strict=True)):
            raise ValueError("rx_position must lie strictly inside the room")
        return self

    @property
    def extent(self) -> FloatArray:
        return np.asarray(self.room_extent, dtype=np.float64)

    @property
    def rx(self) -> FloatArray:
        return np.asarray(self.rx_position, dtype=np.float64)

    @property
    def rx_rotation(self) -> FloatArray:
        """接收机本体到世界坐标系的旋转矩阵。"""
        return quaternion_to_rotation(np.asarray(self.rx_orientation))

    @property
    def gammas(self) -> ComplexArray:
        return np.array([complex(re, im) for re, im in self.reflection_coeff])

    def to_rx_frame(self, points: FloatArray) -> FloatArray:
        """世界坐标 `(..., 3)` 转为接收机坐标 `t = Rᵀ(x − rx)`。"""
        return (np.asarray(points, dtype=np.float64) - self.rx) @ self.rx_rotation

    def check_tx(self, tx: FloatArray) -> FloatArray:
        """校验发射机位置。

        Raises:
            SceneError: 发射机在房间外，或与接收机重合。
        """
        tx = np.asarray(tx, dtype=np.float64)
        if tx.shape != (3,) or not np.all(np.isfinite(tx)):
            raise SceneError(f"tx must be a finite 3-vector, got {tx!r}")
        if np.any(tx <= 0) or np.any(tx >= self.extent):
            raise SceneError(f"tx {tx.tolist()} lies outside the room {self.room_extent}")
        if np.linalg.norm(tx - self.rx) < 1e-9:
            raise SceneError("tx coincides with the receiver")
        return tx


@dataclass(frozen=True)
class SpatialSpectrum:
    """空间谱矩阵，行为仰角 β，列为方位角 α。

    第 `r` 行对应 `β = r·90/h` 度，第 `c` 列对应 `α = c·360/w` 度。
    """

    values: FloatArray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"spectrum must be 2-D, got shape {values.shape}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("spectrum entries must be finite and non-negative")
        object.__setattr__(self, "values", values)

    @property
    def h(self) -> int:
        return int(self.values.shape[0])

    @property
    def w(self) -> int:
        return int(self.values.shape[1])

    def argmax(self) -> tuple[int, int]:
        """最大值所在的 `(row, column)`，并列时取行优先的第一个。"""
        row, col = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(row), int(col)


class PropagationPath(NamedTuple):
    """一条镜像源路径。"""

    distance: float
    gain: complex
    image_source: FloatArray
    order: int
    reflection: complex


def bin_angles(h: int, w: int) -> tuple[FloatArray, FloatArray]:
    """返回各行仰角与各列方位角，单位 rad，取整数度数处。"""
    elevation = np.deg2rad(np.arange(h) * (90.0 / h))
    azimuth = np.deg2rad(np.arange(w) * (360.0 / w))
    return elevation, azimuth


def steering_phase(
    geom: ArrayGeometry, m: int, n: int, azimuth: float, elevation: float
) -> float:
    """阵元 `(m, n)` 相对参考阵元的导向相位。

    `mod(−2π r cos(α − φ) cos(β) / λ, 2π)`，其中 `r = D√(m²+n²)`，`φ = arctan2(n, m)`。
    """
    r = geom.spacing * np.hypot(m, n)
    phi = np.arctan2(n, m)
    phase = -2 * np.pi * r * np.cos(azimuth - phi) * np.cos(elevation) / geom.wavelength
    return float(np.mod(phase, 2 * np.pi))


def _steering_matrix(geom: ArrayGeometry, h: int, w: int) -> FloatArray:
    """全部网格上的导向相位 `(h, w, K)`，未取模。"""
    elevation, azimuth = bin_angles(h, w)
    offsets = geom.element_offsets()
    ux = np.cos(azimuth)[None, :] * np.cos(elevation)[:, None]
    uy = np.sin(azimuth)[None, :] * np.cos(elevation)[:, None]
    k = 2 * np.pi / geom.wavelength
    return -k * (ux[..., None] * offsets[:, 0] + uy[..., None] * offsets[:, 1])


def beamform_spectrum(
    geom: ArrayGeometry,
    measured_phases: FloatArray,
    h: int = DEFAULT_HEIGHT,
    w: int = DEFAULT_WIDTH,
) -> SpatialSpectrum:
    """仅用相位的波束扫描空间谱。

    `P(α, β) = |1/K Σ exp(j(Δθ̂ − Δθ(α, β)))|²`，`Δθ̂` 相对阵元 `(0, 0)`。

    Args:
        geom: 阵列几何。
        measured_phases: `k_side × k_side` 的测量相位，单位 rad。
        h: 仰角分辨率。
        w: 方位角分辨率。

    Returns:
        取值在 `[0, 1]` 的空间谱。
    """
    phases = np.asarray(measured_phases, dtype=np.float64)
    if phases.shape != (geom.k_side, geom.k_side):
        raise ValueError(
            f"measured_phases must be {geom.k_side}x{geom.k_side}, got {phases.shape}"
        )
    if not np.all(np.isfinite(phases)):
        raise ValueError("measured_phases must be finite")
    relative = (phases - phases[0, 0]).ravel()
    steering = _steering_matrix(geom, h, w)
    field = np.exp(-1j * steering) @ np.exp(1j * relative) / geom.n_elements
    power = np.clip(np.abs(field) ** 2, 0.0, 1.0)
    return SpatialSpectrum(power)


def _image_indices(order: int) -> np.ndarray:
    rng = np.arange(-order, order + 1)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid[np.abs(grid).sum(axis=1) <= order]


def _mirror(coord: FloatArray, index: np.ndarray, length: FloatArray) -> FloatArray:
    even = index % 2 == 0
    return np.where(even, coord + index * length, -coord + (index + 1) * length)


def _wall_hits(index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """每个轴上镜像索引对应的 (低墙, 高墙) 反射次数。"""
    mag = np.abs(index)
    more = (mag + 1) // 2
    less = mag // 2
    high = np.where(index > 0, more, less)
    low = np.where(index > 0, less, more)
    return low, high


def simulate_paths(
    scene: MultipathScene, tx: FloatArray, *, wavelength: float = 0.327
) -> list[PropagationPath]:
    """镜像源法枚举多径。

    每条路径增益为 `(Π Γ)·(λ / 4πd)·exp(−j 2π d / λ)`，按距离升序排列，
    直射路径总是存在。

    Raises:
        SceneError: 发射机在房间外或与接收机重合。
    """
    tx = scene.check_tx(tx)
    indices = _image_indices(scene.max_reflection_order)
    extent = scene.extent
    images = _mirror(tx[None, :], indices, extent[None, :])
    low, high = _wall_hits(indices)
    gammas = scene.gammas
    hits = np.empty((len(indices), 6), dtype=np.int64)
    hits[:, 0::2] = low
    hits[:, 1::2] = high
    reflection = np.prod(gammas[None, :] ** hits, axis=1)
    distance = np.linalg.norm(images - scene.rx, axis=1)
    gain = (
        reflection
        * (wavelength / (4 * np.pi * distance))
        * np.exp(-2j * np.pi * distance / wavelength)
    )
    order = np.argsort(distance, kind="stable")
    return [
        PropagationPath(
            float(distance[i]),
            complex(gain[i]),
            images[i],
            int(np.abs(indices[i]).sum()),
            complex(reflection[i]),
        )
        for i in order
    ]


def arrival_angles(scene: MultipathScene, point: FloatArray) -> tuple[float, float]:
    """点在空间谱坐标系中的到达角 `(α, β)`，单位 rad。"""
    t = scene.to_rx_frame(point)
    lon = float(np.arctan2(t[1], t[0]))
    lat = float(np.arcsin(np.clip(t[2] / np.linalg.norm(t), -1.0, 1.0)))
    return float(np.mod(lon + np.pi, 2 * np.pi)), lat


def element_signals(
    scene: MultipathScene,
    geom: ArrayGeometry,
    tx: FloatArray,
    *,
    far_field: bool = False,
) -> ComplexArray:
    """各阵元接收到的复信号 `y_{m,n}`，形状 `(k_side, k_side)`。

    默认使用镜像源到阵元的精确距离；`far_field=True` 时用平面波近似。
    """
    paths = simulate_paths(scene, tx, wavelength=geom.wavelength)
    offsets = geom.element_offsets()
    k = 2 * np.pi / geom.wavelength
    signals = np.zeros(geom.n_elements, dtype=np.complex128)
    for path in paths:
        t = scene.to_rx_frame(path.image_source)
        if far_field:
            extra = -offsets @ (t / np.linalg.norm(t))
        else:
            # |t − p| − |t| without cancellation
            t_minus_p = np.linalg.norm(t[None, :] - offsets, axis=1)
            extra = (np.sum(offsets**2, axis=1) - 2 * offsets @ t) / (
                t_minus_p + np.linalg.norm(t)
            )
        signals += path.gain * np.exp(-1j * k * extra)
    return signals.reshape(geom.k_side, geom.k_side)


def ground_truth_spectrum(
    scene: MultipathScene,
    geom: ArrayGeometry,
    tx: FloatArray,
    *,
    h: int = DEFAULT_HEIGHT,
    w: int = DEFAULT_WIDTH,
    far_field: bool = False,
) -> SpatialSpectrum:
    """多径叠加后，对各阵元相位做波束扫描得到的真值空间谱。"""
    signals = element_signals(scene, geom, tx, far_field=far_field)
    return beamform_spectrum(geom, np.angle(signals), h, w)


def rssi_from_gains(gains: Sequence[complex] | ComplexArray) -> float:
    """相干叠加后的 RSSI `20·log10|Σ g|`，下限为 −100 dB。"""
    total = np.abs(np.sum(np.asarray(gains, dtype=np.complex128)))
    with np.errstate(divide="ignore"):
        value = 20 * np.log10(total)
    return float(max(value, RSSI_FLOOR_DB))


def ground_truth_rssi(
    scene: MultipathScene, tx: FloatArray, *, wavelength: float = 0.327
) -> float:
    """单个全向天线处的真值 RSSI，单位 dB。"""
    return rssi_from_gains([p.gain for p in simulate_paths(scene, tx, wavelength=wavelength)])


def default_subcarriers(
    count: int = N_SUBCARRIERS,
    center: float = SUBCARRIER_CENTER_HZ,
    spacing: float = SUBCARRIER_SPACING_HZ,
) -> FloatArray:
    """以 `center` 为中心、间隔 `spacing` 的升序子载波频率。"""
    return center + (np.arange(count) - (count - 1) / 2) * spacing


def csi_from_paths(
    paths: Sequence[PropagationPath], subcarriers: FloatArray
) -> ComplexArray:
    """`H(f) = Σ (ΠΓ)·(c / 4π d f)·exp(−j 2π f d / c)`。"""
    freqs = np.asarray(subcarriers, dtype=np.float64)
    if freqs.ndim != 1 or np.any(np.diff(freqs) <= 0) or np.any(freqs <= 0):
        raise ValueError("subcarriers must be positive and strictly ascending")
    response = np.zeros(len(freqs), dtype=np.complex128)
    for path in paths:
        d = path.distance
        response += (
            path.reflection
            * SPEED_OF_LIGHT
            / (4 * np.pi * d * freqs)
            * np.exp(-2j * np.pi * freqs * d / SPEED_OF_LIGHT)
        )
    return response


def ground_truth_csi(
    scene: MultipathScene, tx: FloatArray, subcarriers: FloatArray | None = None
) -> ComplexArray:
    """真值 CSI，调用方将前 26 个视为上行、后 26 个视为下行。"""
    freqs = default_subcarriers() if subcarriers is None else np.asarray(subcarriers)
    return csi_from_paths(simulate_paths(scene, tx), freqs)
