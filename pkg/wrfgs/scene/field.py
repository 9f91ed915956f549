"""无线辐射场：把参数表、场景网络、投影与光栅化串成一条可微的管线。"""

from dataclasses import dataclass
from typing import Self

import numpy as np

from wrfgs.config import MainConfig, NetworkConfig, Pipeline
from wrfgs.consts import MIN_GAUSSIANS
from wrfgs.em import (
    covariance,
    covariance_backward,
    logit,
    normalize_quaternion,
    normalize_quaternion_backward,
    sigmoid,
    to_complex,
    to_pairs,
)
from wrfgs.log import logger
from wrfgs.projection import ProjectedBatch, project_batch, project_batch_backward
from wrfgs.scene.network import (
    ConditioningInput,
    ConditioningKind,
    DeformationCache,
    DeformationNetwork,
    ScenarioCache,
    ScenarioNetwork,
)
from wrfgs.scene.store import (
    CALIBRATION,
    MU,
    OPACITY,
    ROT,
    SCALE,
    SIGNAL,
    ParamStore,
    nearest_neighbor_scale,
)
from wrfgs.splat import CollapsedSplat, Compositor, Rasterizer, RenderedField, SplatInput
from wrfgs.typing import ComplexArray, FloatArray, GradDict

__all__ = [
    "AttributeGrads",
    "CollapsedRender",
    "FieldRender",
    "GaussianAttributes",
    "RadiationField",
    "add_grads",
    "init_random",
]

INIT_OPACITY = 0.1


def add_grads(total: GradDict, part: GradDict) -> GradDict:
    """逐键相加两组梯度，`total` 原地更新后返回。"""
    for name, value in part.items():
        if name in total:
            total[name] = total[name] + value
        else:
            total[name] = value.copy()
    return total


@dataclass
class GaussianAttributes:
    """一次条件输入下参与渲染的逐高斯属性。

    Attributes:
        mu: 中心 `(N, 3)`。
        rot: 生效的单位四元数 `(N, 4)`。
        log_scale: 生效的对数尺度 `(N, 3)`。
        signals: 复信号 `(N, d)`。
        attenuation: 复衰减 `(N,)`，仅 WRF-GS。
        opacity: 不透明度 `(N,)`，仅 WRF-GS+。
    """

    mu: FloatArray
    rot: FloatArray
    log_scale: FloatArray
    signals: ComplexArray
    attenuation: ComplexArray | None = None
    opacity: FloatArray | None = None

    @property
    def covariance(self) -> FloatArray:
        return covariance(self.rot, self.log_scale)


@dataclass
class AttributeGrads:
    """损失对 `GaussianAttributes` 各字段的梯度，缺省字段视为 0。"""

    mu: FloatArray | None = None
    rot: FloatArray | None = None
    log_scale: FloatArray | None = None
    signals: ComplexArray | None = None
    attenuation: ComplexArray | None = None
    opacity: FloatArray | None = None


@dataclass
class _AttributeCache:
    raw_rot: FloatArray
    scenario: ScenarioCache | None = None
    deformation: DeformationCache | None = None


class RadiationField:
    """一个场景的可微前向与反向。

    Attributes:
        store: 参数表。
        pipeline: `wrfgs` 或 `wrfgsplus`。
        cond_kind: 条件输入类型。
        rx: 接收机位置。
        rx_rotation: 接收机本体到世界的旋转矩阵。
    """

    def __init__(
        self,
        store: ParamStore,
        *,
        pipeline: Pipeline,
        cond_kind: ConditioningKind,
        network: NetworkConfig,
        rx: FloatArray,
        rx_rotation: FloatArray,
        canvas: tuple[int, int],
        tile_size: int,
        min_transmittance: float,
        max_per_tile: int,
        threads: int = 1,
    ) -> None:
        self.store = store
        self.pipeline = pipeline
        self.cond_kind = cond_kind
        self.rx = np.asarray(rx, dtype=np.float64)
        self.rx_rotation = np.asarray(rx_rotation, dtype=np.float64)
        self.canvas = canvas
        self.tile_size = tile_size
        self.min_transmittance = min_transmittance
        self.max_per_tile = max_per_tile
        self.threads = threads
        d_sig = store.d_sig
        self.scenario = ScenarioNetwork.build(network, cond_kind, d_sig)
        self.deformation = DeformationNetwork.build(network, cond_kind, d_sig)

    @classmethod
    def from_config(
        cls,
        store: ParamStore,
        config: MainConfig,
        cond_kind: ConditioningKind,
        rx: FloatArray,
        rx_rotation: FloatArray,
    ) -> Self:
        return cls(
            store,
            pipeline=config.train.pipeline,
            cond_kind=cond_kind,
            network=config.network,
            rx=rx,
            rx_rotation=rx_rotation,
            canvas=(config.projection.height, config.projection.width),
            tile_size=config.splat.tile_size,
            min_transmittance=config.splat.min_transmittance,
            max_per_tile=config.splat.max_per_tile,
            threads=config.threads,
        )

    @property
    def compositor(self) -> Compositor:
        return Compositor.CHAINED if self.pipeline == "wrfgs" else Compositor.ALPHA

    def attributes(
        self, cond: ConditioningInput
    ) -> tuple[GaussianAttributes, _AttributeCache]:
        """场景网络前向：由条件输入得到逐高斯渲染属性。"""
        if cond.kind is not self.cond_kind:
            raise ValueError(f"field expects {self.cond_kind} conditioning, got {cond.kind}")
        p = self.store.params
        if self.pipeline == "wrfgs":
            attenuation, signals, cache = self.scenario.forward(self.store, cond)
            return (
                GaussianAttributes(
                    mu=p[MU],
                    rot=normalize_quaternion(p[ROT]),
                    log_scale=p[SCALE],
                    signals=signals,
                    attenuation=attenuation,
                ),
                _AttributeCache(p[ROT], scenario=cache),
            )
        offsets, cache = self.deformation.forward(self.store, cond)
        raw_rot = p[ROT] + offsets.d_rot
        return (
            GaussianAttributes(
                mu=p[MU],
                rot=normalize_quaternion(raw_rot),
                log_scale=p[SCALE] + offsets.d_scale,
                signals=to_complex(p[SIGNAL]) + offsets.d_sig,
                opacity=sigmoid(p[OPACITY]),
            ),
            _AttributeCache(raw_rot, deformation=cache),
        )

    def attributes_backward(
        self, attrs: GaussianAttributes, cache: _AttributeCache, grads: AttributeGrads
    ) -> GradDict:
        """把对渲染属性的梯度传回参数表中的参数。"""
        n, d = attrs.signals.shape
        g_mu = np.zeros((n, 3)) if grads.mu is None else grads.mu
        g_rot_unit = np.zeros((n, 4)) if grads.rot is None else grads.rot
        g_scale = np.zeros((n, 3)) if grads.log_scale is None else grads.log_scale
        g_signals = (
            np.zeros((n, d), dtype=np.complex128) if grads.signals is None else grads.signals
        )
        g_raw_rot = normalize_quaternion_backward(cache.raw_rot, g_rot_unit)
        out: GradDict = {ROT: g_raw_rot, SCALE: g_scale.copy()}

        if cache.scenario is not None:
            g_att = (
                np.zeros(n, dtype=np.complex128)
                if grads.attenuation is None
                else grads.attenuation
            )
            add_grads(out, self.scenario.backward(self.store, cache.scenario, g_att, g_signals))
        else:
            assert cache.deformation is not None
            assert attrs.opacity is not None
            g_opacity = np.zeros(n) if grads.opacity is None else grads.opacity
            out[SIGNAL] = to_pairs(g_signals)
            out[OPACITY] = g_opacity * attrs.opacity * (1.0 - attrs.opacity)
            add_grads(
                out,
                self.deformation.backward(
                    self.store, cache.deformation, g_signals, g_raw_rot, g_scale
                ),
            )
        out[MU] = out.get(MU, 0.0) + g_mu
        return out

    def render(self, cond: ConditioningInput) -> "FieldRender":
        """完整的投影与光栅化前向。"""
        attrs, cache = self.attributes(cond)
        height, width = self.canvas
        proj = project_batch(
            attrs.mu, attrs.covariance, self.rx, self.rx_rotation, width, height
        )
        inp = SplatInput.from_batch(
            proj,
            attrs.signals,
            self.compositor,
            self.canvas,
            attenuation=attrs.attenuation,
            opacity=attrs.opacity,
        )
        rast = Rasterizer(
            inp,
            tile_size=self.tile_size,
            min_transmittance=self.min_transmittance,
            max_per_tile=self.max_per_tile,
            threads=self.threads,
        )
        return FieldRender(self, attrs, cache, proj, rast, rast.forward())

    def render_collapsed(self, cond: ConditioningInput) -> "CollapsedRender":
        """不做角度投影，把全部高斯合成为一个 `d_sig` 维复向量。"""
        attrs, cache = self.attributes(cond)
        depth = np.linalg.norm(attrs.mu - self.rx, axis=-1)
        splat = CollapsedSplat(
            attrs.signals,
            depth,
            self.compositor,
            attenuation=attrs.attenuation,
            opacity=attrs.opacity,
        )
        return CollapsedRender(self, attrs, cache, splat, splat.forward())


@dataclass
class FieldRender:
    """一次渲染的结果与反向所需的全部中间量。"""

    field: RadiationField
    attrs: GaussianAttributes
    cache: _AttributeCache
    proj: ProjectedBatch
    rasterizer: Rasterizer
    rendered: RenderedField

    @property
    def power(self) -> FloatArray:
        return self.rendered.power

    @property
    def radius(self) -> FloatArray:
        """各高斯的足迹半径，剔除的为 0。"""
        return self.rasterizer.radius

    def backward(
        self,
        grad_power: FloatArray | None = None,
        grad_field: ComplexArray | None = None,
    ) -> GradDict:
        """从渲染输出反传到参数表，返回参数梯度 (不写入梯度槽)。"""
        height, width = self.field.canvas
        sg = self.rasterizer.backward(grad_power, grad_field)
        g_mu, g_sigma = project_batch_backward(
            self.proj, self.field.rx_rotation, sg.means2d, sg.cov2d, width, height
        )
        g_rot, g_scale = covariance_backward(self.attrs.rot, self.attrs.log_scale, g_sigma)
        return self.field.attributes_backward(
            self.attrs,
            self.cache,
            AttributeGrads(
                mu=g_mu,
                rot=g_rot,
                log_scale=g_scale,
                signals=sg.signals,
                attenuation=sg.attenuation,
                opacity=sg.opacity,
            ),
        )


@dataclass
class CollapsedRender:
    """单像素合成的结果。"""

    field: RadiationField
    attrs: GaussianAttributes
    cache: _AttributeCache
    splat: CollapsedSplat
    value: ComplexArray

    def backward(self, grad_value: ComplexArray) -> GradDict:
        local = self.splat.backward(grad_value)
        return self.field.attributes_backward(
            self.attrs,
            self.cache,
            AttributeGrads(
                signals=local.signals,
                attenuation=local.attenuation,
                opacity=local.opacity,
            ),
        )


def init_random(
    bounds: FloatArray,
    n: int,
    seed: int,
    *,
    network: NetworkConfig,
    pipeline: Pipeline,
    cond_kind: ConditioningKind,
    d_sig: int,
    min_gaussians: int = MIN_GAUSSIANS,
) -> ParamStore:
    """在包围盒内随机生成初始场景。

    中心在 `bounds` 内均匀分布；尺度取到最近 3 个邻居的平均距离；不透明度为 0.1；
    四元数为单位元；静态信号与信号输出层按 `network.signal_init_std` 随机初始化，
    为 0 时全零。只生成 `pipeline` 使用的网络。

    Args:
        bounds: 包围盒 `(2, 3)`，第一行为下界。
        n: 高斯数量。
        seed: 随机种子。
        network: 网络结构。
        pipeline: 管线。
        cond_kind: 条件输入类型。
        d_sig: 信号维度。
        min_gaussians: 允许的最小数量。
    """
    if n < min_gaussians:
        raise ValueError(f"need at least {min_gaussians} gaussians, got {n}")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    rng = np.random.default_rng(seed)
    mu = rng.uniform(bounds[0], bounds[1], size=(n, 3))
    scale = np.maximum(nearest_neighbor_scale(mu), 1e-7)
    std = network.signal_init_std
    signal = rng.normal(0.0, std, size=(n, d_sig, 2)) if std > 0 else np.zeros((n, d_sig, 2))
    params = {
        MU: mu,
        ROT: np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        SCALE: np.repeat(np.log(scale)[:, None], 3, axis=1),
        OPACITY: np.full(n, float(logit(INIT_OPACITY))),
        SIGNAL: signal,
        CALIBRATION: np.zeros(1),
    }
    if pipeline == "wrfgs":
        params.update(ScenarioNetwork.build(network, cond_kind, d_sig).init(rng, std))
    else:
        params.update(DeformationNetwork.build(network, cond_kind, d_sig).init(rng))
    logger.debug(
        "Initialized scene", gaussians=n, d_sig=d_sig, pipeline=pipeline, seed=seed
    )
    return ParamStore(params, bounds)
