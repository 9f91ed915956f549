"""电磁泼溅光栅化器。

按 tile 对投影后的高斯做深度排序，然后逐像素合成复信号。支持两种合成律：

- `Compositor.CHAINED`: 链式衰减，`R = Σ_i (Π_{j<i} δ_j) · S_i · G'_i`；
- `Compositor.ALPHA`: α 混合，`R = Σ_i S_i · α_i · Π_{j<i} (1 − α_j)`，`α_i = o_i · G'_i`。

`G'_i` 为像素处的二维高斯核权重，只在 `3σ` 方框内非零。方框在方位角方向上
按到最近的接缝副本测量 `Δp_x`，分块求值与不分块的参考求值共用同一规则。

并行只发生在 tile 之间，每个 tile 独占自己的输出像素；反向传播中各 tile 的
逐高斯梯度按 tile 编号顺序归并，因此结果与线程数无关。
"""

from dataclasses import dataclass, field
from enum import StrEnum
from typing import Self

import numpy as np

from wrfgs.consts import MAX_PER_TILE, MIN_TRANSMITTANCE, TILE_SIZE
from wrfgs.exceptions import RenderError, ShapeMismatchError
from wrfgs.log import logger
from wrfgs.projection import ProjectedBatch, ProjectedGaussian, bin_gaussians, tile_grid
from wrfgs.typing import BoolArray, ComplexArray, FloatArray, IntArray
from wrfgs.utils import run_parallel

__all__ = [
    "CollapsedSplat",
    "CompositeGrads",
    "Compositor",
    "Rasterizer",
    "RenderedField",
    "SplatGradients",
    "SplatInput",
    "composite_alpha",
    "composite_chained",
    "kernel_weights",
    "render",
    "render_backward",
    "render_reference",
    "sort_per_tile",
]


class Compositor(StrEnum):
    """合成律。"""

    CHAINED = "chained"
    ALPHA = "alpha"


@dataclass
class SplatInput:
    """光栅化器的输入。

    Attributes:
        means2d: 像素中心 `(N, 2)`。
        cov2d: 像素协方差 `(N, 2, 2)`。
        depth: 深度 `(N,)`。
        valid: 未剔除掩码 `(N,)`。
        signals: 逐高斯复信号 `(N, d_sig)`，WRF-GS+ 中已包含形变偏移。
        compositor: 合成律。
        canvas: `(H, W)`。
        attenuation: 逐高斯复衰减 `(N,)`，仅链式衰减使用。
        opacity: 逐高斯不透明度 `(N,)`，仅 α 混合使用。
    """

    means2d: FloatArray
    cov2d: FloatArray
    depth: FloatArray
    valid: BoolArray
    signals: ComplexArray
    compositor: Compositor
    canvas: tuple[int, int]
    attenuation: ComplexArray | None = None
    opacity: FloatArray | None = None

    def __post_init__(self) -> None:
        n = len(self.depth)
        self.signals = np.asarray(self.signals, dtype=np.complex128)
        if self.signals.ndim == 1:
            self.signals = self.signals[:, None]
        if (
            self.means2d.shape != (n, 2)
            or self.cov2d.shape != (n, 2, 2)
            or self.valid.shape != (n,)
            or self.signals.shape[0] != n
        ):
            raise ShapeMismatchError("SplatInput arrays must share the gaussian axis")
        if self.compositor is Compositor.CHAINED:
            if self.attenuation is None or self.attenuation.shape != (n,):
                raise ShapeMismatchError("chained compositing needs one attenuation per gaussian")
            if not np.all(np.isfinite(self.attenuation)):
                raise ValueError("attenuation must be finite")
        else:
            if self.opacity is None or self.opacity.shape != (n,):
                raise ShapeMismatchError("alpha compositing needs one opacity per gaussian")
            if np.any((self.opacity < 0) | (self.opacity > 1)):
                raise ValueError("opacity must lie in [0, 1]")
        if np.any(self.depth[self.valid] <= 0):
            raise ValueError("depths of visible gaussians must be positive")

    @property
    def d_sig(self) -> int:
        return int(self.signals.shape[1])

    @classmethod
    def from_batch(
        cls,
        proj: ProjectedBatch,
        signals: ComplexArray,
        compositor: Compositor,
        canvas: tuple[int, int],
        *,
        attenuation: ComplexArray | None = None,
        opacity: FloatArray | None = None,
    ) -> Self:
        return cls(
            proj.means2d,
            proj.cov2d,
            proj.depth,
            proj.valid,
            signals,
            compositor,
            canvas,
            attenuation,
            opacity,
        )

    @classmethod
    def from_gaussians(
        cls,
        projected: list[ProjectedGaussian],
        signals: ComplexArray,
        compositor: Compositor,
        canvas: tuple[int, int],
        *,
        attenuation: ComplexArray | None = None,
        opacity: FloatArray | None = None,
    ) -> Self:
        """由 `ProjectedGaussian` 列表构造，`source_index` 用作排序的平局裁决。

        列表中第 i 项的逐高斯属性取 `signals[i]` 等，列表顺序不影响结果。
        """
        n = len(projected)
        order = np.argsort([pg.source_index for pg in projected], kind="stable")
        ranked = [projected[i] for i in order]

        def _take(values: np.ndarray | None) -> np.ndarray | None:
            return None if values is None else np.asarray(values)[order]

        return cls(
            np.array([pg.pixel_center for pg in ranked]).reshape(n, 2),
            np.array([pg.cov2d for pg in ranked]).reshape(n, 2, 2),
            np.array([pg.depth for pg in ranked], dtype=np.float64),
            np.ones(n, dtype=bool),
            np.asarray(signals, dtype=np.complex128)[order],
            compositor,
            canvas,
            _take(attenuation),
            _take(opacity),
        )


@dataclass
class RenderedField:
    """渲染结果。`complex_field` 形状为 `(H, W, d_sig)`。"""

    complex_field: ComplexArray

    @property
    def power(self) -> FloatArray:
        """逐像素功率 `re² + im²`，`d_sig = 1` 时形状为 `(H, W)`。"""
        f = self.complex_field
        p = f.real * f.real + f.imag * f.imag
        return p[..., 0] if p.shape[-1] == 1 else p


@dataclass
class SplatGradients:
    """损失对光栅化器全部输入的梯度。

    复数量的梯度采用 `∂L/∂re + j·∂L/∂im` 约定。
    """

    means2d: FloatArray
    cov2d: FloatArray
    signals: ComplexArray
    attenuation: ComplexArray | None = None
    opacity: FloatArray | None = None

    @classmethod
    def zeros(cls, inp: SplatInput) -> Self:
        n = len(inp.depth)
        return cls(
            np.zeros((n, 2)),
            np.zeros((n, 2, 2)),
            np.zeros_like(inp.signals),
            None if inp.attenuation is None else np.zeros(n, dtype=np.complex128),
            None if inp.opacity is None else np.zeros(n),
        )


def _conics(cov2d: FloatArray) -> FloatArray:
    a = cov2d[..., 0, 0]
    b = cov2d[..., 0, 1]
    c = cov2d[..., 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[..., 0, 0] = c / det
    conic[..., 1, 1] = a / det
    conic[..., 0, 1] = conic[..., 1, 0] = -b / det
    return conic


def _radii(cov2d: FloatArray) -> FloatArray:
    a = cov2d[..., 0, 0]
    b = cov2d[..., 0, 1]
    c = cov2d[..., 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return 3.0 * np.sqrt(np.maximum(lam_max, 0.0))


def kernel_weights(
    pixels: FloatArray, means2d: FloatArray, cov2d: FloatArray, width: int
) -> tuple[FloatArray, BoolArray]:
    """像素 `(P, 2)` 处 `M` 个高斯的核权重，`cov2d` 为像素协方差 `(M, 2, 2)`。

    Returns:
        `(weights, mask)`，均为 `(P, M)`；方框外的权重为 0。
    """
    return _kernel(pixels, means2d, _conics(cov2d), _radii(cov2d), width)


def _wrapped_offset(positions: FloatArray, centers: FloatArray, width: int) -> FloatArray:
    """方位角方向到最近接缝副本的 `Δp_x`，取值在 `[−W/2, W/2)`。"""
    dx = positions[:, None] - centers[None, :]
    return np.mod(dx + width / 2.0, width) - width / 2.0


def _quadratic(conic: FloatArray, dx: FloatArray, dy: FloatArray) -> FloatArray:
    return (
        conic[..., 0, 0] * dx * dx
        + 2.0 * conic[..., 0, 1] * dx * dy
        + conic[..., 1, 1] * dy * dy
    )


def _kernel(
    pixels: FloatArray,
    means2d: FloatArray,
    conic: FloatArray,
    radius: FloatArray,
    width: int,
) -> tuple[FloatArray, BoolArray]:
    dx = _wrapped_offset(pixels[:, 0], means2d[:, 0], width)
    dy = pixels[:, 1, None] - means2d[None, :, 1]
    mask = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    quad = _quadratic(conic, dx, dy)
    weights = np.where(mask, np.exp(-0.5 * np.where(mask, quad, 0.0)), 0.0)
    return weights, mask


def _as_pixel_weights(weights: FloatArray | float, m: int) -> tuple[FloatArray, bool]:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 0:
        return np.full((1, m), float(w)), True
    if w.ndim == 1:
        return w[None, :], True
    return w, False


@dataclass
class _ChainedState:
    weights: FloatArray
    mask: BoolArray
    prefix: ComplexArray
    contrib: ComplexArray


@dataclass
class _AlphaState:
    weights: FloatArray
    alpha: FloatArray
    trans: FloatArray
    include: BoolArray
    contrib: FloatArray


def _chained_forward(
    signals: ComplexArray,
    attenuation: ComplexArray,
    weights: FloatArray,
    mask: BoolArray,
) -> tuple[ComplexArray, _ChainedState]:
    factors = np.where(mask, attenuation[None, :], 1.0 + 0.0j)
    prefix = np.ones_like(factors)
    if factors.shape[1] > 1:
        prefix[:, 1:] = np.cumprod(factors[:, :-1], axis=1)
    contrib = np.where(mask, prefix * weights, 0.0)
    return contrib @ signals, _ChainedState(weights, mask, prefix, contrib)


def _alpha_forward(
    signals: ComplexArray,
    opacity: FloatArray,
    weights: FloatArray,
    min_transmittance: float,
) -> tuple[ComplexArray, _AlphaState]:
    alpha = weights * opacity[None, :]
    trans = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        trans[:, 1:] = np.cumprod(1.0 - alpha[:, :-1], axis=1)
    include = trans >= min_transmittance
    contrib = np.where(include, alpha * trans, 0.0)
    return contrib @ signals, _AlphaState(weights, alpha, trans, include, contrib)


def composite_chained(
    signals: ComplexArray,
    attenuation: ComplexArray,
    weights: FloatArray | float = 1.0,
    mask: BoolArray | None = None,
) -> ComplexArray:
    """按链式衰减合成已按深度排好序的高斯。

    Args:
        signals: 排序后的信号 `(M, d)` 或 `(M,)`。
        attenuation: 排序后的衰减 `(M,)`。
        weights: 核权重，标量、`(M,)` 或逐像素 `(P, M)`。
        mask: 哪些高斯覆盖该像素，默认取 `weights > 0`。

    Returns:
        标量权重或 `(M,)` 权重时为 `(d,)`，否则为 `(P, d)`。
    """
    sig = np.asarray(signals, dtype=np.complex128)
    flat = sig.ndim == 1
    sig = sig[:, None] if flat else sig
    w, single = _as_pixel_weights(weights, len(sig))
    m = w > 0 if mask is None else np.broadcast_to(mask, w.shape)
    out, _ = _chained_forward(sig, np.asarray(attenuation, dtype=np.complex128), w, m)
    out = out[0] if single else out
    return out[..., 0] if flat else out


def composite_alpha(
    signals: ComplexArray,
    opacity: FloatArray,
    weights: FloatArray | float = 1.0,
    min_transmittance: float = MIN_TRANSMITTANCE,
) -> ComplexArray:
    """按 α 混合合成已按深度排好序的高斯。

    透射率 `Π(1 − α)` 低于 `min_transmittance` 后的高斯不再贡献，
    传入 0 可关闭提前终止。返回形状与 `composite_chained` 相同。
    """
    sig = np.asarray(signals, dtype=np.complex128)
    flat = sig.ndim == 1
    sig = sig[:, None] if flat else sig
    w, single = _as_pixel_weights(weights, len(sig))
    out, _ = _alpha_forward(sig, np.asarray(opacity, dtype=np.float64), w, min_transmittance)
    out = out[0] if single else out
    return out[..., 0] if flat else out


def _reverse_exclusive_cumsum(x: np.ndarray) -> np.ndarray:
    """沿最后一维求 `Σ_{j>i} x_j`。"""
    total = np.cumsum(x[..., ::-1], axis=-1)[..., ::-1]
    return total - x


@dataclass
class CompositeGrads:
    """单次合成对信号、核权重与衰减或不透明度的梯度。"""

    signals: ComplexArray
    weights: FloatArray
    attenuation: ComplexArray | None = None
    opacity: FloatArray | None = None


def _chained_backward(
    signals: ComplexArray,
    attenuation: ComplexArray,
    state: _ChainedState,
    grad_out: ComplexArray,
) -> CompositeGrads:
    inner = np.conj(grad_out) @ signals.T
    g_signals = np.conj(state.contrib).T @ grad_out
    g_weights = np.where(state.mask, np.real(state.prefix * inner), 0.0)
    downstream = _reverse_exclusive_cumsum(state.contrib * inner)
    safe = np.where(attenuation == 0, 1.0, attenuation)
    d_att = np.where(state.mask & (attenuation != 0)[None, :], downstream / safe[None, :], 0.0)
    g_att = np.conj(np.sum(d_att, axis=0))
    return CompositeGrads(g_signals, g_weights, attenuation=g_att)


def _alpha_backward(
    signals: ComplexArray,
    opacity: FloatArray,
    state: _AlphaState,
    grad_out: ComplexArray,
) -> CompositeGrads:
    inner = np.conj(grad_out) @ signals.T
    g_signals = state.contrib.T @ grad_out
    downstream = _reverse_exclusive_cumsum(state.contrib * inner)
    survive = np.maximum(1.0 - state.alpha, 1e-12)
    g_alpha = np.where(
        state.include, np.real(state.trans * inner) - np.real(downstream) / survive, 0.0
    )
    g_opacity = np.sum(g_alpha * state.weights, axis=0)
    return CompositeGrads(g_signals, g_alpha * opacity[None, :], opacity=g_opacity)


def _segment_sum(index: IntArray, values: np.ndarray, length: int) -> np.ndarray:
    """按 `index` 分组求和，`values` 的首维与 `index` 对齐，可以是复数。"""
    flat = values.reshape(len(index), int(np.prod(values.shape[1:])))
    out = np.zeros((length, flat.shape[1]), dtype=np.result_type(flat, np.float64))
    for k in range(flat.shape[1]):
        col = flat[:, k]
        if np.iscomplexobj(col):
            out[:, k] = np.bincount(index, col.real, length) + 1j * np.bincount(
                index, col.imag, length
            )
        else:
            out[:, k] = np.bincount(index, col, length)
    return out.reshape(length, *values.shape[1:])


@dataclass
class _TilePairs:
    """一个 tile 内的 (像素, 高斯) 覆盖对，按像素、再按深度排序。

    只有落在高斯 `3σ` 方框内的像素才产生覆盖对，逐像素的前缀积与后缀和
    在 `(像素, 列表位置)` 填充矩阵上沿行扫描。

    Attributes:
        ids: tile 的深度有序高斯索引。
        flat: tile 各像素在整张画布上的行优先编号。
        pixel: 覆盖对所在的 tile 内像素。
        slot: 覆盖对在 `ids` 中的下标。
        position: 覆盖对在所在像素列表中的位置。
        dx: 像素相对高斯中心的方位角偏移 (已按接缝折返)。
        dy: 像素相对高斯中心的仰角偏移。
        conic: 覆盖对对应高斯的逆协方差 `(K, 2, 2)`。
        weights: 核权重。
    """

    ids: IntArray
    flat: IntArray
    pixel: IntArray
    slot: IntArray
    position: IntArray
    dx: FloatArray
    dy: FloatArray
    conic: FloatArray
    weights: FloatArray

    @property
    def lanes(self) -> tuple[int, int]:
        depth = int(self.position.max()) + 1 if len(self.position) else 0
        return len(self.flat), depth

    def exclusive_cumprod(self, values: np.ndarray) -> np.ndarray:
        """每个像素列表内 `Π_{j<i} values_j`。"""
        padded = np.ones(self.lanes, dtype=values.dtype)
        padded[self.pixel, self.position] = values
        out = np.ones_like(padded)
        np.cumprod(padded[:, :-1], axis=1, out=out[:, 1:])
        return out[self.pixel, self.position]

    def suffix_sum(self, values: np.ndarray) -> np.ndarray:
        """每个像素列表内 `Σ_{j>i} values_j`。"""
        padded = np.zeros(self.lanes, dtype=values.dtype)
        padded[self.pixel, self.position] = values
        total = np.cumsum(padded[:, ::-1], axis=1)[:, ::-1]
        return total[self.pixel, self.position] - values

    def per_pixel(self, values: np.ndarray) -> np.ndarray:
        return _segment_sum(self.pixel, values, len(self.flat))

    def per_gaussian(self, values: np.ndarray) -> np.ndarray:
        return _segment_sum(self.slot, values, len(self.ids))


@dataclass
class _PairComposite:
    """覆盖对上的一次合成。

    链式衰减时 `factor` 为衰减、`transmit` 为前缀积；α 混合时 `factor` 为
    不透明度、`transmit` 为透射率。
    """

    factor: np.ndarray
    transmit: np.ndarray
    contrib: np.ndarray
    alpha: FloatArray | None = None
    include: BoolArray | None = None


@dataclass
class _TileResult:
    pixels: IntArray
    values: ComplexArray


@dataclass
class _TileGrads:
    ids: IntArray
    local: CompositeGrads
    means2d: FloatArray
    cov2d: FloatArray


class Rasterizer:
    """一次前向渲染及其反向传播。

    构造时完成分 tile 与排序。每个 tile 只在覆盖对上求核权重并合成，
    工作量与足迹总面积成正比。`backward` 复用同一份排序列表求梯度。

    Attributes:
        inp: 输入。
        tile_lists: 每个 tile 的深度有序高斯索引。
    """

    def __init__(
        self,
        inp: SplatInput,
        *,
        tile_size: int = TILE_SIZE,
        min_transmittance: float = MIN_TRANSMITTANCE,
        max_per_tile: int = MAX_PER_TILE,
        threads: int = 1,
    ) -> None:
        self.inp = inp
        self.height, self.width = inp.canvas
        self.tile_size = tile_size
        self.min_transmittance = min_transmittance
        self.threads = threads
        self.tiles_y, self.tiles_x = tile_grid(self.width, self.height, tile_size)
        self.conic = np.zeros_like(inp.cov2d)
        self.conic[inp.valid] = _conics(inp.cov2d[inp.valid])
        self.radius = np.where(inp.valid, _radii(inp.cov2d), 0.0)

        tile_ids, gauss_ids = bin_gaussians(
            inp.means2d, self.radius, inp.valid, self.width, self.height, tile_size
        )
        order = np.lexsort((gauss_ids, inp.depth[gauss_ids], tile_ids))
        tile_ids, gauss_ids = tile_ids[order], gauss_ids[order]
        n_tiles = self.tiles_y * self.tiles_x
        counts = np.bincount(tile_ids, minlength=n_tiles)
        if len(counts) and counts.max(initial=0) > max_per_tile:
            worst = int(np.argmax(counts))
            raise RenderError(
                f"tile {worst} holds {int(counts[worst])} gaussians, limit is {max_per_tile}"
            )
        self.tile_lists: list[IntArray] = np.split(gauss_ids, np.cumsum(counts)[:-1])
        logger.debug(
            "Binned gaussians",
            pairs=len(gauss_ids),
            busy_tiles=int(np.count_nonzero(counts)),
            max_per_tile=int(counts.max(initial=0)),
        )
        self._field: ComplexArray | None = None

    def _pairs(self, tile: int) -> _TilePairs:
        ids = self.tile_lists[tile]
        ty, tx = divmod(tile, self.tiles_x)
        rows = np.arange(ty * self.tile_size, min((ty + 1) * self.tile_size, self.height))
        cols = np.arange(tx * self.tile_size, min((tx + 1) * self.tile_size, self.width))
        means = self.inp.means2d[ids]
        radius = self.radius[ids]
        dy = rows[:, None].astype(np.float64) - means[None, :, 1]
        dx = _wrapped_offset(cols.astype(np.float64), means[:, 0], self.width)
        # (行, 列, 高斯) 顺序展开即得到按像素、再按深度排序的覆盖对
        cover = (np.abs(dy) <= radius)[:, None, :] & (np.abs(dx) <= radius)[None, :, :]
        row, col, slot = np.nonzero(cover)
        pixel = row * len(cols) + col
        counts = np.bincount(pixel, minlength=len(rows) * len(cols))
        starts = np.cumsum(counts) - counts
        pair_dx = dx[col, slot]
        pair_dy = dy[row, slot]
        conic = self.conic[ids][slot]
        quad = _quadratic(conic, pair_dx, pair_dy)
        return _TilePairs(
            ids=ids,
            flat=np.add.outer(rows * self.width, cols).ravel(),
            pixel=pixel,
            slot=slot,
            position=np.arange(len(pixel)) - starts[pixel],
            dx=pair_dx,
            dy=pair_dy,
            conic=conic,
            weights=np.exp(-0.5 * quad),
        )

    def _composite(self, pairs: _TilePairs) -> _PairComposite:
        inp = self.inp
        if inp.compositor is Compositor.CHAINED:
            assert inp.attenuation is not None
            att = inp.attenuation[pairs.ids][pairs.slot]
            prefix = pairs.exclusive_cumprod(att)
            return _PairComposite(att, prefix, prefix * pairs.weights)
        assert inp.opacity is not None
        opacity = inp.opacity[pairs.ids][pairs.slot]
        alpha = pairs.weights * opacity
        trans = pairs.exclusive_cumprod(1.0 - alpha)
        include = trans >= self.min_transmittance
        contrib = np.where(include, alpha * trans, 0.0)
        return _PairComposite(opacity, trans, contrib, alpha, include)

    def _forward_tile(self, tile: int) -> _TileResult:
        pairs = self._pairs(tile)
        comp = self._composite(pairs)
        signals = self.inp.signals[pairs.ids]
        values = pairs.per_pixel(comp.contrib[:, None] * signals[pairs.slot])
        return _TileResult(pairs.flat, values)

    def forward(self) -> RenderedField:
        """渲染全部 tile。"""
        d = self.inp.d_sig
        field_flat = np.zeros((self.height * self.width, d), dtype=np.complex128)
        busy = [t for t, ids in enumerate(self.tile_lists) if len(ids)]
        for result in run_parallel(self._forward_tile, busy, self.threads):
            field_flat[result.pixels] = result.values
        self._field = field_flat.reshape(self.height, self.width, d)
        return RenderedField(self._field.copy())

    def _backward_tile(self, tile: int, grad_flat: ComplexArray) -> _TileGrads:
        pairs = self._pairs(tile)
        comp = self._composite(pairs)
        g_out = grad_flat[pairs.flat][pairs.pixel]
        signals = self.inp.signals[pairs.ids][pairs.slot]
        inner = np.sum(np.conj(g_out) * signals, axis=-1)
        downstream = pairs.suffix_sum(comp.contrib * inner)
        if self.inp.compositor is Compositor.CHAINED:
            g_signals = pairs.per_gaussian(np.conj(comp.contrib)[:, None] * g_out)
            g_weights = np.real(comp.transmit * inner)
            nonzero = comp.factor != 0
            d_att = np.where(nonzero, downstream / np.where(nonzero, comp.factor, 1.0), 0.0)
            local = CompositeGrads(
                g_signals, g_weights, attenuation=np.conj(pairs.per_gaussian(d_att))
            )
        else:
            assert comp.alpha is not None and comp.include is not None
            g_signals = pairs.per_gaussian(comp.contrib[:, None] * g_out)
            survive = np.maximum(1.0 - comp.alpha, 1e-12)
            g_alpha = np.where(
                comp.include,
                np.real(comp.transmit * inner) - np.real(downstream) / survive,
                0.0,
            )
            local = CompositeGrads(
                g_signals,
                g_alpha * comp.factor,
                opacity=pairs.per_gaussian(g_alpha * pairs.weights),
            )

        gw = local.weights * pairs.weights
        dx, dy, conic = pairs.dx, pairs.dy, pairs.conic
        a00, a01, a11 = conic[:, 0, 0], conic[:, 0, 1], conic[:, 1, 1]
        g_means = np.stack(
            [
                pairs.per_gaussian(gw * (a00 * dx + a01 * dy)),
                pairs.per_gaussian(gw * (a01 * dx + a11 * dy)),
            ],
            axis=-1,
        )
        g_conic = np.empty((len(pairs.ids), 2, 2))
        g_conic[:, 0, 0] = -0.5 * pairs.per_gaussian(gw * dx * dx)
        g_conic[:, 1, 1] = -0.5 * pairs.per_gaussian(gw * dy * dy)
        g_conic[:, 0, 1] = g_conic[:, 1, 0] = -0.5 * pairs.per_gaussian(gw * dx * dy)
        tile_conic = self.conic[pairs.ids]
        g_cov = -tile_conic @ g_conic @ tile_conic
        return _TileGrads(pairs.ids, local, g_means, g_cov)

    def backward(
        self,
        grad_power: FloatArray | None = None,
        grad_field: ComplexArray | None = None,
    ) -> SplatGradients:
        """反向传播。

        Args:
            grad_power: 损失对 `power` 的梯度，形状与 `RenderedField.power` 相同。
            grad_field: 损失对复数场的梯度 `(H, W, d)`，与 `grad_power` 叠加。

        Raises:
            RenderError: 尚未执行前向渲染。
        """
        if self._field is None:
            raise RenderError("backward called before forward")
        d = self.inp.d_sig
        upstream = np.zeros((self.height, self.width, d), dtype=np.complex128)
        if grad_power is not None:
            gp = np.asarray(grad_power, dtype=np.float64).reshape(self.height, self.width, -1)
            upstream += 2.0 * gp * self._field
        if grad_field is not None:
            upstream += np.asarray(grad_field).reshape(self.height, self.width, d)
        grad_flat = upstream.reshape(-1, d)

        grads = SplatGradients.zeros(self.inp)
        if not np.any(upstream):
            return grads
        busy = [t for t, ids in enumerate(self.tile_lists) if len(ids)]
        results = run_parallel(
            lambda tile: self._backward_tile(tile, grad_flat), busy, self.threads
        )
        for res in results:
            np.add.at(grads.signals, res.ids, res.local.signals)
            np.add.at(grads.means2d, res.ids, res.means2d)
            np.add.at(grads.cov2d, res.ids, res.cov2d)
            if grads.attenuation is not None and res.local.attenuation is not None:
                np.add.at(grads.attenuation, res.ids, res.local.attenuation)
            if grads.opacity is not None and res.local.opacity is not None:
                np.add.at(grads.opacity, res.ids, res.local.opacity)
        return grads


def sort_per_tile(inp: SplatInput, tile_size: int = TILE_SIZE) -> list[IntArray]:
    """每个 tile 的深度有序高斯索引列表，平局按索引升序。"""
    return Rasterizer(inp, tile_size=tile_size, max_per_tile=np.iinfo(np.int64).max).tile_lists


def render(
    inp: SplatInput,
    *,
    tile_size: int = TILE_SIZE,
    min_transmittance: float = MIN_TRANSMITTANCE,
    max_per_tile: int = MAX_PER_TILE,
    threads: int = 1,
) -> RenderedField:
    """分 tile 渲染整张画布。"""
    return Rasterizer(
        inp,
        tile_size=tile_size,
        min_transmittance=min_transmittance,
        max_per_tile=max_per_tile,
        threads=threads,
    ).forward()


def render_backward(
    inp: SplatInput,
    grad_power: FloatArray | None = None,
    grad_field: ComplexArray | None = None,
    *,
    tile_size: int = TILE_SIZE,
    min_transmittance: float = MIN_TRANSMITTANCE,
    threads: int = 1,
) -> SplatGradients:
    """重新执行前向渲染后求梯度，便于一次性调用。"""
    rast = Rasterizer(
        inp, tile_size=tile_size, min_transmittance=min_transmittance, threads=threads
    )
    rast.forward()
    return rast.backward(grad_power, grad_field)


def render_reference(
    inp: SplatInput, *, min_transmittance: float = MIN_TRANSMITTANCE
) -> RenderedField:
    """不分 tile 的逐行参考渲染，每个像素遍历全部可见高斯。"""
    height, width = inp.canvas
    index = np.flatnonzero(inp.valid)
    index = index[np.lexsort((index, inp.depth[index]))]
    conic = _conics(inp.cov2d[index])
    radius = _radii(inp.cov2d[index])
    means = inp.means2d[index]
    signals = inp.signals[index]
    field_ = np.zeros((height, width, inp.d_sig), dtype=np.complex128)
    if len(index) == 0:
        return RenderedField(field_)
    cols = np.arange(width, dtype=np.float64)
    for row in range(height):
        positions = np.stack([cols, np.full(width, float(row))], axis=-1)
        weights, mask = _kernel(positions, means, conic, radius, width)
        if inp.compositor is Compositor.CHAINED:
            assert inp.attenuation is not None
            values, _ = _chained_forward(
                signals, inp.attenuation[index], weights, mask
            )
        else:
            assert inp.opacity is not None
            values, _ = _alpha_forward(
                signals, inp.opacity[index], weights, min_transmittance
            )
        field_[row] = values
    return RenderedField(field_)


@dataclass
class CollapsedSplat:
    """没有角度投影的单像素合成。

    全部高斯按深度排序后以核权重 1 合成为一个 `d_sig` 维复向量，用于 CSI 任务。
    α 混合不做提前终止。
    """

    signals: ComplexArray
    depth: FloatArray
    compositor: Compositor
    attenuation: ComplexArray | None = None
    opacity: FloatArray | None = None
    order: IntArray = field(init=False)
    _state: _ChainedState | _AlphaState | None = field(init=False, default=None)

    def __post_init__(self) -> None:
        n = len(self.depth)
        self.order = np.lexsort((np.arange(n), self.depth))

    def forward(self) -> ComplexArray:
        o = self.order
        weights = np.ones((1, len(o)))
        if self.compositor is Compositor.CHAINED:
            assert self.attenuation is not None
            out, self._state = _chained_forward(
                self.signals[o], self.attenuation[o], weights, weights > 0
            )
        else:
            assert self.opacity is not None
            out, self._state = _alpha_forward(self.signals[o], self.opacity[o], weights, 0.0)
        return out[0]

    def backward(self, grad_out: ComplexArray) -> CompositeGrads:
        """返回按原始高斯顺序排列的信号、衰减或不透明度梯度。"""
        if self._state is None:
            raise RenderError("backward called before forward")
        o = self.order
        g = np.asarray(grad_out, dtype=np.complex128)[None, :]
        if isinstance(self._state, _ChainedState):
            assert self.attenuation is not None
            local = _chained_backward(self.signals[o], self.attenuation[o], self._state, g)
        else:
            assert self.opacity is not None
            local = _alpha_backward(self.signals[o], self.opacity[o], self._state, g)
        inverse = np.empty_like(o)
        inverse[o] = np.arange(len(o))
        return CompositeGrads(
            signals=local.signals[inverse],
            weights=local.weights[:, inverse],
            attenuation=None if local.attenuation is None else local.attenuation[inverse],
            opacity=None if local.opacity is None else local.opacity[inverse],
        )

