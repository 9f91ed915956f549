"""半球感知平面上的投影。

接收机坐标系中的点经过 球坐标 → 经纬度 → 归一化坐标 → 像素 的链路映射到
`W × H` 的感知平面上；协方差使用投影在中心处的解析雅可比做仿射近似。

像素 `(r, c)` 的采样位置为 `(p_x, p_y) = (c, r)`。方位角在 `W` 处循环。
只剔除 `t_z < 0` 的下半球点与距离小于 `ε_r` 的点，地平线本身保留。
天顶 (`t_x = t_y = 0`) 约定映射到 `p_x = W/2, p_y = H − 1`。
"""

from dataclasses import dataclass

import numpy as np

from wrfgs.consts import COV2D_FLOOR, DEFAULT_HEIGHT, DEFAULT_WIDTH, MIN_RANGE, TILE_SIZE
from wrfgs.typing import BoolArray, FloatArray, IntArray

__all__ = [
    "ProjectedBatch",
    "ProjectedGaussian",
    "bin_gaussians",
    "footprint_tiles",
    "project_batch",
    "project_batch_backward",
    "project_covariance",
    "project_point",
    "projection_jacobian",
    "tile_grid",
    "unproject_pixel",
]


@dataclass(frozen=True)
class ProjectedGaussian:
    """投影后的单个高斯。

    Attributes:
        pixel_center: 像素中心 `(p_x, p_y)`。
        cov2d: 2×2 像素协方差，已包含抗锯齿下限。
        depth: 到接收机的距离 `t_r`，单位 m。
        source_index: 在原始高斯列表中的索引。
    """

    pixel_center: FloatArray
    cov2d: FloatArray
    depth: float
    source_index: int

    @property
    def radius(self) -> float:
        """足迹半径 `3·√λ_max`。"""
        return float(3.0 * np.sqrt(np.max(np.linalg.eigvalsh(self.cov2d))))


@dataclass
class ProjectedBatch:
    """一批投影结果 (结构化数组)。

    Attributes:
        means2d: 像素中心 `(N, 2)`。
        cov2d: 像素协方差 `(N, 2, 2)`。
        depth: 距离 `(N,)`。
        valid: 未被剔除的掩码 `(N,)`。
        jacobian: 中心处的投影雅可比 `(N, 2, 3)`。
        t: 接收机坐标系中的中心 `(N, 3)`。
        sigma_rx: 接收机坐标系中的三维协方差 `(N, 3, 3)`。
    """

    means2d: FloatArray
    cov2d: FloatArray
    depth: FloatArray
    valid: BoolArray
    jacobian: FloatArray
    t: FloatArray
    sigma_rx: FloatArray

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def radius(self) -> FloatArray:
        a = self.cov2d[:, 0, 0]
        c = self.cov2d[:, 1, 1]
        b = self.cov2d[:, 0, 1]
        mid = 0.5 * (a + c)
        lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        return 3.0 * np.sqrt(np.maximum(lam_max, 0.0))

    def gaussian(self, index: int) -> ProjectedGaussian:
        return ProjectedGaussian(
            self.means2d[index].copy(),
            self.cov2d[index].copy(),
            float(self.depth[index]),
            index,
        )

    def gaussians(self) -> list[ProjectedGaussian]:
        """全部未剔除的高斯。"""
        return [self.gaussian(int(i)) for i in np.flatnonzero(self.valid)]


def _pixel_coords(t: FloatArray, width: int, height: int) -> tuple[FloatArray, FloatArray]:
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    rho = np.hypot(x, y)
    zenith = rho <= 1e-12 * np.maximum(np.abs(z), 1e-300)
    lon = np.arctan2(y, x)
    lat = np.arctan2(z, rho)
    px = np.mod((lon / np.pi + 1.0) * width / 2.0, width)
    py = (2.0 * lat / np.pi) * height
    px = np.where(zenith, width / 2.0, px)
    py = np.where(zenith, height - 1.0, py)
    return px, py


def project_point(
    t: FloatArray, width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT
) -> tuple[FloatArray, float] | None:
    """将接收机坐标系中的点投影到像素坐标。

    Args:
        t: 接收机坐标系中的点。
        width: 感知平面宽度 W。
        height: 感知平面高度 H。

    Returns:
        `(pixel_center, depth)`；点位于下半球或距离过近时返回 `None` (剔除)。
    """
    t = np.asarray(t, dtype=np.float64)
    depth = float(np.linalg.norm(t))
    if t[2] < 0 or depth < MIN_RANGE:
        return None
    px, py = _pixel_coords(t, width, height)
    return np.array([float(px), float(py)]), depth


def unproject_pixel(
    pixel: FloatArray, width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT
) -> FloatArray:
    """`project_point` 的逆：像素坐标转回单位方向向量。"""
    px, py = float(pixel[0]), float(pixel[1])
    lon = (2.0 * px / width - 1.0) * np.pi
    lat = py / height * np.pi / 2.0
    return np.array([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


def projection_jacobian(
    t: FloatArray, width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT
) -> FloatArray:
    """像素坐标对 `t` 的解析雅可比 `(..., 2, 3)`。"""
    t = np.asarray(t, dtype=np.float64)
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    rho2 = np.maximum(x * x + y * y, 1e-24)
    rho = np.sqrt(rho2)
    r2 = rho2 + z * z
    a = width / (2.0 * np.pi)
    b = 2.0 * height / np.pi
    jac = np.zeros((*x.shape, 2, 3))
    jac[..., 0, 0] = -a * y / rho2
    jac[..., 0, 1] = a * x / rho2
    jac[..., 1, 0] = -b * x * z / (r2 * rho)
    jac[..., 1, 1] = -b * y * z / (r2 * rho)
    jac[..., 1, 2] = b * rho / r2
    return jac


def _projection_hessians(t: FloatArray, width: int, height: int) -> FloatArray:
    """两个像素坐标各自对 `t` 的 Hessian `(..., 2, 3, 3)`。"""
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    rho2 = np.maximum(x * x + y * y, 1e-24)
    rho = np.sqrt(rho2)
    r2 = rho2 + z * z
    a = width / (2.0 * np.pi)
    b = 2.0 * height / np.pi
    hess = np.zeros((*x.shape, 2, 3, 3))

    rho4 = rho2 * rho2
    hess[..., 0, 0, 0] = a * 2 * x * y / rho4
    hess[..., 0, 1, 1] = -a * 2 * x * y / rho4
    hess[..., 0, 0, 1] = hess[..., 0, 1, 0] = a * (y * y - x * x) / rho4

    r4 = r2 * r2
    f = z / (r2 * rho)
    kappa = 2.0 / (r4 * rho) + 1.0 / (r2 * rho * rho2)
    hess[..., 1, 0, 0] = b * (-f + x * x * z * kappa)
    hess[..., 1, 1, 1] = b * (-f + y * y * z * kappa)
    hess[..., 1, 0, 1] = hess[..., 1, 1, 0] = b * x * y * z * kappa
    cross = (r2 - 2 * z * z) / (r4 * rho)
    hess[..., 1, 0, 2] = hess[..., 1, 2, 0] = -b * x * cross
    hess[..., 1, 1, 2] = hess[..., 1, 2, 1] = -b * y * cross
    hess[..., 1, 2, 2] = -b * 2 * rho * z / r4
    return hess


def project_covariance(
    mu: FloatArray,
    sigma3d: FloatArray,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
) -> FloatArray:
    """投影协方差 `J·Σ·Jᵀ + 0.3·I`，`mu` 与 `sigma3d` 都在接收机坐标系中。"""
    jac = projection_jacobian(mu, width, height)
    cov = jac @ np.asarray(sigma3d) @ np.swapaxes(jac, -1, -2)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return cov + COV2D_FLOOR * np.eye(2)


def project_batch(
    mu: FloatArray,
    sigma: FloatArray,
    rx: FloatArray,
    rx_rotation: FloatArray,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
) -> ProjectedBatch:
    """投影一批世界坐标系中的高斯。

    Args:
        mu: 中心 `(N, 3)`。
        sigma: 三维协方差 `(N, 3, 3)`。
        rx: 接收机位置。
        rx_rotation: 接收机本体到世界的旋转矩阵。
        width: 感知平面宽度 W。
        height: 感知平面高度 H。
    """
    t = (mu - rx) @ rx_rotation
    sigma_rx = np.swapaxes(rx_rotation, -1, -2) @ sigma @ rx_rotation
    depth = np.linalg.norm(t, axis=-1)
    valid = (t[:, 2] >= 0) & (depth >= MIN_RANGE)
    px, py = _pixel_coords(t, width, height)
    jac = projection_jacobian(t, width, height)
    cov = jac @ sigma_rx @ np.swapaxes(jac, -1, -2)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2)) + COV2D_FLOOR * np.eye(2)
    return ProjectedBatch(
        means2d=np.stack([px, py], axis=-1),
        cov2d=cov,
        depth=depth,
        valid=valid,
        jacobian=jac,
        t=t,
        sigma_rx=sigma_rx,
    )


def project_batch_backward(
    proj: ProjectedBatch,
    rx_rotation: FloatArray,
    grad_means2d: FloatArray,
    grad_cov2d: FloatArray,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
) -> tuple[FloatArray, FloatArray]:
    """`project_batch` 的反向传播。

    Returns:
        `(grad_mu, grad_sigma)`，均在世界坐标系中。
    """
    jac = proj.jacobian
    g_cov = 0.5 * (grad_cov2d + np.swapaxes(grad_cov2d, -1, -2))
    grad_sigma_rx = np.swapaxes(jac, -1, -2) @ g_cov @ jac
    grad_jac = 2.0 * g_cov @ jac @ proj.sigma_rx
    hess = _projection_hessians(proj.t, width, height)
    grad_t = np.einsum("nr,nrc->nc", grad_means2d, jac)
    grad_t += np.einsum("nrc,nrck->nk", grad_jac, hess)
    mask = proj.valid[:, None]
    grad_t = np.where(mask, grad_t, 0.0)
    grad_sigma_rx = np.where(mask[..., None], grad_sigma_rx, 0.0)
    grad_mu = grad_t @ np.swapaxes(rx_rotation, -1, -2)
    grad_sigma = rx_rotation @ grad_sigma_rx @ np.swapaxes(rx_rotation, -1, -2)
    return grad_mu, grad_sigma


def tile_grid(width: int, height: int, tile_size: int = TILE_SIZE) -> tuple[int, int]:
    """`(tiles_y, tiles_x)`。"""
    return -(-height // tile_size), -(-width // tile_size)


def _tile_rectangles(
    means2d: FloatArray, radius: FloatArray, width: int, height: int, tile_size: int
) -> tuple[IntArray, IntArray, IntArray, IntArray, IntArray]:
    """每个足迹对应的 tile 矩形，接缝处一个足迹最多拆成两个矩形。

    Returns:
        `(owner, ty0, ty1, tx0, tx1)`，闭区间。
    """
    px, py = means2d[:, 0], means2d[:, 1]
    row_lo = np.maximum(np.ceil(py - radius), 0).astype(np.int64)
    row_hi = np.minimum(np.floor(py + radius), height - 1).astype(np.int64)
    col_lo = np.ceil(px - radius).astype(np.int64)
    col_hi = np.floor(px + radius).astype(np.int64)
    keep = (row_hi >= row_lo) & (col_hi >= col_lo)
    full = col_hi - col_lo + 1 >= width
    below = ~full & (col_lo < 0)
    above = ~full & (col_hi >= width)

    a_lo = np.select([full, below], [0, col_lo + width], col_lo)
    a_hi = np.select([full, below, above], [width - 1, width - 1, width - 1], col_hi)
    b_lo = np.zeros_like(col_lo)
    b_hi = np.select([below, above], [col_hi, col_hi - width], -1)
    split = keep & (below | above)

    owner = np.concatenate([np.flatnonzero(keep), np.flatnonzero(split)])
    rows0 = np.concatenate([row_lo[keep], row_lo[split]]) // tile_size
    rows1 = np.concatenate([row_hi[keep], row_hi[split]]) // tile_size
    cols0 = np.concatenate([a_lo[keep], b_lo[split]]) // tile_size
    cols1 = np.concatenate([a_hi[keep], b_hi[split]]) // tile_size
    return owner, rows0, rows1, cols0, cols1


def bin_gaussians(
    means2d: FloatArray,
    radius: FloatArray,
    valid: BoolArray,
    width: int,
    height: int,
    tile_size: int = TILE_SIZE,
) -> tuple[IntArray, IntArray]:
    """将全部有效高斯分配到 tile。

    Returns:
        `(tile_ids, gaussian_ids)` 两个等长数组，按 `(gaussian, tile)` 升序，
        每对表示一个高斯落入一个 tile，没有重复对。
    """
    tiles_y, tiles_x = tile_grid(width, height, tile_size)
    n_tiles = tiles_y * tiles_x
    index = np.flatnonzero(valid)
    owner, ty0, ty1, tx0, tx1 = _tile_rectangles(
        means2d[index], radius[index], width, height, tile_size
    )
    ny = ty1 - ty0 + 1
    nx = tx1 - tx0 + 1
    counts = ny * nx
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total, dtype=np.int64) - starts
    rect_nx = np.repeat(nx, counts)
    ty = np.repeat(ty0, counts) + local // rect_nx
    tx = np.repeat(tx0, counts) + local % rect_nx
    gauss = index[np.repeat(owner, counts)]
    keys = np.unique(gauss * n_tiles + ty * tiles_x + tx)
    return keys % n_tiles, keys // n_tiles


def footprint_tiles(
    pg: ProjectedGaussian,
    tile_size: int = TILE_SIZE,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
) -> list[int]:
    """足迹 (半边长 `3·√λ_max` 的轴对齐方框) 覆盖的全部 tile。

    tile 按行优先编号 `ty·⌈W/ts⌉ + tx`。跨越 `α = 0/360` 接缝的足迹
    会同时出现在左右两侧边缘的 tile 中。
    """
    tiles, _ = bin_gaussians(
        pg.pixel_center[None, :],
        np.array([pg.radius]),
        np.array([True]),
        width,
        height,
        tile_size,
    )
    return sorted(int(t) for t in tiles)
