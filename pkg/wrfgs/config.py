"""WRF-GS 配置。

WRF-GS 使用 [pydantic](https://pydantic-docs.helpmanual.io/) 来读取配置。
配置文件可以是 TOML (`key = value` 纯文本格式)、JSON 或 YAML，按扩展名区分。
"""

import json
import os
import re
import tomllib
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal, Self

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from wrfgs.consts import (
    DEFAULT_HEIGHT,
    DEFAULT_WIDTH,
    ENV_LOG_LEVEL,
    ENV_THREADS,
    MAX_PER_TILE,
    MIN_GAUSSIANS,
    MIN_TRANSMITTANCE,
    TILE_SIZE,
)
from wrfgs.exceptions import ConfigError
from wrfgs.oracle import ArrayGeometry, MultipathScene
from wrfgs.utils import model_hash

__all__ = [
    "ConfigModel",
    "DatasetConfig",
    "DensityConfig",
    "LogConfig",
    "MainConfig",
    "NetworkConfig",
    "OracleConfig",
    "RUNTIME_FIELDS",
    "Pipeline",
    "ProjectionConfig",
    "SplatConfig",
    "TaskConfig",
    "TaskName",
    "TrainConfig",
    "apply_environment",
    "config_hash",
    "load_config",
]

Pipeline = Literal["wrfgs", "wrfgsplus"]
TaskName = Literal["spectrum", "rssi", "csi"]


class ConfigModel(BaseModel):
    """WRF-GS 配置模型。

    Attributes:
        __config_name__: 配置名称。
    """

    model_config = ConfigDict(extra="forbid")

    __config_name__: str = ""


class LogConfig(ConfigModel):
    """日志相关设置。

    Attributes:
        level: 日志级别。
        verbose_exception: 详细的异常记录，设置为 `True` 时会在日志中添加异常的 Traceback。
    """

    __config_name__ = "log"

    level: str | int = "INFO"
    verbose_exception: bool = False


class ProjectionConfig(ConfigModel):
    """感知平面设置。

    Attributes:
        height: 仰角方向像素数 H。
        width: 方位角方向像素数 W。
    """

    __config_name__ = "projection"

    height: int = Field(default=DEFAULT_HEIGHT, ge=1)
    width: int = Field(default=DEFAULT_WIDTH, ge=2)


class SplatConfig(ConfigModel):
    """光栅化设置。"""

    __config_name__ = "splat"

    tile_size: int = Field(default=TILE_SIZE, ge=1)
    min_transmittance: float = Field(default=MIN_TRANSMITTANCE, ge=0, lt=1)
    max_per_tile: int = Field(default=MAX_PER_TILE, ge=1)


class NetworkConfig(ConfigModel):
    """场景网络结构。

    Attributes:
        encoding_order: 位置编码阶数 L。
        attenuation_depth: WRF-GS 衰减网络 (MLP1) 的隐藏层数，不含线性输出层；
            默认 7 个隐藏层加输出层，共 8 个全连接层。
        attenuation_width: MLP1 隐藏层宽度。
        feature_width: MLP1 输出特征宽度。
        signal_widths: WRF-GS 信号网络 (MLP2) 的隐藏层宽度。
        deform_depth: WRF-GS+ 形变网络的隐藏层数，之后另有一个线性输出层。
        deform_width: 形变网络隐藏层宽度。
        deform_skip: 形变网络在该层之后将编码输入重新拼接。
        signal_init_std: 静态信号与信号输出层的初始标准差，为 0 时全零初始化。
    """

    __config_name__ = "network"

    encoding_order: int = Field(default=9, ge=1)
    attenuation_depth: int = Field(default=7, ge=1)
    attenuation_width: int = Field(default=128, ge=1)
    feature_width: int = Field(default=128, ge=1)
    signal_widths: tuple[int, ...] = (128, 64)
    deform_depth: int = Field(default=8, ge=2)
    deform_width: int = Field(default=256, ge=1)
    deform_skip: int = Field(default=4, ge=1)
    signal_init_std: float = Field(default=1e-2, ge=0)

    @model_validator(mode="after")
    def _check_skip(self) -> Self:
        if self.deform_skip >= self.deform_depth:
            raise ValueError("deform_skip must be below deform_depth")
        return self


class DensityConfig(ConfigModel):
    """自适应密度控制。

    Attributes:
        interval: 每隔多少次迭代执行一次。
        warmup: 从第几次迭代开始执行。
        until: 在第几次迭代之后停止执行。
        grad_threshold: 位置梯度范数均值阈值 τ_g。
        scale_fraction: 尺度阈值 τ_s 占场景最大边长的比例。
        opacity_prune: 不透明度剪枝阈值。
        split_factor: 分裂后尺度缩小的倍数。
        max_gaussians: 高斯数量上限。
        min_gaussians: 剪枝不会低于此数量。
    """

    __config_name__ = "density"

    interval: int = Field(default=100, ge=1)
    warmup: int = Field(default=500, ge=0)
    until: int = Field(default=15_000, ge=0)
    grad_threshold: float = Field(default=2e-4, gt=0)
    scale_fraction: float = Field(default=0.01, gt=0)
    opacity_prune: float = Field(default=0.005, ge=0, lt=1)
    split_factor: float = Field(default=1.6, gt=1)
    max_gaussians: int = Field(default=20_000, ge=MIN_GAUSSIANS)
    min_gaussians: int = Field(default=MIN_GAUSSIANS, ge=MIN_GAUSSIANS)

    @model_validator(mode="after")
    def _check_bounds(self) -> Self:
        if self.min_gaussians > self.max_gaussians:
            raise ValueError("min_gaussians must not exceed max_gaussians")
        return self


class TrainConfig(ConfigModel):
    """训练设置。

    Attributes:
        pipeline: `wrfgs` (链式衰减) 或 `wrfgsplus` (可形变高斯 + α 混合)。
        eta: 损失中 SSIM 项的权重 η。
        iterations: 最大迭代次数。
        batch: 每步样本数。
        seed: 随机种子。
        n_gaussians: 初始随机点数量。
        train_fraction: 使用训练集的比例。
        loss_on: 损失作用于功率还是幅度。
        ssim_wrap_azimuth: SSIM 窗口是否在方位角方向循环。
        eval_interval: 每隔多少次迭代评估一次，0 表示不评估。
        early_stop_patience: 连续多少次评估没有提升后提前停止，0 表示关闭。
        log_interval: 损失日志间隔。
        checkpoint_interval: 检查点写入间隔，0 表示只在结束时写入。
    """

    __config_name__ = "train"

    pipeline: Pipeline = "wrfgsplus"
    eta: float = Field(default=0.2, ge=0, le=1)
    iterations: int = Field(default=30_000, ge=1)
    batch: int = Field(default=1, ge=1)
    seed: int = 0
    n_gaussians: int = Field(default=4096, ge=MIN_GAUSSIANS)
    train_fraction: float = Field(default=1.0, gt=0, le=1)

    lr_position: float = Field(default=1.6e-4, gt=0)
    lr_signal: float = Field(default=2.5e-3, gt=0)
    lr_opacity: float = Field(default=5e-2, gt=0)
    lr_rotation: float = Field(default=1e-3, gt=0)
    lr_scale: float = Field(default=5e-3, gt=0)
    lr_mlp: float = Field(default=1e-4, gt=0)
    lr_calibration: float = Field(default=5e-2, gt=0)
    position_lr_final_ratio: float = Field(default=0.01, gt=0, le=1)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-15, gt=0)

    loss_on: Literal["power", "magnitude"] = "power"
    ssim_wrap_azimuth: bool = True
    eval_interval: int = Field(default=1000, ge=0)
    early_stop_patience: int = Field(default=0, ge=0)
    log_interval: int = Field(default=100, ge=1)
    checkpoint_interval: int = Field(default=0, ge=0)


class TaskConfig(ConfigModel):
    """任务设置。

    Attributes:
        kind: 任务类型。
        rssi_coherent: RSSI 为相干叠加 `|Σ R|²`，否则为 `Σ |R|²`。
    """

    __config_name__ = "task"

    kind: TaskName = "spectrum"
    rssi_coherent: bool = True


class OracleConfig(ConfigModel):
    """真值仿真设置。"""

    __config_name__ = "oracle"

    scene: MultipathScene = MultipathScene()
    array: ArrayGeometry = ArrayGeometry()
    far_field: bool = False


class DatasetConfig(ConfigModel):
    """合成数据集生成设置。

    Attributes:
        n_train: 训练记录数。
        n_eval: 评估记录数。
        seed: TX 采样与划分的随机种子。
        margin: TX 与墙面的最小距离，单位 m。
        min_rx_distance: TX 与接收机的最小距离，单位 m。
    """

    __config_name__ = "dataset"

    n_train: int = Field(default=200, ge=0)
    n_eval: int = Field(default=50, ge=0)
    seed: int = 0
    margin: float = Field(default=0.2, ge=0)
    min_rx_distance: float = Field(default=0.3, gt=0)


class MainConfig(ConfigModel):
    """WRF-GS 主体配置。"""

    log: LogConfig = LogConfig()
    projection: ProjectionConfig = ProjectionConfig()
    splat: SplatConfig = SplatConfig()
    network: NetworkConfig = NetworkConfig()
    density: DensityConfig = DensityConfig()
    train: TrainConfig = TrainConfig()
    task: TaskConfig = TaskConfig()
    oracle: OracleConfig = OracleConfig()
    dataset: DatasetConfig = DatasetConfig()
    threads: int = Field(default=1, ge=1)


RUNTIME_FIELDS = {"log", "threads"}


def config_hash(config: MainConfig) -> str:
    """配置的稳定摘要，不包含日志与线程数这类不影响结果的字段。"""
    return model_hash(config, exclude=RUNTIME_FIELDS)


_LINE_RE = re.compile(r"line (\d+)")


def _locate_key(text: str, loc: tuple[int | str, ...]) -> int | None:
    """在配置文本中查找出错字段所在行，找不到时返回 `None`。"""
    keys = [k for k in loc if isinstance(k, str)]
    if not keys:
        return None
    key = re.escape(keys[-1])
    patterns = [
        re.compile(rf"^\s*{key}\s*="),
        re.compile(rf"^\s*{key}\s*:"),
        re.compile(rf'"{key}"\s*:'),
        re.compile(rf"^\s*\[(?:.*\.)?{key}\]\s*$"),
    ]
    for number, line in enumerate(text.splitlines(), start=1):
        if any(p.search(line) for p in patterns):
            return number
    return None


def _parse_text(path: Path, text: str) -> dict[str, Any]:
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            return tomllib.loads(text)
        if suffix == ".json":
            data = json.loads(text)
        elif suffix in {".yml", ".yaml"}:
            data = yaml.safe_load(text) or {}
        else:
            raise ConfigError("unable to determine config file type", path)
    except tomllib.TOMLDecodeError as e:
        match = _LINE_RE.search(str(e))
        raise ConfigError(str(e), path, int(match.group(1)) if match else None) from e
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, path, e.lineno) from e
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(str(e), path, None if mark is None else mark.line + 1) from e
    if not isinstance(data, dict):
        raise ConfigError("top level of the config must be a mapping", path, 1)
    return data


def load_config(path: str | Path) -> MainConfig:
    """读取并校验配置文件，支持 JSON / TOML / YAML 格式。

    Raises:
        ConfigError: 文件无法读取、无法解析或校验失败；能定位时附带行号。
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"can not open config file: {e.strerror}", path) from e
    data = _parse_text(path, text)
    try:
        return MainConfig.model_validate(data)
    except ValidationError as e:
        error = e.errors()[0]
        where = ".".join(str(k) for k in error["loc"])
        raise ConfigError(
            f"{where}: {error['msg']}", path, _locate_key(text, error["loc"])
        ) from e


def apply_environment(
    config: MainConfig, environ: Mapping[str, str] | None = None
) -> MainConfig:
    """用 `WRFGS_THREADS` 与 `WRFGS_LOG_LEVEL` 覆盖对应配置项。

    Raises:
        ConfigError: `WRFGS_THREADS` 不是正整数。
    """
    env = os.environ if environ is None else environ
    update: dict[str, Any] = {}
    if threads := env.get(ENV_THREADS):
        try:
            value = int(threads)
        except ValueError:
            value = 0
        if value < 1:
            raise ConfigError(f"{ENV_THREADS} must be a positive integer, got {threads!r}")
        update["threads"] = value
    if level := env.get(ENV_LOG_LEVEL):
        update["log"] = config.log.model_copy(update={"level": level.upper()})
    return config.model_copy(update=update) if update else config
