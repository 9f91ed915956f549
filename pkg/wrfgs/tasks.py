"""三种任务的适配层：空间谱合成、RSSI 预测与上行到下行的 CSI 预测。

`Objective` 把一条数据记录变成一次前向、损失与反向；`Predictor` 从检查点做纯推理。
"""

import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import StrEnum
from typing import ClassVar, Self

import numpy as np

from wrfgs.checkpoint import Checkpoint
from wrfgs.config import MainConfig, TaskName
from wrfgs.consts import N_UPLINK, RSSI_FLOOR_DB
from wrfgs.dataset import Record
from wrfgs.exceptions import DatasetError, ShapeMismatchError, TaskMismatchError
from wrfgs.oracle import SpatialSpectrum
from wrfgs.scene import (
    CollapsedRender,
    ConditioningInput,
    ConditioningKind,
    FieldRender,
    RadiationField,
)
from wrfgs.scene.store import CALIBRATION, MU
from wrfgs.train.loss import (
    LossTerms,
    csi_loss,
    magnitude_field_grad,
    rssi_loss,
    rssi_value,
    spectrum_loss,
)
from wrfgs.train.metrics import MetricReport, cea
from wrfgs.train.ssim import ssim
from wrfgs.typing import BoolArray, ComplexArray, FloatArray, GradDict
from wrfgs.utils import run_parallel

__all__ = [
    "CsiObjective",
    "Objective",
    "Predictor",
    "RssiObjective",
    "SpectrumObjective",
    "StepResult",
    "TaskKind",
    "TaskSpec",
    "bench",
    "csi_scale",
    "make_objective",
    "predict_csi",
    "predict_rssi",
    "synthesize_spectrum",
]


class TaskKind(StrEnum):
    SPECTRUM = "spectrum"
    RSSI = "rssi"
    CSI = "csi"


@dataclass(frozen=True)
class TaskSpec:
    """任务的信号维度与输出形状。"""

    kind: TaskKind
    d_sig: int
    output_shape: tuple[int, ...]

    def __post_init__(self) -> None:
        expected = N_UPLINK if self.kind is TaskKind.CSI else 1
        if self.d_sig != expected:
            raise ValueError(f"{self.kind} task needs d_sig = {expected}, got {self.d_sig}")

    @classmethod
    def for_kind(cls, kind: TaskKind | TaskName, canvas: tuple[int, int]) -> Self:
        kind = TaskKind(kind)
        if kind is TaskKind.SPECTRUM:
            return cls(kind, 1, canvas)
        if kind is TaskKind.RSSI:
            return cls(kind, 1, ())
        return cls(kind, N_UPLINK, (N_UPLINK,))

    @property
    def cond_kind(self) -> ConditioningKind:
        return (
            ConditioningKind.UPLINK_CSI
            if self.kind is TaskKind.CSI
            else ConditioningKind.TX_POSITION
        )


def csi_scale(records: list[Record]) -> float:
    """数据集级 CSI 缩放因子：训练集上下行 CSI 的均方根幅度。"""
    if not records:
        return 1.0
    values = np.concatenate([np.concatenate([r.uplink, r.downlink]) for r in records])
    rms = float(np.sqrt(np.mean(np.abs(values) ** 2)))
    return rms if rms > 0 else 1.0


@dataclass
class StepResult:
    """一条记录的损失与参数梯度。

    Attributes:
        terms: 损失组成。
        grads: 参数梯度。
        visible: 参与渲染的高斯。
        radius: 足迹半径，单位像素。
    """

    terms: LossTerms
    grads: GradDict
    visible: BoolArray
    radius: FloatArray

    @property
    def grad_mu(self) -> FloatArray:
        return self.grads.get(MU, np.zeros((len(self.visible), 3)))


class Objective(ABC):
    """一种任务的训练目标。

    Attributes:
        field: 辐射场。
        config: 主体配置。
        higher_is_better: 评估指标越大越好。
    """

    kind: ClassVar[TaskKind]
    higher_is_better: ClassVar[bool] = True

    def __init__(self, field: RadiationField, config: MainConfig) -> None:
        self.field = field
        self.config = config

    def conditioning(self, record: Record) -> ConditioningInput:
        return ConditioningInput.from_tx(record.tx)

    @abstractmethod
    def step(self, record: Record) -> StepResult:
        """前向、损失与反向。"""
        raise NotImplementedError

    @abstractmethod
    def score(self, record: Record) -> float:
        """单条记录的评估指标。"""
        raise NotImplementedError

    @abstractmethod
    def report(self, ids: list[int], scores: list[float]) -> MetricReport:
        raise NotImplementedError

    def evaluate(self, records: list[Record], threads: int = 1) -> MetricReport:
        """在 `records` 上逐条评估，结果按记录顺序排列。"""
        scores = run_parallel(self.score, records, threads)
        return self.report([r.id for r in records], scores)

    def _render_result(
        self, render: FieldRender, terms: LossTerms, grads: GradDict
    ) -> StepResult:
        return StepResult(terms, grads, render.proj.valid.copy(), render.radius.copy())


class SpectrumObjective(Objective):
    kind = TaskKind.SPECTRUM

    def step(self, record: Record) -> StepResult:
        if record.spectrum is None:
            raise DatasetError(f"record {record.id} has no spectrum")
        train = self.config.train
        render = self.field.render(self.conditioning(record))
        if train.loss_on == "power":
            terms, grad = spectrum_loss(
                render.power, record.spectrum, train.eta, wrap_azimuth=train.ssim_wrap_azimuth
            )
            grads = render.backward(grad_power=grad)
        else:
            complex_field = render.rendered.complex_field[..., 0]
            terms, grad = spectrum_loss(
                np.abs(complex_field),
                np.sqrt(record.spectrum),
                train.eta,
                wrap_azimuth=train.ssim_wrap_azimuth,
            )
            grads = render.backward(
                grad_field=magnitude_field_grad(complex_field, grad)[..., None]
            )
        return self._render_result(render, terms, grads)

    def score(self, record: Record) -> float:
        if record.spectrum is None:
            raise DatasetError(f"record {record.id} has no spectrum")
        power = self.field.render(self.conditioning(record)).power
        return ssim(
            record.spectrum, power, wrap_azimuth=self.config.train.ssim_wrap_azimuth
        )

    def report(self, ids: list[int], scores: list[float]) -> MetricReport:
        return MetricReport(ids, ssim_per_sample=scores)


class RssiObjective(Objective):
    kind = TaskKind.RSSI
    higher_is_better = False

    @property
    def calibration(self) -> float:
        return float(self.field.store.params[CALIBRATION][0])

    def step(self, record: Record) -> StepResult:
        coherent = self.config.task.rssi_coherent
        render = self.field.render(self.conditioning(record))
        complex_field = render.rendered.complex_field[..., 0]
        terms, grad, grad_b = rssi_loss(
            complex_field, self.calibration, record.rssi_db, coherent=coherent
        )
        if coherent:
            grads = render.backward(grad_field=grad[..., None])
        else:
            grads = render.backward(grad_power=grad)
        grads[CALIBRATION] = np.array([grad_b])
        return self._render_result(render, terms, grads)

    def predict(self, tx: FloatArray) -> float:
        render = self.field.render(ConditioningInput.from_tx(tx))
        complex_field = render.rendered.complex_field[..., 0]
        if self.config.task.rssi_coherent:
            power = abs(complex(np.sum(complex_field))) ** 2
        else:
            power = float(np.sum(render.power))
        return max(rssi_value(power, self.calibration), RSSI_FLOOR_DB)

    def score(self, record: Record) -> float:
        return abs(self.predict(record.tx) - record.rssi_db)

    def report(self, ids: list[int], scores: list[float]) -> MetricReport:
        return MetricReport(ids, rssi_abs_error_db=scores)


class CsiObjective(Objective):
    """上行 CSI 为条件输入，全部高斯不经投影合成为 26 维下行 CSI。

    网络看到与回归的都是除以 `store.csi_scale` 之后的数值。
    """

    kind = TaskKind.CSI

    def conditioning(self, record: Record) -> ConditioningInput:
        return ConditioningInput.from_uplink(record.uplink)

    @property
    def scale(self) -> float:
        return self.field.store.csi_scale

    def step(self, record: Record) -> StepResult:
        render: CollapsedRender = self.field.render_collapsed(self.conditioning(record))
        terms, grad = csi_loss(render.value, record.downlink / self.scale)
        grads = render.backward(grad)
        n = self.field.store.n_gaussians
        return StepResult(terms, grads, np.ones(n, dtype=bool), np.zeros(n))

    def predict(self, uplink: ComplexArray) -> ComplexArray:
        render = self.field.render_collapsed(ConditioningInput.from_uplink(uplink))
        return render.value * self.scale

    def score(self, record: Record) -> float:
        return cea(self.predict(record.uplink), record.downlink)

    def report(self, ids: list[int], scores: list[float]) -> MetricReport:
        return MetricReport(ids, cea_db=scores)


_OBJECTIVES: dict[TaskKind, type[Objective]] = {
    TaskKind.SPECTRUM: SpectrumObjective,
    TaskKind.RSSI: RssiObjective,
    TaskKind.CSI: CsiObjective,
}


def make_objective(field: RadiationField, config: MainConfig) -> Objective:
    return _OBJECTIVES[TaskKind(config.task.kind)](field, config)


class Predictor:
    """从检查点做纯推理，可在多个线程中并发调用。

    Attributes:
        checkpoint: 检查点。
        spec: 任务描述。
        field: 由检查点重建的辐射场。
    """

    def __init__(self, checkpoint: Checkpoint, *, threads: int | None = None) -> None:
        config = checkpoint.config
        if threads is not None:
            config = config.model_copy(update={"threads": threads})
        self.checkpoint = checkpoint
        self.config = config
        self.spec = TaskSpec.for_kind(
            checkpoint.task, (config.projection.height, config.projection.width)
        )
        self.field = RadiationField.from_config(
            checkpoint.store, config, self.spec.cond_kind, checkpoint.rx, checkpoint.rx_rotation
        )
        self.objective = make_objective(self.field, config)

    def _require(self, kind: TaskKind) -> None:
        if self.spec.kind is not kind:
            raise TaskMismatchError(
                f"checkpoint was trained for {self.spec.kind}, not {kind}"
            )

    def render(self, tx: FloatArray) -> FieldRender:
        """完整的渲染结果，供需要复场的调用方使用。"""
        if self.spec.kind is TaskKind.CSI:
            raise TaskMismatchError("csi checkpoints have no angular field")
        return self.field.render(ConditioningInput.from_tx(np.asarray(tx, dtype=np.float64)))

    def synthesize_spectrum(self, tx: FloatArray) -> SpatialSpectrum:
        self._require(TaskKind.SPECTRUM)
        return SpatialSpectrum(self.render(tx).power)

    def predict_rssi(self, tx: FloatArray) -> float:
        self._require(TaskKind.RSSI)
        assert isinstance(self.objective, RssiObjective)
        return self.objective.predict(np.asarray(tx, dtype=np.float64))

    def predict_csi(self, uplink: ComplexArray) -> ComplexArray:
        self._require(TaskKind.CSI)
        uplink = np.asarray(uplink, dtype=np.complex128)
        if uplink.shape != (N_UPLINK,):
            raise ShapeMismatchError(f"uplink csi must hold {N_UPLINK} values, got {uplink.shape}")
        assert isinstance(self.objective, CsiObjective)
        return self.objective.predict(uplink)

    def bench(self, query: FloatArray | ComplexArray, repeats: int = 10) -> float:
        """重复推理 `repeats` 次，返回平均耗时，单位 ms。"""
        if repeats < 1:
            raise ValueError("repeats must be positive")
        run = {
            TaskKind.SPECTRUM: self.synthesize_spectrum,
            TaskKind.RSSI: self.predict_rssi,
            TaskKind.CSI: self.predict_csi,
        }[self.spec.kind]
        run(query)
        start = time.perf_counter()
        for _ in range(repeats):
            run(query)
        return (time.perf_counter() - start) * 1e3 / repeats


def synthesize_spectrum(checkpoint: Checkpoint, tx: FloatArray) -> SpatialSpectrum:
    return Predictor(checkpoint).synthesize_spectrum(tx)


def predict_rssi(checkpoint: Checkpoint, tx: FloatArray) -> float:
    return Predictor(checkpoint).predict_rssi(tx)


def predict_csi(checkpoint: Checkpoint, uplink: ComplexArray) -> ComplexArray:
    return Predictor(checkpoint).predict_csi(uplink)


def bench(
    checkpoint: Checkpoint, query: FloatArray | ComplexArray, repeats: int = 10
) -> float:
    """从检查点构建推理器并测量平均推理耗时 (ms)，首次调用不计时。"""
    return Predictor(checkpoint).bench(query, repeats)
