"""训练循环。

每次迭代：条件输入 → 场景网络 → 投影 → 光栅化 → 损失 → 反向 → Adam，
并按计划执行密度控制、定期评估与写检查点。

第 `i` 次迭代的随机数生成器由 `(seed, i)` 派生，因此从检查点恢复后的
轨迹与不中断时完全一致，检查点无需保存随机数状态。
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Self, TextIO

import numpy as np

from wrfgs.checkpoint import Checkpoint
from wrfgs.config import MainConfig, config_hash
from wrfgs.consts import CHECKPOINT_FILE, LOSS_LOG_FILE, NAN_DUMP_FILE
from wrfgs.dataset import Dataset, Record
from wrfgs.exceptions import CheckpointError, ConfigError, NumericalAbort, TaskMismatchError
from wrfgs.log import logger
from wrfgs.scene import (
    DensityStats,
    RadiationField,
    densify_and_prune,
    init_random,
    should_densify,
)
from wrfgs.scene.store import MU
from wrfgs.tasks import Objective, StepResult, TaskKind, TaskSpec, csi_scale, make_objective
from wrfgs.train.loss import LossTerms
from wrfgs.train.metrics import MetricReport
from wrfgs.train.optim import Adam
from wrfgs.typing import GradDict
from wrfgs.utils import canonical_json, run_parallel

__all__ = ["TrainResult", "TrainState", "Trainer", "select_train_records", "train"]


@dataclass
class TrainState:
    """提前停止相关的状态。"""

    best_metric: float | None = None
    stale_evals: int = 0
    stopped_early: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "best_metric": self.best_metric,
            "stale_evals": self.stale_evals,
            "stopped_early": self.stopped_early,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> Self:
        best = data.get("best_metric")
        return cls(
            None if best is None else float(best),
            int(data.get("stale_evals", 0)),
            bool(data.get("stopped_early", False)),
        )


@dataclass
class TrainResult:
    """一次训练的产物。

    Attributes:
        checkpoint: 最终检查点。
        checkpoint_path: 检查点文件。
        loss_log: 损失日志文件。
        losses: 本次运行每次迭代的损失。
        eval_report: 最后一次评估结果，没有评估集时为 `None`。
        stopped_early: 是否因评估指标停滞而提前停止。
    """

    checkpoint: Checkpoint
    checkpoint_path: Path
    loss_log: Path
    losses: list[LossTerms] = field(default_factory=list)
    eval_report: MetricReport | None = None
    stopped_early: bool = False


def select_train_records(records: list[Record], fraction: float, seed: int) -> list[Record]:
    """按比例随机取训练子集，顺序与原列表一致。"""
    if fraction >= 1.0 or not records:
        return list(records)
    count = max(round(fraction * len(records)), 1)
    chosen = np.sort(np.random.default_rng(seed).choice(len(records), size=count, replace=False))
    return [records[int(i)] for i in chosen]


def _mean_terms(results: list[StepResult]) -> LossTerms:
    n = len(results)
    return LossTerms(
        total=sum(r.terms.total for r in results) / n,
        l1=sum(r.terms.l1 for r in results) / n,
        ssim=sum(r.terms.ssim for r in results) / n,
    )


def _mean_grads(results: list[StepResult]) -> GradDict:
    total: GradDict = {}
    for res in results:
        for name, value in res.grads.items():
            total[name] = total[name] + value if name in total else value.copy()
    return {name: value / len(results) for name, value in total.items()}


class Trainer:
    """训练一个任务的辐射场。

    Attributes:
        config: 主体配置。
        dataset: 数据集。
        out_dir: 输出目录。
        spec: 任务描述。
        store: 参数表。
        field: 辐射场。
        objective: 训练目标。
        optimizer: 优化器。
        stats: 密度控制统计量。
        state: 提前停止状态。
    """

    def __init__(
        self,
        config: MainConfig,
        dataset: Dataset,
        out_dir: str | Path,
        *,
        resume: Checkpoint | None = None,
    ) -> None:
        manifest = dataset.manifest
        task = config.task.kind
        if manifest.task != task:
            raise TaskMismatchError(f"dataset holds {manifest.task} records, config trains {task}")
        canvas = (config.projection.height, config.projection.width)
        if task == "spectrum" and (manifest.h, manifest.w) != canvas:
            raise ConfigError(
                f"projection is {canvas[0]}x{canvas[1]} but the dataset spectra are "
                f"{manifest.h}x{manifest.w}"
            )
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.spec = TaskSpec.for_kind(task, canvas)
        train = config.train
        self.train_records = select_train_records(
            dataset.train_records, train.train_fraction, train.seed
        )
        self.eval_records = dataset.eval_records
        if not self.train_records:
            raise ConfigError("the dataset has no training records")

        self.optimizer = Adam(train)
        if resume is None:
            self.store = init_random(
                dataset.bounds,
                train.n_gaussians,
                train.seed,
                network=config.network,
                pipeline=train.pipeline,
                cond_kind=self.spec.cond_kind,
                d_sig=self.spec.d_sig,
                min_gaussians=config.density.min_gaussians,
            )
            if self.spec.kind is TaskKind.CSI:
                self.store.csi_scale = csi_scale(self.train_records)
            self.stats = DensityStats.empty(self.store.n_gaussians)
            self.state = TrainState()
        else:
            if resume.task != task:
                raise TaskMismatchError(f"checkpoint holds a {resume.task} model, config trains {task}")
            if config_hash(resume.config) != config_hash(config):
                raise CheckpointError("the checkpoint was trained with a different config")
            self.store = resume.store
            self.optimizer.load_state(resume.optimizer)
            self.stats = (
                DensityStats(**resume.density)
                if resume.density
                else DensityStats.empty(self.store.n_gaussians)
            )
            self.state = TrainState.from_json(resume.train_state)

        scene = manifest.scene
        self.rx = scene.rx
        self.rx_rotation = scene.rx_rotation
        self.field = RadiationField.from_config(
            self.store, config, self.spec.cond_kind, self.rx, self.rx_rotation
        )
        self.objective: Objective = make_objective(self.field, config)

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / CHECKPOINT_FILE

    @property
    def loss_log_path(self) -> Path:
        return self.out_dir / LOSS_LOG_FILE

    def checkpoint(self) -> Checkpoint:
        """当前状态的检查点 (共享数组，不复制)。"""
        return Checkpoint(
            task=self.config.task.kind,
            config=self.config,
            store=self.store,
            rx=self.rx,
            rx_rotation=self.rx_rotation,
            optimizer=self.optimizer.state_arrays(),
            density={
                "grad_norm": self.stats.grad_norm,
                "grad_vec": self.stats.grad_vec,
                "count": self.stats.count,
                "max_radius": self.stats.max_radius,
            },
            train_state=self.state.to_json(),
        )

    def _abort(self, iteration: int, batch: list[Record], terms: LossTerms | None, reason: str) -> NumericalAbort:
        path = self.out_dir / NAN_DUMP_FILE
        grad_norms = {
            name: repr(float(np.linalg.norm(value))) for name, value in self.store.grads.items()
        }
        dump = {
            "iteration": iteration,
            "reason": reason,
            "records": [
                {"id": r.id, "tx": r.tx.tolist(), "rssi_db": r.rssi_db} for r in batch
            ],
            "loss": None
            if terms is None
            else {"total": repr(terms.total), "l1": repr(terms.l1), "ssim": repr(terms.ssim)},
            "n_gaussians": self.store.n_gaussians,
            "previous_grad_norms": grad_norms,
        }
        path.write_text(canonical_json(dump, indent=2) + "\n", encoding="utf-8")
        logger.error("Numerical abort", iteration=iteration, reason=reason, dump=str(path))
        return NumericalAbort(f"{reason} at iteration {iteration}", path)

    def _step(self, iteration: int, log: TextIO) -> LossTerms:
        train = self.config.train
        started = time.perf_counter()
        rng = np.random.default_rng([train.seed, iteration])
        picks = rng.integers(0, len(self.train_records), size=train.batch)
        batch = [self.train_records[int(i)] for i in picks]
        try:
            results = run_parallel(self.objective.step, batch, self.config.threads if len(batch) > 1 else 1)
        except FloatingPointError as e:
            raise self._abort(iteration, batch, None, str(e)) from e
        terms = _mean_terms(results)
        if not np.isfinite(terms.total):
            raise self._abort(iteration, batch, terms, "non-finite loss")

        grads = _mean_grads(results)
        self.store.zero_grad()
        self.store.accumulate(grads)
        visible = np.logical_or.reduce([r.visible for r in results])
        radius = np.maximum.reduce([r.radius for r in results])
        self.stats.add(grads.get(MU, np.zeros_like(self.store.params[MU])), visible, radius)
        self.optimizer.step(self.store)

        if should_densify(iteration, self.config.density):
            result = densify_and_prune(
                self.store,
                self.stats,
                self.config.density,
                canvas_width=self.config.projection.width,
                prune_by_opacity=train.pipeline == "wrfgsplus",
                rng=rng,
            )
            self.optimizer.remap(result.source)
            self.stats = DensityStats.empty(self.store.n_gaussians)

        if iteration % train.log_interval == 0:
            wall_ms = (time.perf_counter() - started) * 1e3
            log.write(
                f"{iteration} {terms.total:.9g} {terms.l1:.9g} {terms.ssim:.9g} "
                f"{self.store.n_gaussians} {wall_ms:.3f}\n"
            )
            log.flush()
        return terms

    def evaluate(self, records: list[Record] | None = None) -> MetricReport:
        """在评估集 (默认) 或给定记录上评估当前模型。"""
        records = self.eval_records if records is None else records
        return self.objective.evaluate(records, self.config.threads)

    def _check_plateau(self, iteration: int) -> MetricReport:
        report = self.evaluate()
        median = next(iter(report.summaries().values())).median
        better = self.state.best_metric is None or (
            median > self.state.best_metric
            if self.objective.higher_is_better
            else median < self.state.best_metric
        )
        if better:
            self.state.best_metric = median
            self.state.stale_evals = 0
        else:
            self.state.stale_evals += 1
        logger.info(
            "Evaluated",
            iteration=iteration,
            median=median,
            best=self.state.best_metric,
            stale=self.state.stale_evals,
        )
        patience = self.config.train.early_stop_patience
        if patience and self.state.stale_evals >= patience:
            self.state.stopped_early = True
        return report

    def run(self) -> TrainResult:
        """训练到 `iterations` 次或提前停止。

        Raises:
            NumericalAbort: 损失出现 NaN 或无穷，诊断信息写入 `nan_dump.json`。
        """
        train = self.config.train
        self.out_dir.mkdir(parents=True, exist_ok=True)
        first = self.store.step_count + 1
        losses: list[LossTerms] = []
        report: MetricReport | None = None
        logger.info(
            "Training",
            task=self.spec.kind,
            pipeline=train.pipeline,
            records=len(self.train_records),
            gaussians=self.store.n_gaussians,
            start=first,
            iterations=train.iterations,
        )
        mode = "a" if first > 1 else "w"
        with self.loss_log_path.open(mode, encoding="utf-8") as log:
            for iteration in range(first, train.iterations + 1):
                if self.state.stopped_early:
                    break
                losses.append(self._step(iteration, log))
                if train.eval_interval and iteration % train.eval_interval == 0 and self.eval_records:
                    report = self._check_plateau(iteration)
                if train.checkpoint_interval and iteration % train.checkpoint_interval == 0:
                    self.checkpoint().save(self.checkpoint_path)

        if self.eval_records and report is None:
            report = self.evaluate()
        ckpt = self.checkpoint()
        ckpt.save(self.checkpoint_path)
        if report is not None:
            for name, summary in report.summaries().items():
                logger.info("Final evaluation", metric=name, median=summary.median, p10=summary.p10, p90=summary.p90)
        return TrainResult(
            checkpoint=ckpt,
            checkpoint_path=self.checkpoint_path,
            loss_log=self.loss_log_path,
            losses=losses,
            eval_report=report,
            stopped_early=self.state.stopped_early,
        )


def train(
    dataset: Dataset,
    config: MainConfig,
    out_dir: str | Path,
    *,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """训练并写出检查点与损失日志。"""
    return Trainer(config, dataset, out_dir, resume=resume).run()


