"""命令行入口。

子命令：

- `gen`: 用真值模型生成数据集。
- `train`: 训练，写出检查点与损失日志；带 `--checkpoint` 时从检查点继续。
- `render`: 从检查点渲染空间谱，可附带 8 位灰度热力图。
- `eval`: 在数据集上评估检查点，写出逐记录指标与汇总。
- `predict-rssi` / `predict-csi`: 批量预测并写出 CSV。

退出码：0 成功，2 输入或校验错误，3 训练中出现数值异常，1 其它运行错误。
配置的优先级：配置文件 < 环境变量 < 命令行参数。
"""

import csv
import sys
import time
from argparse import ArgumentParser as ArgParser
from argparse import Namespace
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import IO, Any, Never, get_args
from typing_extensions import override

import numpy as np
from PIL import Image
from pydantic import ValidationError

from wrfgs.checkpoint import Checkpoint
from wrfgs.config import MainConfig, Pipeline, TaskName, apply_environment, load_config
from wrfgs.consts import N_UPLINK
from wrfgs.dataset import Dataset, Record, generate_dataset, write_spectrum
from wrfgs.exceptions import (
    CheckpointError,
    ConfigError,
    DatasetError,
    NumericalAbort,
    OutputError,
    SceneError,
    ShapeMismatchError,
    TaskMismatchError,
    WrfGsException,
)
from wrfgs.log import capture_stdlib_logging, configure_logging, logger
from wrfgs.tasks import Predictor
from wrfgs.train.loop import Trainer
from wrfgs.typing import ComplexArray, FloatArray

__all__ = [
    "EXIT_ABORT",
    "EXIT_ERROR",
    "EXIT_INVALID",
    "ArgumentParser",
    "ParserExit",
    "build_parser",
    "heatmap",
    "main",
]

EXIT_ERROR = 1
EXIT_INVALID = 2
EXIT_ABORT = 3

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.csv"
RENDER_REPORT_FILE = "render.csv"

_INVALID = (
    ConfigError,
    SceneError,
    DatasetError,
    CheckpointError,
    TaskMismatchError,
    ShapeMismatchError,
    OutputError,
)


class ParserExit(Exception):  # noqa: N818
    """参数解析结束 (`--help`) 或失败时抛出，由 `main` 转换为退出码。"""

    def __init__(self, status: int = 0, message: str | None = None) -> None:
        self.status = status
        self.message = message
        super().__init__(message)

    @override
    def __repr__(self) -> str:
        return (
            f"ParserExit(status={self.status}"
            + (f", message={self.message!r}" if self.message else "")
            + ")"
        )


class ArgumentParser(ArgParser):
    """出错时抛出 `ParserExit` 而不是直接退出进程的参数解析器。"""

    @override
    def exit(self, status: int = 0, message: str | None = None) -> Never:
        raise ParserExit(status, message)

    @override
    def error(self, message: str) -> Never:
        self.print_usage(sys.stderr)
        raise ParserExit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _add_common(parser: ArgParser) -> None:
    parser.add_argument("--config", type=Path, help="配置文件 (TOML / JSON / YAML)")
    parser.add_argument("--threads", type=int, help="工作线程数")


def _add_model(parser: ArgParser) -> None:
    parser.add_argument("--seed", type=int, help="随机种子")
    parser.add_argument("--pipeline", choices=get_args(Pipeline), help="网络结构")
    parser.add_argument("--task", choices=get_args(TaskName), help="任务类型")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="wrfgs", description="无线辐射场的高斯泼溅重建")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    gen = sub.add_parser("gen", help="生成数据集")
    _add_common(gen)
    _add_model(gen)
    gen.add_argument("--out", type=Path, required=True, help="数据集目录")
    gen.add_argument("--n-train", type=int, help="训练记录数")
    gen.add_argument("--n-eval", type=int, help="评估记录数")

    train = sub.add_parser("train", help="训练")
    _add_common(train)
    _add_model(train)
    train.add_argument("--dataset", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True, help="输出目录")
    train.add_argument("--checkpoint", type=Path, help="从该检查点继续训练")

    render = sub.add_parser("render", help="渲染空间谱")
    _add_common(render)
    render.add_argument("--checkpoint", type=Path, required=True)
    query = render.add_mutually_exclusive_group(required=True)
    query.add_argument("--tx", type=float, nargs=3, metavar=("X", "Y", "Z"))
    query.add_argument("--query", type=Path, help="发射机位置 CSV (x,y,z)")
    render.add_argument("--out", type=Path, required=True, help="输出目录")
    render.add_argument("--heatmap", action="store_true", help="同时写出 PNG 热力图")

    evaluate = sub.add_parser("eval", help="评估")
    _add_common(evaluate)
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--dataset", type=Path, required=True)
    evaluate.add_argument("--out", type=Path, required=True, help="输出目录")
    evaluate.add_argument("--split", choices=("eval", "train"), default="eval")

    rssi = sub.add_parser("predict-rssi", help="预测 RSSI")
    _add_common(rssi)
    rssi.add_argument("--checkpoint", type=Path, required=True)
    query = rssi.add_mutually_exclusive_group(required=True)
    query.add_argument("--tx", type=float, nargs=3, metavar=("X", "Y", "Z"))
    query.add_argument("--query", type=Path, help="发射机位置 CSV (x,y,z)")
    rssi.add_argument("--out", type=Path, required=True, help="输出 CSV")

    csi = sub.add_parser("predict-csi", help="由上行 CSI 预测下行 CSI")
    _add_common(csi)
    csi.add_argument("--checkpoint", type=Path, required=True)
    csi.add_argument("--uplink", type=Path, required=True, help="上行 CSI CSV")
    csi.add_argument("--out", type=Path, required=True, help="输出 CSV")
    return parser


def _resolve_config(args: Namespace, base: MainConfig | None = None) -> MainConfig:
    """合并配置文件、环境变量与命令行参数。"""
    if args.config is not None:
        config = load_config(args.config)
    else:
        config = base if base is not None else MainConfig()
    config = apply_environment(config)
    update: dict[str, Any] = {}
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError(f"--threads must be positive, got {args.threads}")
        update["threads"] = args.threads
    train: dict[str, Any] = {}
    dataset: dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
        dataset["seed"] = args.seed
    if getattr(args, "pipeline", None) is not None:
        train["pipeline"] = args.pipeline
    if getattr(args, "n_train", None) is not None:
        dataset["n_train"] = args.n_train
    if getattr(args, "n_eval", None) is not None:
        dataset["n_eval"] = args.n_eval
    if train:
        update["train"] = config.train.model_copy(update=train)
    if dataset:
        update["dataset"] = config.dataset.model_copy(update=dataset)
    if getattr(args, "task", None) is not None:
        update["task"] = config.task.model_copy(update={"kind": args.task})
    if update:
        # 重新校验，命令行给出的值同样受字段约束
        try:
            config = MainConfig.model_validate(config.model_copy(update=update).model_dump())
        except ValidationError as e:
            error = e.errors()[0]
            where = ".".join(str(k) for k in error["loc"])
            raise ConfigError(f"command line {where}: {error['msg']}") from e
    return config


def _read_tx_file(path: Path) -> list[FloatArray]:
    """读取 `x,y,z` 表头的发射机位置 CSV。

    Raises:
        DatasetError: 文件无法读取或格式错误。
    """
    try:
        with path.open(newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DatasetError(f"can not read query file {path}: {e.strerror}") from e
    positions: list[FloatArray] = []
    for line, row in enumerate(rows, start=2):
        try:
            tx = np.array([float(row["x"]), float(row["y"]), float(row["z"])])
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"{path}:{line}: expected numeric x,y,z columns") from e
        if not np.all(np.isfinite(tx)):
            raise DatasetError(f"{path}:{line}: non-finite position")
        positions.append(tx)
    if not positions:
        raise DatasetError(f"{path}: no query rows")
    return positions


def _read_uplink_file(path: Path) -> list[ComplexArray]:
    """读取上行 CSI CSV，列为 `up_re_k` 与 `up_im_k`。"""
    try:
        with path.open(newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DatasetError(f"can not read uplink file {path}: {e.strerror}") from e
    values: list[ComplexArray] = []
    for line, row in enumerate(rows, start=2):
        try:
            re = [float(row[f"up_re_{k}"]) for k in range(N_UPLINK)]
            im = [float(row[f"up_im_{k}"]) for k in range(N_UPLINK)]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(
                f"{path}:{line}: expected up_re_k/up_im_k columns for {N_UPLINK} subcarriers"
            ) from e
        values.append(np.array(re) + 1j * np.array(im))
    if not values:
        raise DatasetError(f"{path}: no uplink rows")
    return values


def _queries(args: Namespace) -> list[FloatArray]:
    if args.tx is not None:
        return [np.asarray(args.tx, dtype=np.float64)]
    return _read_tx_file(args.query)


def _load_predictor(args: Namespace) -> Predictor:
    checkpoint = Checkpoint.load(args.checkpoint)
    config = _resolve_config(args, checkpoint.config)
    return Predictor(checkpoint, threads=config.threads)


def heatmap(values: FloatArray) -> tuple[np.ndarray, float, float]:
    """把空间谱按最小最大值线性映射到 8 位灰度。

    只有最大值映射到 255，因此热力图的最大像素与空间谱的最大格一致。

    Returns:
        灰度图像与映射所用的最小值和最大值。
    """
    low, high = float(values.min()), float(values.max())
    if high > low:
        scaled = np.floor(255.0 * (values - low) / (high - low))
    else:
        scaled = np.zeros_like(values)
    return np.clip(scaled, 0, 255).astype(np.uint8), low, high


def _cmd_gen(args: Namespace) -> int:
    config = _resolve_config(args)
    configure_logging(config.log.level, config.log.verbose_exception)
    dataset = generate_dataset(config, args.out)
    sys.stdout.write(
        f"wrote {dataset.manifest.record_count} records "
        f"({len(dataset.train_records)} train, {len(dataset.eval_records)} eval) to {args.out}\n"
    )
    return 0


def _cmd_train(args: Namespace) -> int:
    resume = None if args.checkpoint is None else Checkpoint.load(args.checkpoint)
    config = _resolve_config(args, None if resume is None else resume.config)
    configure_logging(config.log.level, config.log.verbose_exception)
    dataset = Dataset.load(args.dataset)
    result = Trainer(config, dataset, args.out, resume=resume).run()
    if result.eval_report is not None:
        result.eval_report.write_csv(args.out / METRICS_FILE)
        result.eval_report.write_summary(args.out / SUMMARY_FILE)
    last = result.losses[-1].total if result.losses else float("nan")
    sys.stdout.write(
        f"step {result.checkpoint.step}: loss {last:.6g}, "
        f"{result.checkpoint.store.n_gaussians} gaussians, checkpoint {result.checkpoint_path}\n"
    )
    return 0


def _cmd_render(args: Namespace) -> int:
    predictor = _load_predictor(args)
    configure_logging(predictor.config.log.level, predictor.config.log.verbose_exception)
    positions = _queries(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    with (out / RENDER_REPORT_FILE).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["query", "tx_x", "tx_y", "tx_z", "render_ms", "scale_min", "scale_max"])
        for index, tx in enumerate(positions):
            started = time.perf_counter()
            spectrum = predictor.synthesize_spectrum(tx)
            elapsed = (time.perf_counter() - started) * 1e3
            write_spectrum(out / f"spectrum_{index:04d}.wspc", spectrum.values)
            image, low, high = heatmap(spectrum.values)
            if args.heatmap:
                Image.fromarray(image, mode="L").save(out / f"heatmap_{index:04d}.png")
            writer.writerow([index, *(repr(float(v)) for v in tx), f"{elapsed:.3f}", repr(low), repr(high)])
            sys.stdout.write(
                f"query {index}: {elapsed:.3f} ms, heatmap scale [{low:.6g}, {high:.6g}]\n"
            )
    return 0


def _cmd_eval(args: Namespace) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    config = _resolve_config(args, checkpoint.config)
    configure_logging(config.log.level, config.log.verbose_exception)
    dataset = Dataset.load(args.dataset)
    manifest = dataset.manifest
    if manifest.task != checkpoint.task:
        raise TaskMismatchError(
            f"checkpoint was trained for {checkpoint.task}, dataset holds {manifest.task} records"
        )
    canvas = (config.projection.height, config.projection.width)
    if checkpoint.task == "spectrum" and (manifest.h, manifest.w) != canvas:
        raise DatasetError(
            f"dataset spectra are {manifest.h}x{manifest.w}, checkpoint renders {canvas[0]}x{canvas[1]}"
        )
    records: list[Record] = dataset.eval_records if args.split == "eval" else dataset.train_records
    if not records:
        raise DatasetError(f"the {args.split} split of {args.dataset} is empty")
    predictor = Predictor(checkpoint, threads=config.threads)
    report = predictor.objective.evaluate(records, config.threads)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / METRICS_FILE)
    report.write_summary(out / SUMMARY_FILE)
    for name, summary in report.summaries().items():
        sys.stdout.write(
            f"{name}: median {summary.median:.6g}, p10 {summary.p10:.6g}, "
            f"p90 {summary.p90:.6g} over {summary.count} records\n"
        )
    return 0


def _write_rows(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _cmd_predict_rssi(args: Namespace) -> int:
    predictor = _load_predictor(args)
    configure_logging(predictor.config.log.level, predictor.config.log.verbose_exception)
    rows = [
        [index, *(repr(float(v)) for v in tx), repr(predictor.predict_rssi(tx))]
        for index, tx in enumerate(_queries(args))
    ]
    _write_rows(args.out, ["query", "tx_x", "tx_y", "tx_z", "rssi_db"], rows)
    sys.stdout.write(f"wrote {len(rows)} predictions to {args.out}\n")
    return 0


def _cmd_predict_csi(args: Namespace) -> int:
    predictor = _load_predictor(args)
    configure_logging(predictor.config.log.level, predictor.config.log.verbose_exception)
    header = ["query"]
    header += [f"dn_re_{k}" for k in range(N_UPLINK)]
    header += [f"dn_im_{k}" for k in range(N_UPLINK)]
    rows: list[list[Any]] = []
    for index, uplink in enumerate(_read_uplink_file(args.uplink)):
        downlink = predictor.predict_csi(uplink)
        rows.append(
            [index, *(repr(float(v)) for v in downlink.real), *(repr(float(v)) for v in downlink.imag)]
        )
    _write_rows(args.out, header, rows)
    sys.stdout.write(f"wrote {len(rows)} predictions to {args.out}\n")
    return 0


_COMMANDS: dict[str, Callable[[Namespace], int]] = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "predict-rssi": _cmd_predict_rssi,
    "predict-csi": _cmd_predict_csi,
}


def _run(args: Namespace) -> int:
    """执行子命令，把写盘失败转换为 `OutputError`。

    读取输入的 `OSError` 在各读取函数里已转换为 `DatasetError`，这里剩下的都来自写出。
    """
    try:
        return _COMMANDS[args.command](args)
    except OSError as e:
        if isinstance(e, WrfGsException):
            raise
        target = e.filename if e.filename is not None else getattr(args, "out", None)
        raise OutputError(f"can not write {target}: {e.strerror or e}") from e


def main(argv: Sequence[str] | None = None, stderr: IO[str] | None = None) -> int:
    """运行命令行，返回退出码。"""
    err = sys.stderr if stderr is None else stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ParserExit as e:
        if e.message:
            err.write(e.message)
        return e.status
    capture_stdlib_logging()
    try:
        return _run(args)
    except NumericalAbort as e:
        logger.error("Training aborted", error=str(e), dump=str(e.dump_path))
        err.write(f"wrfgs: numerical abort: {e}\n")
        return EXIT_ABORT
    except _INVALID as e:
        logger.error("Invalid input", command=args.command, error=str(e))
        err.write(f"wrfgs: error: {e}\n")
        return EXIT_INVALID
    except WrfGsException as e:
        logger.exception("Command failed", command=args.command)
        err.write(f"wrfgs: error: {e}\n")
        return EXIT_ERROR


