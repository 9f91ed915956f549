"""WRF-GS 异常。

下列是 WRF-GS 运行过程中可能会抛出的异常。所有异常都继承自 `WrfGsException` ，
命令行入口会捕获它们并转换为对应的退出码。
输入校验类的异常同时继承自 `ValueError` ，以便数值代码统一捕获。
"""

from pathlib import Path
from typing_extensions import override

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "MetricError",
    "NumericalAbort",
    "OutputError",
    "RenderError",
    "SceneError",
    "ShapeMismatchError",
    "TaskMismatchError",
    "WrfGsException",
]


class WrfGsException(Exception):  # noqa: N818
    """所有 WRF-GS 发生的异常的基类。"""


class ConfigError(WrfGsException, ValueError):
    """配置文件无法读取或校验失败。

    Args:
        message: 错误信息。
        file: 出错的配置文件。
        line: 出错位置所在行 (从 1 开始)，无法定位时为 `None`。
    """

    def __init__(
        self, message: str, file: str | Path | None = None, line: int | None = None
    ) -> None:
        self.message = message
        self.file = None if file is None else str(file)
        self.line = line
        super().__init__(str(self))

    @override
    def __str__(self) -> str:
        where = ""
        if self.file is not None:
            where = self.file if self.line is None else f"{self.file}:{self.line}"
            where += ": "
        return where + self.message

    @override
    def __repr__(self) -> str:
        return (
            f"ConfigError(message={self.message!r}, file={self.file!r}, "
            f"line={self.line!r})"
        )


class SceneError(WrfGsException, ValueError):
    """场景、天线阵列或发射机位置无效。"""


class DatasetError(WrfGsException, ValueError):
    """数据集清单、索引或哈希校验失败。"""


class CheckpointError(WrfGsException, ValueError):
    """检查点文件损坏或版本不兼容。"""


class TaskMismatchError(WrfGsException, ValueError):
    """检查点的任务类型与请求的操作不一致。"""


class ShapeMismatchError(WrfGsException, ValueError):
    """两个输入的形状不一致。"""


class MetricError(WrfGsException, ValueError):
    """指标在给定输入上无定义。"""


class OutputError(WrfGsException, OSError):
    """输出目录或文件无法写入。"""


class RenderError(WrfGsException):
    """光栅化失败，例如单个 tile 内高斯数量溢出。"""


class NumericalAbort(WrfGsException):
    """训练过程中出现 NaN 损失。

    Args:
        message: 错误信息。
        dump_path: 诊断信息文件路径。
    """

    def __init__(self, message: str, dump_path: Path | None = None) -> None:
        self.dump_path = dump_path
        super().__init__(message)

    @override
    def __repr__(self) -> str:
        return f"NumericalAbort(message={self.args[0]!r}, dump_path={self.dump_path!r})"
