"""WRF-GS 日志模块，基于 structlog。

包内统一通过 `logger` 记录结构化事件。导入本模块不会改动标准库 `logging` 的根记录器，
由命令行入口调用 `capture_stdlib_logging` 把第三方库的日志并入 structlog 输出；
作为库嵌入时，日志处理器的安排留给调用方。训练损失曲线是独立的纯文本文件，不经过本模块。
"""

import logging
from typing import TYPE_CHECKING
from typing_extensions import override

import structlog

if TYPE_CHECKING:
    from structlog.typing import FilteringBoundLogger

__all__ = ["StructLogHandler", "capture_stdlib_logging", "configure_logging", "logger"]


def _level_number(level: str | int) -> int:
    if isinstance(level, int):
        return level
    return structlog.processors.NAME_TO_LEVEL.get(level.casefold(), logging.INFO)


def configure_logging(level: str | int = "INFO", verbose_exception: bool = False) -> None:
    """按 `[log]` 配置设置 structlog 的过滤级别与异常输出。

    可以重复调用，后一次覆盖前一次。

    Args:
        level: 日志级别名 (`"DEBUG"`, `"INFO"` ...) 或数值，无法识别的名字按 INFO 处理。
        verbose_exception: 为 `False` 时 `logger.exception` 只记录消息，不附带堆栈。
    """
    bound = structlog.make_filtering_bound_logger(_level_number(level))
    if not verbose_exception:
        # exception 退化为 error，丢弃 exc_info
        bound = type("QuietBoundLogger", (bound,), {"exception": bound.error})
    structlog.configure(wrapper_class=bound)


class StructLogHandler(logging.Handler):
    """把标准库 `logging` 记录转发给同名的 structlog 记录器。"""

    @override
    def emit(self, record: logging.LogRecord) -> None:
        structlog.get_logger(record.name).bind(exc_info=record.exc_info).log(
            record.levelno, record.getMessage()
        )


def capture_stdlib_logging() -> StructLogHandler:
    """让根记录器只经由 `StructLogHandler` 输出，返回安装的处理器。

    重复调用不会叠加处理器。
    """
    root = logging.getLogger()
    for handler in root.handlers:
        if isinstance(handler, StructLogHandler):
            return handler
    handler = StructLogHandler()
    root.handlers[:] = [handler]
    return handler


logger: "FilteringBoundLogger" = structlog.get_logger("wrfgs")
"""WRF-GS 日志记录器对象。"""
