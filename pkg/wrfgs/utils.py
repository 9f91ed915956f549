"""WRF-GS 内部使用的实用工具。"""

import hashlib
import json
import math
from collections.abc import Callable, Generator, Iterable, Sequence
from functools import partial
from pathlib import Path
from typing import Any, TypeVar, cast
from typing_extensions import override

import anyio
import anyio.to_thread
import numpy as np
from exceptiongroup import catch
from pydantic import BaseModel

from wrfgs.typing import ItemT, ResultT

__all__ = [
    "PydanticEncoder",
    "canonical_json",
    "flatten_exception_group",
    "model_hash",
    "nearest_rank_percentile",
    "run_parallel",
    "sha256_file",
]

_E = TypeVar("_E", bound=BaseException)


def flatten_exception_group(
    exc_group: BaseExceptionGroup[_E],
) -> Generator[_E, None, None]:
    """递归遍历 BaseExceptionGroup ，并返回一个生成器"""
    for exc in exc_group.exceptions:
        if isinstance(exc, BaseExceptionGroup):
            yield from flatten_exception_group(cast("BaseExceptionGroup[_E]", exc))
        else:
            yield exc


def run_parallel(
    func: Callable[[ItemT], ResultT], items: Iterable[ItemT], threads: int = 1
) -> list[ResultT]:
    """在工作线程上并行地将 `func` 映射到 `items`。

    结果按输入顺序返回，因此调用方按顺序归并即可得到与线程数无关的确定结果。
    任一工作线程抛出的异常会被解开异常组后原样重新抛出。

    Args:
        func: 纯函数，会在工作线程中调用。
        items: 输入序列。
        threads: 最大并发线程数，`<= 1` 时在当前线程中顺序执行。

    Returns:
        与 `items` 等长、顺序一致的结果列表。
    """
    work = list(items)
    if threads <= 1 or len(work) <= 1:
        return [func(item) for item in work]

    results: list[ResultT | None] = [None] * len(work)
    errors: list[Exception] = []

    async def _run_one(index: int, limiter: anyio.CapacityLimiter) -> None:
        results[index] = await anyio.to_thread.run_sync(
            partial(func, work[index]), limiter=limiter
        )

    async def _main() -> None:
        limiter = anyio.CapacityLimiter(threads)
        async with anyio.create_task_group() as tg:
            for index in range(len(work)):
                tg.start_soon(_run_one, index, limiter)

    def _collect(exc_group: BaseExceptionGroup[Exception]) -> None:
        errors.extend(flatten_exception_group(exc_group))

    with catch({Exception: _collect}):
        anyio.run(_main)
    if errors:
        raise errors[0]
    return cast("list[ResultT]", results)


class PydanticEncoder(json.JSONEncoder):
    """用于解析 `pydantic.BaseModel` 与 numpy 标量/数组的 `JSONEncoder` 类。"""

    @override
    def default(self, o: Any) -> Any:
        """返回 `o` 的可序列化对象。"""
        if isinstance(o, BaseModel):
            return o.model_dump(mode="json")
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, Path):
            return o.as_posix()
        return super().default(o)


def canonical_json(obj: Any, *, indent: int | None = None) -> str:
    """键排序、格式固定的 JSON 文本，相同输入总是得到相同字节。"""
    separators = (",", ": ") if indent is not None else (",", ":")
    return json.dumps(
        obj,
        cls=PydanticEncoder,
        sort_keys=True,
        indent=indent,
        separators=separators,
        ensure_ascii=True,
        allow_nan=False,
    )


def model_hash(model: BaseModel, exclude: set[str] | None = None) -> str:
    """配置模型的稳定 sha256 摘要。"""
    dump = model.model_dump(mode="json", exclude=exclude)
    return hashlib.sha256(canonical_json(dump).encode()).hexdigest()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(partial(f.read, 1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def nearest_rank_percentile(values: Sequence[float], percent: float) -> float:
    """最近秩法百分位数。

    第 p 百分位数取升序排列后的第 `⌈p/100 · n⌉` 个值 (从 1 开始)，`p = 0` 时取最小值。

    Raises:
        ValueError: `values` 为空或 `percent` 不在 `[0, 100]` 内。
    """
    if not values:
        raise ValueError("percentile of an empty sequence")
    if not 0 <= percent <= 100:
        raise ValueError(f"percent must be within [0, 100], got {percent}")
    ordered = sorted(values)
    rank = max(math.ceil(percent / 100 * len(ordered)), 1)
    return float(ordered[rank - 1])
