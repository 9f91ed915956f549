"""WRF-GS 类型提示支持。

此模块定义了部分 WRF-GS 使用的数组类型别名。
"""

from collections.abc import Callable
from typing import TYPE_CHECKING, TypeVar

import numpy as np
import numpy.typing as npt

if TYPE_CHECKING:
    from wrfgs.config import ConfigModel

__all__ = [
    "BoolArray",
    "ComplexArray",
    "ConfigT",
    "FloatArray",
    "GradDict",
    "IntArray",
    "ItemT",
    "ParamDict",
    "ResultT",
    "WorkerFunc",
]

FloatArray = npt.NDArray[np.float64]
ComplexArray = npt.NDArray[np.complex128]
IntArray = npt.NDArray[np.int64]
BoolArray = npt.NDArray[np.bool_]

ParamDict = dict[str, FloatArray]
"""参数名到参数数组的映射。"""
GradDict = dict[str, FloatArray]
"""参数名到梯度数组的映射。"""

ItemT = TypeVar("ItemT")
ResultT = TypeVar("ResultT")
ConfigT = TypeVar("ConfigT", bound="ConfigModel")

WorkerFunc = Callable[[ItemT], ResultT]
