"""检查点文件。

布局：

| 偏移 | 内容 |
|------|------|
| 0 | 魔数 `WRFGSCKP` (8 字节) |
| 8 | 格式版本 `uint32` 小端 |
| 12 | JSON 头长度 `uint32` 小端 |
| 16 | JSON 头 (UTF-8，键排序，无多余空白) |
| 16 + 头长度 | 各数组的小端原始字节，按名字排序依次排列 |

JSON 头中的 `arrays` 是 `[名字, dtype, 形状, 相对数据区起点的偏移]` 的列表。
数组名前缀：`param.` 为可训练参数，`adam.m.` / `adam.v.` 为优化器矩估计，
`density.` 为密度控制统计量，`frame.` 为接收机位置与姿态。
同样的内容总是写出同样的字节。
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args

import numpy as np
from pydantic import ValidationError

from wrfgs.config import RUNTIME_FIELDS, MainConfig, TaskName, config_hash
from wrfgs.consts import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from wrfgs.exceptions import CheckpointError
from wrfgs.log import logger
from wrfgs.scene.store import ParamStore
from wrfgs.typing import FloatArray
from wrfgs.utils import canonical_json

__all__ = ["Checkpoint"]

_PREFIX = struct.Struct("<8sII")
_DTYPE = "<f8"


@dataclass
class Checkpoint:
    """训练产物。

    Attributes:
        task: 任务类型。
        config: 训练使用的完整配置。
        store: 参数表。
        rx: 接收机位置。
        rx_rotation: 接收机本体到世界的旋转矩阵。
        optimizer: 优化器状态数组。
        density: 密度控制统计量数组。
        train_state: 训练循环的其余状态 (提前停止等)，须可 JSON 序列化。
    """

    task: TaskName
    config: MainConfig
    store: ParamStore
    rx: FloatArray
    rx_rotation: FloatArray
    optimizer: dict[str, FloatArray] = field(default_factory=dict)
    density: dict[str, FloatArray] = field(default_factory=dict)
    train_state: dict[str, Any] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.store.step_count

    def _arrays(self) -> dict[str, FloatArray]:
        arrays = {f"param.{k}": v for k, v in self.store.params.items()}
        arrays.update(self.optimizer)
        arrays.update({f"density.{k}": v for k, v in self.density.items()})
        arrays["frame.rx"] = self.rx
        arrays["frame.rotation"] = self.rx_rotation
        return arrays

    def to_bytes(self) -> bytes:
        table: list[list[Any]] = []
        blobs: list[bytes] = []
        offset = 0
        for name in sorted(arrays := self._arrays()):
            blob = np.ascontiguousarray(arrays[name], dtype=_DTYPE).tobytes()
            table.append([name, _DTYPE, list(np.shape(arrays[name])), offset])
            blobs.append(blob)
            offset += len(blob)
        header = {
            "task": self.task,
            "pipeline": self.config.train.pipeline,
            "config_hash": config_hash(self.config),
            "config": self.config.model_dump(mode="json", exclude=RUNTIME_FIELDS),
            "step": self.store.step_count,
            "csi_scale": self.store.csi_scale,
            "bounds": self.store.bounds,
            "train_state": self.train_state,
            "arrays": table,
        }
        head = canonical_json(header).encode()
        return (
            _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head))
            + head
            + b"".join(blobs)
        )

    def save(self, path: str | Path) -> Path:
        """原子地写出检查点。"""
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp.write_bytes(self.to_bytes())
            tmp.replace(path)
        except OSError as e:
            raise CheckpointError(f"can not write checkpoint {path}: {e.strerror}") from e
        logger.debug("Saved checkpoint", path=str(path), step=self.step)
        return path

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        """解析检查点字节。

        Raises:
            CheckpointError: 魔数、版本、头部或数组表无效，或配置摘要不一致。
        """
        if len(data) < _PREFIX.size:
            raise CheckpointError(f"{source}: truncated checkpoint")
        magic, version, head_len = _PREFIX.unpack_from(data)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint (magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        start = _PREFIX.size + head_len
        try:
            header = json.loads(data[_PREFIX.size : start].decode())
            config = MainConfig.model_validate(header["config"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
            raise CheckpointError(f"{source}: corrupt header ({e})") from e
        except ValidationError as e:
            raise CheckpointError(f"{source}: invalid stored config ({e.errors()[0]['msg']})") from e
        if header.get("task") not in get_args(TaskName):
            raise CheckpointError(f"{source}: unknown task {header.get('task')!r}")
        if config_hash(config) != header["config_hash"]:
            raise CheckpointError(f"{source}: stored config does not match its hash")

        arrays: dict[str, FloatArray] = {}
        for name, dtype, shape, offset in header["arrays"]:
            count = int(np.prod(shape))
            begin = start + offset
            end = begin + count * np.dtype(dtype).itemsize
            if end > len(data):
                raise CheckpointError(f"{source}: array {name} runs past the end of the file")
            arrays[name] = (
                np.frombuffer(data[begin:end], dtype=dtype).reshape(shape).astype(np.float64)
            )

        def _group(prefix: str) -> dict[str, FloatArray]:
            return {k.removeprefix(prefix): v for k, v in arrays.items() if k.startswith(prefix)}

        try:
            store = ParamStore(
                _group("param."),
                np.asarray(header["bounds"], dtype=np.float64),
                step_count=int(header["step"]),
                csi_scale=float(header["csi_scale"]),
            )
            rx = arrays["frame.rx"]
            rotation = arrays["frame.rotation"]
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{source}: incomplete checkpoint ({e})") from e
        return cls(
            task=header["task"],
            config=config,
            store=store,
            rx=rx,
            rx_rotation=rotation,
            optimizer={k: v for k, v in arrays.items() if k.startswith("adam.")},
            density=_group("density."),
            train_state=header.get("train_state", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"can not read checkpoint {path}: {e.strerror}") from e
        return cls.from_bytes(data, str(path))
