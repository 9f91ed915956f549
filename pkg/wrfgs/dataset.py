"""合成数据集：生成、读写与校验。

目录结构：

```
<dataset>/
├── manifest.json      # 清单：版本、任务、场景、阵列、记录数、划分种子、文件哈希
├── index.csv          # 每条记录一行：编号、划分、TX 位置、RSSI、上下行 CSI
└── spectra/
    └── 000000.wspc    # 仅空间谱任务
```

空间谱文件由 16 字节头 `<4sIII` (魔数 `WSPC`、版本、h、w) 和
按行优先排列的小端 32 位浮点数组成。
"""

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from wrfgs.config import MainConfig, TaskName
from wrfgs.consts import (
    DATASET_VERSION,
    INDEX_FILE,
    MANIFEST_FILE,
    N_UPLINK,
    SPECTRA_DIR,
    SPECTRUM_MAGIC,
)
from wrfgs.exceptions import DatasetError, SceneError
from wrfgs.log import logger
from wrfgs.oracle import (
    ArrayGeometry,
    MultipathScene,
    csi_from_paths,
    default_subcarriers,
    ground_truth_spectrum,
    rssi_from_gains,
    simulate_paths,
)
from wrfgs.typing import ComplexArray, FloatArray
from wrfgs.utils import canonical_json, run_parallel, sha256_file

__all__ = [
    "Dataset",
    "DatasetManifest",
    "Record",
    "generate_dataset",
    "read_spectrum",
    "sample_tx_positions",
    "write_spectrum",
]

Split = Literal["train", "eval"]

_HEADER = struct.Struct("<4sIII")
SPECTRUM_VERSION = 1


def write_spectrum(path: Path, values: FloatArray) -> None:
    """写出一个空间谱文件。"""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"spectrum must be 2-D, got shape {values.shape}")
    h, w = values.shape
    path.write_bytes(
        _HEADER.pack(SPECTRUM_MAGIC, SPECTRUM_VERSION, h, w)
        + np.ascontiguousarray(values, dtype="<f4").tobytes()
    )


def read_spectrum(path: Path) -> FloatArray:
    """读取一个空间谱文件，返回 float64 矩阵。

    Raises:
        DatasetError: 文件头或长度不正确。
    """
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetError(f"{path}: truncated spectrum header")
    magic, version, h, w = _HEADER.unpack_from(data)
    if magic != SPECTRUM_MAGIC:
        raise DatasetError(f"{path}: bad spectrum magic {magic!r}")
    if version != SPECTRUM_VERSION:
        raise DatasetError(f"{path}: unsupported spectrum version {version}")
    if len(data) != _HEADER.size + 4 * h * w:
        raise DatasetError(f"{path}: expected {h}x{w} floats, got {len(data) - _HEADER.size} bytes")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w)
    return values.astype(np.float64)


class DatasetManifest(BaseModel):
    """数据集清单。

    Attributes:
        version: 清单格式版本。
        task: 数据集面向的任务。
        scene: 生成数据使用的场景参数。
        array: 天线阵列几何。
        record_count: 记录总数。
        split_seed: 训练/评估划分使用的随机种子。
        h: 空间谱行数。
        w: 空间谱列数。
        far_field: 空间谱是否按平面波近似生成。
        files: 相对路径到 sha256 的映射，不含清单本身。
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    version: int = DATASET_VERSION
    task: TaskName
    scene: MultipathScene
    array: ArrayGeometry
    record_count: int = Field(ge=0)
    split_seed: int
    h: int = Field(ge=1)
    w: int = Field(ge=2)
    far_field: bool = False
    files: dict[str, str]


@dataclass(frozen=True)
class Record:
    """一条数据记录。

    Attributes:
        id: 记录编号。
        split: `train` 或 `eval`。
        tx: 发射机位置。
        rssi_db: 真值 RSSI。
        uplink: 26 个上行子载波的 CSI。
        downlink: 26 个下行子载波的 CSI。
        spectrum: 真值空间谱，只有空间谱任务的数据集才有。
    """

    id: int
    split: Split
    tx: FloatArray
    rssi_db: float
    uplink: ComplexArray
    downlink: ComplexArray
    spectrum: FloatArray | None = None


def _index_header() -> list[str]:
    columns = ["id", "split", "tx_x", "tx_y", "tx_z", "rssi_db"]
    for prefix in ("up", "dn"):
        columns += [f"{prefix}_re_{k}" for k in range(N_UPLINK)]
        columns += [f"{prefix}_im_{k}" for k in range(N_UPLINK)]
    return columns


def _index_row(record: Record) -> list[str | int]:
    row: list[str | int] = [record.id, record.split]
    row += [repr(float(v)) for v in record.tx]
    row.append(repr(float(record.rssi_db)))
    for values in (record.uplink, record.downlink):
        row += [repr(float(v)) for v in values.real]
        row += [repr(float(v)) for v in values.imag]
    return row


def _parse_row(row: dict[str, str]) -> Record:
    def _csi(prefix: str) -> ComplexArray:
        re = np.array([float(row[f"{prefix}_re_{k}"]) for k in range(N_UPLINK)])
        im = np.array([float(row[f"{prefix}_im_{k}"]) for k in range(N_UPLINK)])
        return re + 1j * im

    split = row["split"]
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    return Record(
        id=int(row["id"]),
        split="train" if split == "train" else "eval",
        tx=np.array([float(row["tx_x"]), float(row["tx_y"]), float(row["tx_z"])]),
        rssi_db=float(row["rssi_db"]),
        uplink=_csi("up"),
        downlink=_csi("dn"),
    )


def spectrum_path(record_id: int) -> str:
    return f"{SPECTRA_DIR}/{record_id:06d}.wspc"


@dataclass
class Dataset:
    """已加载并校验过的数据集。"""

    root: Path
    manifest: DatasetManifest
    records: list[Record]

    @property
    def train_records(self) -> list[Record]:
        return [r for r in self.records if r.split == "train"]

    @property
    def eval_records(self) -> list[Record]:
        return [r for r in self.records if r.split == "eval"]

    @property
    def bounds(self) -> FloatArray:
        """场景包围盒 `(2, 3)`。"""
        return np.stack([np.zeros(3), self.manifest.scene.extent])

    @classmethod
    def load(cls, root: str | Path) -> "Dataset":
        """读取数据集并校验全部文件哈希。

        Raises:
            DatasetError: 清单缺失或无效、文件缺失、哈希不一致或记录数不符。
        """
        root = Path(root)
        manifest_path = root / MANIFEST_FILE
        try:
            manifest = DatasetManifest.model_validate_json(
                manifest_path.read_text(encoding="utf-8")
            )
        except OSError as e:
            raise DatasetError(f"{manifest_path}: {e.strerror}") from e
        except ValidationError as e:
            raise DatasetError(f"{manifest_path}: {e.errors()[0]['msg']}") from e
        if manifest.version != DATASET_VERSION:
            raise DatasetError(f"{manifest_path}: unsupported version {manifest.version}")

        for name, digest in manifest.files.items():
            path = root / name
            if not path.is_file():
                raise DatasetError(f"{path}: listed in the manifest but missing")
            if sha256_file(path) != digest:
                raise DatasetError(f"{path}: content hash does not match the manifest")

        with (root / INDEX_FILE).open(newline="", encoding="utf-8") as f:
            try:
                records = [_parse_row(row) for row in csv.DictReader(f)]
            except (KeyError, ValueError) as e:
                raise DatasetError(f"{root / INDEX_FILE}: malformed row ({e})") from e
        if len(records) != manifest.record_count:
            raise DatasetError(
                f"{manifest_path}: record_count {manifest.record_count} "
                f"but the index holds {len(records)} rows"
            )
        if manifest.task == "spectrum":
            missing = [r.id for r in records if spectrum_path(r.id) not in manifest.files]
            if missing:
                raise DatasetError(f"{manifest_path}: no spectrum file for records {missing}")
            records = [
                replace(r, spectrum=read_spectrum(root / spectrum_path(r.id)))
                for r in records
            ]
        logger.debug("Loaded dataset", root=str(root), records=len(records), task=manifest.task)
        return cls(root, manifest, records)


def sample_tx_positions(
    scene: MultipathScene,
    n: int,
    seed: int,
    *,
    margin: float = 0.2,
    min_rx_distance: float = 0.3,
) -> FloatArray:
    """在房间内的抖动网格上采样 `n` 个发射机位置。

    网格覆盖与墙面相距 `margin` 的内盒，每个格点在其格子内均匀抖动；
    与接收机距离小于 `min_rx_distance` 的点被丢弃，然后随机取 `n` 个。

    Raises:
        SceneError: 内盒为空，或无法放下足够多的点。
    """
    extent = scene.extent
    low = np.full(3, margin)
    high = extent - margin
    if np.any(high <= low):
        raise SceneError(f"margin {margin} leaves no room inside {scene.room_extent}")
    rng = np.random.default_rng(seed)
    cells = max(int(np.ceil(n ** (1 / 3))), 1)
    for _ in range(8):
        size = (high - low) / cells
        grid = np.stack(
            np.meshgrid(*(np.arange(cells),) * 3, indexing="ij"), axis=-1
        ).reshape(-1, 3)
        points = low + (grid + rng.uniform(0.0, 1.0, size=grid.shape)) * size
        points = points[np.linalg.norm(points - scene.rx, axis=1) >= min_rx_distance]
        if len(points) >= n:
            chosen = np.sort(rng.choice(len(points), size=n, replace=False))
            return points[chosen]
        cells *= 2
    raise SceneError(f"could not place {n} transmitters away from the receiver")


@dataclass(frozen=True)
class _Job:
    id: int
    split: Split
    tx: FloatArray


def generate_dataset(
    config: MainConfig, out_dir: str | Path, *, seed: int | None = None
) -> Dataset:
    """用真值模型生成数据集并写入 `out_dir`。

    Args:
        config: 使用其中的 `oracle`、`dataset`、`projection` 与 `task` 部分。
        out_dir: 输出目录，不存在时创建。
        seed: 覆盖 `config.dataset.seed`。

    Raises:
        DatasetError: 输出目录不可写。
        SceneError: 场景无效。
    """
    root = Path(out_dir)
    ds = config.dataset
    oracle = config.oracle
    task = config.task.kind
    split_seed = ds.seed if seed is None else seed
    n = ds.n_train + ds.n_eval
    h, w = config.projection.height, config.projection.width

    positions = sample_tx_positions(
        oracle.scene, n, split_seed, margin=ds.margin, min_rx_distance=ds.min_rx_distance
    )
    order = np.random.default_rng([split_seed, n]).permutation(n)
    splits: list[Split] = ["eval"] * n
    for i in order[: ds.n_train]:
        splits[int(i)] = "train"
    subcarriers = default_subcarriers()

    def _simulate(job: _Job) -> Record:
        paths = simulate_paths(oracle.scene, job.tx, wavelength=oracle.array.wavelength)
        csi = csi_from_paths(paths, subcarriers)
        spectrum = None
        if task == "spectrum":
            spectrum = ground_truth_spectrum(
                oracle.scene, oracle.array, job.tx, h=h, w=w, far_field=oracle.far_field
            ).values
        return Record(
            id=job.id,
            split=job.split,
            tx=job.tx,
            rssi_db=rssi_from_gains([p.gain for p in paths]),
            uplink=csi[:N_UPLINK],
            downlink=csi[N_UPLINK:],
            spectrum=spectrum,
        )

    jobs = [_Job(i, splits[i], positions[i]) for i in range(n)]
    records = run_parallel(_simulate, jobs, config.threads)

    try:
        (root / SPECTRA_DIR).mkdir(parents=True, exist_ok=True)
        files: dict[str, str] = {}
        with (root / INDEX_FILE).open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(_index_header())
            for record in records:
                writer.writerow(_index_row(record))
        files[INDEX_FILE] = sha256_file(root / INDEX_FILE)
        for record in records:
            if record.spectrum is not None:
                name = spectrum_path(record.id)
                write_spectrum(root / name, record.spectrum)
                files[name] = sha256_file(root / name)
        manifest = DatasetManifest(
            task=task,
            scene=oracle.scene,
            array=oracle.array,
            record_count=n,
            split_seed=split_seed,
            h=h,
            w=w,
            far_field=oracle.far_field,
            files=files,
        )
        (root / MANIFEST_FILE).write_text(
            canonical_json(manifest, indent=2) + "\n", encoding="utf-8"
        )
    except OSError as e:
        raise DatasetError(f"can not write dataset to {root}: {e.strerror}") from e
    logger.info("Generated dataset", root=str(root), records=n, task=task, seed=split_seed)
    return Dataset.load(root)
