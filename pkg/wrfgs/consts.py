"""WRF-GS 使用的常量"""

from typing import Final, Literal

SPEED_OF_LIGHT: Final[float] = 299_792_458.0
"""真空光速，单位 m/s。"""

DEFAULT_HEIGHT: Literal[90] = 90
"""空间谱默认行数 (仰角 1° 分辨率)。"""
DEFAULT_WIDTH: Literal[360] = 360
"""空间谱默认列数 (方位角 1° 分辨率)。"""
TILE_SIZE: Literal[16] = 16
"""光栅化 tile 边长，单位像素。"""
MAX_PER_TILE: Literal[4096] = 4096
"""单个 tile 内允许的最大高斯数量，超出视为错误。"""

COV2D_FLOOR: Final[float] = 0.3
"""投影协方差对角线上的抗锯齿下限，单位 px²。"""
MIN_RANGE: Final[float] = 1e-4
"""最小投影距离 ε_r，单位 m。"""
COVARIANCE_EPS: Final[float] = 1e-8
"""高斯求值前加到协方差对角线上的正则项。"""
MIN_TRANSMITTANCE: Final[float] = 1e-4
"""α 混合提前终止的透射率阈值。"""

RSSI_FLOOR_DB: Final[float] = -100.0
"""RSSI 下限哨兵值，单位 dB。"""
CEA_CAP_DB: Final[float] = 300.0
"""完全预测时 CEA 的封顶哨兵值，单位 dB。"""

MIN_GAUSSIANS: Literal[16] = 16
"""密度控制不会将高斯数量剪枝到此值以下。"""

N_SUBCARRIERS: Literal[52] = 52
"""CSI 子载波总数，前一半为上行，后一半为下行。"""
N_UPLINK: Literal[26] = 26
"""上行子载波数量。"""
SUBCARRIER_CENTER_HZ: Final[float] = 2.4e9
"""默认子载波中心频率。"""
SUBCARRIER_SPACING_HZ: Final[float] = 312.5e3
"""默认子载波间隔。"""

CHECKPOINT_MAGIC: Final[bytes] = b"WRFGSCKP"
"""检查点文件魔数。"""
CHECKPOINT_VERSION: Literal[1] = 1
"""检查点格式版本。"""
SPECTRUM_MAGIC: Final[bytes] = b"WSPC"
"""空间谱文件魔数。"""
DATASET_VERSION: Literal[1] = 1
"""数据集清单版本。"""

MANIFEST_FILE: Literal["manifest.json"] = "manifest.json"
INDEX_FILE: Literal["index.csv"] = "index.csv"
SPECTRA_DIR: Literal["spectra"] = "spectra"
LOSS_LOG_FILE: Literal["loss.log"] = "loss.log"
CHECKPOINT_FILE: Literal["checkpoint.wrfgs"] = "checkpoint.wrfgs"
NAN_DUMP_FILE: Literal["nan_dump.json"] = "nan_dump.json"

ENV_THREADS: Literal["WRFGS_THREADS"] = "WRFGS_THREADS"
"""线程数环境变量。"""
ENV_LOG_LEVEL: Literal["WRFGS_LOG_LEVEL"] = "WRFGS_LOG_LEVEL"
"""日志级别环境变量。"""
