"""WRF-GS

用复值三维高斯泼溅重建无线辐射场，合成空间谱并预测 RSSI 与下行 CSI。

本模块从子模块导入了以下内容：
- `MainConfig` => [`wrfgs.config.MainConfig`](./config#MainConfig)
- `load_config` => [`wrfgs.config.load_config`](./config#load_config)
- `Dataset` => [`wrfgs.dataset.Dataset`](./dataset#Dataset)
- `generate_dataset` => [`wrfgs.dataset.generate_dataset`](./dataset#generate_dataset)
- `Checkpoint` => [`wrfgs.checkpoint.Checkpoint`](./checkpoint#Checkpoint)
- `Trainer` => [`wrfgs.train.loop.Trainer`](./train/loop#Trainer)
- `Predictor` => [`wrfgs.tasks.Predictor`](./tasks#Predictor)
"""

from wrfgs.checkpoint import Checkpoint
from wrfgs.config import MainConfig, load_config
from wrfgs.dataset import Dataset, generate_dataset
from wrfgs.tasks import Predictor
from wrfgs.train.loop import Trainer, train

__all__ = [
    "Checkpoint",
    "Dataset",
    "MainConfig",
    "Predictor",
    "Trainer",
    "generate_dataset",
    "load_config",
    "train",
]
