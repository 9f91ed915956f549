import json
import struct

import numpy as np
import pytest
from fake_scene import SMALL_SCENE, make_field, small_config

from wrfgs.checkpoint import Checkpoint
from wrfgs.exceptions import CheckpointError
from wrfgs.scene.store import CALIBRATION, MU


def _checkpoint(task="rssi", pipeline="wrfgsplus"):
    config = small_config(task, pipeline)
    store = make_field(config).store
    store.params[CALIBRATION][:] = 2.5
    store.step_count = 7
    return Checkpoint(
        task=task,
        config=config,
        store=store,
        rx=SMALL_SCENE.rx,
        rx_rotation=SMALL_SCENE.rx_rotation,
        optimizer={f"adam.m.{MU}": np.ones_like(store.params[MU])},
        density={"count": np.arange(store.n_gaussians, dtype=np.float64)},
        train_state={"best_metric": 1.5, "stale_evals": 0, "stopped_early": False},
    )


def _header(data: bytes) -> dict:
    _, _, length = struct.unpack_from("<8sII", data)
    return json.loads(data[16 : 16 + length])


@pytest.mark.parametrize("pipeline", ["wrfgs", "wrfgsplus"])
def test_round_trip(tmp_path, pipeline):
    ckpt = _checkpoint(pipeline=pipeline)
    path = ckpt.save(tmp_path / "model.wrfgs")
    restored = Checkpoint.load(path)
    assert restored.task == "rssi"
    assert restored.config == ckpt.config
    assert restored.step == 7
    assert restored.store.params.keys() == ckpt.store.params.keys()
    for name, value in ckpt.store.params.items():
        np.testing.assert_array_equal(restored.store.params[name], value)
    np.testing.assert_array_equal(restored.rx, SMALL_SCENE.rx)
    np.testing.assert_array_equal(restored.optimizer[f"adam.m.{MU}"], ckpt.optimizer[f"adam.m.{MU}"])
    np.testing.assert_array_equal(restored.density["count"], ckpt.density["count"])
    assert restored.train_state == ckpt.train_state
    assert restored.to_bytes() == ckpt.to_bytes()


def test_bytes_are_deterministic():
    a = _checkpoint().to_bytes()
    b = _checkpoint().to_bytes()
    assert a == b
    assert a[:8] == b"WRFGSCKP"
    header = _header(a)
    names = [entry[0] for entry in header["arrays"]]
    assert names == sorted(names)
    assert header["pipeline"] == "wrfgsplus"


def test_runtime_fields_do_not_change_bytes():
    ckpt = _checkpoint()
    data = ckpt.to_bytes()
    ckpt.config = ckpt.config.model_copy(update={"threads": 6})
    assert ckpt.to_bytes() == data


@pytest.mark.parametrize(
    ("mutate", "match"),
    [
        (lambda d: b"NOTACKPT" + d[8:], "magic"),
        (lambda d: d[:8] + struct.pack("<I", 9) + d[12:], "version"),
        (lambda d: d[:10], "truncated"),
        (lambda d: d[:-8], "past the end"),
    ],
)
def test_corruption_is_detected(mutate, match):
    data = _checkpoint().to_bytes()
    with pytest.raises(CheckpointError, match=match):
        Checkpoint.from_bytes(mutate(data))


def _rewrite_header(data: bytes, header: dict) -> bytes:
    _, _, length = struct.unpack_from("<8sII", data)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return data[:12] + struct.pack("<I", len(head)) + head + data[16 + length :]


def test_tampered_config_is_detected():
    data = _checkpoint().to_bytes()
    header = _header(data)
    header["config"]["train"]["eta"] = 0.9
    with pytest.raises(CheckpointError, match="hash"):
        Checkpoint.from_bytes(_rewrite_header(data, header))


def test_unknown_task_is_rejected():
    data = _checkpoint().to_bytes()
    header = _header(data)
    header["task"] = "radar"
    with pytest.raises(CheckpointError, match="task"):
        Checkpoint.from_bytes(_rewrite_header(data, header))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="can not read"):
        Checkpoint.load(tmp_path / "absent.wrfgs")
