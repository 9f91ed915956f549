import json
from pathlib import Path

import numpy as np
import pytest

from wrfgs.config import MainConfig, config_hash
from wrfgs.utils import canonical_json, model_hash, nearest_rank_percentile, sha256_file


def test_canonical_json_is_stable():
    a = canonical_json({"b": np.float64(1.5), "a": np.arange(3), "p": Path("x/y")})
    b = canonical_json({"p": Path("x/y"), "a": [0, 1, 2], "b": 1.5})
    assert a == b == '{"a":[0,1,2],"b":1.5,"p":"x/y"}'


def test_canonical_json_serializes_models():
    data = json.loads(canonical_json({"config": MainConfig()}))
    assert data["config"]["train"]["eta"] == 0.2


def test_canonical_json_rejects_nan():
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def test_model_hash_ignores_runtime_fields():
    base = MainConfig()
    threaded = base.model_copy(update={"threads": 8})
    assert config_hash(base) == config_hash(threaded)
    assert model_hash(base) != model_hash(threaded)
    changed = MainConfig.model_validate({"train": {"eta": 0.5}})
    assert config_hash(changed) != config_hash(base)


def test_sha256_file(tmp_path):
    path = tmp_path / "blob.bin"
    path.write_bytes(b"abc")
    assert sha256_file(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


@pytest.mark.parametrize(
    ("percent", "expected"),
    [(0, 1.0), (10, 1.0), (50, 3.0), (90, 5.0), (100, 5.0)],
)
def test_nearest_rank_percentile(percent, expected):
    assert nearest_rank_percentile([5.0, 3.0, 1.0, 4.0, 2.0], percent) == expected


def test_nearest_rank_percentile_errors():
    with pytest.raises(ValueError, match="empty"):
        nearest_rank_percentile([], 50)
    with pytest.raises(ValueError, match="percent"):
        nearest_rank_percentile([1.0], 101)
