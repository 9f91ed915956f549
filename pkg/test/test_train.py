import json
from dataclasses import replace

import numpy as np
import pytest
from fake_scene import make_dataset, small_config

from wrfgs.checkpoint import Checkpoint
from wrfgs.exceptions import CheckpointError, ConfigError, NumericalAbort, TaskMismatchError
from wrfgs.train.loop import Trainer, TrainState, select_train_records, train


class Interrupted(Exception):
    pass


@pytest.fixture(scope="module")
def spectrum_data(tmp_path_factory):
    return make_dataset(tmp_path_factory.mktemp("spectrum"))


@pytest.fixture(scope="module")
def rssi_data(tmp_path_factory):
    return make_dataset(tmp_path_factory.mktemp("rssi"), small_config("rssi"))


@pytest.fixture(scope="module")
def csi_data(tmp_path_factory):
    return make_dataset(tmp_path_factory.mktemp("csi"), small_config("csi"))


@pytest.mark.parametrize("pipeline", ["wrfgs", "wrfgsplus"])
def test_smoke_spectrum(tmp_path, spectrum_data, pipeline):
    result = train(spectrum_data, small_config(pipeline=pipeline), tmp_path)
    assert len(result.losses) == 3
    assert all(np.isfinite(t.total) for t in result.losses)
    assert result.checkpoint.step == 3
    assert result.checkpoint_path.is_file()
    assert result.eval_report is not None
    assert result.eval_report.record_ids == [r.id for r in spectrum_data.eval_records]
    restored = Checkpoint.load(result.checkpoint_path)
    assert restored.task == "spectrum"
    assert restored.store.n_gaussians == result.checkpoint.store.n_gaussians


@pytest.mark.parametrize("pipeline", ["wrfgs", "wrfgsplus"])
def test_smoke_rssi_and_csi(tmp_path, rssi_data, csi_data, pipeline):
    rssi = train(rssi_data, small_config("rssi", pipeline), tmp_path / "rssi")
    assert rssi.eval_report is not None
    assert len(rssi.eval_report.rssi_abs_error_db) == 2
    csi = train(csi_data, small_config("csi", pipeline), tmp_path / "csi")
    assert csi.eval_report is not None
    assert len(csi.eval_report.cea_db) == 2
    assert csi.checkpoint.store.csi_scale != 1.0


def test_loss_log_format(tmp_path, rssi_data):
    result = train(rssi_data, small_config("rssi", iterations=4, log_interval=2), tmp_path)
    lines = result.loss_log.read_text(encoding="utf-8").splitlines()
    assert [line.split()[0] for line in lines] == ["2", "4"]
    for line in lines:
        fields = line.split()
        assert len(fields) == 6
        assert float(fields[1]) == pytest.approx(float(fields[2]))
        assert float(fields[3]) == 0.0
        assert int(fields[4]) == 32
        assert float(fields[5]) >= 0


def test_identical_runs_write_identical_checkpoints(tmp_path, spectrum_data):
    config = small_config(batch=2)
    train(spectrum_data, config, tmp_path / "a")
    train(spectrum_data, config.model_copy(update={"threads": 2}), tmp_path / "b")
    a = (tmp_path / "a" / "checkpoint.wrfgs").read_bytes()
    b = (tmp_path / "b" / "checkpoint.wrfgs").read_bytes()
    assert a == b


@pytest.mark.parametrize("task", ["spectrum", "csi"])
def test_resume_matches_uninterrupted_run(tmp_path, monkeypatch, spectrum_data, csi_data, task):
    dataset = spectrum_data if task == "spectrum" else csi_data
    config = small_config(
        task,
        iterations=4,
        checkpoint_interval=2,
        density={"warmup": 1, "interval": 2, "until": 4, "grad_threshold": 1e-12},
    )
    straight = train(dataset, config, tmp_path / "straight")

    original = Trainer._step

    def stop_at_three(self, iteration, log):
        if iteration == 3:
            raise Interrupted
        return original(self, iteration, log)

    monkeypatch.setattr(Trainer, "_step", stop_at_three)
    with pytest.raises(Interrupted):
        train(dataset, config, tmp_path / "resumed")
    monkeypatch.setattr(Trainer, "_step", original)

    partial = Checkpoint.load(tmp_path / "resumed" / "checkpoint.wrfgs")
    assert partial.step == 2
    resumed = train(dataset, config, tmp_path / "resumed", resume=partial)
    assert len(resumed.losses) == 2
    assert resumed.checkpoint.to_bytes() == straight.checkpoint.to_bytes()
    log = (tmp_path / "resumed" / "loss.log").read_text(encoding="utf-8").splitlines()
    assert [line.split()[0] for line in log] == ["1", "2", "3", "4"]


def test_resume_checks(tmp_path, spectrum_data):
    result = train(spectrum_data, small_config(), tmp_path)
    with pytest.raises(CheckpointError, match="different config"):
        Trainer(small_config(eta=0.5), spectrum_data, tmp_path, resume=result.checkpoint)
    other = replace(result.checkpoint, task="rssi")
    with pytest.raises(TaskMismatchError):
        Trainer(small_config(), spectrum_data, tmp_path, resume=other)


def test_dataset_mismatch(tmp_path, spectrum_data):
    with pytest.raises(TaskMismatchError):
        Trainer(small_config("rssi"), spectrum_data, tmp_path)
    with pytest.raises(ConfigError, match="spectra"):
        Trainer(small_config(height=18), spectrum_data, tmp_path)


def test_nan_loss_aborts_with_dump(tmp_path, rssi_data):
    trainer = Trainer(small_config("rssi"), rssi_data, tmp_path)
    step = trainer.objective.step

    def poisoned(record):
        result = step(record)
        result.terms = replace(result.terms, total=float("nan"))
        return result

    trainer.objective.step = poisoned
    with pytest.raises(NumericalAbort) as exc_info:
        trainer.run()
    dump_path = exc_info.value.dump_path
    assert dump_path == tmp_path / "nan_dump.json"
    dump = json.loads(dump_path.read_text(encoding="utf-8"))
    assert dump["iteration"] == 1
    assert dump["reason"] == "non-finite loss"
    assert dump["loss"]["total"] == "nan"
    assert len(dump["records"]) == 1
    assert dump["n_gaussians"] == 32


def test_early_stop_on_plateau(tmp_path, rssi_data):
    trainer = Trainer(
        small_config("rssi", iterations=5, eval_interval=1, early_stop_patience=1),
        rssi_data,
        tmp_path,
    )
    # 绝对误差不可能低于这个值，第一次评估就算作没有提升
    trainer.state.best_metric = -1e9
    result = trainer.run()
    assert result.stopped_early
    assert len(result.losses) == 1
    assert result.checkpoint.train_state["stopped_early"] is True


def test_train_state_round_trip():
    state = TrainState(best_metric=0.25, stale_evals=3, stopped_early=True)
    assert TrainState.from_json(json.loads(json.dumps(state.to_json()))) == state
    assert TrainState.from_json({}) == TrainState()


def test_select_train_records(rssi_data):
    records = rssi_data.train_records
    assert select_train_records(records, 1.0, 0) == records
    subset = select_train_records(records, 0.5, 0)
    assert len(subset) == 2
    assert [r.id for r in subset] == sorted(r.id for r in subset)
    assert select_train_records(records, 0.5, 0) == subset


@pytest.mark.slow
def test_single_record_overfit(tmp_path):
    config = small_config(n_train=1, n_eval=0, iterations=500, lr_mlp=1e-3, log_interval=100)
    dataset = make_dataset(tmp_path / "data", config)
    result = train(dataset, config, tmp_path / "run")
    assert len(result.losses) == 500
    initial = result.losses[0].total
    assert np.mean([t.total for t in result.losses[-10:]]) < initial
    assert result.eval_report is None
