import importlib
import logging

import pytest
import structlog

import wrfgs.log
from wrfgs.cli import EXIT_INVALID, main
from wrfgs.log import StructLogHandler, capture_stdlib_logging, configure_logging


@pytest.fixture
def root_handlers(monkeypatch):
    root = logging.getLogger()
    handlers = [logging.NullHandler()]
    monkeypatch.setattr(root, "handlers", handlers)
    return handlers


def test_import_leaves_root_logger_alone(root_handlers):
    before = list(root_handlers)
    importlib.reload(wrfgs.log)
    assert logging.getLogger().handlers == before


def test_capture_is_idempotent(root_handlers):
    handler = capture_stdlib_logging()
    assert isinstance(handler, StructLogHandler)
    assert capture_stdlib_logging() is handler
    assert logging.getLogger().handlers == [handler]


def test_cli_routes_stdlib_logging(root_handlers, tmp_path):
    argv = ["render", "--checkpoint", str(tmp_path / "missing.ckpt"), "--tx", "1", "1", "1"]
    assert main([*argv, "--out", str(tmp_path / "out")]) == EXIT_INVALID
    (handler,) = logging.getLogger().handlers
    assert isinstance(handler, StructLogHandler)


def test_quiet_exception_drops_traceback():
    configure_logging("DEBUG", verbose_exception=False)
    try:
        with structlog.testing.capture_logs() as logs:
            try:
                raise RuntimeError("boom")
            except RuntimeError:
                structlog.get_logger("wrfgs").exception("failed")
        assert logs == [{"event": "failed", "log_level": "error"}]
    finally:
        structlog.reset_defaults()


def test_unknown_level_name_means_info():
    configure_logging("LOUD")
    try:
        with structlog.testing.capture_logs() as logs:
            structlog.get_logger("wrfgs").debug("hidden")
            structlog.get_logger("wrfgs").info("shown")
        assert [entry["event"] for entry in logs] == ["shown"]
    finally:
        structlog.reset_defaults()
