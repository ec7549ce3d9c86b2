"""Tests for log.py functionality."""

import logging

import pytest

from romcontrol import log as logs


def test_names_are_nested_under_package() -> None:
    nested = logs.get_logger("trainer")
    root = logs.get_logger()
    assert isinstance(nested, logs.BraceAdapter) and isinstance(root, logs.BraceAdapter)
    assert nested.logger.name == "romcontrol.trainer"
    assert root.logger.name == "romcontrol"


def test_brace_formatting(caplog: pytest.LogCaptureFixture) -> None:
    log = logs.get_logger("test")
    with caplog.at_level(logging.INFO, logger="romcontrol"):
        log.info("Step {0}: loss {1:.2f}", 3, 0.25)
        log.info("100% literal {braces} without arguments")
    assert caplog.messages == ["Step 3: loss 0.25", "100% literal {braces} without arguments"]


def test_disabled_level_is_not_rendered(caplog: pytest.LogCaptureFixture) -> None:
    log = logs.get_logger("test")
    with caplog.at_level(logging.WARNING, logger="romcontrol"):
        log.debug("{0}", object())
    assert caplog.messages == []
