"""Brace-format logging.

Components take a ``log`` argument and call it with ``str.format`` placeholders::

    log.debug("Step {0}: loss {1:.4g}", step, loss)

Messages are only rendered when the level is enabled.
"""

import logging
from collections.abc import Mapping
from typing import Any

ROOT_LOGGER = "romcontrol"


class _BraceMessage:
    def __init__(self, fmt: str, args: tuple[Any, ...], kwargs: Mapping[str, Any]) -> None:
        self.fmt = fmt
        self.args = args
        self.kwargs = kwargs

    def __str__(self) -> str:
        if not self.args and not self.kwargs:
            return self.fmt
        return self.fmt.format(*self.args, **self.kwargs)


class BraceAdapter(logging.LoggerAdapter):  # type: ignore[type-arg]
    """Logger adapter that formats messages with ``str.format`` positional arguments."""

    def log(self, level: int, msg: object, *args: Any, **kwargs: Any) -> None:
        if self.isEnabledFor(level):
            log_kwargs = {
                key: kwargs.pop(key)
                for key in ("exc_info", "stack_info", "stacklevel", "extra")
                if key in kwargs
            }
            self.logger._log(level, _BraceMessage(str(msg), args, kwargs), (), **log_kwargs)


def get_logger(name: str = ROOT_LOGGER) -> logging.Logger:
    """Return a brace-format logger under the romcontrol namespace.

    Args:
        name: Logger name. Names outside the package namespace are nested under it.

    Returns:
        Logger-compatible adapter.
    """
    if name != ROOT_LOGGER and not name.startswith(ROOT_LOGGER + "."):
        name = f"{ROOT_LOGGER}.{name}"
    return BraceAdapter(logging.getLogger(name), {})  # type: ignore[return-value]


def configure(verbose: int = 0) -> None:
    """Attach a stderr handler to the package logger.

    Args:
        verbose: 0 for warnings, 1 for info, 2 or more for debug.
    """
    level = logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(level)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
