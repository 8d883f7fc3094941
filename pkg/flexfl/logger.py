#!/usr/bin/env python3
"""
FLEXFL - Logging Module
=======================
Centralized logging for the simulator.

Every service module holds a component logger under the ``flexfl``
namespace. Three sinks can be switched on:
- console, with the level name colored when the terminal allows it
- a rotating plain-text file (``flexfl.log``)
- a rotating JSON-lines file (``flexfl.json.log``) keeping ``extra=`` fields,
  which is where per-round records end up

Usage:
    from flexfl.logger import get_logger, log_event
    log = get_logger('allocator')
    log.info("solve finished")
    log_event('fl_core', "round done", round=3, loss=0.41)
"""

import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, Iterator, List, Optional, Union


# =============================================================================
# CONFIGURATION
# =============================================================================

ROOT_NAME = "flexfl"
TEXT_LOG_NAME = "flexfl.log"
JSON_LOG_NAME = "flexfl.json.log"
ROTATE_BYTES = 10 * 1024 * 1024  # 10 MB
ROTATE_KEEP = 5

COMPONENTS = ("phy", "allocator", "fl_core", "convergence", "datasets", "synthetic", "harness", "cli")

FILE_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)-22s | %(message)s"
TIME_FORMAT = "%Y-%m-%d %H:%M:%S"


def _to_level(level: Union[int, str]) -> int:
    if isinstance(level, int):
        return level
    value = logging.getLevelName(level.upper())
    return value if isinstance(value, int) else logging.INFO


@dataclass
class LogSettings:
    """
    Active sink settings.

    File sinks default to off: importing the package or running the test
    suite never writes into the working tree. The CLI enables them from the
    ``[logging]`` config section.
    """
    level: int = logging.INFO
    log_dir: str = "logs"
    console_enabled: bool = True
    file_enabled: bool = False
    json_enabled: bool = False
    use_colors: bool = True
    max_bytes: int = ROTATE_BYTES
    backup_count: int = ROTATE_KEEP

    def path(self, filename: str) -> str:
        directory = os.path.abspath(self.log_dir)
        os.makedirs(directory, exist_ok=True)
        return os.path.join(directory, filename)


_settings = LogSettings()
_loggers: Dict[str, logging.Logger] = {}


# =============================================================================
# FORMATTERS
# =============================================================================

def _terminal_has_color() -> bool:
    if os.getenv("NO_COLOR"):
        return False
    if os.getenv("FORCE_COLOR"):
        return True
    return sys.platform != "win32" and hasattr(sys.stdout, "isatty") and sys.stdout.isatty()


_ESC = "\033["
LEVEL_STYLES = {
    logging.DEBUG: "36",         # cyan
    logging.INFO: "32",          # green
    logging.WARNING: "33",       # yellow
    logging.ERROR: "31",         # red
    logging.CRITICAL: "1;37;41",  # bold white on red
}


def _paint(text: str, style: str) -> str:
    return f"{_ESC}{style}m{text}{_ESC}0m"


class ColoredFormatter(logging.Formatter):
    """Console line: ``time LEVEL [logger] message``, level colored."""

    def __init__(self, use_colors: bool = True, datefmt: str = TIME_FORMAT):
        super().__init__(datefmt=datefmt)
        self.use_colors = use_colors and _terminal_has_color()

    def format(self, record: logging.LogRecord) -> str:
        stamp = self.formatTime(record, self.datefmt)
        level = f"{record.levelname:<8}"
        name = f"[{record.name}]"
        if self.use_colors:
            stamp = _paint(stamp, "2")
            level = _paint(level, LEVEL_STYLES.get(record.levelno, "0"))
            name = _paint(name, "34")
        line = f"{stamp} {level} {name} {record.getMessage()}"
        if record.exc_info:
            trace = self.formatException(record.exc_info)
            line += "\n" + (_paint(trace, "31") if self.use_colors else trace)
        return line


# Attributes every LogRecord carries; anything else came in through extra=.
_RECORD_ATTRS = frozenset(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}


class JsonLinesFormatter(logging.Formatter):
    """One JSON object per record; ``extra=`` fields are nested under ``extra``."""

    def format(self, record: logging.LogRecord) -> str:
        payload: Dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "where": f"{record.module}:{record.funcName}:{record.lineno}",
        }
        if record.exc_info and record.exc_info[0] is not None:
            payload["exception"] = {
                "type": record.exc_info[0].__name__,
                "message": str(record.exc_info[1]),
                "traceback": self.formatException(record.exc_info),
            }
        extra = {k: v for k, v in vars(record).items() if k not in _RECORD_ATTRS and not k.startswith("_")}
        if extra:
            payload["extra"] = extra
        return json.dumps(payload, default=str)


# =============================================================================
# HANDLERS
# =============================================================================

def _rotating(filename: str, formatter: logging.Formatter) -> RotatingFileHandler:
    handler = RotatingFileHandler(
        _settings.path(filename),
        maxBytes=_settings.max_bytes,
        backupCount=_settings.backup_count,
        encoding="utf-8",
    )
    handler.setFormatter(formatter)
    return handler


def _handlers() -> List[logging.Handler]:
    handlers: List[logging.Handler] = []
    if _settings.console_enabled:
        console = logging.StreamHandler(sys.stdout)
        console.setFormatter(ColoredFormatter(use_colors=_settings.use_colors))
        handlers.append(console)
    if _settings.file_enabled:
        handlers.append(_rotating(TEXT_LOG_NAME, logging.Formatter(FILE_FORMAT, TIME_FORMAT)))
    if _settings.json_enabled:
        handlers.append(_rotating(JSON_LOG_NAME, JsonLinesFormatter()))
    for handler in handlers:
        handler.setLevel(_settings.level)
    return handlers


def _attach(name: str) -> logging.Logger:
    logger = logging.getLogger(f"{ROOT_NAME}.{name}" if name else ROOT_NAME)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.setLevel(_settings.level)
    logger.propagate = False
    for handler in _handlers():
        logger.addHandler(handler)
    return logger


# =============================================================================
# PUBLIC API
# =============================================================================

def configure(
    level: Union[int, str] = logging.INFO,
    log_dir: str = "logs",
    console_enabled: bool = True,
    file_enabled: bool = False,
    json_enabled: bool = False,
    use_colors: bool = True,
    max_bytes: int = ROTATE_BYTES,
    backup_count: int = ROTATE_KEEP,
) -> None:
    """
    Replace the active settings and rebuild every logger handed out so far.

    Unknown level names fall back to INFO.

    Example:
        >>> configure(level='DEBUG', file_enabled=True, log_dir='results/logs')
        >>> get_logger('allocator').debug("dual step")
    """
    global _settings
    _settings = LogSettings(
        level=_to_level(level),
        log_dir=log_dir,
        console_enabled=console_enabled,
        file_enabled=file_enabled,
        json_enabled=json_enabled,
        use_colors=use_colors,
        max_bytes=max_bytes,
        backup_count=backup_count,
    )
    for name in list(_loggers):
        _loggers[name] = _attach(name)


def get_logger(name: str = "") -> logging.Logger:
    """
    Logger for a component (``'phy'``, ``'allocator'``, ... see COMPONENTS).

    The empty name gives the package root logger.
    """
    if name not in _loggers:
        _loggers[name] = _attach(name)
    return _loggers[name]


def _apply_level(logger: logging.Logger, level: int) -> None:
    logger.setLevel(level)
    for handler in logger.handlers:
        handler.setLevel(level)


def set_level(level: Union[int, str], logger_name: Optional[str] = None) -> None:
    """Set the level of one component logger, or of all of them when no name is given."""
    level = _to_level(level)
    if logger_name is None:
        _settings.level = level
        for logger in _loggers.values():
            _apply_level(logger, level)
    elif logger_name in _loggers:
        _apply_level(_loggers[logger_name], level)


def enable_debug() -> None:
    set_level(logging.DEBUG)


def disable_console() -> None:
    """Drop console handlers; file sinks keep running."""
    _settings.console_enabled = False
    for logger in _loggers.values():
        for handler in list(logger.handlers):
            if not isinstance(handler, logging.FileHandler):
                logger.removeHandler(handler)


def get_log_file_path() -> Optional[str]:
    """Path of the text log, or None while file logging is off."""
    return _settings.path(TEXT_LOG_NAME) if _settings.file_enabled else None


def log_event(component: str, message: str, level: str = "INFO", **fields: Any) -> None:
    """Log ``message`` on a component logger with ``fields`` as structured extras."""
    get_logger(component).log(_to_level(level), message, extra=fields or None)


@contextmanager
def temporary_log_level(level: Union[int, str], logger_name: Optional[str] = None) -> Iterator[None]:
    """
    Change logger levels for the duration of a block.

    Example:
        >>> with temporary_log_level('WARNING', 'allocator'):
        ...     solve(channels, scenario)
    """
    names = [logger_name] if logger_name is not None else list(_loggers)
    saved = {name: _loggers[name].level for name in names if name in _loggers}
    for name in saved:
        _loggers[name].setLevel(_to_level(level))
    try:
        yield
    finally:
        for name, previous in saved.items():
            if name in _loggers:
                _loggers[name].setLevel(previous)


get_logger("")
