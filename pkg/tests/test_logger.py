"""
Unit tests for flexfl/logger.py.
"""

import json
import logging
import os

import pytest

from flexfl.logger import (
    ColoredFormatter,
    configure,
    get_log_file_path,
    get_logger,
    log_event,
    set_level,
    temporary_log_level,
)


@pytest.fixture
def restore_logging():
    """Put the quiet test configuration back after the test."""
    yield
    configure(level="WARNING", console_enabled=False)


class TestGetLogger:
    """Tests for get_logger()."""

    def test_namespaced(self):
        assert get_logger('allocator').name == 'flexfl.allocator'
        assert get_logger('').name == 'flexfl'

    def test_cached(self):
        assert get_logger('phy') is get_logger('phy')

    def test_does_not_propagate(self):
        assert get_logger('harness').propagate is False


class TestLevels:
    """Tests for set_level() and temporary_log_level."""

    def test_temporary_level_restored(self):
        logger = get_logger('allocator')
        before = logger.level
        with temporary_log_level('ERROR', 'allocator'):
            assert logger.level == logging.ERROR
        assert logger.level == before

    def test_temporary_level_all_loggers(self):
        logger = get_logger('fl_core')
        before = logger.level
        with temporary_log_level(logging.CRITICAL):
            assert logger.level == logging.CRITICAL
        assert logger.level == before

    def test_unknown_logger_is_ignored(self):
        before = get_logger('phy').level
        set_level('DEBUG', 'no_such_component')
        assert get_logger('phy').level == before

    def test_unknown_level_name_falls_back(self, restore_logging):
        configure(level="LOUD", console_enabled=False)
        assert get_logger('phy').level == logging.INFO


class TestFiles:
    """Tests for the text and JSON log files."""

    def test_no_file_by_default(self):
        assert get_log_file_path() is None

    def test_log_file_path(self, temp_dir, restore_logging):
        configure(level="INFO", log_dir=temp_dir, console_enabled=False, file_enabled=True)
        path = get_log_file_path()
        assert path == os.path.join(os.path.abspath(temp_dir), 'flexfl.log')
        get_logger('harness').info("written")
        with open(path, encoding='utf-8') as f:
            assert "written" in f.read()

    def test_json_event_fields(self, temp_dir, restore_logging):
        configure(level="INFO", log_dir=temp_dir, console_enabled=False, json_enabled=True)
        log_event('fl_core', "round 3 done", round=3, loss=0.5, num_selected=4)
        with open(os.path.join(temp_dir, 'flexfl.json.log'), encoding='utf-8') as f:
            record = json.loads(f.readlines()[-1])
        assert record['logger'] == 'flexfl.fl_core'
        assert record['message'] == "round 3 done"
        assert record['extra'] == {'round': 3, 'loss': 0.5, 'num_selected': 4}


class TestColoredFormatter:
    """Tests for ColoredFormatter without colors."""

    def test_plain_layout(self):
        record = logging.LogRecord('flexfl.phy', logging.WARNING, __file__, 1, "deep fade", None, None)
        text = ColoredFormatter(use_colors=False).format(record)
        assert "WARNING" in text
        assert "[flexfl.phy] deep fade" in text
