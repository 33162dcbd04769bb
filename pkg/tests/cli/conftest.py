"""Fixtures for command-line tests."""

import logging

import pytest


@pytest.fixture(autouse=True)
def restore_logging():
    """Undo the root handlers main() installs."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)
