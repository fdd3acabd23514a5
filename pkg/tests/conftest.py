import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: desk-scale posterior fits (minutes each); deselect with -m 'not slow'"
    )
