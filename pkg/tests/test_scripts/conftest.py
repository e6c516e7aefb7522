"""
The entry point configures structlog globally; restore the defaults after
every test so later tests do not log into a closed capture stream.
"""

import pytest
import structlog


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    structlog.reset_defaults()
