"""
Fixtures for the service layer tests.
"""

import pytest

from finematch.core.models import Checkpoint
from finematch.service.training import init_heads
from finematch.storage.checkpoint import snap_params


@pytest.fixture(scope="session")
def small_checkpoint(small_config):
    heads = init_heads(small_config)
    yield Checkpoint(
        config=small_config, image=snap_params(heads.image), text=snap_params(heads.text)
    )
