import os

import pytest
from hypothesis import HealthCheck, settings

from helpers import small_pool

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def sim_pool():
    p = small_pool(scrub_async=False)
    yield p
    p.close()


@pytest.fixture
def file_pool(tmp_path):
    p = small_pool(path=tmp_path / "t.pool", scrub_async=False)
    yield p
    p.close()
