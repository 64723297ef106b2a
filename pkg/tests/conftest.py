import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# Arbitrary-precision cases can be slow on shared runners; hypothesis
# deadlines would flake, and a modest example count keeps the suite quick.
settings.register_profile(
    "chisum",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("chisum")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
