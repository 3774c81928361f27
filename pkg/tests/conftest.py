import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sfmgnet.datasets import SyntheticConfig, generate_synthetic
from sfmgnet.features import FeatureBatch, FeatureConfig, extract_arrays

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_corpus():
    """Eight short simulated passageway runs."""
    return generate_synthetic(SyntheticConfig(runs=8, duration_s=15.0, seed=123))


@pytest.fixture(scope="session")
def small_arrays(small_corpus):
    """Concatenated features and force targets of ``small_corpus``."""
    parts = [extract_arrays(ds, FeatureConfig()) for ds in small_corpus]
    parts = [(b, y) for b, y, _ in parts if len(b)]
    return FeatureBatch.concat([b for b, _ in parts]), np.concatenate([y for _, y in parts])


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
