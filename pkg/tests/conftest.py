import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from partmatch.synth import SynthConfig, generate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = dict(n_identities=8, images_per_identity=4, n_test_identities=4, channels=8,
            height=12, width=4, n_parts=6, n_obstacles=8, seed=3)


@pytest.fixture(scope="session")
def tiny_cfg():
    return SynthConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("tiny")
    generate(tiny_cfg, out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(mod.RESULTS):
            terminalreporter.write_line(mod.RESULTS[k])
