import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

from mfasda.experiments import ExperimentConfig, desk_protocol, generate_data  # noqa: E402
from mfasda.model import Batch, FasModel  # noqa: E402


def small_config(**kw) -> ExperimentConfig:
    """Tiny protocol for fast plumbing tests."""
    base = dict(n_per_class=24, n_val_per_class=8, n_target_per_class=32, source_epochs=2,
                adapter_pretrain_steps=10, adapt_lr=1e-3, k=3, eval_k=3)
    base.update(kw)
    return desk_protocol(**base)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_data(small_config())


@pytest.fixture
def model():
    return FasModel(seed=0)


@pytest.fixture(scope="session")
def source_batch(tiny_data):
    return Batch.from_samples(tiny_data.splits["source_train"][:16])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
