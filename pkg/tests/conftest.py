import os

import numpy as np
import pytest

from perturblab import experiments
from perturblab.data import gen_split, gen_synthetic
from perturblab.network import default_spec, init_model


@pytest.fixture(scope="session")
def default_data():
    return gen_synthetic()


@pytest.fixture(scope="session")
def trained_model(request):
    """Reference model on the frozen synthetic data, cached between runs.

    $PERTURBLAB_CACHE wins over pytest's cache directory.
    """
    cache = os.environ.get("PERTURBLAB_CACHE") or request.config.cache.mkdir("perturblab")
    return experiments.reference_model(cache_dir=cache)


@pytest.fixture(scope="session")
def small_split():
    return gen_split(200, 5, "test")


@pytest.fixture
def fresh_model():
    return init_model(default_spec(), 3)


@pytest.fixture
def batch4():
    ds = gen_split(4, 2, "train")
    return ds.images, ds.labels.astype(np.int64)


# criterion number -> (passed, title, seconds, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, float, str]] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, secs, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title} ({secs:.1f} s) {detail}")
