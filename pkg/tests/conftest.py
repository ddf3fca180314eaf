import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The default configuration trained for its full schedule (shared by the slow tests)."""
    import time

    from tirtrack import harness
    from tirtrack.config import RunConfig

    run_dir = tmp_path_factory.mktemp("default_run")
    start = time.perf_counter()
    result = harness.train(RunConfig(), run_dir)
    return result, run_dir, time.perf_counter() - start
