import numpy as np
import pytest

from flowprior._perf import enable_heap_reuse

enable_heap_reuse()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
