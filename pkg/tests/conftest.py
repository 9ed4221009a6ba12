import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nestfl.nn import Dataset, ElasticArch, init_model  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def arch():
    return ElasticArch(5, 3, 2, 3, 8, (1, 2, 3), (2, 4, 8))


@pytest.fixture
def model(arch):
    return init_model(arch, 7)


@pytest.fixture
def batch(arch):
    rng = np.random.default_rng(3)
    return Dataset(rng.normal(size=(12, arch.input_dim)), rng.integers(0, arch.output_dim, 12))
