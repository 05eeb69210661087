import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from synthgen import generate_sources, mix  # noqa: E402


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(20240601))


@pytest.fixture(scope="session")
def sources():
    return generate_sources(1)


@pytest.fixture(scope="session")
def mixture(sources):
    return mix(sources)
