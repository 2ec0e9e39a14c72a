import numpy as np
import pytest

import crossmim.tensor as T


@pytest.fixture(autouse=True)
def clean_tape():
    # op-level tests record straight onto the module tape; keep runs isolated
    T.active_tape().clear()
    yield
    T.active_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
