import numpy as np
import pytest

from offlinelab.mdp import make_figure1_mdp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fig1():
    return make_figure1_mdp(0.3, 0.9)
