import numpy as np
import pytest

from sucrep.envgen import generate_stitch_dataset, load_maze
from sucrep.trainer import TrainConfig

SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def corridor():
    return load_maze("corridor")


@pytest.fixture(scope="session")
def small_maze():
    return load_maze("medium-coarse")


@pytest.fixture(scope="session")
def small_dataset(small_maze):
    return generate_stitch_dataset(small_maze, 2, 200, 0)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(steps=20, batch_size=16, encoder_hidden=(8,), predictor_hidden=(8,),
                       actor_hidden=(8,), repr_dim=6, record_every=5)


def series_sr(p, gamma, tol=1e-12):
    """Truncated power series sum_t gamma^t P^(t+1)."""
    out = np.zeros_like(p)
    term = p.copy()
    t = 0
    while True:
        out += gamma**t * term
        t += 1
        if gamma**t / (1.0 - gamma) < tol or gamma == 0.0:
            break
        term = term @ p
    return out
