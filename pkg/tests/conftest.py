import numpy as np
import pytest
import torch

from corrmae.synthdata import SceneConfig, generate_scene


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def make_scene(n=20, outlier_ratio=0.0, noise=0.0, seed=0, **kw):
    return generate_scene(SceneConfig(n_points=n, outlier_ratio=outlier_ratio, noise_sigma=noise, seed=seed, **kw))


@pytest.fixture
def clean_scene():
    return make_scene(20, 0.0, 0.0, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def scalar_sym_dist(x, y, E):
    """Hand-evaluated symmetric epipolar distance for one pair."""
    xh = [x[0], x[1], 1.0]
    yh = [y[0], y[1], 1.0]
    Ex = [sum(E[i][j] * xh[j] for j in range(3)) for i in range(3)]
    Ety = [sum(E[j][i] * yh[j] for j in range(3)) for i in range(3)]
    alg = sum(yh[i] * Ex[i] for i in range(3))
    return alg * alg * (1.0 / (Ex[0] ** 2 + Ex[1] ** 2) + 1.0 / (Ety[0] ** 2 + Ety[1] ** 2))
