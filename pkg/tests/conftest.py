import numpy as np
import pytest

from hypalign.gyrovector import BallParams


def random_ball_points(rng, n, d, s=1.0, max_frac=0.9):
    """Points with radii uniform in [0, max_frac * s) and random directions."""
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = rng.uniform(0, max_frac * s, size=(n, 1))
    return v * r


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[1.0, np.sqrt(2.0), 3.0], ids=["s1", "s_sqrt2", "s3"])
def ball(request):
    return BallParams(request.param)
