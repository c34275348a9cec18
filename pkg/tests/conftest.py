import numpy as np
import pytest

from normalforge.geometry import PointCloud, build_index
from normalforge.synth import SynthShape, synth_generate


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def noisy_cube():
    return synth_generate(SynthShape("cube", 2000, 0.002, seed=3))


@pytest.fixture(scope="session")
def small_cloud():
    rng = np.random.default_rng(7)
    pts = rng.random((400, 3))
    return PointCloud(pts, name="random")


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    return request.param


@pytest.fixture
def index_of():
    return build_index
