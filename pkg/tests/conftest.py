import numpy as np
import pytest

from tomoforge import NufftPlan, ScanGeometry, polar_sampling


def uniform_angles(count):
    return np.linspace(0.0, np.pi, count, endpoint=False)


def make_plan(side, n_angles, bins=None, tol=1e-6):
    geom = ScanGeometry(angles=uniform_angles(n_angles),
                        detector_bins=bins or side, image_side=side)
    sampling = polar_sampling(geom)
    return geom, sampling, NufftPlan(side, sampling, tol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
