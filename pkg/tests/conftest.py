import numpy as np
import pytest

from twohands.depthio import CameraIntrinsics
from twohands.handmodel import GLOBAL_DOF, HandParams, build_template


@pytest.fixture(scope="session")
def template():
    return build_template()


@pytest.fixture(scope="session")
def camera():
    return CameraIntrinsics()


def random_params(template, rng, shape=0.5, articulation=0.4, rotation=0.5):
    """Both hands in front of the camera, moderately posed."""
    p = HandParams.for_template(template)
    p.beta_left[:] = rng.uniform(-shape, shape, template.n_shape)
    p.beta_right[:] = rng.uniform(-shape, shape, template.n_shape)
    for th, x in ((p.theta_left, -0.1), (p.theta_right, 0.1)):
        th[:3] = (x, 0.05, 0.6) + rng.uniform(-0.01, 0.01, 3)
        th[3:6] = rng.uniform(-rotation, rotation, 3)
        th[GLOBAL_DOF:] = rng.uniform(-articulation, articulation, template.n_articulation)
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
