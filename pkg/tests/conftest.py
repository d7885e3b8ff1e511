import numpy as np
import pytest

from bundleflow.flow import FlowConfig, VectorField
from bundleflow.nn import DenseNet
from bundleflow.valuations import XorValuation


def constant_field(Q, eta_w=0.0, eta_b=1.0):
    """Field with a constant Q matrix and eta(t) = eta_w * t + eta_b."""
    Q = np.asarray(Q, dtype=float)
    m = Q.shape[0]
    qnet = DenseNet([m, m * m], weights=[(np.zeros((m, m * m)), Q.reshape(-1))])
    etanet = DenseNet([1, 1], weights=[(np.array([[eta_w]]), np.array([eta_b]))])
    return VectorField(qnet, etanet)


def small_field(m, seed=0, width=16, depth=2, scale=1.0):
    rng = np.random.default_rng(seed)
    vf = VectorField.create(m, rng, [width] * depth, [width])
    if scale != 1.0:
        for p in vf.params:
            p *= scale
    return vf


def random_valuation(rng, m, max_atoms=4, v_max=100.0):
    a = int(rng.integers(1, max_atoms + 1))
    bundles = (rng.random((a, m)) < 0.4).astype(np.uint8)
    for j in np.flatnonzero(bundles.sum(axis=1) == 0):
        bundles[j, rng.integers(0, m)] = 1
    return XorValuation(bundles, rng.uniform(0, v_max, a))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def flow_cfg():
    return FlowConfig()
