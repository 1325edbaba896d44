import numpy as np
import pytest

from stepcrack.tensor3 import random_rotations


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_F(rng, n, det_lo=0.1, det_hi=10.0):
    """Random F = R diag(s) Q^T with det in (det_lo, det_hi)."""
    R = random_rotations(n, rng)
    Q = random_rotations(n, rng)
    s = np.exp(rng.uniform(-0.8, 0.8, size=(n, 3)))
    target = np.exp(rng.uniform(np.log(det_lo), np.log(det_hi), size=n))
    s *= (target / s.prod(axis=1))[:, None] ** (1.0 / 3.0)
    return np.einsum("nij,nj,nkj->nik", R, s, Q)
