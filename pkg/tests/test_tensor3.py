import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepcrack.errors import ConditioningError, InvalidInputError, InvertedElementError
from stepcrack.tensor3 import (
    eig_sym3,
    invariants3,
    polar_decompose,
    polar_decompose_masked,
    random_rotations,
    rotation_matrix,
)

from conftest import random_F


def _orth_err(q):
    return np.abs(np.swapaxes(q, -1, -2) @ q - np.eye(3)).max()


def test_eig_identity():
    e = eig_sym3(np.eye(3))
    np.testing.assert_array_equal(e.values, [1.0, 1.0, 1.0])
    assert _orth_err(e.vectors) < 1e-12
    # sign convention: first significant component of every vector positive
    for k in range(3):
        v = e.vectors[:, k]
        assert v[np.argmax(np.abs(v) > 1e-12)] > 0


def test_eig_diagonal():
    e = eig_sym3(np.diag([0.25, 4.0, 1.0]))
    np.testing.assert_allclose(e.values, [4.0, 1.0, 0.25], rtol=0, atol=1e-15)
    np.testing.assert_allclose(np.abs(e.vectors), np.eye(3)[:, [1, 2, 0]], atol=1e-15)


def test_eig_round_trip(rng):
    Q = random_rotations(1, rng)[0]
    M = Q @ np.diag([3.0, 2.0, 1.0]) @ Q.T
    e = eig_sym3(M)
    np.testing.assert_allclose(e.values, [3.0, 2.0, 1.0], atol=1e-12)
    for k in range(3):
        assert abs(abs(e.vectors[:, k] @ Q[:, k]) - 1.0) < 1e-10


def test_eig_rejects_nonfinite_and_asymmetric():
    with pytest.raises(InvalidInputError):
        eig_sym3(np.full((3, 3), np.nan))
    m = np.eye(3)
    m[0, 1] = 1e-3
    with pytest.raises(InvalidInputError):
        eig_sym3(m)


def test_eig_accepts_tiny_asymmetry():
    m = np.diag([2.0, 1.0, 0.5])
    m[0, 1] += 5e-10
    e = eig_sym3(m)
    np.testing.assert_allclose(e.values, [2.0, 1.0, 0.5], atol=1e-9)


def test_eig_sign_convention_is_deterministic(rng):
    Q = random_rotations(50, rng)
    M = Q @ np.diag([3.0, 2.0, 1.0]) @ np.swapaxes(Q, -1, -2)
    a = eig_sym3(M)
    b = eig_sym3(M.copy())
    np.testing.assert_array_equal(a.vectors, b.vectors)
    lead = np.take_along_axis(a.vectors, np.argmax(np.abs(a.vectors) > 1e-12, axis=1)[:, None, :], axis=1)
    assert np.all(lead > 0)


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    l1=st.floats(-10, 10),
    gap1=st.sampled_from([0.0, 1e-8, 1e-6, 1e-3, 1.0, 5.0]),
    gap2=st.sampled_from([0.0, 1e-8, 1e-6, 1e-3, 1.0, 5.0]),
)
def test_eig_property_reconstruction(seed, l1, gap1, gap2):
    rng = np.random.default_rng(seed)
    lam = np.array([l1, l1 - gap1, l1 - gap1 - gap2])
    Q = random_rotations(1, rng)[0]
    M = Q @ np.diag(lam) @ Q.T
    M = 0.5 * (M + M.T)
    e = eig_sym3(M)
    assert np.all(np.diff(e.values) <= 0)
    assert _orth_err(e.vectors) <= 1e-10
    scale = max(np.abs(M).max(), 1e-300)
    assert np.abs(e.reconstruct() - M).max() <= 1e-9 * scale


def test_eig_stack_matches_single(rng):
    A = rng.standard_normal((20, 3, 3))
    S = A + np.swapaxes(A, -1, -2)
    stack = eig_sym3(S)
    for i in range(20):
        one = eig_sym3(S[i])
        np.testing.assert_array_equal(one.values, stack.values[i])
        np.testing.assert_array_equal(one.vectors, stack.vectors[i])


def test_invariants_examples():
    assert invariants3(np.eye(3)) == (3.0, 3.0, 1.0)
    F = np.diag([2.0, 0.5, 1.0])
    assert invariants3(F @ F.T)[0] == pytest.approx(5.25, abs=1e-15)
    lam = 2.0
    F = np.diag([lam, lam**-0.5, lam**-0.5])
    assert invariants3(F @ F.T)[0] == pytest.approx(5.0, rel=1e-15)


def test_invariants_match_eigenvalues(rng):
    F = random_F(rng, 500)
    B = F @ np.swapaxes(F, -1, -2)
    i1, i2, i3 = invariants3(B)
    lam = eig_sym3(B).values
    np.testing.assert_allclose(i1, lam.sum(axis=1), rtol=1e-9)
    np.testing.assert_allclose(
        i2, lam[:, 0] * lam[:, 1] + lam[:, 1] * lam[:, 2] + lam[:, 0] * lam[:, 2], rtol=1e-9
    )
    np.testing.assert_allclose(i3, lam.prod(axis=1), rtol=1e-9)


def test_polar_identity_rotation_stretch():
    p = polar_decompose(np.eye(3))
    for m in (p.R, p.U, p.V):
        np.testing.assert_allclose(m, np.eye(3), atol=1e-15)
    Rz = rotation_matrix((0, 0, 1), np.pi / 2)
    p = polar_decompose(Rz)
    np.testing.assert_allclose(p.R, Rz, atol=1e-14)
    np.testing.assert_allclose(p.U, np.eye(3), atol=1e-14)
    np.testing.assert_allclose(p.V, np.eye(3), atol=1e-14)
    D = np.diag([2.0, 0.5, 1.0])
    p = polar_decompose(D)
    np.testing.assert_allclose(p.R, np.eye(3), atol=1e-14)
    np.testing.assert_allclose(p.U, D, atol=1e-14)
    np.testing.assert_allclose(p.V, D, atol=1e-14)


def test_polar_round_trip_rotated_stretch(rng):
    R0 = random_rotations(1, rng)[0]
    D = np.diag([1.5, 1.0, 1 / 1.5])
    p = polar_decompose(R0 @ D)
    np.testing.assert_allclose(p.R, R0, atol=1e-12)
    np.testing.assert_allclose(p.U, D, atol=1e-12)


def test_polar_errors():
    with pytest.raises(InvertedElementError):
        polar_decompose(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvertedElementError):
        polar_decompose(np.zeros((3, 3)))
    with pytest.raises(ConditioningError):
        polar_decompose(np.diag([1e5, 1e5, 1e-5]))
    pf, inv, ill = polar_decompose_masked(np.stack([np.eye(3), -np.eye(3), np.diag([1e5, 1e5, 1e-5])]))
    assert inv.tolist() == [False, True, False]
    assert ill.tolist() == [False, False, True]
    assert np.all(np.isnan(pf.R[1:]))


def test_polar_invariants_10k(rng):
    F = random_F(rng, 10_000)
    p = polar_decompose(F)
    scale = np.abs(F).max(axis=(1, 2))
    assert np.all(np.abs(p.R @ p.U - F).max(axis=(1, 2)) <= 1e-9 * scale)
    assert np.all(np.abs(p.V @ p.R - F).max(axis=(1, 2)) <= 1e-9 * scale)
    assert _orth_err(p.R) <= 1e-10
    assert np.abs(np.linalg.det(p.R) - 1.0).max() <= 1e-10
    for S in (p.U, p.V):
        assert np.abs(S - np.swapaxes(S, -1, -2)).max() <= 1e-12 * np.abs(S).max()
        assert np.all(np.linalg.eigvalsh(S) > 0)


def test_rotation_helpers(rng):
    Q = random_rotations(100, rng)
    assert _orth_err(Q) < 1e-12
    np.testing.assert_allclose(np.linalg.det(Q), 1.0, atol=1e-12)
    R = rotation_matrix((0, 0, 1), np.pi / 6)
    np.testing.assert_allclose(R @ [1, 0, 0], [np.cos(np.pi / 6), np.sin(np.pi / 6), 0], atol=1e-15)
