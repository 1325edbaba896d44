"""Small 3-vector / 3x3 tensor kernel.

Every function accepts a single matrix of shape ``(3, 3)`` or a stack of
shape ``(n, 3, 3)`` and returns arrays of the matching leading shape.
The tolerances below are module constants and are deliberately not
configurable; downstream tests are pinned to them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConditioningError, InvalidInputError, InvertedElementError

SYMMETRY_TOL = 1e-9
"""Largest accepted ``|M - M^T|`` entry for an input declared symmetric."""

SIGN_TOL = 1e-12
"""Components smaller than this are treated as zero by the sign convention."""

MIN_STRETCH_EIG = 1e-8
"""Smallest admissible eigenvalue of ``F^T F`` in the polar decomposition."""


@dataclass(frozen=True)
class EigenSym3:
    """Eigen-decomposition of a symmetric 3x3 tensor (or stack of them).

    ``values[..., k]`` is the k-th eigenvalue (descending) and
    ``vectors[..., :, k]`` the matching unit eigenvector.
    """

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        q = self.vectors
        return np.einsum("...ik,...k,...jk->...ij", q, self.values, q)


@dataclass(frozen=True)
class PolarFactors:
    """``F = R U = V R`` with R a proper rotation and U, V symmetric positive definite."""

    R: np.ndarray
    U: np.ndarray
    V: np.ndarray


def _as_stack(m) -> tuple[np.ndarray, bool]:
    a = np.asarray(m, dtype=float)
    if a.shape[-2:] != (3, 3):
        raise InvalidInputError(f"expected (..., 3, 3) array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("non-finite tensor component")
    single = a.ndim == 2
    return a.reshape(-1, 3, 3), single


def _apply_sign_convention(vecs: np.ndarray) -> np.ndarray:
    # first component with |v_i| > SIGN_TOL is made positive, column by column
    big = np.abs(vecs) > SIGN_TOL
    first = np.argmax(big, axis=-2)  # (n, 3)
    lead = np.take_along_axis(vecs, first[:, None, :], axis=-2)[:, 0, :]
    sign = np.where(lead < 0.0, -1.0, 1.0)
    return vecs * sign[:, None, :]


def eig_sym3(m) -> EigenSym3:
    """Eigenvalues (descending) and orthonormal eigenvectors of symmetric tensors.

    The input is symmetrized as ``(M + M^T) / 2`` after checking that the
    asymmetry is below :data:`SYMMETRY_TOL`.  Eigenvector signs follow a
    deterministic convention: the first component whose magnitude exceeds
    :data:`SIGN_TOL` is positive.
    """
    a, single = _as_stack(m)
    if np.any(np.abs(a - np.swapaxes(a, -1, -2)) > SYMMETRY_TOL * np.maximum(1.0, np.abs(a).max())):
        raise InvalidInputError("matrix is not symmetric")
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    w, q = np.linalg.eigh(a)
    w = w[:, ::-1]
    q = q[:, :, ::-1]
    # re-orthogonalise so nearly degenerate pairs stay orthonormal
    v1 = q[:, :, 0]
    v1 = v1 / np.linalg.norm(v1, axis=-1, keepdims=True)
    v2 = q[:, :, 1] - np.sum(q[:, :, 1] * v1, axis=-1, keepdims=True) * v1
    v2 = v2 / np.linalg.norm(v2, axis=-1, keepdims=True)
    v3 = np.cross(v1, v2)
    v3 = v3 * np.where(np.sum(v3 * q[:, :, 2], axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    q = _apply_sign_convention(np.stack([v1, v2, v3], axis=-1))
    if single:
        return EigenSym3(w[0], q[0])
    return EigenSym3(w, q)


def invariants3(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Principal invariants ``(I1, I2, I3)`` = (trace, second invariant, determinant)."""
    a, single = _as_stack(m)
    tr = np.trace(a, axis1=-2, axis2=-1)
    tr2 = np.einsum("nij,nji->n", a, a)
    i2 = 0.5 * (tr * tr - tr2)
    i3 = np.linalg.det(a)
    if single:
        return float(tr[0]), float(i2[0]), float(i3[0])
    return tr, i2, i3


def polar_decompose_masked(f) -> tuple[PolarFactors, np.ndarray, np.ndarray]:
    """Batched polar decomposition that never raises on per-matrix failures.

    Returns the factors, a boolean ``inverted`` mask (``det F <= 0``) and a
    boolean ``ill_conditioned`` mask (smallest eigenvalue of ``F^T F`` below
    :data:`MIN_STRETCH_EIG`).  Factors for failed entries are NaN.
    """
    a, _ = _as_stack(f)
    n = a.shape[0]
    det = np.linalg.det(a)
    c = np.einsum("nki,nkj->nij", a, a)
    c = 0.5 * (c + np.swapaxes(c, -1, -2))
    lam, q = np.linalg.eigh(c)
    inverted = ~(det > 0.0)
    ill = ~inverted & (lam[:, 0] < MIN_STRETCH_EIG)
    bad = inverted | ill
    lam = np.where(bad[:, None], 1.0, lam)
    s = np.sqrt(lam)
    u = np.einsum("nik,nk,njk->nij", q, s, q)
    u_inv = np.einsum("nik,nk,njk->nij", q, 1.0 / s, q)
    r = a @ u_inv
    v = r @ u @ np.swapaxes(r, -1, -2)
    v = 0.5 * (v + np.swapaxes(v, -1, -2))
    nan = np.full((n, 3, 3), np.nan)
    r = np.where(bad[:, None, None], nan, r)
    u = np.where(bad[:, None, None], nan, u)
    v = np.where(bad[:, None, None], nan, v)
    return PolarFactors(r, u, v), inverted, ill


def polar_decompose(f) -> PolarFactors:
    """Polar factors ``R, U, V`` of ``F`` via the spectral square root of ``F^T F``.

    Raises
    ------
    InvertedElementError
        If ``det F <= 0``.
    ConditioningError
        If the smallest eigenvalue of ``F^T F`` is below :data:`MIN_STRETCH_EIG`.
    """
    a, single = _as_stack(f)
    pf, inverted, ill = polar_decompose_masked(a)
    if np.any(inverted):
        raise InvertedElementError(f"det F <= 0 for {int(inverted.sum())} tensor(s)")
    if np.any(ill):
        raise ConditioningError(f"near-singular stretch for {int(ill.sum())} tensor(s)")
    if single:
        return PolarFactors(pf.R[0], pf.U[0], pf.V[0])
    return pf


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rotation by ``angle`` radians about ``axis`` (Rodrigues formula)."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniformly distributed proper rotations (QR of Gaussian matrices)."""
    g = rng.standard_normal((n, 3, 3))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[:, None, :]
    flip = np.linalg.det(q) < 0
    q[flip, :, 0] *= -1.0
    return q
