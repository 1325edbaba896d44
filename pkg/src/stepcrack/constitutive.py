"""Incompressible Neo-Hookean energy density and stretch fields per particle."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .kinematics import DefGradField

UNITS = ("J/m^3", "dimensionless", "Pa")

NEGATIVE_ENERGY = 1
"""``ScalarField.flags`` bit: raw-I1 energy below ``-mu * 1e-12`` (volume loss from noise)."""


@dataclass(frozen=True)
class MaterialModel:
    mu: float = 35e3
    use_isochoric: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise InvalidInputError("shear modulus must be positive")

    @property
    def E_eff(self) -> float:
        """Young's modulus of the incompressible solid, 3 * mu."""
        return 3.0 * self.mu


@dataclass
class ScalarField:
    """One scalar (and optionally one vector) per particle.

    ``valid`` marks rows whose value is meaningful; ``flags`` carries
    field-specific diagnostic bits and never invalidates a row by itself.
    """

    name: str
    unit: str
    ids: np.ndarray
    X: np.ndarray
    x: np.ndarray
    values: np.ndarray
    valid: np.ndarray
    vectors: np.ndarray | None = None
    flags: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.unit not in UNITS:
            raise InvalidInputError(f"unknown unit tag {self.unit!r}")
        n = self.ids.size
        if self.values.shape != (n,) or self.valid.shape != (n,):
            raise InvalidInputError("field arrays must align with ids")
        if self.flags is None:
            self.flags = np.zeros(n, dtype=np.int64)
        if np.any(~np.isfinite(self.values[self.valid])):
            raise InvalidInputError("non-finite value at a valid row")

    def __len__(self) -> int:
        return int(self.ids.size)

    def lookup(self, ids) -> np.ndarray:
        """Row indices for ``ids``; raises on ids absent from the field."""
        order = np.argsort(self.ids, kind="stable")
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, ids, sorter=order)
        pos = np.clip(pos, 0, self.ids.size - 1)
        rows = order[pos]
        if ids.size and np.any(self.ids[rows] != ids):
            missing = ids[self.ids[rows] != ids][0]
            raise InvalidInputError(f"particle id {int(missing)} missing from field {self.name!r}")
        return rows


def first_invariant(F: np.ndarray) -> np.ndarray:
    """``tr(F F^T)`` for a stack of tensors."""
    return np.einsum("nij,nij->n", F, F)


def energy_from_F(F: np.ndarray, mu: float, isochoric: bool = False) -> np.ndarray:
    """``W = mu/2 (I1 - 3)`` with ``I1 = tr(F F^T)``; optionally ``I1 -> J^(-2/3) I1``."""
    F = np.asarray(F, dtype=float)
    single = F.ndim == 2
    F = F.reshape(-1, 3, 3)
    i1 = first_invariant(F)
    if isochoric:
        i1 = np.linalg.det(F) ** (-2.0 / 3.0) * i1
    w = 0.5 * mu * (i1 - 3.0)
    return float(w[0]) if single else w


def strain_energy_density(samples: DefGradField, mat: MaterialModel) -> ScalarField:
    """Neo-Hookean strain energy density W (J/m^3) at every particle.

    Invalid deformation-gradient samples propagate as invalid rows.  With the
    raw invariant, volume changes from measurement noise can push W slightly
    below zero; rows below ``-mu * 1e-12`` keep their value and get the
    :data:`NEGATIVE_ENERGY` flag.
    """
    if len(samples) == 0:
        raise InvalidInputError("empty sample collection")
    valid = samples.valid.copy()
    w = np.full(len(samples), np.nan)
    if np.any(valid):
        w[valid] = energy_from_F(samples.F[valid], mat.mu, mat.use_isochoric)
    flags = np.zeros(len(samples), dtype=np.int64)
    flags[valid & (w < -mat.mu * 1e-12)] |= NEGATIVE_ENERGY
    return ScalarField("W", "J/m^3", samples.ids.copy(), samples.X.copy(), samples.x.copy(), w, valid, flags=flags)


def max_principal_stretch_field(samples: DefGradField) -> ScalarField:
    """Largest eigenvalue of V with its (deformed-frame) eigenvector as the vector field."""
    if len(samples) == 0:
        raise InvalidInputError("empty sample collection")
    valid = samples.valid.copy()
    lam = np.where(valid, samples.stretches[:, 0], np.nan)
    dirs = np.where(valid[:, None], samples.directions[:, :, 0], np.nan)
    return ScalarField(
        "max_stretch", "dimensionless", samples.ids.copy(), samples.X.copy(), samples.x.copy(),
        lam, valid, vectors=dirs,
    )


def uniaxial_energy(stretch: float, mu: float) -> float:
    """Closed form ``mu/2 (lambda^2 + 2/lambda - 3)`` for incompressible uniaxial stretch."""
    return 0.5 * mu * (stretch * stretch + 2.0 / stretch - 3.0)
