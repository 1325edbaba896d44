"""Particle subsets and volume-weighted integrals over them.

The ligament membership rule and the per-particle radius rule used here are
reconstructions: membership is a box in reference coordinates (z-overlap of
the two front segments x the interval between the fronts x a half-width in
y), and the radius is half the mean distance to the nearest neighbours,
scaled by one calibration factor per dataset so that the summed sphere
volumes tile an interior box exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constitutive import ScalarField
from .errors import InvalidInputError
from .kinematics import ParticleSet

UM = 1e-6
KINDS = ("box", "ligament", "threshold", "intersection")


@dataclass(frozen=True)
class RegionSpec:
    kind: str
    box_lo: tuple | None = None
    box_hi: tuple | None = None
    z_interval: tuple | None = None
    x_interval: tuple | None = None
    y_center: float = 0.0
    y_half_width: float | None = None
    field_name: str | None = None
    quantile: float | None = None
    parts: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown region kind {self.kind!r}")
        if self.kind == "box":
            lo, hi = np.asarray(self.box_lo, float), np.asarray(self.box_hi, float)
            if lo.shape != (3,) or hi.shape != (3,) or np.any(hi < lo):
                raise InvalidInputError("box needs two corners with lo <= hi")
        elif self.kind == "ligament":
            for name in ("z_interval", "x_interval"):
                iv = getattr(self, name)
                if iv is None or len(iv) != 2 or not iv[0] < iv[1]:
                    raise InvalidInputError(f"{name} must be a nonempty interval")
            if self.y_half_width is None or not self.y_half_width > 0:
                raise InvalidInputError("y_half_width must be positive")
        elif self.kind == "threshold":
            if not self.field_name:
                raise InvalidInputError("threshold region needs a field name")
            if self.quantile is None or not 0 < self.quantile < 1:
                raise InvalidInputError("quantile must lie in (0, 1)")
        elif not self.parts:
            raise InvalidInputError("intersection needs at least one part")

    @classmethod
    def box(cls, lo, hi) -> "RegionSpec":
        return cls("box", box_lo=tuple(map(float, lo)), box_hi=tuple(map(float, hi)))

    @classmethod
    def ligament(cls, z_interval, x_interval, y_half_width, y_center=0.0) -> "RegionSpec":
        return cls(
            "ligament", z_interval=tuple(map(float, z_interval)), x_interval=tuple(map(float, x_interval)),
            y_center=float(y_center), y_half_width=float(y_half_width),
        )

    @classmethod
    def threshold(cls, field_name: str, quantile: float) -> "RegionSpec":
        return cls("threshold", field_name=field_name, quantile=float(quantile))

    @classmethod
    def intersection(cls, *parts: "RegionSpec") -> "RegionSpec":
        return cls("intersection", parts=tuple(parts))

    def to_dict(self) -> dict:
        if self.kind == "box":
            return {"kind": "box", "lo_um": list(self.box_lo), "hi_um": list(self.box_hi)}
        if self.kind == "ligament":
            return {
                "kind": "ligament",
                "z_interval_um": list(self.z_interval),
                "x_interval_um": list(self.x_interval),
                "y_center_um": self.y_center,
                "y_half_width_um": self.y_half_width,
            }
        if self.kind == "threshold":
            return {"kind": "threshold", "field": self.field_name, "quantile": self.quantile}
        return {"kind": "intersection", "parts": [p.to_dict() for p in self.parts]}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionSpec":
        d = dict(d)
        kind = d.pop("kind", None)
        allowed = {
            "box": {"lo_um", "hi_um"},
            "ligament": {"z_interval_um", "x_interval_um", "y_center_um", "y_half_width_um"},
            "threshold": {"field", "quantile"},
            "intersection": {"parts"},
        }
        if kind not in allowed:
            raise InvalidInputError(f"unknown region kind {kind!r}")
        unknown = set(d) - allowed[kind]
        if unknown:
            raise InvalidInputError(f"unknown region key(s): {', '.join(sorted(unknown))}")
        if kind == "box":
            return cls.box(d["lo_um"], d["hi_um"])
        if kind == "ligament":
            return cls.ligament(d["z_interval_um"], d["x_interval_um"], d["y_half_width_um"], d.get("y_center_um", 0.0))
        if kind == "threshold":
            return cls.threshold(d["field"], d["quantile"])
        return cls.intersection(*[cls.from_dict(p) for p in d["parts"]])


def _mask(pset: ParticleSet, spec: RegionSpec, fields: dict) -> np.ndarray:
    X = pset.X
    if spec.kind == "box":
        lo, hi = np.asarray(spec.box_lo), np.asarray(spec.box_hi)
        return np.all((X >= lo) & (X <= hi), axis=1)
    if spec.kind == "ligament":
        x0, x1 = spec.x_interval
        z0, z1 = spec.z_interval
        return (
            (X[:, 0] >= x0) & (X[:, 0] <= x1)
            & (X[:, 2] >= z0) & (X[:, 2] <= z1)
            & (np.abs(X[:, 1] - spec.y_center) <= spec.y_half_width)
        )
    if spec.kind == "threshold":
        try:
            f = fields[spec.field_name]
        except (KeyError, TypeError):
            raise InvalidInputError(f"threshold region refers to unknown field {spec.field_name!r}") from None
        rows = f.lookup(pset.ids)
        vals = f.values[rows]
        ok = f.valid[rows]
        if not np.any(ok):
            return np.zeros(len(pset), dtype=bool)
        cut = np.quantile(vals[ok], spec.quantile)
        return ok & (vals >= cut)
    m = np.ones(len(pset), dtype=bool)
    for part in spec.parts:
        m &= _mask(pset, part, fields)
    return m


def select_region(pset: ParticleSet, spec: RegionSpec, fields: dict | None = None) -> np.ndarray:
    """Ids (in particle-set order) of the particles whose reference position is in the region.

    ``fields`` maps names to :class:`ScalarField` for threshold regions.
    An empty selection is a valid result.
    """
    return pset.ids[_mask(pset, spec, fields or {})]


@dataclass
class RadialWeights:
    ids: np.ndarray
    r_um: np.ndarray
    c_cal: float
    method: str = "knn-half-mean-distance"
    calibration_box: tuple | None = None

    def __post_init__(self):
        if not (self.c_cal > 0) or np.any(~(self.r_um > 0)):
            raise InvalidInputError("radii and calibration factor must be positive")

    def cell_volume_um3(self) -> np.ndarray:
        return 4.0 / 3.0 * np.pi * self.r_um**3


@dataclass(frozen=True)
class RegionEnergy:
    E: float
    n_particles: int
    volume_estimate: float
    coverage: float
    reconstructed: bool = True


def interior_box(pset: ParticleSet, margin_um: float | None = None, k_vol: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Bounds shrunk by a margin (default: three mean neighbour spacings)."""
    lo, hi = pset.bounds
    if margin_um is None:
        d, _ = pset.knn(k_vol)
        margin_um = 3.0 * float(np.mean(d))
    lo = lo + margin_um
    hi = hi - margin_um
    if np.any(hi <= lo):
        raise InvalidInputError("interior calibration box is empty; pass an explicit box")
    return lo, hi


def radial_weights(pset: ParticleSet, k_vol: int = 6, calibration_box=None) -> RadialWeights:
    """Per-particle radii ``r_i = c_cal * mean_k(d_ik) / 2``.

    ``c_cal`` makes ``sum (4 pi / 3) r_i^3`` over the particles inside
    ``calibration_box`` equal that box's volume.  By default the box is the
    particle bounds shrunk by three mean spacings; for cracked samples pass a
    box that avoids the crack faces.
    """
    if len(pset) <= k_vol:
        raise InvalidInputError(f"radial weights need more than {k_vol} particles, got {len(pset)}")
    d, _ = pset.knn(k_vol)
    r0 = 0.5 * d.mean(axis=1)
    if calibration_box is None:
        lo, hi = interior_box(pset, k_vol=k_vol)
    else:
        lo, hi = (np.asarray(c, dtype=float) for c in calibration_box)
    inside = np.all((pset.X >= lo) & (pset.X <= hi), axis=1)
    if not np.any(inside):
        raise InvalidInputError("no particles inside the calibration box")
    raw = np.sum(4.0 / 3.0 * np.pi * r0[inside] ** 3)
    c_cal = float((np.prod(hi - lo) / raw) ** (1.0 / 3.0))
    return RadialWeights(pset.ids.copy(), c_cal * r0, c_cal, calibration_box=(tuple(lo), tuple(hi)))


def integrate_region_energy(W: ScalarField, subset, weights: RadialWeights) -> RegionEnergy:
    """``E = sum_i W_i (4 pi / 3) r_i^3`` over the valid particles of ``subset`` (joules)."""
    if W.unit != "J/m^3":
        raise InvalidInputError(f"energy integration needs a J/m^3 field, got {W.unit!r}")
    subset = np.asarray(subset, dtype=np.int64).reshape(-1)
    if subset.size == 0:
        return RegionEnergy(0.0, 0, 0.0, 1.0)
    rows_w = W.lookup(subset)
    order = np.argsort(weights.ids, kind="stable")
    pos = np.clip(np.searchsorted(weights.ids, subset, sorter=order), 0, weights.ids.size - 1)
    rows_r = order[pos]
    if np.any(weights.ids[rows_r] != subset):
        raise InvalidInputError("subset contains ids without a radial weight")
    ok = W.valid[rows_w]
    vol_m3 = 4.0 / 3.0 * np.pi * (weights.r_um[rows_r][ok] * UM) ** 3
    # fixed-order sum so that results do not depend on how the subset was produced
    E = float(np.sum(W.values[rows_w][ok] * vol_m3))
    return RegionEnergy(E, int(subset.size), float(np.sum(vol_m3)), float(ok.mean()))
