"""Fracture energy from crack-opening profiles and its regression on ligament energy.

Opening profiles are fitted in plane stress with the incompressible modulus
``E_eff = 3 mu``.  The square-root opening ``delta(r) = (8 K_I / E_eff) sqrt(r / 2 pi)``
is fitted as the straight line ``delta^2 = C^2 (r + r0)`` so that the
effective tip offset ``r0`` is a free parameter, then

    K_I = C E_eff sqrt(2 pi) / 8,    G_c = K_I^2 / E_eff = pi C^2 E_eff / 32.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constitutive import MaterialModel
from .errors import FitError, InvalidInputError

UM = 1e-6
MIN_SAMPLES = 8
DEFAULT_WINDOW_UM = (100.0, 600.0)


@dataclass
class CtodProfile:
    r_um: np.ndarray
    delta_um: np.ndarray
    label: str = ""
    counts: np.ndarray | None = None

    def __post_init__(self):
        self.r_um = np.asarray(self.r_um, dtype=float).reshape(-1)
        self.delta_um = np.asarray(self.delta_um, dtype=float).reshape(-1)
        if self.r_um.shape != self.delta_um.shape:
            raise InvalidInputError("r and delta must have the same length")
        if np.any(self.r_um < 0):
            raise InvalidInputError("distances behind the tip must be non-negative")


@dataclass(frozen=True)
class FractureFit:
    C: float
    r_tip_offset: float
    K_I: float
    G_c: float
    E_eff: float
    fit_rms: float
    r_range_used: tuple[float, float]
    n_samples: int


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    n_points: int
    residuals: np.ndarray = field(repr=False)

    def predict(self, e_lig):
        return self.slope * np.asarray(e_lig, dtype=float) + self.intercept


def opening_profile(r_um, K_I: float, E_eff: float) -> np.ndarray:
    """LEFM plane-stress total opening in micrometres at ``r_um`` behind the tip."""
    r = np.asarray(r_um, dtype=float) * UM
    return 8.0 * K_I / E_eff * np.sqrt(r / (2.0 * np.pi)) / UM


def k_from_g(G: float, E_eff: float) -> float:
    return float(np.sqrt(G * E_eff))


def fit_ctod(profile: CtodProfile, mat: MaterialModel, r_window=DEFAULT_WINDOW_UM) -> FractureFit:
    """Least-squares square-root fit of an opening profile, returning K_I and G_c.

    Raises
    ------
    FitError
        Fewer than 8 samples in the window, a window outside the data, or a
        negative fitted ``C^2``.
    """
    r_min, r_max = map(float, r_window)
    if not r_min < r_max:
        raise InvalidInputError("empty fit window")
    r = profile.r_um
    if r.size == 0 or r_max < r.min() or r_min > r.max():
        raise FitError(f"fit window [{r_min}, {r_max}] um lies outside the data range")
    sel = (r >= r_min) & (r <= r_max)
    if np.count_nonzero(sel) < MIN_SAMPLES:
        raise FitError(f"{int(sel.sum())} samples in window, need at least {MIN_SAMPLES}")
    rs = r[sel] * UM
    d = profile.delta_um[sel] * UM
    d2 = d * d
    rm = rs.mean()
    sxx = np.sum((rs - rm) ** 2)
    if sxx == 0:
        raise FitError("all samples at the same distance")
    c2 = float(np.sum((rs - rm) * (d2 - d2.mean())) / sxx)
    b = float(d2.mean() - c2 * rm)
    if c2 < 0:
        raise FitError(f"fitted C^2 = {c2:.3e} < 0: opening decreases away from the tip")
    E = mat.E_eff
    C = float(np.sqrt(c2))
    offset = b / c2 if c2 > 0 else 0.0
    model = C * np.sqrt(np.clip(rs + offset, 0.0, None))
    rms = float(np.sqrt(np.mean((d - model) ** 2)) / UM)
    K = C * E * np.sqrt(2.0 * np.pi) / 8.0
    G = K * K / E
    return FractureFit(C, offset / UM, float(K), float(G), E, rms, (r_min, r_max), int(sel.sum()))


def window_sensitivity(profile: CtodProfile, mat: MaterialModel, windows) -> list[dict]:
    """G_c for several fit windows; windows that cannot be fitted report the error."""
    rows = []
    for w in windows:
        try:
            f = fit_ctod(profile, mat, w)
            rows.append({"r_min_um": w[0], "r_max_um": w[1], "G_c": f.G_c, "K_I": f.K_I})
        except FitError as exc:
            rows.append({"r_min_um": w[0], "r_max_um": w[1], "error": str(exc)})
    return rows


def extract_ctod_from_surface(
    points,
    upper,
    tip_estimate,
    direction=(1.0, 0.0, 0.0),
    opening_axis=(0.0, 1.0, 0.0),
    bin_um: float = 10.0,
    r_max_um: float | None = None,
    label: str = "",
) -> CtodProfile:
    """Bin crack-face points by distance behind the tip and difference the faces.

    Parameters
    ----------
    points : (n, 3) array
        Deformed-configuration crack-face points (micrometres).
    upper : (n,) bool array
        True for points on the upper face, False for the lower face.
    tip_estimate : 3-vector
        Tip position; only its projection on ``direction`` matters.
    direction : 3-vector
        Propagation direction; ``r = (tip - p) . direction``.
    bin_um : float
        Bin width along r.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    up = np.asarray(upper, dtype=bool).reshape(-1)
    tip = np.asarray(tip_estimate, dtype=float)
    if up.shape[0] != p.shape[0]:
        raise InvalidInputError("one face tag per point required")
    if not np.all(np.isfinite(tip)):
        raise InvalidInputError("tip estimate must be finite")
    if up.all() or not up.any():
        raise InvalidInputError("both upper and lower face points are required")
    e = np.asarray(direction, dtype=float)
    e = e / np.linalg.norm(e)
    n = np.asarray(opening_axis, dtype=float)
    n = n / np.linalg.norm(n)
    r = (tip - p) @ e
    h = p @ n
    keep = r >= 0
    if r_max_um is not None:
        keep &= r <= r_max_um
    r, h, up = r[keep], h[keep], up[keep]
    b = np.floor(r / bin_um).astype(np.int64)
    nb = int(b.max()) + 1 if b.size else 0
    cnt_u = np.bincount(b[up], minlength=nb)
    cnt_l = np.bincount(b[~up], minlength=nb)
    sum_u = np.bincount(b[up], weights=h[up], minlength=nb)
    sum_l = np.bincount(b[~up], weights=h[~up], minlength=nb)
    sum_r = np.bincount(b, weights=r, minlength=nb)
    both = (cnt_u > 0) & (cnt_l > 0)
    if np.count_nonzero(both) < MIN_SAMPLES:
        raise InvalidInputError(f"only {int(both.sum())} bins hold both faces, need {MIN_SAMPLES}")
    r_mean = sum_r[both] / (cnt_u[both] + cnt_l[both])
    delta = sum_u[both] / cnt_u[both] - sum_l[both] / cnt_l[both]
    return CtodProfile(r_mean, delta, label, counts=(cnt_u + cnt_l)[both])


def regress_gc_vs_elig(e_lig, g_c) -> RegressionResult:
    """Ordinary least squares ``G_c = slope * E_lig + intercept``."""
    x = np.asarray(e_lig, dtype=float).reshape(-1)
    y = np.asarray(g_c, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise InvalidInputError("E_lig and G_c must have the same length")
    if x.size < 2:
        raise InvalidInputError("regression needs at least two points")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise InvalidInputError("all E_lig values are identical; slope undefined")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - ym) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return RegressionResult(slope, intercept, r2, int(x.size), resid)
