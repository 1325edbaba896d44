"""Ground-truth particle fields: affine motions, mode-I crack fields, stepped-crack phantoms.

The stepped-crack phantom is a prescribed kinematic ansatz, not a solved
elasticity problem.  It exists to exercise the measurement chain (gradient
estimation, energy density, region integration, opening fits) against
known answers, and says nothing about real ligament mechanics.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .constitutive import MaterialModel, uniaxial_energy
from .errors import InvalidInputError
from .fracture import k_from_g
from .kinematics import ParticleSet

UM = 1e-6
KAPPA_PLANE_STRESS_INCOMPRESSIBLE = 5.0 / 3.0


def _uniform_points(rng, n, lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return lo + rng.random((n, 3)) * (hi - lo)


def gen_affine(n: int, bounds, F0, c=(0.0, 0.0, 0.0), seed: int = 0) -> ParticleSet:
    """``n`` uniform random reference points in ``bounds`` mapped by ``x = F0 X + c``."""
    F0 = np.asarray(F0, dtype=float)
    if not np.linalg.det(F0) > 0:
        raise InvalidInputError("det F0 must be positive")
    rng = np.random.default_rng(seed)
    X = _uniform_points(rng, int(n), *bounds)
    x = X @ F0.T + np.asarray(c, dtype=float)
    return ParticleSet(np.arange(int(n)), X, x)


# --------------------------------------------------------------------------
# mode-I crack field


@dataclass(frozen=True)
class LefmFieldSpec:
    K_I: float
    mu: float = 35e3
    kappa: float = KAPPA_PLANE_STRESS_INCOMPRESSIBLE
    tip: tuple = (0.0, 0.0, 0.0)
    direction: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.K_I < 0:
            raise InvalidInputError("K_I must be non-negative")
        if not 1.0 < self.kappa < 3.0:
            raise InvalidInputError("kappa must lie in (1, 3)")
        if self.mu <= 0:
            raise InvalidInputError("mu must be positive")
        d = np.asarray(self.direction, dtype=float)
        if abs(d[2]) > 1e-12 or not abs(np.linalg.norm(d) - 1.0) < 1e-12:
            raise InvalidInputError("propagation direction must be an in-plane unit vector")

    @property
    def E_eff(self) -> float:
        return 3.0 * self.mu

    @property
    def G(self) -> float:
        """Energy release rate ``K_I^2 / E_eff`` (J/m^2)."""
        return self.K_I**2 / self.E_eff

    def frame(self) -> np.ndarray:
        """Columns: propagation direction, opening normal, sheet normal."""
        e = np.asarray(self.direction, dtype=float)
        n = np.array([-e[1], e[0], 0.0])
        return np.column_stack([e, n, [0.0, 0.0, 1.0]])


def _angular(theta, kappa):
    s, c = np.sin(theta / 2), np.cos(theta / 2)
    gx = c * (kappa - 1.0 + 2.0 * s * s)
    gy = s * (kappa + 1.0 - 2.0 * c * c)
    dgx = -0.5 * s * (kappa - 1.0 + 2.0 * s * s) + 2.0 * s * c * c
    dgy = 0.5 * c * (kappa + 1.0 - 2.0 * c * c) + 2.0 * s * s * c
    return gx, gy, dgx, dgy


def _polar(spec: LefmFieldSpec, X):
    Q = spec.frame()
    loc = (np.asarray(X, dtype=float).reshape(-1, 3) - np.asarray(spec.tip, dtype=float)) @ Q
    r = np.hypot(loc[:, 0], loc[:, 1])
    theta = np.arctan2(loc[:, 1], loc[:, 0])
    return Q, r, theta


def williams_displacement(spec: LefmFieldSpec, X, theta=None) -> np.ndarray:
    """Mode-I displacement (micrometres) at reference points ``X`` (micrometres).

    ``u_a = K/(2 mu) sqrt(r / 2 pi) cos(t/2) (kappa - 1 + 2 sin^2(t/2))`` and
    ``u_b = K/(2 mu) sqrt(r / 2 pi) sin(t/2) (kappa + 1 - 2 cos^2(t/2))`` in
    the tip frame; the out-of-plane component is zero.  ``theta`` overrides
    the polar angle, which is how points exactly on a crack face are assigned
    to the upper (+pi) or lower (-pi) face.
    """
    Q, r, th = _polar(spec, X)
    if theta is not None:
        th = np.broadcast_to(np.asarray(theta, dtype=float), r.shape)
    amp = spec.K_I / (2.0 * spec.mu) * np.sqrt(r * UM / (2.0 * np.pi)) / UM
    gx, gy, _, _ = _angular(th, spec.kappa)
    loc = np.column_stack([amp * gx, amp * gy, np.zeros_like(r)])
    return loc @ Q.T


def williams_gradient(spec: LefmFieldSpec, X) -> np.ndarray:
    """Analytic ``F = I + grad u`` of :func:`williams_displacement` at ``X``."""
    Q, r, th = _polar(spec, X)
    a = spec.K_I / (2.0 * spec.mu) / np.sqrt(2.0 * np.pi * UM)  # u = a sqrt(r_um) g(theta), r in um
    gx, gy, dgx, dgy = _angular(th, spec.kappa)
    with np.errstate(divide="ignore", invalid="ignore"):
        sr = np.sqrt(r)
        du_dr = np.stack([a * gx / (2 * sr), a * gy / (2 * sr)], axis=-1)
        du_dt = np.stack([a * sr * dgx, a * sr * dgy], axis=-1)
        ct, st = np.cos(th), np.sin(th)
        du_da = ct[:, None] * du_dr - (st / r)[:, None] * du_dt
        du_db = st[:, None] * du_dr + (ct / r)[:, None] * du_dt
    G = np.zeros((r.size, 3, 3))
    G[:, :2, 0] = du_da
    G[:, :2, 1] = du_db
    return np.eye(3) + Q @ G @ Q.T


@dataclass
class CrackFaces:
    """Crack-face points in the deformed configuration, tagged upper/lower."""

    points: np.ndarray
    upper: np.ndarray
    tip: np.ndarray
    direction: np.ndarray
    G_true: float


@dataclass
class LefmField:
    particles: ParticleSet
    spec: LefmFieldSpec
    faces: CrackFaces
    r_excl_um: float

    def analytic_F(self, X) -> np.ndarray:
        return williams_gradient(self.spec, X)

    def displacement(self, X) -> np.ndarray:
        return williams_displacement(self.spec, X)


def lefm_faces(spec: LefmFieldSpec, r_from_um, r_to_um, spacing_um=2.0, z_values=(0.0,)) -> CrackFaces:
    """Upper and lower face points at regular distances behind the tip."""
    Q = spec.frame()
    tip = np.asarray(spec.tip, dtype=float)
    r = np.arange(r_from_um, r_to_um + 0.5 * spacing_um, spacing_um)
    pts, up = [], []
    for z in z_values:
        base = tip - r[:, None] * Q[:, 0]
        base[:, 2] = z
        for sign, th in ((True, np.pi), (False, -np.pi)):
            pts.append(base + williams_displacement(spec, base, theta=th))
            up.append(np.full(r.size, sign))
    return CrackFaces(np.vstack(pts), np.concatenate(up), tip.copy(), Q[:, 0].copy(), spec.G)


def gen_lefm_mode1(n: int, bounds, spec: LefmFieldSpec, seed: int = 0, r_excl_um: float = 20.0,
                   face_spacing_um: float = 2.0, face_r_max_um: float = 700.0) -> LefmField:
    """Particles displaced by the mode-I field, with crack faces and an analytic-F oracle.

    Reference points are drawn uniformly in ``bounds`` outside an in-plane disk
    of radius ``r_excl_um`` around the tip.  Face points run from
    ``r_excl_um`` to ``face_r_max_um`` (or the far edge of the bounds behind
    the tip, if further), on the mid-plane of the bounds.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    Q = spec.frame()
    tip = np.asarray(spec.tip, dtype=float)
    corners = np.array([[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1]) for c in (lo[2], hi[2])])
    loc = (corners - tip) @ Q
    inplane = np.hypot(loc[:, 0], loc[:, 1])
    # the disk covers the box only if every corner lies inside it (disk is convex)
    if np.all(inplane <= r_excl_um):
        raise InvalidInputError("bounds lie entirely inside the tip exclusion disk")
    rng = np.random.default_rng(seed)
    pts = np.empty((0, 3))
    while pts.shape[0] < n:
        cand = _uniform_points(rng, max(1024, 2 * (n - pts.shape[0])), lo, hi)
        lc = (cand - tip) @ Q
        cand = cand[np.hypot(lc[:, 0], lc[:, 1]) > r_excl_um]
        pts = np.vstack([pts, cand])
    X = pts[:n]
    x = X + williams_displacement(spec, X)
    behind = -loc[:, 0].min()
    faces = lefm_faces(spec, r_excl_um, max(behind, face_r_max_um), face_spacing_um,
                       z_values=(0.5 * (lo[2] + hi[2]),))
    return LefmField(ParticleSet(np.arange(n), X, x), spec, faces, r_excl_um)


# --------------------------------------------------------------------------
# stepped crack with ligament


@dataclass(frozen=True)
class CrackSegment:
    front_x: float
    z_lo: float
    z_hi: float
    plane_y: float


def _ramp(s, length):
    """1 for s <= 0, cosine decay to 0 at s = length."""
    s = np.clip(np.asarray(s, dtype=float) / length, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * s))


@dataclass(frozen=True)
class SteppedCrackPhantom:
    """Two offset crack-front segments joined by a ligament.

    Segment 0 covers the lower z range and segment 1 the upper; their z
    ranges overlap.  The ligament is the reference box spanning the
    overlap in z, the interval between the two front positions in x, and
    ``ligament_half_width_um`` about the mid-plane between the crack planes
    in y.  Inside the box the motion is a uniaxial incompressible stretch
    along y of ``1 + amplification * (far_field_stretch - 1)``; outside it
    is a uniaxial far-field stretch plus a mode-I opening about each
    segment.  The ligament stretch also covers a ``core_margin_um`` shell
    around the box, so that gradient stencils of labelled particles never
    reach the cosine blend (``blend_um``) into the surroundings.
    """

    bounds_lo: tuple = (100.0, -160.0, 0.0)
    bounds_hi: tuple = (600.0, 160.0, 200.0)
    segments: tuple = (
        CrackSegment(front_x=200.0, z_lo=0.0, z_hi=140.0, plane_y=-100.0),
        CrackSegment(front_x=500.0, z_lo=60.0, z_hi=200.0, plane_y=100.0),
    )
    ligament_half_width_um: float = 50.0
    far_field_stretch: float = 1.05
    amplification: float = 1.0
    density_per_um3: float = 2e-3
    G_target: float = 10.0
    mu: float = 35e3
    kappa: float = KAPPA_PLANE_STRESS_INCOMPRESSIBLE
    blend_um: float = 20.0
    core_margin_um: float = 20.0
    face_spacing_um: float = 2.0
    face_r_max_um: float = 700.0

    def __post_init__(self):
        if len(self.segments) != 2:
            raise InvalidInputError("phantom needs exactly two crack segments")
        s0, s1 = self.segments
        if not (s0.z_lo < s1.z_lo < s0.z_hi < s1.z_hi):
            raise InvalidInputError("segment z ranges must overlap, segment 0 below segment 1")
        if s0.front_x == s1.front_x:
            raise InvalidInputError("segment fronts must differ for a nonempty ligament")
        gap = abs(s1.plane_y - s0.plane_y)
        if not 0 < self.ligament_half_width_um <= 0.5 * gap:
            raise InvalidInputError("ligament half width must fit between the crack planes")
        if self.blend_um <= 0 or self.core_margin_um < 0:
            raise InvalidInputError("blend length must be positive and core margin non-negative")
        if self.density_per_um3 <= 0 or self.far_field_stretch <= 0 or self.G_target < 0:
            raise InvalidInputError("density, stretch and G must be positive")
        lo, hi = np.asarray(self.bounds_lo), np.asarray(self.bounds_hi)
        blo, bhi = self.ligament_box
        if np.any(blo < lo) or np.any(bhi > hi):
            raise InvalidInputError("ligament box must lie inside the bounds")
        if self.ligament_stretch <= 0:
            raise InvalidInputError("ligament stretch must be positive")

    @property
    def ligament_box(self) -> tuple[np.ndarray, np.ndarray]:
        s0, s1 = self.segments
        yc = 0.5 * (s0.plane_y + s1.plane_y)
        w = self.ligament_half_width_um
        lo = np.array([min(s0.front_x, s1.front_x), yc - w, s1.z_lo])
        hi = np.array([max(s0.front_x, s1.front_x), yc + w, s0.z_hi])
        return lo, hi

    @property
    def ligament_volume_m3(self) -> float:
        lo, hi = self.ligament_box
        return float(np.prod(hi - lo)) * UM**3

    @property
    def ligament_stretch(self) -> float:
        return 1.0 + self.amplification * (self.far_field_stretch - 1.0)

    @property
    def E_lig_closed_form(self) -> float:
        """``W(lambda_lig) * V_lig`` in joules."""
        return uniaxial_energy(self.ligament_stretch, self.mu) * self.ligament_volume_m3

    @property
    def K_I(self) -> float:
        # the far-field stretch shortens distances behind the tip by s^(-1/2);
        # K is chosen so the deformed-frame opening profile carries G_target
        return k_from_g(self.G_target, 3.0 * self.mu) * self.far_field_stretch ** (-0.25)

    def segment_spec(self, i: int) -> LefmFieldSpec:
        s = self.segments[i]
        return LefmFieldSpec(self.K_I, self.mu, self.kappa, tip=(s.front_x, s.plane_y, 0.0))

    def with_target_energy(self, e_lig: float) -> "SteppedCrackPhantom":
        """Copy whose amplification yields ``E_lig_closed_form == e_lig``."""
        if e_lig < 0:
            raise InvalidInputError("target ligament energy must be non-negative")
        w = e_lig / self.ligament_volume_m3
        if w == 0:
            lam = 1.0
        else:
            lam = brentq(lambda l: uniaxial_energy(l, self.mu) - w, 1.0, 1e3, xtol=1e-15, rtol=1e-15)
        if self.far_field_stretch == 1.0:
            raise InvalidInputError("far-field stretch of 1 cannot be amplified")
        return replace(self, amplification=(lam - 1.0) / (self.far_field_stretch - 1.0))


@dataclass
class SteppedCrackField:
    particles: ParticleSet
    phantom: SteppedCrackPhantom
    labels: np.ndarray
    faces: CrackFaces
    displacement: object = field(repr=False)

    @property
    def ligament_ids(self) -> np.ndarray:
        return self.particles.ids[self.labels == 1]


def _stretch_tensor(lam):
    t = lam**-0.5
    return np.diag([t, lam, t])


def phantom_displacement(ph: SteppedCrackPhantom, X) -> np.ndarray:
    """Displacement (micrometres) of the phantom at reference points ``X``."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    blo, bhi = ph.ligament_box
    c = 0.5 * (blo + bhi)
    s0, s1 = ph.segments

    def background(P):
        u = (P - c) @ (_stretch_tensor(ph.far_field_stretch) - np.eye(3)).T
        # partition of unity in z: segment 1 takes over across the overlap
        chi1 = 1.0 - _ramp(P[:, 2] - s1.z_lo, s0.z_hi - s1.z_lo)
        u += (1.0 - chi1)[:, None] * williams_displacement(ph.segment_spec(0), P)
        u += chi1[:, None] * williams_displacement(ph.segment_spec(1), P)
        return u

    u_bg = background(X)
    outside = np.maximum(np.maximum(blo - X, X - bhi) - ph.core_margin_um, 0.0)
    b = np.prod(_ramp(outside, ph.blend_um), axis=1)
    if not np.any(b > 0):
        return u_bg
    u_lig = background(c[None, :]) + (X - c) @ (_stretch_tensor(ph.ligament_stretch) - np.eye(3)).T
    return u_bg + b[:, None] * (u_lig - u_bg)


def gen_stepped_crack(ph: SteppedCrackPhantom, seed: int = 0) -> SteppedCrackField:
    """Seed particles at the phantom density, displace them, label the ligament.

    Crack-face points are emitted for segment 0 on the plane ``z`` midway
    through its exclusive z range, from 20 um to ``face_r_max_um`` behind
    its front (they may extend past the particle bounds).
    """
    lo, hi = np.asarray(ph.bounds_lo, dtype=float), np.asarray(ph.bounds_hi, dtype=float)
    n = int(round(ph.density_per_um3 * np.prod(hi - lo)))
    rng = np.random.default_rng(seed)
    X = _uniform_points(rng, n, lo, hi)
    x = X + phantom_displacement(ph, X)
    blo, bhi = ph.ligament_box
    labels = np.all((X >= blo) & (X <= bhi), axis=1).astype(np.int64)
    pset = ParticleSet(np.arange(n), X, x, labels=labels)

    s0, s1 = ph.segments
    z_face = 0.5 * (s0.z_lo + s1.z_lo)
    if s1.z_lo - z_face < ph.blend_um:
        raise InvalidInputError("segment 0 exclusive z range too thin for face sampling")
    r = np.arange(20.0, ph.face_r_max_um + 0.5 * ph.face_spacing_um, ph.face_spacing_um)
    ref = np.column_stack([s0.front_x - r, np.full(r.size, s0.plane_y), np.full(r.size, z_face)])
    ref = np.vstack([ref, ref])
    upper = np.repeat([True, False], r.size)
    # on the crack plane the polar angle is +-pi; evaluate each face explicitly
    c = 0.5 * (blo + bhi)
    u = (ref - c) @ (_stretch_tensor(ph.far_field_stretch) - np.eye(3)).T
    u += williams_displacement(ph.segment_spec(0), ref, theta=np.where(upper, np.pi, -np.pi))
    tip = np.array([s0.front_x, s0.plane_y, z_face])
    tip_def = tip + phantom_displacement(ph, tip)[0]
    return SteppedCrackField(
        pset, ph, labels,
        CrackFaces(ref + u, upper, tip_def, np.array([1.0, 0.0, 0.0]), ph.G_target),
        displacement=lambda P: phantom_displacement(ph, P),
    )


def phantom_suite(e_lig_targets, slope: float, intercept: float, base: SteppedCrackPhantom | None = None):
    """Phantoms whose true G follows ``G = slope * E_lig + intercept`` exactly."""
    base = base or SteppedCrackPhantom()
    out = []
    for e in e_lig_targets:
        ph = base.with_target_energy(float(e))
        out.append(replace(ph, G_target=slope * ph.E_lig_closed_form + intercept))
    return out
