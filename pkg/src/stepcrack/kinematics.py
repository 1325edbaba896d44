"""Gridless deformation-gradient estimation on tracked particles.

The deformation gradient is estimated independently at every particle from
its k nearest reference-space neighbours by Gaussian-weighted linear least
squares, ``F_i = A_i M_i^{-1}`` with

    A_i = sum_j w_ij dx_ij dX_ij^T,   M_i = sum_j w_ij dX_ij dX_ij^T,
    w_ij = exp(-|dX_ij|^2 / h_i^2),

where ``h_i`` is the distance to the k-th neighbour (or a fixed length).
"""
from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import tensor3
from .errors import InvalidInputError


@dataclass(frozen=True)
class ParticleTrack:
    id: int
    X: tuple[float, float, float]
    x: tuple[float, float, float]
    quality: float = 1.0


class ParticleSet:
    """Immutable collection of tracked particles with a reference-space k-NN index.

    Arrays are stored struct-of-arrays style: ``ids`` (n,), ``X`` and ``x``
    (n, 3) in micrometres, ``quality`` (n,).  Optional per-particle integer
    ``labels`` (e.g. generator ground truth) ride along unchanged.
    """

    def __init__(self, ids, X, x, quality=None, labels=None):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        X = np.asarray(X, dtype=float).reshape(-1, 3)
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        n = ids.size
        if n == 0:
            raise InvalidInputError("particle set must contain at least one track")
        if X.shape[0] != n or x.shape[0] != n:
            raise InvalidInputError("ids, X and x must have the same length")
        if np.unique(ids).size != n:
            raise InvalidInputError("duplicate particle ids")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(x))):
            raise InvalidInputError("non-finite particle position")
        quality = np.ones(n) if quality is None else np.asarray(quality, dtype=float).reshape(-1)
        if quality.shape[0] != n or np.any((quality < 0) | (quality > 1)):
            raise InvalidInputError("quality must lie in [0, 1], one value per track")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != n:
                raise InvalidInputError("one label per track required")
        for a in (ids, X, x, quality):
            a.setflags(write=False)
        if labels is not None:
            labels.setflags(write=False)
        self.ids = ids
        self.X = X
        self.x = x
        self.quality = quality
        self.labels = labels
        self.bounds = (X.min(axis=0), X.max(axis=0))
        self._tree = cKDTree(X)
        self._index = {int(i): k for k, i in enumerate(ids)}

    @classmethod
    def from_tracks(cls, tracks: Iterable[ParticleTrack]) -> "ParticleSet":
        tracks = list(tracks)
        if not tracks:
            raise InvalidInputError("particle set must contain at least one track")
        return cls(
            [t.id for t in tracks],
            [t.X for t in tracks],
            [t.x for t in tracks],
            [t.quality for t in tracks],
        )

    def __len__(self) -> int:
        return int(self.ids.size)

    def track(self, i: int) -> ParticleTrack:
        return ParticleTrack(int(self.ids[i]), tuple(self.X[i]), tuple(self.x[i]), float(self.quality[i]))

    def positions_of(self, ids) -> np.ndarray:
        """Row indices of the given particle ids."""
        try:
            return np.array([self._index[int(i)] for i in np.asarray(ids).reshape(-1)], dtype=np.int64)
        except KeyError as exc:
            raise InvalidInputError(f"unknown particle id {exc.args[0]}") from None

    def subset(self, rows) -> "ParticleSet":
        rows = np.asarray(rows, dtype=np.int64)
        labels = None if self.labels is None else self.labels[rows]
        return ParticleSet(self.ids[rows], self.X[rows], self.x[rows], self.quality[rows], labels)

    def knn(self, k: int, rows=None) -> tuple[np.ndarray, np.ndarray]:
        """k nearest reference-space neighbours of each particle, self excluded.

        Returns ``(dist, idx)`` of shape (m, k') with k' = min(k, n - 1).  Ties
        in distance are broken by the lower particle id.
        """
        n = len(self)
        rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
        k = min(int(k), n - 1)
        if k <= 0:
            return np.empty((rows.size, 0)), np.empty((rows.size, 0), dtype=np.int64)
        return self._knn_points(self.X[rows], k, exclude=rows)

    def query(self, points, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest particles (row indices) to arbitrary reference-space points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        k = min(int(k), len(self))
        return self._knn_points(pts, k, exclude=None)

    def _knn_points(self, pts, k, exclude):
        n = len(self)
        extra = 1 if exclude is not None else 0
        kq = min(n, k + extra + 4)
        while True:
            raw_d, raw_idx = self._tree.query(pts, k=kq)
            raw_d = raw_d.reshape(len(pts), -1)
            raw_idx = raw_idx.reshape(len(pts), -1)
            d = raw_d
            if exclude is not None:
                d = np.where(raw_idx == exclude[:, None], np.inf, raw_d)
            order = np.lexsort((self.ids[raw_idx], d), axis=-1)
            d_sel = np.take_along_axis(d, order, axis=-1)[:, :k]
            idx_sel = np.take_along_axis(raw_idx, order, axis=-1)[:, :k]
            # a distance tie at the query horizon may hide lower-id candidates
            if kq >= n or not np.any(raw_d[:, -1] <= d_sel[:, -1]):
                return d_sel, idx_sel
            kq = min(n, 2 * kq)


class SampleFlag(enum.IntFlag):
    OK = 0
    TOO_FEW_NEIGHBORS = 1
    ILL_CONDITIONED = 2
    INVERTED = 4
    POLAR_FAILED = 8
    OUTLIER = 16


@dataclass(frozen=True)
class EstimatorConfig:
    k_neighbors: int = 20
    weight_scale_mode: str = "kth-neighbor"  # or "fixed"
    fixed_h_um: float | None = None
    min_neighbors: int = 6
    max_condition: float = 1e6
    outlier_filter: bool = False
    outlier_mad_factor: float = 5.0

    def __post_init__(self):
        if not (self.k_neighbors >= self.min_neighbors >= 4):
            raise InvalidInputError("need k_neighbors >= min_neighbors >= 4")
        if self.weight_scale_mode not in ("kth-neighbor", "fixed"):
            raise InvalidInputError(f"unknown weight_scale_mode {self.weight_scale_mode!r}")
        if self.weight_scale_mode == "fixed" and not (self.fixed_h_um and self.fixed_h_um > 0):
            raise InvalidInputError("fixed weight scale requires fixed_h_um > 0")
        if self.max_condition <= 1:
            raise InvalidInputError("max_condition must exceed 1")


@dataclass(frozen=True)
class DefGradSample:
    particle_id: int
    F: np.ndarray
    polar: tensor3.PolarFactors
    principal_stretches: np.ndarray
    principal_dirs: np.ndarray
    J: float
    residual_rms: float
    n_neighbors: int
    condition: float
    flags: SampleFlag

    @property
    def valid(self) -> bool:
        return self.flags == SampleFlag.OK


@dataclass
class DefGradField:
    """Per-particle deformation gradients for a whole :class:`ParticleSet`.

    Rows align with the particle set.  Invalid rows carry NaN tensors and a
    nonzero entry in ``flags``; they are never dropped.
    """

    ids: np.ndarray
    X: np.ndarray
    x: np.ndarray
    F: np.ndarray
    R: np.ndarray
    U: np.ndarray
    V: np.ndarray
    stretches: np.ndarray
    directions: np.ndarray
    J: np.ndarray
    residual_rms: np.ndarray
    n_neighbors: np.ndarray
    condition: np.ndarray
    flags: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def valid(self) -> np.ndarray:
        return self.flags == 0

    def sample(self, row: int) -> DefGradSample:
        return DefGradSample(
            particle_id=int(self.ids[row]),
            F=self.F[row],
            polar=tensor3.PolarFactors(self.R[row], self.U[row], self.V[row]),
            principal_stretches=self.stretches[row],
            principal_dirs=self.directions[row].T,
            J=float(self.J[row]),
            residual_rms=float(self.residual_rms[row]),
            n_neighbors=int(self.n_neighbors[row]),
            condition=float(self.condition[row]),
            flags=SampleFlag(int(self.flags[row])),
        )

    def __iter__(self):
        return (self.sample(i) for i in range(len(self)))


def build_particle_set(tracks: Sequence[ParticleTrack] | ParticleSet) -> ParticleSet:
    if isinstance(tracks, ParticleSet):
        return tracks
    return ParticleSet.from_tracks(tracks)


def _estimate_rows(pset: ParticleSet, cfg: EstimatorConfig, dist, idx, rows):
    m, k = idx.shape
    X = pset.X
    x = pset.x
    dX = X[idx] - X[rows][:, None, :]
    dx = x[idx] - x[rows][:, None, :]
    if cfg.weight_scale_mode == "fixed":
        h = np.full(m, float(cfg.fixed_h_um))
    else:
        h = dist[:, -1] if k else np.ones(m)
    h = np.where(h > 0, h, 1.0)
    w = np.exp(-np.sum(dX * dX, axis=-1) / (h * h)[:, None])

    # fixed summation order over neighbours keeps results independent of chunking
    A = np.zeros((m, 3, 3))
    M = np.zeros((m, 3, 3))
    for j in range(k):
        wj = w[:, j, None, None]
        A += wj * dx[:, j, :, None] * dX[:, j, None, :]
        M += wj * dX[:, j, :, None] * dX[:, j, None, :]

    flags = np.zeros(m, dtype=np.int64)
    flags[np.full(m, k) < cfg.min_neighbors] |= SampleFlag.TOO_FEW_NEIGHBORS
    ev = np.linalg.eigvalsh(M)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(ev[:, 0] > ev[:, 2] * 1e-300, ev[:, 2] / ev[:, 0], np.inf)
    cond = np.where(np.isfinite(cond) & (ev[:, 0] > 0), cond, np.inf)
    flags[~(cond <= cfg.max_condition)] |= SampleFlag.ILL_CONDITIONED

    solvable = flags == 0
    F = np.full((m, 3, 3), np.nan)
    if np.any(solvable):
        Ms = M[solvable]
        As = A[solvable]
        F[solvable] = np.swapaxes(np.linalg.solve(Ms, np.swapaxes(As, -1, -2)), -1, -2)

    resid = np.full(m, np.nan)
    if np.any(solvable):
        pred = np.einsum("nij,nkj->nki", F[solvable], dX[solvable])
        r = dx[solvable] - pred
        resid[solvable] = np.sqrt(np.mean(np.sum(r * r, axis=-1), axis=-1))

    J = np.full(m, np.nan)
    J[solvable] = np.linalg.det(F[solvable])
    flags[solvable & ~(J > 0)] |= SampleFlag.INVERTED
    return F, J, resid, cond, flags


def estimate_def_grad(pset: ParticleSet, cfg: EstimatorConfig | None = None, threads: int = 1) -> DefGradField:
    """Estimate F, its polar factors and principal stretches at every particle.

    Parameters
    ----------
    pset : ParticleSet
    cfg : EstimatorConfig, optional
        Defaults to ``EstimatorConfig()`` (k = 20, adaptive Gaussian scale).
    threads : int
        Worker threads.  Output is bitwise identical for any value.
    """
    cfg = cfg or EstimatorConfig()
    n = len(pset)
    dist, idx = pset.knn(cfg.k_neighbors)
    k = idx.shape[1]

    chunks = np.array_split(np.arange(n), max(1, min(int(threads), n)))
    chunks = [c for c in chunks if c.size]

    def work(rows):
        return _estimate_rows(pset, cfg, dist[rows], idx[rows], rows)

    if len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(chunks[0])]
    F = np.concatenate([p[0] for p in parts])
    J = np.concatenate([p[1] for p in parts])
    resid = np.concatenate([p[2] for p in parts])
    cond = np.concatenate([p[3] for p in parts])
    flags = np.concatenate([p[4] for p in parts])

    ok = flags == 0
    R = np.full((n, 3, 3), np.nan)
    U = np.full((n, 3, 3), np.nan)
    V = np.full((n, 3, 3), np.nan)
    stretches = np.full((n, 3), np.nan)
    dirs = np.full((n, 3, 3), np.nan)
    if np.any(ok):
        pf, inverted, ill = tensor3.polar_decompose_masked(F[ok])
        bad = inverted | ill
        rows = np.flatnonzero(ok)
        flags[rows[bad]] |= SampleFlag.POLAR_FAILED
        good = rows[~bad]
        R[good], U[good], V[good] = pf.R[~bad], pf.U[~bad], pf.V[~bad]
        if good.size:
            eig = tensor3.eig_sym3(V[good])
            stretches[good] = eig.values
            dirs[good] = eig.vectors

    out = DefGradField(
        ids=pset.ids.copy(), X=pset.X.copy(), x=pset.x.copy(),
        F=F, R=R, U=U, V=V, stretches=stretches, directions=dirs, J=J,
        residual_rms=resid, n_neighbors=np.full(n, k, dtype=np.int64), condition=cond,
        flags=flags,
    )
    if cfg.outlier_filter:
        _flag_stretch_outliers(out, idx, cfg.outlier_mad_factor)
    return out


def _flag_stretch_outliers(out: DefGradField, idx: np.ndarray, factor: float) -> None:
    """Flag particles whose max stretch deviates from the neighbour median by > factor * MAD."""
    lam = out.stretches[:, 0]
    neigh = lam[idx]
    med = np.nanmedian(neigh, axis=1)
    mad = np.nanmedian(np.abs(neigh - med[:, None]), axis=1)
    scale = 1.4826 * np.maximum(mad, 1e-12)
    bad = out.valid & (np.abs(lam - med) > factor * scale)
    out.flags[bad] |= SampleFlag.OUTLIER


def field_quality_report(samples: DefGradField) -> dict:
    """Deterministic summary of validity flags, residuals and volume ratio J."""
    if len(samples) == 0:
        raise InvalidInputError("empty sample collection")
    flags = samples.flags
    valid = flags == 0
    n = int(flags.size)
    counts = {f.name.lower(): int(np.count_nonzero(flags & f)) for f in SampleFlag if f}
    res = samples.residual_rms[valid]
    J = samples.J[valid]
    pct = (50, 90, 99)
    report = {
        "n_samples": n,
        "n_valid": int(valid.sum()),
        "n_flagged": int(n - valid.sum()),
        "valid_fraction": float(valid.mean()),
        "flag_counts": counts,
        "residual_um": {f"p{p}": float(np.percentile(res, p)) if res.size else None for p in pct},
    }
    if J.size:
        lo, hi = float(J.min()), float(J.max())
        pad = 1e-9 * max(1.0, abs(hi))
        if hi - lo < pad:  # all J equal to rounding; keep ten finite bins
            lo, hi = lo - pad, hi + pad
        hist, edges = np.histogram(J, bins=10, range=(lo, hi))
        report["J"] = {
            "mean": float(J.mean()),
            "std": float(J.std()),
            "min": float(J.min()),
            "max": float(J.max()),
            "histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
        }
    else:
        report["J"] = None
    return report
