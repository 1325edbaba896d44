"""Synthetic two-channel light-sheet stacks, blob detection and frame linking.

Volumes are indexed ``data[ix, iy, iz]`` with voxel centres at
``origin + i * voxel_um``.  The scatter channel holds anisotropic Gaussian
spots at tracer positions; the fluorescence channel holds a uniform gel
signal with the crack void cut out.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InvalidInputError
from .kinematics import ParticleSet

CHANNELS = {"scatter": 0, "fluorescence": 1}
U16_MAX = 65535
REFINE_BATCH = 4096


@dataclass
class VoxelVolume:
    data: np.ndarray
    voxel_um: tuple = (0.68, 0.68, 2.0)
    channel: str = "scatter"
    origin_um: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InvalidInputError("volume must be three-dimensional and nonempty")
        if self.channel not in CHANNELS:
            raise InvalidInputError(f"unknown channel {self.channel!r}")
        if self.data.dtype != np.uint16:
            d = np.asarray(self.data)
            if d.min() < 0 or d.max() > U16_MAX:
                raise InvalidInputError("intensities outside the 16-bit range")
            self.data = d.astype(np.uint16)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def to_um(self, idx) -> np.ndarray:
        return np.asarray(self.origin_um) + np.asarray(idx, dtype=float) * np.asarray(self.voxel_um)

    def to_voxel(self, pos_um) -> np.ndarray:
        return (np.asarray(pos_um, dtype=float) - np.asarray(self.origin_um)) / np.asarray(self.voxel_um)


@dataclass(frozen=True)
class ImagingConfig:
    dims: tuple = (512, 512, 200)
    voxel_um: tuple = (0.68, 0.68, 2.0)
    origin_um: tuple = (0.0, 0.0, 0.0)
    psf_sigma_lateral_um: float = 0.5
    psf_sigma_axial_um: float = 4.0
    amplitude: float = 1000.0
    noise_sigma: float = 100.0
    noise_offset: float = 500.0
    gel_intensity: float = 3000.0
    bandpass_large_factor: float = 4.0
    threshold_abs: float | None = None
    threshold_sigma: float = 8.0
    centroid_half_window: tuple = (3, 3, 6)
    centroid_mask: bool = True
    centroid_max_iter: int = 50
    max_displacement_um: float = 5.0
    predictor: bool = False
    predictor_cell_um: float = 40.0
    predictor_passes: int = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.psf_sigma_lateral_um, self.psf_sigma_axial_um) <= 0:
            raise InvalidInputError("PSF sigmas must be positive")
        if self.noise_sigma < 0 or self.threshold_sigma < 0 or (self.threshold_abs or 0) < 0:
            raise InvalidInputError("noise and thresholds must be non-negative")
        if min(self.dims) < 1 or min(self.voxel_um) <= 0:
            raise InvalidInputError("invalid volume geometry")

    @property
    def psf_sigma_vox(self) -> np.ndarray:
        s = np.array([self.psf_sigma_lateral_um, self.psf_sigma_lateral_um, self.psf_sigma_axial_um])
        return s / np.asarray(self.voxel_um, dtype=float)

    @property
    def snr(self) -> float:
        return self.amplitude / self.noise_sigma if self.noise_sigma else np.inf


@dataclass(frozen=True)
class CrackVoid:
    """Open crack in the deformed frame: ``|y - plane_y| < delta(r) / 2`` behind the tip.

    ``opening`` maps distance behind the tip (micrometres) to total opening.
    """

    tip_x: float
    plane_y: float
    opening: object
    z_range: tuple = (-np.inf, np.inf)

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        r = self.tip_x - pts[..., 0]
        out = np.zeros(pts.shape[:-1], dtype=bool)
        behind = r > 0
        half = np.zeros_like(r)
        half[behind] = 0.5 * np.asarray(self.opening(r[behind]), dtype=float)
        out[behind] = np.abs(pts[..., 1][behind] - self.plane_y) < half[behind]
        return out & (pts[..., 2] >= self.z_range[0]) & (pts[..., 2] <= self.z_range[1])


@dataclass
class DetectedBlobs:
    """Detections as arrays: ``centroid_um`` (n, 3), ``peak``, ``diameter_um``, ``quality``."""

    centroid_um: np.ndarray
    peak: np.ndarray
    diameter_um: np.ndarray
    quality: np.ndarray

    def __len__(self) -> int:
        return int(self.peak.size)


@dataclass
class LinkResult:
    tracks: ParticleSet | None
    ref_index: np.ndarray
    def_index: np.ndarray
    unmatched_ref: np.ndarray
    unmatched_def: np.ndarray
    passes: list = field(default_factory=list)


def render_stack(pset: ParticleSet, which: str, cfg: ImagingConfig, void: CrackVoid | None = None,
                 seed: int | None = None) -> tuple[VoxelVolume, VoxelVolume, int]:
    """Render the scatter and fluorescence channels for reference or deformed positions.

    Returns ``(scatter, fluorescence, n_clipped)`` where ``n_clipped`` counts
    particles outside the volume, which are skipped.
    """
    if which not in ("reference", "deformed"):
        raise InvalidInputError("which must be 'reference' or 'deformed'")
    pos = pset.X if which == "reference" else pset.x
    return render_positions(pos, cfg, void, seed)


def render_positions(pos_um, cfg: ImagingConfig, void: CrackVoid | None = None, seed: int | None = None):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dims = tuple(int(d) for d in cfg.dims)
    vox = np.asarray(cfg.voxel_um, dtype=float)
    origin = np.asarray(cfg.origin_um, dtype=float)
    sig = cfg.psf_sigma_vox
    pos_v = (np.asarray(pos_um, dtype=float).reshape(-1, 3) - origin) / vox
    inside = np.all((pos_v >= -0.5) & (pos_v <= np.asarray(dims) - 0.5), axis=1)
    n_clipped = int(np.count_nonzero(~inside))

    img = np.zeros(dims, dtype=np.float64)
    half = np.ceil(4.0 * sig).astype(int)
    for p in pos_v[inside]:
        c = np.rint(p).astype(int)
        lo = np.maximum(c - half, 0)
        hi = np.minimum(c + half + 1, dims)
        g = [np.exp(-0.5 * ((np.arange(lo[a], hi[a]) - p[a]) / sig[a]) ** 2) for a in range(3)]
        img[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += cfg.amplitude * (
            g[0][:, None, None] * g[1][None, :, None] * g[2][None, None, :]
        )
    noise = rng.standard_normal(dims, dtype=np.float32) * np.float32(cfg.noise_sigma)
    scatter = np.clip(np.rint(img + cfg.noise_offset + noise), 0, U16_MAX).astype(np.uint16)

    fl = np.full(dims, cfg.gel_intensity, dtype=np.float64)
    if void is not None:
        grid = [origin[a] + vox[a] * np.arange(dims[a]) for a in range(3)]
        # the void test depends on x, y, z; evaluate per z-plane to bound memory
        xx, yy = np.meshgrid(grid[0], grid[1], indexing="ij")
        for k, z in enumerate(grid[2]):
            pts = np.stack([xx, yy, np.full_like(xx, z)], axis=-1)
            fl[:, :, k][void.contains(pts)] = 0.0
    noise = rng.standard_normal(dims, dtype=np.float32) * np.float32(cfg.noise_sigma)
    fluor = np.clip(np.rint(fl + cfg.noise_offset + noise), 0, U16_MAX).astype(np.uint16)
    kw = dict(voxel_um=tuple(cfg.voxel_um), origin_um=tuple(cfg.origin_um))
    return VoxelVolume(scatter, channel="scatter", **kw), VoxelVolume(fluor, channel="fluorescence", **kw), n_clipped


def bandpass(volume: VoxelVolume, cfg: ImagingConfig) -> np.ndarray:
    """Difference of Gaussians at the PSF scale and ``bandpass_large_factor`` times it."""
    img = volume.data.astype(np.float32)
    sig = np.array([cfg.psf_sigma_lateral_um, cfg.psf_sigma_lateral_um, cfg.psf_sigma_axial_um]) / np.asarray(
        volume.voxel_um, dtype=float
    )
    small = ndimage.gaussian_filter(img, sig, mode="nearest")
    large = ndimage.gaussian_filter(img, sig * cfg.bandpass_large_factor, mode="nearest")
    return small - large


def _robust_sigma(a: np.ndarray) -> float:
    flat = a.ravel()
    sample = flat[:: max(1, flat.size // 2_000_000)]
    med = np.median(sample)
    return float(1.4826 * np.median(np.abs(sample - med)))


def detect(volume: VoxelVolume, cfg: ImagingConfig) -> DetectedBlobs:
    """Find tracer spots and localise them to sub-voxel precision.

    Local maxima of the band-passed volume above the threshold (absolute, or
    ``threshold_sigma`` robust standard deviations) survive a 26-neighbour
    non-maximum suppression; plateaus count once.  Each spot's centroid is
    the intensity-weighted mean of the positive band-passed signal in a
    window of ``centroid_half_window`` voxels around the peak; with
    ``centroid_mask`` the weights are further multiplied by a PSF-sized
    Gaussian re-centred on the running estimate until it settles, which
    removes the pull of a truncated window towards the peak voxel.
    """
    if volume.channel != "scatter":
        raise InvalidInputError("detection runs on the scatter channel")
    if np.any(volume.data == U16_MAX):
        warnings.warn("volume contains saturated voxels; centroids may be biased", RuntimeWarning, stacklevel=2)
    bp = bandpass(volume, cfg)
    thr = cfg.threshold_abs if cfg.threshold_abs is not None else cfg.threshold_sigma * _robust_sigma(bp)
    thr = max(float(thr), np.finfo(np.float32).tiny)
    peaks = (bp == ndimage.maximum_filter(bp, size=3, mode="constant", cval=-np.inf)) & (bp > thr)
    lab, n = ndimage.label(peaks, structure=np.ones((3, 3, 3)))
    if n == 0:
        empty = np.empty(0)
        return DetectedBlobs(np.empty((0, 3)), empty, empty, empty)
    # first voxel (C order) of each plateau component
    flat = np.flatnonzero(lab.ravel())
    comp = lab.ravel()[flat]
    _, first = np.unique(comp, return_index=True)
    idx = np.column_stack(np.unravel_index(flat[first], bp.shape))

    vox = np.asarray(volume.voxel_um, dtype=float)
    # fixed-size batches bound memory and keep results independent of the spot count
    parts = [_refine(bp, idx[i:i + REFINE_BATCH], cfg, vox) for i in range(0, idx.shape[0], REFINE_BATCH)]
    cents = np.concatenate([p[0] for p in parts])
    var = np.concatenate([p[1] for p in parts])
    peak = bp[idx[:, 0], idx[:, 1], idx[:, 2]].astype(float)
    cent_um = np.asarray(volume.origin_um) + cents * vox
    sigma_lat_um = np.sqrt(0.5 * (var[:, 0] * vox[0] ** 2 + var[:, 1] * vox[1] ** 2))
    diameter = 2.0 * np.sqrt(2.0 * np.log(2.0)) * sigma_lat_um
    quality = np.clip(1.0 - thr / peak, 0.0, 1.0)
    return DetectedBlobs(cent_um, peak, diameter, quality)


def _refine(bp: np.ndarray, idx: np.ndarray, cfg: ImagingConfig, vox: np.ndarray):
    """Sub-voxel centroids (voxel units) and weighted variances around peak voxels ``idx``."""
    hw = np.asarray(cfg.centroid_half_window, dtype=int)
    grids = np.meshgrid(*[np.arange(-h, h + 1) for h in hw], indexing="ij")
    off = np.stack([g.ravel() for g in grids], axis=1).astype(np.float64)  # (w, 3)
    pos = idx[:, None, :] + off.astype(np.int64)[None]
    inside = np.all((pos >= 0) & (pos < np.asarray(bp.shape)), axis=-1)
    pos = np.clip(pos, 0, np.asarray(bp.shape) - 1)
    win = np.where(inside, bp[pos[..., 0], pos[..., 1], pos[..., 2]], 0.0).astype(np.float64)
    win = np.clip(win, 0.0, None)  # (n, w)

    tot = win.sum(axis=1)
    mu = (win @ off) / tot[:, None]
    var = (win @ off**2) / tot[:, None] - mu**2
    if cfg.centroid_mask:
        sig = np.array([cfg.psf_sigma_lateral_um, cfg.psf_sigma_lateral_um, cfg.psf_sigma_axial_um]) / vox
        mu = np.zeros_like(mu)
        for _ in range(cfg.centroid_max_iter):
            g = np.exp(-0.5 * np.sum(((off[None] - mu[:, None, :]) / sig) ** 2, axis=-1))
            w = win * g
            new = (w @ off) / w.sum(axis=1)[:, None]
            step = np.abs(new - mu).max()
            mu = new
            if step < 1e-6:
                break
        # stay inside the window if a spot is badly truncated
        mu = np.clip(mu, -hw, hw)
    return idx + mu, np.maximum(var, 0.0)


def _mutual_nn(a: np.ndarray, b: np.ndarray, max_d: float):
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    da, ia = cKDTree(b).query(a, k=1, distance_upper_bound=max_d)
    db, ib = cKDTree(a).query(b, k=1, distance_upper_bound=max_d)
    rows = np.flatnonzero(np.isfinite(da))
    cols = ia[rows]
    keep = ib[cols] == rows
    return rows[keep], cols[keep]


def _coarse_field(ref: np.ndarray, disp: np.ndarray, cell: float, lo: np.ndarray):
    keys = np.floor((ref - lo) / cell).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    med = np.empty((uniq.shape[0], 3))
    for k in range(uniq.shape[0]):
        med[k] = np.median(disp[inv == k], axis=0)
    centers = lo + (uniq + 0.5) * cell
    return cKDTree(centers), med


def link(ref: DetectedBlobs, dfm: DetectedBlobs, cfg: ImagingConfig) -> LinkResult:
    """Match reference and deformed detections into tracks.

    Pass one keeps mutual nearest neighbours within ``max_displacement_um``.
    With ``cfg.predictor`` set, later passes predict each reference blob's
    deformed position from the median displacement of earlier matches in its
    coarse grid cell (nearest populated cell if its own is empty) and
    re-match mutually within ``max_displacement_um`` of the prediction.
    Unmatched blobs are reported, never fabricated.
    """
    if len(ref) == 0 or len(dfm) == 0:
        raise InvalidInputError("both detection sets must be nonempty")
    a = ref.centroid_um
    b = dfm.centroid_um
    rows, cols = _mutual_nn(a, b, cfg.max_displacement_um)
    passes = [int(rows.size)]
    if cfg.predictor:
        lo = a.min(axis=0)
        for _ in range(max(0, cfg.predictor_passes - 1)):
            if rows.size == 0:
                break
            tree, med = _coarse_field(a[rows], b[cols] - a[rows], cfg.predictor_cell_um, lo)
            _, nearest = tree.query(a, k=1)
            pred = a + med[nearest]
            rows, cols = _mutual_nn(pred, b, cfg.max_displacement_um)
            passes.append(int(rows.size))
    order = np.argsort(rows, kind="stable")
    rows, cols = rows[order], cols[order]
    um_ref = np.setdiff1d(np.arange(len(ref)), rows)
    um_def = np.setdiff1d(np.arange(len(dfm)), cols)
    tracks = None
    if rows.size:
        q = np.minimum(ref.quality[rows], dfm.quality[cols])
        tracks = ParticleSet(rows, a[rows], b[cols], q)
    return LinkResult(tracks, rows, cols, um_ref, um_def, passes)


def gel_mask(volume: VoxelVolume) -> tuple[np.ndarray, float]:
    """Binary gel mask at the between-class-variance (Otsu) threshold."""
    from skimage.filters import threshold_otsu

    if volume.channel != "fluorescence":
        raise InvalidInputError("gel mask needs the fluorescence channel")
    t = float(threshold_otsu(volume.data))
    return volume.data > t, t


def crack_face_points(volume: VoxelVolume, axis: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Gel/void boundary points along ``axis`` with upper/lower face tags.

    Within each voxel column along ``axis`` a gel-to-void step is a lower face
    and a void-to-gel step an upper face.  The boundary is placed where the
    intensity crosses the mask threshold by linear interpolation.
    """
    mask, t = gel_mask(volume)
    img = np.moveaxis(volume.data.astype(np.float64), axis, -1)
    m = np.moveaxis(mask, axis, -1)
    lower = m[..., :-1] & ~m[..., 1:]
    upper = ~m[..., :-1] & m[..., 1:]
    pts, tags = [], []
    for sel, tag in ((lower, False), (upper, True)):
        idx = np.argwhere(sel)
        i0 = img[tuple(idx.T)]
        i1 = img[tuple(np.column_stack([idx[:, :-1], idx[:, -1] + 1]).T)]
        frac = (i0 - t) / (i0 - i1)
        pos = idx.astype(float)
        pos[:, -1] += frac
        full = np.insert(np.delete(pos, -1, axis=1), axis, pos[:, -1], axis=1)
        pts.append(volume.to_um(full))
        tags.append(np.full(idx.shape[0], tag))
    return np.vstack(pts), np.concatenate(tags)
