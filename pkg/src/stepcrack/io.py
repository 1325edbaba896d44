"""File formats: particle tables, raw voxel volumes, point-cloud export, pipeline config.

Particle table
    UTF-8 CSV, LF line endings, header ``id,Xx,Xy,Xz,xx,xy,xz`` optionally
    followed by ``quality`` and/or ``label``.  Positions in micrometres,
    printed with 9 significant digits.

Raw volume (``.cfvol``), little-endian throughout::

    offset  size  field
    0       6     magic b"CFVOL1"
    6       12    nx, ny, nz            uint32
    18      24    dx, dy, dz (um)       float64
    42      1     channel tag           0 = scatter, 1 = fluorescence
    43      21    zero padding
    64      ...   nx*ny*nz uint16 intensities, x fastest, then y, then z
"""
from __future__ import annotations

import csv
import io as _io
import os
import struct
from pathlib import Path

import numpy as np

from .constitutive import ScalarField
from .errors import FormatError
from .imaging import CHANNELS, VoxelVolume
from .kinematics import ParticleSet

TABLE_COLUMNS = ("id", "Xx", "Xy", "Xz", "xx", "xy", "xz")
OPTIONAL_COLUMNS = ("quality", "label")
MAGIC = b"CFVOL1"
HEADER_SIZE = 64
_HEADER = struct.Struct("<6s3I3dB")


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def write_particle_table(path, pset: ParticleSet, quality: bool = True, labels: bool | None = None) -> None:
    labels = pset.labels is not None if labels is None else labels
    header = list(TABLE_COLUMNS) + (["quality"] if quality else []) + (["label"] if labels else [])
    lines = [",".join(header)]
    for i in range(len(pset)):
        row = [str(int(pset.ids[i]))] + [_fmt(v) for v in pset.X[i]] + [_fmt(v) for v in pset.x[i]]
        if quality:
            row.append(_fmt(pset.quality[i]))
        if labels:
            row.append(str(int(pset.labels[i])))
        lines.append(",".join(row))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_particle_table(path) -> ParticleSet:
    text = Path(path).read_bytes().decode("utf-8")
    if "\r" in text:
        raise FormatError(f"{path}: CR line endings are not allowed")
    rows = list(csv.reader(_io.StringIO(text)))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = rows[0]
    if tuple(header[:7]) != TABLE_COLUMNS:
        raise FormatError(f"{path}: header must start with {','.join(TABLE_COLUMNS)}, got {','.join(header)}")
    extra = header[7:]
    if any(c not in OPTIONAL_COLUMNS for c in extra) or len(set(extra)) != len(extra):
        raise FormatError(f"{path}: unexpected column(s) {','.join(extra)}")
    body = rows[1:]
    if not body:
        raise FormatError(f"{path}: no particle records")
    for ln, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise FormatError(f"{path}:{ln}: expected {len(header)} fields, found {len(r)}")
    try:
        arr = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric field ({exc})") from None
    ids = arr[:, 0]
    if np.any(ids != np.round(ids)):
        raise FormatError(f"{path}: ids must be integers")
    col = {c: 7 + k for k, c in enumerate(extra)}
    quality = arr[:, col["quality"]] if "quality" in col else None
    labels = arr[:, col["label"]].astype(np.int64) if "label" in col else None
    return ParticleSet(ids.astype(np.int64), arr[:, 1:4], arr[:, 4:7], quality, labels)


def write_raw_volume(path, vol: VoxelVolume) -> None:
    nx, ny, nz = vol.dims
    head = _HEADER.pack(MAGIC, nx, ny, nz, *map(float, vol.voxel_um), CHANNELS[vol.channel])
    head = head + b"\0" * (HEADER_SIZE - len(head))
    payload = np.asarray(vol.data, dtype="<u2").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(payload)


def read_raw_volume(path) -> VoxelVolume:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(raw)} of {HEADER_SIZE} bytes)")
    magic, nx, ny, nz, dx, dy, dz, tag = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if any(raw[_HEADER.size:HEADER_SIZE]):
        raise FormatError(f"{path}: nonzero header padding")
    names = {v: k for k, v in CHANNELS.items()}
    if tag not in names:
        raise FormatError(f"{path}: unknown channel tag {tag}")
    expected = 2 * nx * ny * nz
    got = len(raw) - HEADER_SIZE
    if got != expected:
        kind = "truncated" if got < expected else "oversized"
        raise FormatError(f"{path}: {kind} payload, {got} bytes for dims {nx}x{ny}x{nz} ({expected} expected)")
    data = np.frombuffer(raw, dtype="<u2", offset=HEADER_SIZE).reshape((nx, ny, nz), order="F")
    return VoxelVolume(data.astype(np.uint16), voxel_um=(dx, dy, dz), channel=names[tag])


def export_point_cloud(path, field: ScalarField, deformed: bool = False) -> int:
    """Legacy ASCII VTK poly-data with the valid samples of ``field``.

    Writes the scalar as ``field.name`` and, when present, the vector field as
    ``<name>_dir``.  Returns the number of points written.
    """
    ok = field.valid
    pos = (field.x if deformed else field.X)[ok]
    vals = field.values[ok]
    n = int(ok.sum())
    name = field.name.replace(" ", "_")
    out = [
        "# vtk DataFile Version 3.0",
        f"{name} [{field.unit}]",
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {n} double",
    ]
    out += [" ".join(_fmt(v) for v in p) for p in pos]
    out.append(f"VERTICES {n} {2 * n}")
    out += [f"1 {i}" for i in range(n)]
    out += [f"POINT_DATA {n}", f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
    out += [_fmt(v) for v in vals]
    out += ["SCALARS particle_id int 1", "LOOKUP_TABLE default"]
    out += [str(int(i)) for i in field.ids[ok]]
    if field.vectors is not None:
        out.append(f"VECTORS {name}_dir double")
        out += [" ".join(_fmt(v) for v in d) for d in field.vectors[ok]]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8", newline="\n")
    return n


def write_table(path, columns: dict) -> None:
    """Plain CSV with one column per dict entry (plot-data and summary tables)."""
    keys = list(columns)
    cols = [np.asarray(columns[k]).reshape(-1) for k in keys]
    n = {c.size for c in cols}
    if len(n) != 1:
        raise FormatError("table columns have different lengths")
    lines = [",".join(keys)]
    for i in range(n.pop()):
        lines.append(",".join(_fmt(c[i]) if np.issubdtype(c.dtype, np.floating) else str(c[i]) for c in cols))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_table(path) -> dict:
    rows = list(csv.reader(_io.StringIO(Path(path).read_text(encoding="utf-8"))))
    if not rows:
        raise FormatError(f"{path}: empty table")
    header, body = rows[0], rows[1:]
    for ln, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise FormatError(f"{path}:{ln}: expected {len(header)} fields, found {len(r)}")
    out = {}
    for k, name in enumerate(header):
        vals = [r[k] for r in body]
        try:
            out[name] = np.array([float(v) for v in vals])
        except ValueError:
            out[name] = np.array(vals)
    return out


def write_scalar_field(path, field: ScalarField) -> None:
    cols = {
        "id": field.ids, "Xx": field.X[:, 0], "Xy": field.X[:, 1], "Xz": field.X[:, 2],
        "xx": field.x[:, 0], "xy": field.x[:, 1], "xz": field.x[:, 2],
        "value": field.values, "valid": field.valid.astype(np.int64), "flags": field.flags,
    }
    if field.vectors is not None:
        cols.update({"dx": field.vectors[:, 0], "dy": field.vectors[:, 1], "dz": field.vectors[:, 2]})
    write_table(path, cols)
    Path(str(path) + ".meta").write_text(f"name={field.name}\nunit={field.unit}\n", encoding="utf-8")


def read_scalar_field(path) -> ScalarField:
    meta_path = Path(str(path) + ".meta")
    if not meta_path.exists():
        raise FormatError(f"{path}: missing sidecar {meta_path.name}")
    meta = dict(line.split("=", 1) for line in meta_path.read_text(encoding="utf-8").splitlines() if line)
    t = read_table(path)
    need = {"id", "Xx", "Xy", "Xz", "xx", "xy", "xz", "value", "valid", "flags"}
    if not need <= set(t):
        raise FormatError(f"{path}: missing column(s) {', '.join(sorted(need - set(t)))}")
    X = np.column_stack([t["Xx"], t["Xy"], t["Xz"]])
    x = np.column_stack([t["xx"], t["xy"], t["xz"]])
    vec = np.column_stack([t["dx"], t["dy"], t["dz"]]) if "dx" in t else None
    valid = t["valid"].astype(bool)
    vals = np.where(valid, t["value"], np.nan)
    return ScalarField(meta["name"], meta["unit"], t["id"].astype(np.int64), X, x, vals, valid, vec,
                       t["flags"].astype(np.int64))


def sha256_file(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p


_F_COLS = [f"F{i}{j}" for i in (1, 2, 3) for j in (1, 2, 3)]


def write_defgrad_table(path, dg) -> None:
    """Per-particle F and diagnostics, printed with 17 digits so float64 values survive exactly."""
    cols = ["id", "Xx", "Xy", "Xz", "xx", "xy", "xz", *_F_COLS, "residual_rms", "n_neighbors", "condition", "flags"]
    lines = [",".join(cols)]
    F = dg.F.reshape(-1, 9)
    for i in range(len(dg)):
        vals = [str(int(dg.ids[i]))]
        vals += [repr(float(v)) for v in dg.X[i]] + [repr(float(v)) for v in dg.x[i]]
        vals += [repr(float(v)) for v in F[i]]
        vals += [repr(float(dg.residual_rms[i])), str(int(dg.n_neighbors[i])), repr(float(dg.condition[i]))]
        vals.append(str(int(dg.flags[i])))
        lines.append(",".join(vals))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_defgrad_table(path):
    """Inverse of :func:`write_defgrad_table`; polar factors and stretches are recomputed."""
    from . import tensor3
    from .kinematics import DefGradField

    t = read_table(path)
    need = ["id", "Xx", "Xy", "Xz", "xx", "xy", "xz", *_F_COLS, "residual_rms", "n_neighbors", "condition", "flags"]
    missing = [c for c in need if c not in t]
    if missing:
        raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
    n = t["id"].size
    F = np.column_stack([t[c] for c in _F_COLS]).reshape(n, 3, 3)
    flags = t["flags"].astype(np.int64)
    ok = flags == 0
    R = np.full((n, 3, 3), np.nan)
    U = R.copy()
    V = R.copy()
    stretches = np.full((n, 3), np.nan)
    dirs = np.full((n, 3, 3), np.nan)
    if np.any(ok):
        pf, inv, ill = tensor3.polar_decompose_masked(F[ok])
        if np.any(inv | ill):
            raise FormatError(f"{path}: rows flagged valid have inadmissible F")
        R[ok], U[ok], V[ok] = pf.R, pf.U, pf.V
        eig = tensor3.eig_sym3(V[ok])
        stretches[ok] = eig.values
        dirs[ok] = eig.vectors
    return DefGradField(
        ids=t["id"].astype(np.int64),
        X=np.column_stack([t["Xx"], t["Xy"], t["Xz"]]),
        x=np.column_stack([t["xx"], t["xy"], t["xz"]]),
        F=F, R=R, U=U, V=V, stretches=stretches, directions=dirs,
        J=np.where(ok, np.linalg.det(F), np.nan),
        residual_rms=t["residual_rms"], n_neighbors=t["n_neighbors"].astype(np.int64),
        condition=t["condition"], flags=flags,
    )
