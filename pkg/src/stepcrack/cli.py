"""Command-line pipeline: composable stage subcommands plus ``pipeline``.

Every subcommand reads its inputs, writes fixed-name outputs into
``--out-dir`` and appends a stage record (input/output sha256, timing) to
``manifest.json`` there.  Exit codes::

    0  success
    2  configuration or usage error
    3  input error (missing/malformed file, invalid argument)
    4  numerical failure (fit failure, inadmissible kinematics)
    5  --strict run failure (too many invalid particles)

Examples::

    stepcrack synth-affine --out-dir run --seed 3
    stepcrack gradient --particles run/particles.csv --out-dir run --threads 4
    stepcrack pipeline --config suite.yaml --out-dir suite
    STEPCRACK__MATERIAL__MU_PA=30000 stepcrack energy --defgrad run/defgrad.csv --out-dir run
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .config import PipelineConfig, load_config
from .constitutive import MaterialModel, max_principal_stretch_field, strain_energy_density
from .errors import (
    ConditioningError,
    ConfigError,
    FitError,
    FormatError,
    InvalidInputError,
    InvertedElementError,
    StepcrackError,
)
from .fracture import CtodProfile, extract_ctod_from_surface, fit_ctod, regress_gc_vs_elig, window_sensitivity
from .imaging import DetectedBlobs, ImagingConfig, detect, link, render_stack
from .kinematics import EstimatorConfig, estimate_def_grad, field_quality_report
from .regions import RegionSpec, integrate_region_energy, radial_weights, select_region
from .synth import LefmFieldSpec, SteppedCrackPhantom, gen_affine, gen_lefm_mode1, gen_stepped_crack, phantom_suite

log = logging.getLogger("stepcrack")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4
EXIT_STRICT = 5

MANIFEST = "manifest.json"


class StrictFailure(StepcrackError):
    pass


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{p}: not valid JSON ({exc})") from None


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    return p


# --------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    """Provenance for one output directory.

    ``stages`` holds, per stage, relative input/output paths with their sha256
    and the wall time.  :meth:`output_digest` ignores timings and timestamps so
    it can be compared across runs.
    """

    root: Path
    config_sha256: str
    version: str = __version__
    created: str = ""
    stages: list = field(default_factory=list)

    @classmethod
    def open(cls, root, cfg: PipelineConfig) -> "RunManifest":
        root = sio.ensure_dir(root)
        m = cls(root, cfg.digest(), created=datetime.now(timezone.utc).isoformat(timespec="seconds"))
        p = root / MANIFEST
        if p.exists():
            old = _load_json(p)
            if old.get("config_sha256") == m.config_sha256:
                m.stages = old.get("stages", [])
                m.created = old.get("created", m.created)
        return m

    def _rel(self, p) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(p)

    def find(self, name: str, inputs: dict) -> dict | None:
        for st in self.stages:
            if st["stage"] == name and st["inputs"] == inputs:
                return st
        return None

    def record(self, name: str, inputs: dict, outputs, seconds: float) -> dict:
        entry = {
            "stage": name,
            "inputs": inputs,
            "outputs": {self._rel(p): sio.sha256_file(p) for p in outputs},
            "seconds": round(seconds, 4),
        }
        self.stages = [s for s in self.stages if not (s["stage"] == name and s["inputs"] == inputs)]
        self.stages.append(entry)
        return entry

    def hash_inputs(self, paths) -> dict:
        return {self._rel(p): sio.sha256_file(p) for p in paths}

    def output_digest(self) -> dict:
        out = {}
        for st in self.stages:
            out.update(st["outputs"])
        return dict(sorted(out.items()))

    def save(self) -> Path:
        p = self.root / MANIFEST
        _dump_json(p, {
            "tool": "stepcrack",
            "version": self.version,
            "config_sha256": self.config_sha256,
            "created": self.created,
            "stages": self.stages,
        })
        return p


@dataclass
class Ctx:
    cfg: PipelineConfig
    out: Path
    threads: int
    strict: bool
    cache: bool
    manifest: RunManifest


def _run_stage(ctx: Ctx, name: str, inputs, fn):
    """Run ``fn() -> list of output paths`` and record it; reuse a cached run when allowed."""
    hashed = ctx.manifest.hash_inputs([_require(p) for p in inputs])
    hashed["config"] = ctx.cfg.digest()
    if ctx.cache:
        prev = ctx.manifest.find(name, hashed)
        if prev is not None:
            paths = {ctx.manifest.root / k: v for k, v in prev["outputs"].items()}
            if all(p.exists() and sio.sha256_file(p) == h for p, h in paths.items()):
                log.info("%s: cached", name)
                return list(paths)
    t0 = time.perf_counter()
    outputs = fn()
    ctx.manifest.record(name, hashed, outputs, time.perf_counter() - t0)
    ctx.manifest.save()
    return outputs


# --------------------------------------------------------------------------
# config adapters


def material(cfg: PipelineConfig) -> MaterialModel:
    return MaterialModel(mu=cfg.material.mu_pa, use_isochoric=cfg.material.use_isochoric)


def estimator(cfg: PipelineConfig) -> EstimatorConfig:
    e = cfg.estimator
    return EstimatorConfig(
        k_neighbors=e.k_neighbors, weight_scale_mode=e.weight_scale_mode, fixed_h_um=e.fixed_h_um,
        min_neighbors=e.min_neighbors, max_condition=e.max_condition, outlier_filter=e.outlier_filter,
    )


def imaging(cfg: PipelineConfig) -> ImagingConfig:
    m = cfg.imaging
    return ImagingConfig(
        dims=tuple(m.dims), voxel_um=tuple(m.voxel_um), origin_um=tuple(m.origin_um),
        psf_sigma_lateral_um=m.psf_sigma_lateral_um, psf_sigma_axial_um=m.psf_sigma_axial_um,
        amplitude=m.amplitude_counts, noise_sigma=m.noise_sigma_counts, noise_offset=m.noise_offset_counts,
        gel_intensity=m.gel_intensity_counts, threshold_abs=m.threshold_abs_counts,
        threshold_sigma=m.threshold_sigma, centroid_half_window=tuple(m.centroid_half_window_vox),
        centroid_mask=m.centroid_mask,
        max_displacement_um=m.max_displacement_um, predictor=m.predictor, predictor_cell_um=m.predictor_cell_um,
        seed=cfg.seed,
    )


def stepped_base(cfg: PipelineConfig) -> SteppedCrackPhantom:
    s = cfg.synth.stepped
    return SteppedCrackPhantom(
        density_per_um3=s.density_per_um3, far_field_stretch=s.far_field_stretch,
        ligament_half_width_um=s.ligament_half_width_um, blend_um=s.blend_um,
        core_margin_um=s.core_margin_um, mu=cfg.material.mu_pa,
    )


def _faces_table(path, pts, upper) -> None:
    sio.write_table(path, {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2], "upper": upper.astype(np.int64)})


def _read_faces(path):
    t = sio.read_table(_require(path))
    if not {"x", "y", "z", "upper"} <= set(t):
        raise FormatError(f"{path}: face table needs columns x,y,z,upper")
    return np.column_stack([t["x"], t["y"], t["z"]]), t["upper"].astype(bool)


# --------------------------------------------------------------------------
# stages


def stage_synth_affine(ctx: Ctx) -> list:
    a = ctx.cfg.synth.affine
    out = ctx.out / "particles.csv"

    def run():
        pset = gen_affine(a.n, (a.bounds_lo_um, a.bounds_hi_um), np.asarray(a.F0), a.c_um, seed=ctx.cfg.seed)
        sio.write_particle_table(out, pset)
        return [out]

    return _run_stage(ctx, "synth-affine", [], run)


def stage_synth_lefm(ctx: Ctx) -> list:
    s = ctx.cfg.synth.lefm
    mu = ctx.cfg.material.mu_pa
    K = float(np.sqrt(s.g_j_per_m2 * 3.0 * mu))
    spec = LefmFieldSpec(K, mu, tip=tuple(s.tip_um))

    def run():
        fld = gen_lefm_mode1(s.n, (s.bounds_lo_um, s.bounds_hi_um), spec, seed=ctx.cfg.seed,
                             r_excl_um=s.r_excl_um, face_r_max_um=s.face_r_max_um)
        paths = [ctx.out / "particles.csv", ctx.out / "faces.csv", ctx.out / "truth.json"]
        sio.write_particle_table(paths[0], fld.particles)
        _faces_table(paths[1], fld.faces.points, fld.faces.upper)
        _dump_json(paths[2], {
            "kind": "lefm-mode1", "K_I": K, "G_true": spec.G, "mu_pa": mu, "kappa": spec.kappa,
            "tip_um": list(map(float, fld.faces.tip)), "direction": list(map(float, fld.faces.direction)),
        })
        return paths

    return _run_stage(ctx, "synth-lefm", [], run)


def _phantom_truth(ph: SteppedCrackPhantom, fld) -> dict:
    blo, bhi = ph.ligament_box
    region = RegionSpec.ligament((blo[2], bhi[2]), (blo[0], bhi[0]), ph.ligament_half_width_um,
                                 0.5 * (blo[1] + bhi[1]))
    return {
        "kind": "stepped-crack",
        "G_true": ph.G_target,
        "E_lig_closed_form": ph.E_lig_closed_form,
        "ligament_stretch": ph.ligament_stretch,
        "amplification": ph.amplification,
        "far_field_stretch": ph.far_field_stretch,
        "K_I": ph.K_I,
        "mu_pa": ph.mu,
        "ligament_region": region.to_dict(),
        "tip_um": list(map(float, fld.faces.tip)),
        "direction": list(map(float, fld.faces.direction)),
        "n_particles": len(fld.particles),
        "n_ligament": int(fld.labels.sum()),
    }


def stage_synth_stepped(ctx: Ctx) -> list:
    """One sub-directory per phantom of the configured suite, plus ``suite.json``."""
    s = ctx.cfg.synth.stepped
    phs = phantom_suite(s.e_lig_targets_j, s.slope_per_m2, s.intercept_j_per_m2, stepped_base(ctx.cfg))

    def run():
        paths = []
        listing = []
        for i, ph in enumerate(phs):
            d = sio.ensure_dir(ctx.out / f"phantom_{i:02d}")
            fld = gen_stepped_crack(ph, seed=ctx.cfg.seed + i)
            sio.write_particle_table(d / "particles.csv", fld.particles)
            _faces_table(d / "faces.csv", fld.faces.points, fld.faces.upper)
            _dump_json(d / "truth.json", _phantom_truth(ph, fld))
            paths += [d / "particles.csv", d / "faces.csv", d / "truth.json"]
            listing.append(d.name)
        _dump_json(ctx.out / "suite.json", {
            "phantoms": listing, "slope_per_m2": s.slope_per_m2, "intercept_j_per_m2": s.intercept_j_per_m2,
        })
        return paths + [ctx.out / "suite.json"]

    return _run_stage(ctx, "synth-stepped", [], run)


def stage_render(ctx: Ctx, particles, which: str) -> list:
    def run():
        pset = sio.read_particle_table(particles)
        sc, fl, clipped = render_stack(pset, which, imaging(ctx.cfg))
        if clipped:
            log.warning("render: %d particles outside the volume were skipped", clipped)
        paths = [ctx.out / f"{which}_scatter.cfvol", ctx.out / f"{which}_fluorescence.cfvol"]
        sio.write_raw_volume(paths[0], sc)
        sio.write_raw_volume(paths[1], fl)
        return paths

    return _run_stage(ctx, f"render:{which}", [particles], run)


def _write_blobs(path, b: DetectedBlobs) -> None:
    c = b.centroid_um
    sio.write_table(path, {"x_um": c[:, 0], "y_um": c[:, 1], "z_um": c[:, 2], "peak": b.peak,
                           "diameter_um": b.diameter_um, "quality": b.quality})


def _read_blobs(path) -> DetectedBlobs:
    t = sio.read_table(_require(path))
    need = {"x_um", "y_um", "z_um", "peak", "diameter_um", "quality"}
    if not need <= set(t):
        raise FormatError(f"{path}: blob table needs columns {','.join(sorted(need))}")
    return DetectedBlobs(np.column_stack([t["x_um"], t["y_um"], t["z_um"]]).reshape(-1, 3),
                         t["peak"], t["diameter_um"], t["quality"])


def stage_detect(ctx: Ctx, volume) -> list:
    out = ctx.out / (Path(volume).stem + "_blobs.csv")

    def run():
        blobs = detect(sio.read_raw_volume(volume), imaging(ctx.cfg))
        log.info("detect: %d blobs", len(blobs))
        _write_blobs(out, blobs)
        return [out]

    return _run_stage(ctx, "detect:" + Path(volume).name, [volume], run)


def stage_link(ctx: Ctx, ref, dfm) -> list:
    def run():
        res = link(_read_blobs(ref), _read_blobs(dfm), imaging(ctx.cfg))
        if res.tracks is None:
            raise FitError("linking produced no tracks")
        paths = [ctx.out / "tracks.csv", ctx.out / "link.json"]
        sio.write_particle_table(paths[0], res.tracks)
        _dump_json(paths[1], {"n_tracks": len(res.tracks), "unmatched_ref": int(res.unmatched_ref.size),
                              "unmatched_def": int(res.unmatched_def.size), "passes": res.passes})
        return paths

    return _run_stage(ctx, "link", [ref, dfm], run)


def stage_gradient(ctx: Ctx, particles) -> list:
    def run():
        pset = sio.read_particle_table(particles)
        dg = estimate_def_grad(pset, estimator(ctx.cfg), threads=ctx.threads)
        rep = field_quality_report(dg)
        paths = [ctx.out / "defgrad.csv", ctx.out / "quality.json"]
        sio.write_defgrad_table(paths[0], dg)
        _dump_json(paths[1], rep)
        bad = 1.0 - rep["valid_fraction"]
        if bad > ctx.cfg.strict_max_invalid_fraction:
            msg = (f"{bad:.1%} of particles flagged invalid "
                   f"(limit {ctx.cfg.strict_max_invalid_fraction:.1%}): {rep['flag_counts']}")
            if ctx.strict:
                raise StrictFailure(msg)
            log.warning("gradient: %s", msg)
        return paths

    return _run_stage(ctx, "gradient", [particles], run)


def stage_energy(ctx: Ctx, defgrad) -> list:
    def run():
        dg = sio.read_defgrad_table(defgrad)
        W = strain_energy_density(dg, material(ctx.cfg))
        lam = max_principal_stretch_field(dg)
        paths = [ctx.out / "W.csv", ctx.out / "max_stretch.csv", ctx.out / "W.vtk", ctx.out / "max_stretch.vtk"]
        sio.write_scalar_field(paths[0], W)
        sio.write_scalar_field(paths[1], lam)
        sio.export_point_cloud(paths[2], W)
        sio.export_point_cloud(paths[3], lam)
        return paths + [Path(str(paths[0]) + ".meta"), Path(str(paths[1]) + ".meta")]

    return _run_stage(ctx, "energy", [defgrad], run)


def _ligament_spec(ctx: Ctx, truth) -> RegionSpec:
    if ctx.cfg.regions.ligament is not None:
        return RegionSpec.from_dict(ctx.cfg.regions.ligament)
    if truth is None:
        raise InvalidInputError("no ligament region: set regions.ligament in the config or pass --truth")
    return RegionSpec.from_dict(_load_json(truth)["ligament_region"])


def stage_region_energy(ctx: Ctx, field_path, particles, truth=None) -> list:
    inputs = [field_path, particles] + ([truth] if truth else [])

    def run():
        W = sio.read_scalar_field(field_path)
        pset = sio.read_particle_table(particles)
        spec = _ligament_spec(ctx, truth)
        ids = select_region(pset, spec)
        box = ctx.cfg.regions.calibration_box_um
        wts = radial_weights(pset, ctx.cfg.regions.k_vol, calibration_box=box)
        res = integrate_region_energy(W, ids, wts)
        out = ctx.out / "region_energy.json"
        _dump_json(out, {
            "E_J": res.E, "n_particles": res.n_particles, "volume_estimate_m3": res.volume_estimate,
            "coverage": res.coverage, "c_cal": wts.c_cal, "calibration_box_um": [list(b) for b in wts.calibration_box],
            "region": spec.to_dict(),
            "note": "ligament membership and radial weights are reconstructed definitions",
        })
        return [out]

    return _run_stage(ctx, "region-energy", inputs, run)


def stage_fit_ctod(ctx: Ctx, faces, truth=None, tip=None) -> list:
    inputs = [faces] + ([truth] if truth else [])
    f = ctx.cfg.fracture

    def run():
        pts, upper = _read_faces(faces)
        if tip is not None:
            t, direction = np.asarray(tip, dtype=float), (1.0, 0.0, 0.0)
        elif truth is not None:
            tr = _load_json(truth)
            t, direction = np.asarray(tr["tip_um"]), tr.get("direction", (1.0, 0.0, 0.0))
        else:
            raise InvalidInputError("fit-ctod needs --tip or --truth for the tip estimate")
        prof = extract_ctod_from_surface(pts, upper, t, direction=direction, bin_um=f.bin_um)
        mat = material(ctx.cfg)
        fit = fit_ctod(prof, mat, (f.r_min_um, f.r_max_um))
        sens = window_sensitivity(prof, mat, f.sensitivity_windows_um)
        paths = [ctx.out / "ctod_profile.csv", ctx.out / "fit.json"]
        sio.write_table(paths[0], {"r_um": prof.r_um, "delta_um": prof.delta_um, "count": prof.counts})
        _dump_json(paths[1], {
            "C_sqrt_m": fit.C, "r_tip_offset_um": fit.r_tip_offset, "K_I_pa_sqrt_m": fit.K_I,
            "G_c_J_per_m2": fit.G_c, "E_eff_pa": fit.E_eff, "fit_rms_um": fit.fit_rms,
            "r_range_used_um": list(fit.r_range_used), "n_samples": fit.n_samples,
            "window_sensitivity": sens,
        })
        for row in sens:
            if "G_c" in row:
                log.info("fit-ctod window [%g, %g] um: G_c = %.4g J/m^2", row["r_min_um"], row["r_max_um"], row["G_c"])
            else:
                log.info("fit-ctod window [%g, %g] um: %s", row["r_min_um"], row["r_max_um"], row["error"])
        return paths

    return _run_stage(ctx, "fit-ctod", inputs, run)


def stage_regress(ctx: Ctx, points) -> list:
    def run():
        t = sio.read_table(_require(points))
        if not {"E_lig_J", "G_c_J_per_m2"} <= set(t):
            raise FormatError(f"{points}: needs columns E_lig_J,G_c_J_per_m2")
        e, g = t["E_lig_J"], t["G_c_J_per_m2"]
        res = regress_gc_vs_elig(e, g)
        paths = [ctx.out / "regression.json", ctx.out / "plot_points.csv", ctx.out / "plot_line.csv"]
        _dump_json(paths[0], {"slope_per_m2": res.slope, "intercept_J_per_m2": res.intercept,
                              "r_squared": res.r_squared, "n_points": res.n_points,
                              "residuals_J_per_m2": res.residuals.tolist()})
        sio.write_table(paths[1], {"E_lig_J": e, "G_c_J_per_m2": g, "G_fit_J_per_m2": res.predict(e),
                                   "residual_J_per_m2": res.residuals})
        xs = np.linspace(min(0.0, float(e.min())), float(e.max()), 51)
        sio.write_table(paths[2], {"E_lig_J": xs, "G_fit_J_per_m2": res.predict(xs)})
        return paths

    return _run_stage(ctx, "regress", [points], run)


def sci(v: float, digits: int = 3) -> str:
    """``3.84e+07`` rendered as ``3.84×10^7``."""
    if v == 0 or not np.isfinite(v):
        return f"{v:.{digits}g}"
    exp = int(np.floor(np.log10(abs(v))))
    if -2 <= exp <= 3:
        return f"{v:.{digits}g}"
    return f"{v / 10**exp:.{digits}g}×10^{exp}"


def render_report(regression: dict, rows: list | None = None) -> str:
    lines = [
        "stepcrack report",
        "================",
        "",
        "Fracture energy vs ligament energy, G_c = slope * E_lig + intercept",
        f"  slope:      {sci(regression['slope_per_m2'])} m^-2",
        f"  intercept:  {sci(regression['intercept_J_per_m2'])} J/m^2",
        f"  r^2:        {regression['r_squared']:.6f}",
        f"  points:     {regression['n_points']}",
    ]
    if rows:
        lines += ["", f"  {'sample':<12}{'E_lig [J]':>14}{'G_c [J/m^2]':>14}{'coverage':>10}"]
        for r in rows:
            lines.append(f"  {r['name']:<12}{r['E_lig_J']:>14.4e}{r['G_c_J_per_m2']:>14.4f}{r['coverage']:>10.3f}")
    lines += ["", "Ligament membership and particle radii are reconstructed definitions."]
    return "\n".join(lines) + "\n"


def stage_report(ctx: Ctx, regression, summary=None) -> list:
    inputs = [regression] + ([summary] if summary else [])

    def run():
        reg = _load_json(regression)
        rows = None
        if summary is not None:
            t = sio.read_table(summary)
            rows = [{"name": str(t["name"][i]), "E_lig_J": float(t["E_lig_J"][i]),
                     "G_c_J_per_m2": float(t["G_c_J_per_m2"][i]), "coverage": float(t["coverage"][i])}
                    for i in range(t["name"].size)]
        out = ctx.out / "report.txt"
        out.write_text(render_report(reg, rows), encoding="utf-8")
        return [out]

    return _run_stage(ctx, "report", inputs, run)


def stage_pipeline(ctx: Ctx) -> list:
    """Stepped-crack suite: synthesize, then per phantom gradient, energy, ligament energy and CTOD fit; regress."""
    stage_synth_stepped(ctx)
    suite = _load_json(ctx.out / "suite.json")
    names, e_lig, g_c, cov = [], [], [], []
    for name in suite["phantoms"]:
        d = ctx.out / name
        sub = Ctx(ctx.cfg, d, ctx.threads, ctx.strict, ctx.cache, RunManifest.open(d, ctx.cfg))
        stage_gradient(sub, d / "particles.csv")
        stage_energy(sub, d / "defgrad.csv")
        stage_region_energy(sub, d / "W.csv", d / "particles.csv", d / "truth.json")
        stage_fit_ctod(sub, d / "faces.csv", d / "truth.json")
        re_ = _load_json(d / "region_energy.json")
        fit = _load_json(d / "fit.json")
        names.append(name)
        e_lig.append(re_["E_J"])
        g_c.append(fit["G_c_J_per_m2"])
        cov.append(re_["coverage"])
        log.info("%s: E_lig = %.4e J, G_c = %.4f J/m^2", name, e_lig[-1], g_c[-1])
    points = ctx.out / "points.csv"
    sio.write_table(points, {"name": np.array(names), "E_lig_J": np.array(e_lig),
                             "G_c_J_per_m2": np.array(g_c), "coverage": np.array(cov)})
    ctx.manifest.record("collect", {}, [points], 0.0)
    ctx.manifest.save()
    stage_regress(ctx, points)
    return stage_report(ctx, ctx.out / "regression.json", points)


# --------------------------------------------------------------------------
# argument parsing


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="YAML pipeline config")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (results do not depend on it)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base random seed")
    p.add_argument("--strict", action="store_true", default=argparse.SUPPRESS,
                   help="fail when the invalid-particle fraction exceeds strict_max_invalid_fraction")
    p.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--cache", action="store_true", default=argparse.SUPPRESS,
                   help="skip stages whose inputs and config are unchanged since the last run")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="stepcrack", description=__doc__.split("\n\n")[0], parents=[common])
    ap.add_argument("--version", action="version", version=f"stepcrack {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    add("synth-affine", "uniform particles under a global affine map")
    add("synth-lefm", "particles displaced by a mode-I crack field, with crack faces")
    add("synth-stepped", "stepped-crack phantom suite with ligament labels")
    p = add("render", "render scatter and fluorescence stacks")
    p.add_argument("--particles", type=Path, required=True)
    p.add_argument("--which", choices=("reference", "deformed"), required=True)
    p = add("detect", "detect tracer spots in a scatter stack")
    p.add_argument("--volume", type=Path, required=True)
    p = add("link", "link reference and deformed detections into tracks")
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--def", dest="dfm", type=Path, required=True)
    p = add("gradient", "per-particle deformation gradients")
    p.add_argument("--particles", type=Path, required=True)
    p = add("energy", "strain energy density and maximum principal stretch")
    p.add_argument("--defgrad", type=Path, required=True)
    p = add("region-energy", "integrate W over the ligament region")
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--particles", type=Path, required=True)
    p.add_argument("--truth", type=Path, help="phantom truth.json supplying the ligament region")
    p = add("fit-ctod", "fracture energy from crack-face opening")
    p.add_argument("--faces", type=Path, required=True)
    p.add_argument("--truth", type=Path, help="truth.json supplying the tip estimate")
    p.add_argument("--tip", type=float, nargs=3, metavar=("X", "Y", "Z"), help="tip estimate in um")
    p = add("regress", "regress G_c on E_lig")
    p.add_argument("--points", type=Path, required=True, help="CSV with E_lig_J,G_c_J_per_m2")
    p = add("report", "human-readable report")
    p.add_argument("--regression", type=Path, required=True)
    p.add_argument("--summary", type=Path, help="per-sample table from pipeline (points.csv)")
    add("pipeline", "run the stepped-crack suite end to end")
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    opts = vars(args)
    logging.basicConfig(level=logging.INFO if opts.get("verbose") else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(opts.get("config"))
        if "seed" in opts:
            cfg.seed = int(opts["seed"])
        if "threads" in opts:
            cfg.threads = int(opts["threads"])
        if cfg.threads < 1:
            raise ConfigError("threads must be >= 1")
        out = Path(opts.get("out_dir", cfg.paths.out_dir))
        ctx = Ctx(cfg, sio.ensure_dir(out), cfg.threads, bool(opts.get("strict", False)),
                  bool(opts.get("cache", False)), RunManifest.open(out, cfg))
        cmd = args.command
        if cmd == "synth-affine":
            outs = stage_synth_affine(ctx)
        elif cmd == "synth-lefm":
            outs = stage_synth_lefm(ctx)
        elif cmd == "synth-stepped":
            outs = stage_synth_stepped(ctx)
        elif cmd == "render":
            outs = stage_render(ctx, args.particles, args.which)
        elif cmd == "detect":
            outs = stage_detect(ctx, args.volume)
        elif cmd == "link":
            outs = stage_link(ctx, args.ref, args.dfm)
        elif cmd == "gradient":
            outs = stage_gradient(ctx, args.particles)
        elif cmd == "energy":
            outs = stage_energy(ctx, args.defgrad)
        elif cmd == "region-energy":
            outs = stage_region_energy(ctx, args.field, args.particles, args.truth)
        elif cmd == "fit-ctod":
            outs = stage_fit_ctod(ctx, args.faces, args.truth, args.tip)
        elif cmd == "regress":
            outs = stage_regress(ctx, args.points)
        elif cmd == "report":
            outs = stage_report(ctx, args.regression, args.summary)
            sys.stdout.write(Path(outs[0]).read_text(encoding="utf-8"))
        else:
            outs = stage_pipeline(ctx)
            sys.stdout.write(Path(outs[0]).read_text(encoding="utf-8"))
        if cmd == "fit-ctod":
            fit = _load_json(ctx.out / "fit.json")
            print(f"G_c = {fit['G_c_J_per_m2']:.6g} J/m^2  K_I = {fit['K_I_pa_sqrt_m']:.6g} Pa m^0.5")
            for row in fit["window_sensitivity"]:
                val = f"G_c = {row['G_c']:.6g} J/m^2" if "G_c" in row else row["error"]
                print(f"  window [{row['r_min_um']:g}, {row['r_max_um']:g}] um: {val}")
        log.info("wrote %s", ", ".join(str(p) for p in outs))
        return EXIT_OK
    except ConfigError as exc:
        print(f"stepcrack: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StrictFailure as exc:
        print(f"stepcrack: strict: {exc}", file=sys.stderr)
        return EXIT_STRICT
    except (FitError, ConditioningError, InvertedElementError) as exc:
        print(f"stepcrack: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, InvalidInputError, FileNotFoundError, KeyError) as exc:
        print(f"stepcrack: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
