"""Pipeline configuration: YAML document, unit-suffixed keys, unknown keys rejected.

Any key can be overridden from the environment as
``STEPCRACK__<SECTION>__<KEY>=<yaml value>``, e.g.
``STEPCRACK__MATERIAL__MU_PA=30000``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

ENV_PREFIX = "STEPCRACK__"


@dataclass
class MaterialSection:
    mu_pa: float = 35e3
    use_isochoric: bool = False


@dataclass
class EstimatorSection:
    k_neighbors: int = 20
    weight_scale_mode: str = "kth-neighbor"
    fixed_h_um: typing.Optional[float] = None
    min_neighbors: int = 6
    max_condition: float = 1e6
    outlier_filter: bool = False


@dataclass
class RegionsSection:
    k_vol: int = 6
    calibration_box_um: typing.Optional[list] = None
    ligament: typing.Optional[dict] = None


@dataclass
class FractureSection:
    r_min_um: float = 100.0
    r_max_um: float = 600.0
    bin_um: float = 10.0
    sensitivity_windows_um: list = field(default_factory=lambda: [[50.0, 600.0], [150.0, 600.0], [100.0, 450.0]])


@dataclass
class ImagingSection:
    dims: list = field(default_factory=lambda: [512, 512, 200])
    voxel_um: list = field(default_factory=lambda: [0.68, 0.68, 2.0])
    origin_um: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    psf_sigma_lateral_um: float = 0.5
    psf_sigma_axial_um: float = 4.0
    amplitude_counts: float = 1000.0
    noise_sigma_counts: float = 100.0
    noise_offset_counts: float = 500.0
    gel_intensity_counts: float = 3000.0
    threshold_sigma: float = 8.0
    threshold_abs_counts: typing.Optional[float] = None
    centroid_half_window_vox: list = field(default_factory=lambda: [3, 3, 6])
    centroid_mask: bool = True
    max_displacement_um: float = 5.0
    predictor: bool = False
    predictor_cell_um: float = 40.0


@dataclass
class AffineSection:
    n: int = 10000
    bounds_lo_um: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    bounds_hi_um: list = field(default_factory=lambda: [1000.0, 1000.0, 200.0])
    F0: list = field(default_factory=lambda: [[1.1, 0.2, 0.0], [0.0, 0.9, 0.0], [0.0, 0.0, 1.01]])
    c_um: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class LefmSection:
    n: int = 40000
    bounds_lo_um: list = field(default_factory=lambda: [-150.0, 50.0, 0.0])
    bounds_hi_um: list = field(default_factory=lambda: [150.0, 600.0, 60.0])
    g_j_per_m2: float = 10.0
    tip_um: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    r_excl_um: float = 20.0
    face_r_max_um: float = 700.0


@dataclass
class SteppedSection:
    e_lig_targets_j: list = field(default_factory=lambda: [2e-8, 6.5e-8, 1.1e-7, 1.55e-7, 2e-7])
    slope_per_m2: float = 3.84e7
    intercept_j_per_m2: float = 4.36
    density_per_um3: float = 2e-3
    far_field_stretch: float = 1.05
    ligament_half_width_um: float = 50.0
    blend_um: float = 20.0
    core_margin_um: float = 20.0


@dataclass
class SynthSection:
    affine: AffineSection = field(default_factory=AffineSection)
    lefm: LefmSection = field(default_factory=LefmSection)
    stepped: SteppedSection = field(default_factory=SteppedSection)


@dataclass
class PathsSection:
    out_dir: str = "out"
    inputs: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    strict_max_invalid_fraction: float = 0.05
    material: MaterialSection = field(default_factory=MaterialSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    regions: RegionsSection = field(default_factory=RegionsSection)
    fracture: FractureSection = field(default_factory=FractureSection)
    imaging: ImagingSection = field(default_factory=ImagingSection)
    synth: SynthSection = field(default_factory=SynthSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """sha256 of the settings that can change results; ``threads`` cannot, so it is left out."""
        d = self.to_dict()
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        key = f"{path}.{k}" if path else k
        if dataclasses.is_dataclass(t):
            kwargs[k] = _build(t, v, key)
        else:
            kwargs[k] = _coerce(t, v, key)
    return cls(**kwargs)


def _coerce(t, v, key):
    origin = typing.get_origin(t)
    args = typing.get_args(t)
    if origin is typing.Union:
        if v is None and type(None) in args:
            return None
        t = next(a for a in args if a is not type(None))
    if t is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{key}: expected true/false, got {v!r}")
        return v
    if t is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{key}: expected an integer, got {v!r}")
        return v
    if t is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {v!r}")
        return float(v)
    if t is str:
        if not isinstance(v, str):
            raise ConfigError(f"{key}: expected a string, got {v!r}")
        return v
    if t is list and not isinstance(v, list):
        raise ConfigError(f"{key}: expected a list, got {v!r}")
    if t is dict and not isinstance(v, dict):
        raise ConfigError(f"{key}: expected a mapping, got {v!r}")
    return v


def _apply_env(data: dict, env) -> dict:
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"environment override {name} descends into a non-mapping key")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, env=None) -> PipelineConfig:
    """Read a YAML config (or defaults when ``path`` is None) and apply env overrides."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: not valid YAML ({exc})") from None
    data = _apply_env(data, os.environ if env is None else env)
    return _build(PipelineConfig, data, "")


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
