import pytest

from stepcrack.config import PipelineConfig, dump_config, load_config
from stepcrack.errors import ConfigError


def _write(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text, encoding="utf-8")
    return p


def test_defaults_without_file():
    cfg = load_config(None, env={})
    assert cfg == PipelineConfig()
    assert cfg.material.mu_pa == 35e3
    assert cfg.estimator.k_neighbors == 20
    assert cfg.strict_max_invalid_fraction == 0.05


def test_unknown_key_named(tmp_path):
    p = _write(tmp_path, "material:\n  mu: 35000\n")
    with pytest.raises(ConfigError, match=r"material\.mu\b"):
        load_config(p, env={})
    p = _write(tmp_path, "colour: red\n")
    with pytest.raises(ConfigError, match="colour"):
        load_config(p, env={})


def test_values_and_types(tmp_path):
    p = _write(tmp_path, "seed: 7\nmaterial:\n  mu_pa: 30000\nfracture:\n  r_min_um: 150\n")
    cfg = load_config(p, env={})
    assert cfg.seed == 7
    assert cfg.material.mu_pa == 30000.0 and isinstance(cfg.material.mu_pa, float)
    assert cfg.fracture.r_min_um == 150.0
    for bad in ("seed: 1.5\n", "material:\n  mu_pa: soft\n", "material:\n  use_isochoric: 1\n", "material: 3\n",
                "imaging:\n  dims: 512\n"):
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, bad), env={})


def test_env_override(tmp_path):
    p = _write(tmp_path, "material:\n  mu_pa: 30000\n")
    cfg = load_config(p, env={"STEPCRACK__MATERIAL__MU_PA": "25000", "OTHER": "x"})
    assert cfg.material.mu_pa == 25000.0
    cfg = load_config(None, env={"STEPCRACK__SYNTH__STEPPED__BLEND_UM": "5"})
    assert cfg.synth.stepped.blend_um == 5.0
    with pytest.raises(ConfigError, match="material.mu"):
        load_config(None, env={"STEPCRACK__MATERIAL__MU": "1"})


def test_missing_and_malformed_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml", env={})
    with pytest.raises(ConfigError, match="YAML"):
        load_config(_write(tmp_path, "a: [1, 2\n"), env={})


def test_dump_round_trip_and_digest(tmp_path):
    cfg = load_config(_write(tmp_path, "seed: 3\n"), env={})
    again = load_config(_write(tmp_path, dump_config(cfg)), env={})
    assert again == cfg
    assert again.digest() == cfg.digest()
    other = load_config(_write(tmp_path, "seed: 4\n"), env={})
    assert other.digest() != cfg.digest()
