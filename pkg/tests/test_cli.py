import json
import logging
from pathlib import Path

import numpy as np
import pytest

from stepcrack import io as sio
from stepcrack.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, EXIT_STRICT, run, sci
from stepcrack.fracture import regress_gc_vs_elig

SLOPE, INTERCEPT = 3.84e7, 4.36

# a lighter suite than the defaults: three phantoms at a quarter of the density
SMALL_SUITE = """\
synth:
  stepped:
    e_lig_targets_j: [2.0e-8, 1.1e-7, 2.0e-7]
    density_per_um3: 5.0e-4
"""


def _cfg(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text, encoding="utf-8")
    return p


def _digest(out):
    return json.loads((Path(out) / "manifest.json").read_text())


def _outputs(root):
    """sha256 of every file below ``root`` except manifests."""
    root = Path(root)
    return {p.relative_to(root).as_posix(): sio.sha256_file(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_sci_format():
    assert sci(3.84e7) == "3.84×10^7"
    assert sci(4.36) == "4.36"
    assert sci(-2.5e-8) == "-2.5×10^-8"


def test_synth_affine_byte_identical(tmp_path):
    args = ["synth-affine", "--seed", "9", "--config", str(_cfg(tmp_path, "synth:\n  affine:\n    n: 2000\n"))]
    assert run(args + ["--out-dir", str(tmp_path / "a")]) == EXIT_OK
    assert run(args + ["--out-dir", str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "particles.csv").read_bytes()
    assert a == (tmp_path / "b" / "particles.csv").read_bytes()
    assert _digest(tmp_path / "a")["stages"][0]["outputs"] == _digest(tmp_path / "b")["stages"][0]["outputs"]
    assert run(["synth-affine", "--seed", "10", "--out-dir", str(tmp_path / "c"),
                "--config", str(tmp_path / "cfg.yaml")]) == EXIT_OK
    assert (tmp_path / "c" / "particles.csv").read_bytes() != a


def test_manifest_contents(tmp_path):
    out = tmp_path / "o"
    c = ["--out-dir", str(out), "--config", str(_cfg(tmp_path, "synth:\n  affine:\n    n: 500\n"))]
    assert run(["synth-affine", *c]) == EXIT_OK
    assert run(["gradient", "--particles", str(out / "particles.csv"), *c]) == EXIT_OK
    m = _digest(out)
    assert m["tool"] == "stepcrack" and len(m["config_sha256"]) == 64
    assert [s["stage"] for s in m["stages"]] == ["synth-affine", "gradient"]
    assert m["stages"][1]["inputs"]["particles.csv"] == m["stages"][0]["outputs"]["particles.csv"]
    for st in m["stages"]:
        for rel, h in st["outputs"].items():
            assert sio.sha256_file(out / rel) == h
        assert "config" in st["inputs"] and st["seconds"] >= 0
    # a different config starts a fresh manifest
    assert run(["synth-affine", "--out-dir", str(out), "--seed", "2"]) == EXIT_OK
    assert [s["stage"] for s in _digest(out)["stages"]] == ["synth-affine"]


def test_exit_codes(tmp_path, capsys):
    bad = _cfg(tmp_path, "material:\n  mu: 35000\n")
    assert run(["synth-affine", "--config", str(bad), "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "material.mu" in capsys.readouterr().err
    assert run(["gradient", "--particles", str(tmp_path / "missing.csv"), "--out-dir", str(tmp_path)]) == EXIT_INPUT
    junk = tmp_path / "junk.csv"
    junk.write_text("a,b\n1,2\n")
    assert run(["gradient", "--particles", str(junk), "--out-dir", str(tmp_path)]) == EXIT_INPUT
    # opening shrinking away from the tip cannot be a crack: numerical failure
    r = np.arange(0.0, 700.0, 2.0)
    d = 10.0 - 0.01 * r
    pts = np.vstack([np.column_stack([-r, d / 2, 0 * r]), np.column_stack([-r, -d / 2, 0 * r])])
    up = np.r_[np.ones(r.size, int), np.zeros(r.size, int)]
    sio.write_table(tmp_path / "faces.csv", {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2], "upper": up})
    code = run(["fit-ctod", "--faces", str(tmp_path / "faces.csv"), "--tip", "0", "0", "0", "--out-dir", str(tmp_path)])
    assert code == EXIT_NUMERIC


def test_env_override_reaches_cli(tmp_path, monkeypatch):
    monkeypatch.setenv("STEPCRACK__SYNTH__AFFINE__N", "123")
    assert run(["synth-affine", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert len(sio.read_particle_table(tmp_path / "particles.csv")) == 123
    monkeypatch.setenv("STEPCRACK__SYNTH__AFFINE__COUNT", "1")
    assert run(["synth-affine", "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_strict_promotes_flags(tmp_path, capsys):
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.uniform(0, 100, (200, 2)), np.zeros(200)])  # coplanar: every F ill-conditioned
    sio.write_particle_table(tmp_path / "flat.csv", sio.ParticleSet(np.arange(200), X, X))
    args = ["gradient", "--particles", str(tmp_path / "flat.csv"), "--out-dir", str(tmp_path)]
    assert run(args) == EXIT_OK
    assert run(args + ["--strict"]) == EXIT_STRICT
    assert "strict" in capsys.readouterr().err
    rep = json.loads((tmp_path / "quality.json").read_text())
    assert rep["valid_fraction"] == 0.0


def test_report_paper_fixture(tmp_path, capsys):
    e = np.linspace(0.0, 2e-7, 9)
    sio.write_table(tmp_path / "points.csv", {"E_lig_J": e, "G_c_J_per_m2": SLOPE * e + INTERCEPT})
    assert run(["regress", "--points", str(tmp_path / "points.csv"), "--out-dir", str(tmp_path)]) == EXIT_OK
    reg = json.loads((tmp_path / "regression.json").read_text())
    assert reg["slope_per_m2"] == pytest.approx(SLOPE, rel=1e-9)
    assert reg["intercept_J_per_m2"] == pytest.approx(INTERCEPT, rel=1e-9)
    line = sio.read_table(tmp_path / "plot_line.csv")
    np.testing.assert_allclose(line["G_fit_J_per_m2"], SLOPE * line["E_lig_J"] + INTERCEPT, rtol=1e-8)
    capsys.readouterr()
    assert run(["report", "--regression", str(tmp_path / "regression.json"), "--out-dir", str(tmp_path)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "3.84×10^7 m^-2" in text
    assert "4.36 J/m^2" in text
    assert (tmp_path / "report.txt").read_text(encoding="utf-8") == text


def test_lefm_chain(tmp_path, capsys):
    cfg = _cfg(tmp_path, "synth:\n  lefm:\n    n: 4000\n")
    out = str(tmp_path)
    assert run(["synth-lefm", "--config", str(cfg), "--out-dir", out]) == EXIT_OK
    capsys.readouterr()
    assert run(["fit-ctod", "--faces", f"{out}/faces.csv", "--truth", f"{out}/truth.json", "--out-dir", out]) == 0
    printed = capsys.readouterr().out
    assert "window [" in printed
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["G_c_J_per_m2"] == pytest.approx(10.0, rel=1e-2)
    assert run(["gradient", "--config", str(cfg), "--particles", f"{out}/particles.csv", "--out-dir", out]) == 0
    assert run(["energy", "--config", str(cfg), "--defgrad", f"{out}/defgrad.csv", "--out-dir", out]) == 0
    for name in ("W.csv", "max_stretch.csv", "W.vtk", "max_stretch.vtk"):
        assert (tmp_path / name).exists()


def test_cache_reuses_outputs(tmp_path, caplog):
    caplog.set_level(logging.INFO, logger="stepcrack")
    cfg = str(_cfg(tmp_path, "synth:\n  affine:\n    n: 300\n"))
    assert run(["synth-affine", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    before = (tmp_path / "particles.csv").stat().st_mtime_ns
    assert run(["synth-affine", "--config", cfg, "--out-dir", str(tmp_path), "--cache", "-v"]) == 0
    assert (tmp_path / "particles.csv").stat().st_mtime_ns == before
    assert "cached" in caplog.text


@pytest.fixture(scope="module")
def suite_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("suite")
    cfg = _cfg(base, SMALL_SUITE)
    for threads in (1, 8):
        assert run(["pipeline", "--config", str(cfg), "--threads", str(threads),
                    "--out-dir", str(base / f"t{threads}")]) == EXIT_OK
    return base, cfg


@pytest.mark.slow
def test_pipeline_thread_independent(suite_runs):
    base, _ = suite_runs
    a, b = _outputs(base / "t1"), _outputs(base / "t8")
    assert a == b
    assert _digest(base / "t1")["config_sha256"] == _digest(base / "t8")["config_sha256"]
    reg = json.loads((base / "t1" / "regression.json").read_text())
    assert reg["n_points"] == 3
    assert "3.8" in (base / "t1" / "report.txt").read_text(encoding="utf-8")


@pytest.mark.slow
def test_pipeline_equals_manual_stages(suite_runs):
    base, cfg = suite_runs
    man = base / "manual"
    c = ["--config", str(cfg)]
    assert run(["synth-stepped", *c, "--out-dir", str(man)]) == 0
    names, e, g, cov = [], [], [], []
    for name in json.loads((man / "suite.json").read_text())["phantoms"]:
        d = man / name
        o = ["--out-dir", str(d)]
        assert run(["gradient", *c, "--particles", str(d / "particles.csv"), *o]) == 0
        assert run(["energy", *c, "--defgrad", str(d / "defgrad.csv"), *o]) == 0
        assert run(["region-energy", *c, "--field", str(d / "W.csv"), "--particles", str(d / "particles.csv"),
                    "--truth", str(d / "truth.json"), *o]) == 0
        assert run(["fit-ctod", *c, "--faces", str(d / "faces.csv"), "--truth", str(d / "truth.json"), *o]) == 0
        re_ = json.loads((d / "region_energy.json").read_text())
        names.append(name)
        e.append(re_["E_J"])
        g.append(json.loads((d / "fit.json").read_text())["G_c_J_per_m2"])
        cov.append(re_["coverage"])
    sio.write_table(man / "points.csv", {"name": np.array(names), "E_lig_J": np.array(e),
                                         "G_c_J_per_m2": np.array(g), "coverage": np.array(cov)})
    assert run(["regress", *c, "--points", str(man / "points.csv"), "--out-dir", str(man)]) == 0
    assert run(["report", *c, "--regression", str(man / "regression.json"), "--summary", str(man / "points.csv"),
                "--out-dir", str(man)]) == 0
    assert _outputs(man) == _outputs(base / "t1")
    res = regress_gc_vs_elig(np.array(e), np.array(g))
    assert res.slope == pytest.approx(SLOPE, rel=0.1)
