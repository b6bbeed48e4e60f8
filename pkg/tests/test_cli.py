import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfgweak.cli import emit_plots, main, run_scenario
from mfgweak.config import SCHEMA, parse_config
from mfgweak.errors import ConfigInvalid, MissingArtifacts

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

SMALL_HEAT = """
[scenario]
name = small-heat
seed = 4

[terminal]
kind = square

[grid]
steps = 20

[simulation]
particles = 3000
initial = gaussian
"""


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_defaults_and_override():
    cfg = parse_config(SMALL_HEAT, seed=99)
    assert cfg.seed == 99 and cfg["solver"]["damping"] == 1.0 and cfg["grid"]["steps"] == 20


def test_zero_particles_names_field(tmp_path, capsys):
    bad = SMALL_HEAT.replace("particles = 3000", "particles = 0")
    code, _ = run_scenario(write(tmp_path, bad), tmp_path / "out")
    assert code == 1
    assert "simulation.particles" in capsys.readouterr().err


@pytest.mark.parametrize("text,line", [
    ("[scenario]\nname = a\n[grid]\nsteps = 5\n[simulation]\nparticles = 2\n[bogus]\nx = 1\n", 7),
    ("[scenario]\nname = a\ncolour = red\n[grid]\nsteps = 5\n[simulation]\nparticles = 2\n", 3),
    ("[scenario]\nname = a\n[grid]\nsteps = five\n[simulation]\nparticles = 2\n", 4),
    ("[scenario]\nname = a\n[grid]\nsteps = 5\n[simulation]\nparticles = 2\n[solver]\ndamping = 1.5\n", 8),
])
def test_config_errors_carry_line(text, line):
    with pytest.raises(ConfigInvalid) as info:
        parse_config(text)
    assert info.value.line == line


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(sorted(SCHEMA)), st.text("abcdefghij_", min_size=3, max_size=8))
def test_unknown_keys_always_rejected(section, key):
    keys = SCHEMA[section]
    if key in keys:
        return
    text = SMALL_HEAT + f"\n[{section}]\n{key} = 1\n" if section not in ("scenario", "terminal", "grid", "simulation") \
        else SMALL_HEAT.replace(f"[{section}]", f"[{section}]\n{key} = 1")
    with pytest.raises(ConfigInvalid):
        parse_config(text)


def test_decoupled_scenario_converges(tmp_path):
    code, out = run_scenario(SCENARIOS / "decoupled.ini", tmp_path / "run", command="solve-mfg")
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["converged"] is True
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_replay_is_bytewise_identical(tmp_path):
    cfg = write(tmp_path, SMALL_HEAT)
    assert main(["solve-mfg", "--config", str(cfg), "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(["solve-mfg", "--config", str(cfg), "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    csvs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert csvs
    for rel in csvs:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_no_convergence_exit_code_keeps_artifacts(tmp_path):
    text = (SCENARIOS / "mfg.ini").read_text().replace("tol = 1e-3", "tol = 1e-9")
    text = text.replace("particles = 10000", "particles = 1000").replace("steps = 50", "steps = 10")
    text = text.replace("[solver]", "[solver]\nmax_iter = 2")
    code, out = run_scenario(write(tmp_path, text), tmp_path / "run", command="solve-mfg")
    assert code == 2
    assert (out / "equilibrium.json").exists()
    assert json.loads((out / "manifest.json").read_text())["converged"] is False


def test_memory_cap(tmp_path, monkeypatch):
    monkeypatch.setenv("MFGWEAK_MAX_MEMORY_MB", "1")
    code, _ = run_scenario(write(tmp_path, SMALL_HEAT), tmp_path / "run", command="simulate")
    assert code == 1


def test_verify_assumptions_command(tmp_path):
    code, out = run_scenario(SCENARIOS / "mfg.ini", tmp_path / "ok", command="verify-assumptions")
    assert code == 0
    assert json.loads((out / "assumptions.json").read_text())["violations"] == []
    # the decoupled scenario's potential -|x|^2 is unbounded at zero control
    code, out = run_scenario(SCENARIOS / "decoupled.ini", tmp_path / "bad", command="verify-assumptions")
    ids = {v["assumption"] for v in json.loads((out / "assumptions.json").read_text())["violations"]}
    assert code == 0 and "zero_control_cost_bounded" in ids


def test_emit_plots_heat(tmp_path):
    text = SMALL_HEAT + "\n[diagnostics]\ndensity = false\n"
    code, out = run_scenario(write(tmp_path, text), tmp_path / "run", command="diagnose")
    assert code == 0
    written = emit_plots(out)
    assert "kde.dat" not in written
    assert {"residual.dat", "u_slices.dat", "yz_scatter.dat"} <= set(written)
    eq = json.loads((out / "equilibrium.json").read_text())
    rows = [l for l in (out / "residual.dat").read_text().splitlines() if not l.startswith("#")]
    assert len(rows) == eq["iterations"]
    t, x, u = np.loadtxt(out / "u_slices.dat", unpack=True)
    assert np.max(np.abs(u - (x**2 + (1 - t)))) < 0.15


def test_emit_plots_missing(tmp_path):
    with pytest.raises(MissingArtifacts):
        emit_plots(tmp_path)
    assert main(["emit-plots", str(tmp_path)]) == 1
