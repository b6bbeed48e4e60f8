"""Scenario configuration files (INI syntax) and the objects they describe."""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bsde import RegressionBasis
from .errors import ConfigInvalid
from .forward import (GaussianLaw, TimeGrid, constant_fields, first_axis_fields, heisenberg_fields,
                      linear_fields, sine_fields)
from .model import (ConstantTerminal, ConstantWeight, LinearTerminal, MeanCouplingTerminal,
                    OscillatingWeight, QuadraticCostModel, QuadraticPotential, QuarticControlModel,
                    SquareTerminal)

# section -> key -> (type, default); a default of ``...`` marks a required key
SCHEMA = {
    "scenario": {"name": (str, ...), "seed": (int, 0), "out": (str, "")},
    "model": {"kind": (str, "none"), "weight": (str, "constant"), "weight_value": (float, 1.0),
              "weight_base": (float, 1.5), "weight_amp": (float, 0.5), "potential": (float, 0.0),
              "dim_state": (int, 1), "dim_control": (int, 1)},
    "vector_fields": {"kind": (str, "constant"), "scale": (float, 1.0), "drift": (str, "none")},
    "terminal": {"kind": (str, "zero"), "value": (float, 0.0), "scale": (float, 1.0)},
    "grid": {"t0": (float, 0.0), "T": (float, 1.0), "steps": (int, ...)},
    "simulation": {"particles": (int, ...), "initial": (str, "point"), "x0": (str, "0.0"),
                   "initial_std": (float, 1.0)},
    "solver": {"basis": (str, "polynomial"), "degree": (int, 2), "bandwidth": (float, 0.5),
               "ridge": (float, 1e-8), "damping": (float, 1.0), "tol": (float, 1e-3),
               "max_iter": (int, 50), "measure_mode": (str, "tilted"),
               "control_variate": (str, "first"), "truncation": (float, 0.0)},
    "diagnostics": {"z_representation": (bool, True), "bmo": (bool, True), "malliavin": (bool, False),
                    "master_residual": (bool, False), "density": (bool, False),
                    "density_node": (int, -1), "density_component": (int, 0),
                    "assumptions": (bool, False), "slice_points": (int, 21)},
}

CHOICES = {
    ("model", "kind"): {"none", "quadratic", "quartic"},
    ("model", "weight"): {"constant", "oscillating"},
    ("vector_fields", "kind"): {"constant", "linear", "sine", "heisenberg", "first_axis"},
    ("vector_fields", "drift"): {"none", "ito"},
    ("terminal", "kind"): {"zero", "constant", "linear", "square", "mean_coupling"},
    ("simulation", "initial"): {"point", "gaussian"},
    ("solver", "basis"): {"polynomial", "kernel"},
    ("solver", "measure_mode"): {"tilted", "untilted"},
    ("solver", "control_variate"): {"none", "first", "second"},
}


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[(.+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None:
            k = re.split(r"[=:]", line, maxsplit=1)[0].strip()
            if k == key:
                return i
    return 0


@dataclass
class ScenarioConfig:
    values: dict
    source: str = ""
    path: str = ""
    overrides: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.values[section]

    @property
    def name(self) -> str:
        return self.values["scenario"]["name"]

    @property
    def seed(self) -> int:
        return self.values["scenario"]["seed"]

    def echo(self) -> dict:
        return {s: dict(v) for s, v in self.values.items()}

    # builders -----------------------------------------------------------
    def vector_fields(self):
        v = self.values["vector_fields"]
        kind, dim = v["kind"], self.values["model"]["dim_state"]
        if kind == "constant":
            vfs = constant_fields(v["scale"] * np.eye(dim))
        elif kind == "linear":
            vfs = linear_fields(v["scale"])
        elif kind == "sine":
            vfs = sine_fields()
        elif kind == "heisenberg":
            vfs = heisenberg_fields()
        else:
            vfs = first_axis_fields(max(dim, 2))
        return vfs.with_ito_drift() if v["drift"] == "ito" else vfs

    def model(self):
        m = self.values["model"]
        if m["kind"] == "none":
            return None
        if m["kind"] == "quartic":
            return QuarticControlModel(m["dim_state"], m["dim_control"])
        if m["weight"] == "constant":
            w = ConstantWeight(m["weight_value"])
        else:
            w = OscillatingWeight(m["weight_base"], m["weight_amp"])
        pot = QuadraticPotential(m["potential"]) if m["potential"] != 0 else None
        return QuadraticCostModel(w, m["dim_state"], m["dim_control"], potential=pot)

    def terminal(self):
        t = self.values["terminal"]
        return {
            "zero": lambda: ConstantTerminal(0.0),
            "constant": lambda: ConstantTerminal(t["value"]),
            "linear": lambda: LinearTerminal(t["scale"]),
            "square": lambda: SquareTerminal(t["scale"]),
            "mean_coupling": lambda: MeanCouplingTerminal(t["scale"]),
        }[t["kind"]]()

    def grid(self) -> TimeGrid:
        g = self.values["grid"]
        return TimeGrid(g["t0"], g["T"], g["steps"])

    def initial(self, d: int):
        s = self.values["simulation"]
        x0 = np.array([float(v) for v in s["x0"].split(",")])
        if x0.size == 1:
            x0 = np.full(d, x0[0])
        if s["initial"] == "gaussian":
            return GaussianLaw(x0, s["initial_std"])
        return x0

    def basis(self) -> RegressionBasis:
        s = self.values["solver"]
        kind = "kernel" if s["basis"] == "kernel" else "polynomial"
        return RegressionBasis(kind, s["degree"], s["bandwidth"], ridge=s["ridge"])


def _convert(typ, raw):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw.strip())


def parse_config(text: str, path: str = "", seed: int | None = None) -> ScenarioConfig:
    """Parse and validate configuration text.  Unknown sections/keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid(getattr(exc, "lineno", 0), str(exc).splitlines()[0]) from None
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigInvalid(_line_of(text, section), f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        values[section] = {}
        present = cp[section] if cp.has_section(section) else {}
        for key in present:
            if key not in keys:
                raise ConfigInvalid(_line_of(text, section, key), f"unknown key '{key}' in [{section}]")
        for key, (typ, default) in keys.items():
            if key in present:
                try:
                    values[section][key] = _convert(typ, present[key])
                except ValueError:
                    raise ConfigInvalid(_line_of(text, section, key),
                                        f"{section}.{key}: expected {typ.__name__}, got {present[key]!r}") from None
            elif default is ...:
                raise ConfigInvalid(_line_of(text, section), f"missing required key {section}.{key}")
            else:
                values[section][key] = default
    if seed is not None:
        values["scenario"]["seed"] = int(seed)
    for (section, key), allowed in CHOICES.items():
        if values[section][key] not in allowed:
            raise ConfigInvalid(_line_of(text, section, key),
                                f"{section}.{key} must be one of {sorted(allowed)}")

    def bad(section, key, msg):
        raise ConfigInvalid(_line_of(text, section, key), f"{section}.{key} {msg}")

    if values["grid"]["steps"] < 1:
        bad("grid", "steps", "must be >= 1")
    if not values["grid"]["T"] > values["grid"]["t0"]:
        bad("grid", "T", "must exceed t0")
    if values["simulation"]["particles"] < 1:
        bad("simulation", "particles", "must be >= 1")
    if values["solver"]["tol"] <= 0:
        bad("solver", "tol", "must be positive")
    if not 0 < values["solver"]["damping"] <= 1:
        bad("solver", "damping", "must lie in (0, 1]")
    if values["solver"]["max_iter"] < 1:
        bad("solver", "max_iter", "must be >= 1")
    if values["scenario"]["seed"] < 0 or values["scenario"]["seed"] >= 2**64:
        bad("scenario", "seed", "must be an unsigned 64-bit integer")
    return ScenarioConfig(values, text, path)


def load_config(path, seed: int | None = None) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigInvalid(0, f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(p), seed)
