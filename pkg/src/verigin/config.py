"""Experiment configuration: TOML schema, validation, constructors.

A config file fully determines an experiment:

    case = "i"                  # "i" (no phase transition) or "ii"
    seed = 1234                 # perturbation phases for kind = "random"

    [eos.phase1]                # lower phase
    family = "ideal_gas"        # ideal_gas | affine | (custom: API only)
    R_theta = 2.0               # family parameters (affine: c2, rho_ref, p_ref)
    rho_min = 1e-6
    rho_max = 1e6
    k = 1.0

    [eos.phase2]                # upper phase
    ...

    [geometry]
    cross_section = "interval"  # rectangle supported by analytic ops only
    L = 1.0
    h_lower = 1.0
    h_upper = 1.0

    [grid]
    nx = 32
    n_below = 16
    n_above = 16

    [physics]
    gamma = 1.0
    sigma = 0.05

    [targets]                   # case i: M1, M2; case ii: M
    M1 = 2.0
    M2 = 0.7

    [sim]
    dt = 0.002
    t_end = 1.0
    output_every = 5

    [sim.perturbation]
    kind = "mode"               # mode | random | none
    mode = 1
    amplitude = 1e-4
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import tomli

from . import eos
from .errors import ConfigError
from .geometry import CapillaryGeometry

__all__ = ["ExperimentConfig", "load_config", "parse_config"]


def _require(table, key, where, types):
    if key not in table:
        raise ConfigError(f"missing field '{where}.{key}'")
    val = table[key]
    if not isinstance(val, types):
        raise ConfigError(f"field '{where}.{key}' has wrong type {type(val).__name__}")
    return val


_NUM = (int, float)


def _eos_spec(table, where):
    family = _require(table, "family", where, str)
    rho_min = float(table.get("rho_min", 1e-6))
    rho_max = float(table.get("rho_max", 1e6))
    k = float(table.get("k", 1.0))
    if k <= 0:
        raise ConfigError(f"'{where}.k' must be positive")
    if family == "ideal_gas":
        rt = float(_require(table, "R_theta", where, _NUM))
        return eos.ideal_gas(rt, rho_min, rho_max, k)
    if family == "affine":
        c2 = float(_require(table, "c2", where, _NUM))
        rho_ref = float(_require(table, "rho_ref", where, _NUM))
        p_ref = float(_require(table, "p_ref", where, _NUM))
        return eos.affine_compressible(c2, rho_ref, p_ref, rho_min, rho_max, k)
    raise ConfigError(f"'{where}.family' must be 'ideal_gas' or 'affine', got {family!r}")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "mode"  # mode | random | none
    mode: int = 1
    amplitude: float = 1e-4
    n_modes: int = 4

    def __post_init__(self):
        if self.kind not in ("mode", "random", "none"):
            raise ConfigError(f"perturbation.kind must be mode/random/none, got {self.kind!r}")
        if self.kind == "mode" and self.mode < 0:
            raise ConfigError("perturbation.mode must be >= 0")
        if self.amplitude < 0:
            raise ConfigError("perturbation.amplitude must be nonnegative")


@dataclass(frozen=True)
class ExperimentConfig:
    case: str
    seed: int
    spec1: eos.FreeEnergySpec
    spec2: eos.FreeEnergySpec
    geom: CapillaryGeometry
    nx: int
    n_below: int
    n_above: int
    gamma: float
    sigma: float
    targets: tuple  # (M1, M2) in case i, (M,) in case ii
    dt: float
    t_end: float
    output_every: int
    perturbation: PerturbationSpec
    initial_guess: Optional[tuple] = None

    @property
    def specs(self):
        return (self.spec1, self.spec2)


def parse_config(raw: dict, case_override: Optional[str] = None) -> ExperimentConfig:
    case = case_override or _require(raw, "case", "<root>", str)
    if case not in ("i", "ii"):
        raise ConfigError(f"case must be 'i' or 'ii', got {case!r}")
    seed = int(raw.get("seed", 0))

    eos_tab = _require(raw, "eos", "<root>", dict)
    spec1 = _eos_spec(_require(eos_tab, "phase1", "eos", dict), "eos.phase1")
    spec2 = _eos_spec(_require(eos_tab, "phase2", "eos", dict), "eos.phase2")

    gt = _require(raw, "geometry", "<root>", dict)
    geom = CapillaryGeometry(
        cross_section=gt.get("cross_section", "interval"),
        L=float(_require(gt, "L", "geometry", _NUM)),
        L2=float(gt.get("L2", 1.0)),
        h_lower=float(_require(gt, "h_lower", "geometry", _NUM)),
        h_upper=float(_require(gt, "h_upper", "geometry", _NUM)),
    )

    grid_tab = _require(raw, "grid", "<root>", dict)
    nx = int(_require(grid_tab, "nx", "grid", int))
    n_below = int(_require(grid_tab, "n_below", "grid", int))
    n_above = int(_require(grid_tab, "n_above", "grid", int))

    phys = _require(raw, "physics", "<root>", dict)
    gamma = float(_require(phys, "gamma", "physics", _NUM))
    sigma = float(_require(phys, "sigma", "physics", _NUM))
    if gamma < 0:
        raise ConfigError("'physics.gamma' must be nonnegative")
    if sigma <= 0:
        raise ConfigError("'physics.sigma' must be positive")

    tt = _require(raw, "targets", "<root>", dict)
    if case == "i":
        targets = (
            float(_require(tt, "M1", "targets", _NUM)),
            float(_require(tt, "M2", "targets", _NUM)),
        )
        if min(targets) <= 0:
            raise ConfigError("'targets.M1'/'targets.M2' must be positive")
    else:
        targets = (float(_require(tt, "M", "targets", _NUM)),)
        if targets[0] <= 0:
            raise ConfigError("'targets.M' must be positive")
        if (
            spec1.family == spec2.family
            and spec1.family != "custom"
            and spec1.params == spec2.params
        ):
            raise ConfigError(
                "case ii forbids identical phase laws (the density jump vanishes)"
            )

    sim_tab = raw.get("sim", {})
    dt = float(sim_tab.get("dt", 1e-3))
    t_end = float(sim_tab.get("t_end", 1.0))
    output_every = int(sim_tab.get("output_every", 1))
    pt = sim_tab.get("perturbation", {})
    pert = PerturbationSpec(
        kind=pt.get("kind", "mode"),
        mode=int(pt.get("mode", 1)),
        amplitude=float(pt.get("amplitude", 1e-4)),
        n_modes=int(pt.get("n_modes", 4)),
    )
    if dt <= 0 or t_end <= 0:
        raise ConfigError("'sim.dt' and 'sim.t_end' must be positive")

    guess = None
    eq_tab = raw.get("equilibrium", {})
    if "initial_guess" in eq_tab:
        guess = tuple(float(v) for v in eq_tab["initial_guess"])

    return ExperimentConfig(
        case=case, seed=seed, spec1=spec1, spec2=spec2, geom=geom,
        nx=nx, n_below=n_below, n_above=n_above,
        gamma=gamma, sigma=sigma, targets=targets,
        dt=dt, t_end=t_end, output_every=output_every,
        perturbation=pert, initial_guess=guess,
    )


def load_config(path, case_override: Optional[str] = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as f:
            raw = tomli.load(f)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw, case_override)
