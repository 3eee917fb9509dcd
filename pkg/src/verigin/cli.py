"""Command-line interface and the cross-module verification harness.

Subcommands: eos-check, equilibrium, stability, spectrum, simulate,
verify.  All outputs are deterministic (fixed seeds, fixed iteration
orders, 17-significant-digit CSV floats, sorted JSON keys); identical
config + seed reproduce byte-identical files.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from . import equilibria, geometry, linops, stability
from .config import ExperimentConfig, load_config, parse_config
from .errors import DegenerateThreshold, VeriginError
from .simulator import SimConfig, Simulator, growth_rate_estimate

FMT = "%.17g"


def _fnum(x):
    return FMT % float(x)


def _write_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fnum(v) if not isinstance(v, str) else v for v in row) + "\n")


def _write_json(path, obj):
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not JSON serializable: {type(o)}")

    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2, default=default)
        f.write("\n")


def solve_equilibrium(cfg: ExperimentConfig):
    if cfg.case == "i":
        return equilibria.solve_flat_equilibrium_i(
            cfg.targets, cfg.gamma, cfg.specs, cfg.geom, initial_guess=cfg.initial_guess
        )
    return equilibria.solve_flat_equilibrium_ii(
        cfg.targets[0], cfg.gamma, cfg.specs, cfg.geom, initial_guess=cfg.initial_guess
    )


def make_grid(cfg: ExperimentConfig, eq):
    return geometry.build_grid(eq.shifted_geom, cfg.nx, cfg.n_below, cfg.n_above)


# --- subcommands -------------------------------------------------------------


def cmd_eos_check(cfg: ExperimentConfig, out: Path):
    report = {}
    for name, spec in (("phase1", cfg.spec1), ("phase2", cfg.spec2)):
        lo, hi = spec.rho_min, spec.rho_max
        rho = np.exp(np.linspace(np.log(lo * 1.01), np.log(hi * 0.99), 100))
        p = np.asarray(spec.pressure(rho))
        mono = bool(np.all(np.diff(p) > 0))
        rt = np.abs(np.asarray(spec.density(p)) - rho) / rho
        eps = 1e-5 * rho
        dp = (np.asarray(spec.pressure(rho + eps)) - np.asarray(spec.pressure(rho - eps))) / (2 * eps)
        dphi = (np.asarray(spec.phi(rho + eps)) - np.asarray(spec.phi(rho - eps))) / (2 * eps)
        id1 = np.abs(dp - rho * dphi) / np.abs(dp)
        pm = np.asarray(spec.pressure(rho))
        epp = 1e-5 * pm
        dPhi = (np.asarray(spec.Phi(pm + epp)) - np.asarray(spec.Phi(pm - epp))) / (2 * epp)
        id2 = np.abs(dPhi - 1.0 / rho) * rho
        report[name] = {
            "family": spec.family,
            "monotone_pressure": mono,
            "roundtrip_max_rel_err": float(rt.max()),
            "identity_p_prime_max_rel_err": float(id1.max()),
            "identity_Phi_prime_max_rel_err": float(id2.max()),
            "pass": bool(mono and rt.max() < 1e-10 and id1.max() < 1e-6 and id2.max() < 1e-6),
        }
    _write_json(out / "eos_report.json", report)
    return report


def cmd_equilibrium(cfg: ExperimentConfig, out: Path):
    eq = solve_equilibrium(cfg)
    rep = eq.report()
    rep["pressure_jump_residual"] = equilibria.pressure_jump_residual(eq.profile)
    _write_json(out / "equilibrium.json", rep)
    rows = []
    for phase in (1, 2):
        y = eq.profile.y_samples[phase - 1]
        p = eq.profile.p_samples[phase - 1]
        r = eq.profile.rho_samples[phase - 1]
        rows += [(str(phase), y[i], p[i], r[i]) for i in range(len(y))]
    _write_csv(out / "profile.csv", ["phase", "y", "p", "rho"], rows)
    return eq, rep


def cmd_stability(cfg: ExperimentConfig, out: Path, eq=None):
    eq = eq or solve_equilibrium(cfg)
    rep = stability.classify(eq, cfg.geom, cfg.sigma, cfg.case)
    grid = make_grid(cfg, eq)
    disc = linops.assemble(eq, grid, cfg.sigma, cfg.case)
    lam_pd = stability.lambda_pd_bound(disc)
    lambdas = np.concatenate([[0.0], np.geomspace(1e-4 * lam_pd, lam_pd, 31)])
    crossings = stability.positive_eigenvalue_count_via_ntd(disc, lambdas)
    rows = []
    for lam in lambdas:
        ev = np.sort(np.linalg.eigvalsh(stability.b_lambda(disc, float(lam))))
        rows.append([lam] + list(ev))
    _write_csv(
        out / "blambda_sweep.csv",
        ["lambda"] + [f"eig_{i}" for i in range(grid.nxp)],
        rows,
    )
    d = rep.to_dict()
    d["blambda_crossings"] = crossings
    d["lambda_pd_bound"] = lam_pd
    _write_json(out / "stability.json", d)
    return rep, crossings


def cmd_spectrum(cfg: ExperimentConfig, out: Path, eq=None, k: int = 24):
    eq = eq or solve_equilibrium(cfg)
    grid = make_grid(cfg, eq)
    disc = linops.assemble(eq, grid, cfg.sigma, cfg.case)
    res = linops.spectrum(disc, k=k)
    order = np.argsort(-res.eigenvalues.real, kind="stable")
    rows = [
        (res.eigenvalues[j].real, res.eigenvalues[j].imag, res.residuals[j])
        for j in order
    ]
    _write_csv(out / "spectrum.csv", ["re_lambda", "im_lambda", "residual"], rows)
    lead = order[: min(4, len(order))]
    traces = []
    for j in lead:
        full = res.lift(res.eigenvalues[j].real, res.vectors_reduced[:, j].real)
        _, _, h = disc.extract_fields(full)
        nrm = np.abs(h).max()
        traces.append(h / nrm if nrm > 0 else h)
    rows = [
        [grid.x[i]] + [tr[i] for tr in traces] for i in range(grid.nxp)
    ]
    _write_csv(
        out / "modes.csv", ["x"] + [f"h_lead_{j}" for j in range(len(traces))], rows
    )
    return disc, res


def _initial_state(cfg: ExperimentConfig, sim: Simulator):
    p = cfg.perturbation
    if p.kind == "none" or p.amplitude == 0.0:
        return sim.equilibrium_state()
    if p.kind == "mode":
        if p.mode == 0:
            return sim.compatible_state(p.amplitude * np.ones(sim.grid.nxp))
        return sim.perturbed_state(p.amplitude, mode=p.mode)
    return sim.perturbed_state(p.amplitude, mode=None, seed=cfg.seed, n_modes=p.n_modes)


def cmd_simulate(cfg: ExperimentConfig, out: Path, eq=None, snapshot_every: int = 0):
    eq = eq or solve_equilibrium(cfg)
    grid = make_grid(cfg, eq)
    sim = Simulator(eq, grid, cfg.sigma, cfg.case)
    state = _initial_state(cfg, sim)
    sim.validate_initial_state(state)
    sc = SimConfig(dt=cfg.dt, t_end=cfg.t_end, output_every=cfg.output_every)
    snapdir = out / "snapshots"
    snapdir.mkdir(exist_ok=True)
    _write_snapshot(snapdir / "initial.csv", grid, state)
    final, series, verdict = sim.run(state, sc)
    _write_snapshot(snapdir / "final.csv", grid, final)
    rows = [
        (d.t, d.energy, d.dissipation, d.mass1, d.mass2, d.h_norm, d.grad_h_norm, d.u_norm, d.h_mean)
        for d in series
    ]
    _write_csv(
        out / "trace.csv",
        ["t", "energy", "dissipation", "M1", "M2", "h_norm", "grad_h_norm", "u_norm", "h_mean"],
        rows,
    )
    vd = {
        "verdict": verdict,
        "t_final": final.t,
        "h_norm_final": series[-1].h_norm,
        "mass1_drift_rel": abs(series[-1].mass1 - series[0].mass1) / series[0].mass1,
        "mass2_drift_rel": abs(series[-1].mass2 - series[0].mass2) / series[0].mass2,
        "mass_total_drift_rel": abs(series[-1].mass_total - series[0].mass_total)
        / series[0].mass_total,
    }
    _write_json(out / "verdict.json", vd)
    return sim, final, series, verdict


def _write_snapshot(path, grid, state):
    rows = []
    for j in range(state.v1.shape[0]):
        for i in range(grid.nxp):
            rows.append(("v1", str(j), str(i), state.v1[j, i]))
    for j in range(state.v2.shape[0]):
        for i in range(grid.nxp):
            rows.append(("v2", str(j), str(i), state.v2[j, i]))
    for i in range(grid.nxp):
        rows.append(("h", "0", str(i), state.h[i]))
    _write_csv(path, ["field", "iy", "ix", "value"], rows)


def cmd_verify(cfg: ExperimentConfig, out: Path, rate_tol: float = 0.10):
    """Full pipeline with cross-module consistency checks."""
    checks = {}

    def record(name, ok, **detail):
        checks[name] = {"pass": bool(ok), **detail}

    eq, _ = cmd_equilibrium(cfg, out)
    rep, crossings = cmd_stability(cfg, out, eq=eq)
    disc, res = cmd_spectrum(cfg, out, eq=eq)

    # spectral structure
    lam = res.eigenvalues
    realness = float(np.abs(lam.imag).max() / max(np.abs(lam).max(), 1e-300))
    record("spectrum_real", realness < 1e-8, max_im_over_max_abs=realness)
    expected_nz = 2 if cfg.case == "i" else 1
    record("kernel_dimension", res.n_zero == expected_nz, n_zero=res.n_zero, expected=expected_nz)
    kmask = np.abs(lam) < res.tol_zero
    X0 = res.vectors_reduced[:, kmask].real
    rows_m = disc.mass_rows_reduced()
    cx = rows_m @ X0
    rank = int(np.linalg.matrix_rank(cx, tol=1e-8 * max(1.0, np.abs(cx).max())))
    record(
        "mass_constrained_kernel_trivial",
        rank == X0.shape[1],
        kernel_dim=X0.shape[1],
        constraint_rank=rank,
    )
    worst_id = 0.0
    for j in range(len(lam)):
        if abs(lam[j]) < res.tol_zero:
            continue
        worst_id = max(
            worst_id,
            linops.eigenvalue_identity_residual(
                disc, lam[j].real, res.vectors_reduced[:, j].real
            ),
        )
    record("eigenvalue_identity", worst_id < 1e-6, worst_residual=worst_id)
    try:
        semis, defect = linops.semisimplicity_check(disc)
        record("zero_semisimple", semis, defect=defect)
    except DegenerateThreshold as exc:
        record("zero_semisimple", True, skipped=str(exc))

    # Morse-index triple agreement
    n_unst = linops.unstable_count(disc)
    morse = rep.morse_index if rep.morse_index is not None else -1
    record(
        "morse_triple",
        morse == n_unst == crossings,
        classify_morse=morse,
        pencil_unstable=n_unst,
        blambda_crossings=crossings,
    )

    # simulator: rate against the linearization, conservation, dissipation
    grid = disc.grid
    sim = Simulator(eq, grid, cfg.sigma, cfg.case)
    amp = cfg.perturbation.amplitude or 1e-4
    if rep.classification == "NormallyHyperbolic":
        per_mode = linops.mode_spectrum(disc)
        lead = max(
            ((l, v[0].real) for l, v, _ in per_mode), key=lambda t: t[1]
        )
        l_star, lam_ref = lead
        state = (
            sim.compatible_state(amp * np.ones(grid.nxp))
            if l_star == 0
            else sim.perturbed_state(amp, mode=l_star)
        )
        track_mean = l_star == 0
        clamp = {"lo": 10 * amp}
    else:
        # seed the interface-dominated mode-1 eigenvector: bulk branches
        # with negligible h-content would otherwise contaminate the fit
        lam_ref, vec = linops.interface_mode_eigenpair(disc, 1)
        state = sim.eigenmode_state(disc, lam_ref, vec, amp)
        track_mean = False
        clamp = {"hi": amp / 1.5}
    sc = SimConfig(dt=cfg.dt, t_end=cfg.t_end, output_every=cfg.output_every)
    final, series, verdict = sim.run(state, sc)
    rows = [
        (d.t, d.energy, d.dissipation, d.mass1, d.mass2, d.h_norm, d.grad_h_norm, d.u_norm, d.h_mean)
        for d in series
    ]
    _write_csv(
        out / "trace.csv",
        ["t", "energy", "dissipation", "M1", "M2", "h_norm", "grad_h_norm", "u_norm", "h_mean"],
        rows,
    )
    _write_json(out / "verdict.json", {"verdict": verdict, "t_final": final.t})
    t = np.array([d.t for d in series])
    norm = np.array(
        [abs(d.h_mean) for d in series] if track_mean else [d.h_norm for d in series]
    )
    try:
        rate, r2, _ = growth_rate_estimate(t, norm, **clamp)
        rel = abs(rate - lam_ref) / abs(lam_ref)
        record(
            "rate_matches_eigenvalue",
            rel < rate_tol,
            measured_rate=rate,
            eigenvalue=lam_ref,
            rel_err=rel,
            r_squared=r2,
            verdict=verdict,
        )
    except VeriginError as exc:
        record("rate_matches_eigenvalue", False, error=str(exc))

    E = np.array([d.energy for d in series])
    D = np.array([d.dissipation for d in series])
    hbar = np.array([d.h_mean for d in series])
    # remove the documented O(dy^2) quadrature-gradient artifact on the
    # mean-interface channel before testing the identity
    G0 = sim.quadrature_gradient_defect() * grid.geom.area
    dE = np.diff(E) / np.diff(t) - G0 * np.diff(hbar) / np.diff(t)
    Dmid = 0.5 * (D[1:] + D[:-1])
    dscale = max(np.abs(D).max(), 1e-300)
    record(
        "energy_nonincreasing",
        float(np.max(np.diff(E), initial=-np.inf)) <= 1e-8 * max(abs(E[0]), 1.0),
        max_increment=float(np.max(np.diff(E), initial=0.0)),
    )
    # the first output intervals carry the startup transient of the
    # first-order splitting; the identity is checked past them.  The
    # defect is compared against the size of the competing energy-rate
    # components (potential release vs surface/compression storage),
    # which can individually dwarf their sum D near the threshold.
    skip = 2 if len(dE) > 4 else 0
    defect = float(np.abs(dE[skip:] - Dmid[skip:]).max()) if len(dE) > skip else 0.0
    hn2 = np.array([d.h_norm**2 for d in series])
    gh2 = np.array([d.grad_h_norm**2 for d in series])
    comp = 0.0
    if len(t) > 1:
        comp = max(
            cfg.gamma * abs(eq.jump_rho) * float(np.abs(np.diff(hn2) / np.diff(t)).max()),
            0.5 * cfg.sigma * float(np.abs(np.diff(gh2) / np.diff(t)).max()),
        )
    rate_scale = max(dscale, comp)
    record(
        "dissipation_identity",
        defect <= 0.1 * rate_scale + 1e-10 * abs(E[0]),
        max_defect=defect,
        dissipation_scale=dscale,
        component_scale=comp,
    )
    m1 = np.array([d.mass1 for d in series])
    m2 = np.array([d.mass2 for d in series])
    if cfg.case == "i":
        drift = max(
            np.abs(m1 - m1[0]).max() / m1[0], np.abs(m2 - m2[0]).max() / m2[0]
        )
    else:
        tot = m1 + m2
        drift = np.abs(tot - tot[0]).max() / tot[0]
    record("mass_conservation", drift < 1e-8, max_rel_drift=float(drift))

    report = {
        "classification": rep.classification,
        "checks": checks,
        "all_pass": all(c["pass"] for c in checks.values()),
    }
    _write_json(out / "verify_report.json", report)
    return report


# --- driver ------------------------------------------------------------------


_COMMANDS = {
    "eos-check": cmd_eos_check,
    "equilibrium": lambda cfg, out: cmd_equilibrium(cfg, out)[1],
    "stability": lambda cfg, out: cmd_stability(cfg, out)[0].to_dict(),
    "spectrum": lambda cfg, out: {"n_unstable": cmd_spectrum(cfg, out)[1].n_unstable},
    "simulate": lambda cfg, out: {"verdict": cmd_simulate(cfg, out)[3]},
    "verify": cmd_verify,
}


def _parse_sweep(expr):
    try:
        key, rng = expr.split("=")
        a, b, n = rng.split(":")
        return key.strip(), float(a), float(b), int(n)
    except ValueError as exc:
        raise VeriginError(
            f"--sweep expects 'section.key=start:stop:count', got {expr!r}"
        ) from exc


def _set_nested(raw, dotted, value):
    keys = dotted.split(".")
    tab = raw
    for k in keys[:-1]:
        tab = tab.setdefault(k, {})
    tab[keys[-1]] = value


def _run_one(args_tuple):
    raw, case, name, outdir, value_info = args_tuple
    cfg = parse_config(raw, case)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    result = _COMMANDS[name](cfg, out)
    if value_info is not None:
        _write_json(out / "sweep_point.json", value_info)
    return result


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="verigin",
        description="Two-phase capillary Darcy flow laboratory: equilibria, "
        "stability, spectra, nonlinear dynamics.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="TOML experiment config")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--case", choices=["i", "ii"], default=None, help="override case")
    parser.add_argument(
        "--sweep", default=None, help="fan out: section.key=start:stop:count"
    )
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        with open(args.config, "rb") as f:
            raw = tomli.load(f)
    except (OSError, tomli.TOMLDecodeError) as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 1

    try:
        if args.sweep is None:
            cfg = parse_config(raw, args.case)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            result = _COMMANDS[args.command](cfg, out)
            if isinstance(result, dict):
                print(json.dumps(result, sort_keys=True, default=str))
            return 0
        key, a, b, n = _parse_sweep(args.sweep)
        values = np.linspace(a, b, n)
        jobs = []
        for i, v in enumerate(values):
            raw_i = json.loads(json.dumps(raw))  # deep copy
            _set_nested(raw_i, key, float(v))
            outdir = Path(args.out) / f"sweep_{i:03d}"
            jobs.append((raw_i, args.case, args.command, str(outdir), {key: float(v)}))
        if args.workers > 1:
            with concurrent.futures.ProcessPoolExecutor(args.workers) as ex:
                list(ex.map(_run_one, jobs))
        else:
            for j in jobs:
                _run_one(j)
        return 0
    except VeriginError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
