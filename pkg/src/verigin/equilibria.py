"""Flat equilibria under mass constraints.

Hydrostatic columns satisfy dp/dy = -gamma * rho(p) per phase.  Without
phase transition (case "i") the column is parametrized by the potential:
Phi_j(p(y)) = a_j - gamma*y; with phase transition (case "ii") by the
specific free enthalpy: phi_j(rho(y)) = a - gamma*y, and the interface
carries [[phi]] = 0 in addition to [[p]] = 0.

The flat-equilibrium solvers run Newton on the paper-exact residuals

    case i :  g(a1, a2, h) = (M1 - M01, M2 - M02, f),
              f = Phi_2^{-1}(a2 - gamma h) - Phi_1^{-1}(a1 - gamma h),
    case ii:  g(a, h) = (M - M0, f),   f = p2(rho2(h)) - p1(rho1(h)),

with analytic Jacobians in these coordinates, which makes exact
derivative and determinant checks possible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from .eos import FreeEnergySpec
from .errors import (
    DegenerateEquilibrium,
    FeasibilityError,
    InternalInvariantViolation,
    IsolationFailure,
    NoConvergence,
    RangeError,
    SingularJacobian,
)
from .geometry import CapillaryGeometry

__all__ = [
    "HydrostaticProfile",
    "FlatEquilibrium",
    "hydrostatic_profile",
    "pressure_jump_residual",
    "phase_masses",
    "solve_flat_equilibrium_i",
    "solve_flat_equilibrium_ii",
]


# --- quadrature helper ------------------------------------------------------


def _simpson_adaptive(f, a, b, rtol=1e-13, atol=1e-12, n0=64, nmax=1 << 16):
    """Composite Simpson with doubling and Richardson acceptance."""
    if b <= a:
        return 0.0 if b == a else -_simpson_adaptive(f, b, a, rtol, atol, n0, nmax)

    def simpson(n):
        x = np.linspace(a, b, n + 1)
        y = f(x)
        h = (b - a) / n
        return h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())

    n = n0
    prev = simpson(n)
    while n <= nmax:
        n *= 2
        cur = simpson(n)
        if abs(cur - prev) <= max(atol, rtol * abs(cur)):
            return cur + (cur - prev) / 15.0
        prev = cur
    return prev


# --- hydrostatic profiles ---------------------------------------------------


@dataclass(frozen=True)
class HydrostaticProfile:
    """Per-phase hydrostatic column over the capillary.

    ``p_of_y(phase, y)`` and ``rho_of_y(phase, y)`` take vectorized y; the
    phase-1 closure is valid on [-h_lower, h] and phase 2 on [h, h_upper].
    """

    case: str  # "i" | "ii"
    a1: float
    a2: float
    h: float
    gamma: float
    specs: Tuple[FreeEnergySpec, FreeEnergySpec]
    geom: CapillaryGeometry
    y_samples: Tuple[np.ndarray, np.ndarray] = field(repr=False)
    p_samples: Tuple[np.ndarray, np.ndarray] = field(repr=False)
    rho_samples: Tuple[np.ndarray, np.ndarray] = field(repr=False)

    def p_of_y(self, phase, y):
        spec = self.specs[phase - 1]
        a = self.a1 if phase == 1 else self.a2
        if self.case == "i":
            return spec.Phi_inv(a - self.gamma * np.asarray(y, dtype=float))
        rho = spec.phi_inv(a - self.gamma * np.asarray(y, dtype=float))
        return spec.pressure(rho)

    def rho_of_y(self, phase, y):
        spec = self.specs[phase - 1]
        a = self.a1 if phase == 1 else self.a2
        if self.case == "i":
            return spec.density(spec.Phi_inv(a - self.gamma * np.asarray(y, dtype=float)))
        return spec.phi_inv(a - self.gamma * np.asarray(y, dtype=float))

    def drho_dp_of_y(self, phase, y):
        spec = self.specs[phase - 1]
        return 1.0 / spec.dp_drho(self.rho_of_y(phase, y))


def _feasibility_window(case, spec, a, gamma, ylo, yhi, phase):
    """Check a - gamma*[ylo, yhi] stays inside the potential's image."""
    vals = (a - gamma * yhi, a - gamma * ylo)
    lo_need, hi_need = min(vals), max(vals)
    if case == "i":
        lo_im, hi_im = spec.Phi(spec.p_range[0]), spec.Phi(spec.p_range[1])
    else:
        lo_im, hi_im = spec.phi_range
    slack = 1e-12 * max(abs(lo_im), abs(hi_im), 1.0)
    if lo_need < lo_im - slack or hi_need > hi_im + slack:
        # the potential is a - gamma*y, so the extreme ends sit at ylo/yhi
        if hi_need > hi_im + slack:
            y_bad = ylo if gamma > 0 else yhi
        else:
            y_bad = yhi if gamma > 0 else ylo
        raise FeasibilityError(
            f"phase {phase}: potential value {lo_need:.6g}..{hi_need:.6g} leaves "
            f"image ({lo_im:.6g}, {hi_im:.6g}) near y = {y_bad:.6g}",
            phase=phase,
            y=y_bad,
        )


def hydrostatic_profile(
    case: str,
    params,
    h: float,
    gamma: float,
    specs: Tuple[FreeEnergySpec, FreeEnergySpec],
    geom: CapillaryGeometry,
    n_samples: int = 129,
    validate_ode: bool = True,
) -> HydrostaticProfile:
    """Build the hydrostatic column for given potential constants.

    ``params`` is (a1, a2) in case "i" and a single a in case "ii".  The
    profile is obtained by monotone inversion of the potential and, when
    ``validate_ode`` is set, cross-validated against RK4 integration of
    dp/dy = -gamma rho(p) on the same nodes (rel err 1e-8).
    """
    if case == "i":
        a1, a2 = params
    elif case == "ii":
        a1 = a2 = float(params)
    else:
        raise ValueError(f"case must be 'i' or 'ii', got {case!r}")
    if not (-geom.h_lower < h < geom.h_upper):
        raise FeasibilityError(
            f"interface height {h} outside (-{geom.h_lower}, {geom.h_upper})"
        )
    if gamma < 0:
        raise FeasibilityError("gamma must be nonnegative")

    _feasibility_window(case, specs[0], a1, gamma, -geom.h_lower, h, 1)
    _feasibility_window(case, specs[1], a2, gamma, h, geom.h_upper, 2)

    y1 = np.linspace(-geom.h_lower, h, n_samples)
    y2 = np.linspace(h, geom.h_upper, n_samples)
    prof = HydrostaticProfile(
        case, a1, a2, h, gamma, tuple(specs), geom,
        y_samples=(y1, y2), p_samples=(None, None), rho_samples=(None, None),
    )
    p1 = prof.p_of_y(1, y1)
    p2 = prof.p_of_y(2, y2)
    r1 = prof.rho_of_y(1, y1)
    r2 = prof.rho_of_y(2, y2)
    object.__setattr__(prof, "p_samples", (p1, p2))
    object.__setattr__(prof, "rho_samples", (r1, r2))

    if validate_ode and gamma > 0:
        _validate_against_rk4(prof)
    return prof


def _validate_against_rk4(prof, substeps=16):
    """RK4-integrate dp/dy = -gamma rho(p) from the interface outward."""
    for phase, (ys, ps) in enumerate(zip(prof.y_samples, prof.p_samples), start=1):
        spec = prof.specs[phase - 1]

        def rhs(p):
            return -prof.gamma * float(spec.density(p))

        start = 0 if phase == 2 else len(ys) - 1
        order = range(start, len(ys) - 1) if phase == 2 else range(start, 0, -1)
        p = float(ps[start])
        worst = 0.0
        for j in order:
            jnext = j + 1 if phase == 2 else j - 1
            hstep = (ys[jnext] - ys[j]) / substeps
            for _ in range(substeps):
                k1 = rhs(p)
                k2 = rhs(p + 0.5 * hstep * k1)
                k3 = rhs(p + 0.5 * hstep * k2)
                k4 = rhs(p + hstep * k3)
                p += hstep / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            worst = max(worst, abs(p - ps[jnext]) / abs(ps[jnext]))
        if worst > 1e-8:
            raise InternalInvariantViolation(
                f"hydrostatic profile phase {phase} deviates from RK4 integration "
                f"by rel err {worst:.3e} (> 1e-8)"
            )


def pressure_jump_residual(prof: HydrostaticProfile) -> float:
    """[[p]] at the interface; zero at a flat equilibrium."""
    return float(prof.p_of_y(2, prof.h) - prof.p_of_y(1, prof.h))


def phase_masses(prof: HydrostaticProfile, geom: CapillaryGeometry):
    """Phase masses |G| * integral of rho over each phase column.

    Returns (M1, M2); in case "ii" the conserved quantity is their sum.
    """
    m1 = geom.area * _simpson_adaptive(
        lambda y: prof.rho_of_y(1, y), -geom.h_lower, prof.h
    )
    m2 = geom.area * _simpson_adaptive(
        lambda y: prof.rho_of_y(2, y), prof.h, geom.h_upper
    )
    return m1, m2


def _c_constants(prof: HydrostaticProfile, geom: CapillaryGeometry):
    """Mass-sensitivity integrals c1, c2 (integrand rho'(p) rho(p))."""

    def integrand(phase):
        def f(y):
            p = prof.p_of_y(phase, y)
            spec = prof.specs[phase - 1]
            return prof.rho_of_y(phase, y) / spec.dp_drho(spec.density(p))

        return f

    c1 = _simpson_adaptive(integrand(1), -geom.h_lower, prof.h)
    c2 = _simpson_adaptive(integrand(2), prof.h, geom.h_upper)
    return c1, c2


# --- flat equilibrium container ---------------------------------------------


@dataclass(frozen=True)
class FlatEquilibrium:
    """Solved flat equilibrium with the constants driving the stability theory."""

    case: str
    profile: HydrostaticProfile
    geom: CapillaryGeometry
    gamma: float
    p_b: float
    rho_minus: float  # rho_*(0-): phase-1 density at the interface
    rho_plus: float   # rho_*(0+): phase-2 density at the interface
    c1: float
    c2: float
    masses: Tuple[float, float]
    rho_bottom: float  # rho_*(-h_lower)
    rho_top: float     # rho_*(h_upper)

    @property
    def h(self):
        return self.profile.h

    @property
    def specs(self):
        return self.profile.specs

    # Discrete operators work in coordinates where the equilibrium
    # interface is the plane y = 0; the capillary becomes
    # (-h_lower - h, h_upper - h) after the shift.

    @property
    def shifted_geom(self) -> CapillaryGeometry:
        g = self.geom
        return CapillaryGeometry(
            g.cross_section, g.L, g.L2, g.h_lower + self.h, g.h_upper - self.h
        )

    def p_star(self, phase, y):
        """Equilibrium pressure at shifted height y (interface at 0)."""
        return self.profile.p_of_y(phase, np.asarray(y, dtype=float) + self.h)

    def rho_star(self, phase, y):
        return self.profile.rho_of_y(phase, np.asarray(y, dtype=float) + self.h)

    def drho_dp_star(self, phase, y):
        return self.profile.drho_dp_of_y(phase, np.asarray(y, dtype=float) + self.h)

    @property
    def jump_rho(self):
        """[[rho_*]] = rho_*(0+) - rho_*(0-)."""
        return self.rho_plus - self.rho_minus

    @property
    def c(self):
        return self.c1 + self.c2

    def mu_star(self, sigma):
        """gamma [[rho_*]] / sigma."""
        return self.gamma * self.jump_rho / sigma

    def sigma_star(self):
        """Critical surface tension gamma [[rho_*]] / mu_1."""
        return self.gamma * self.jump_rho / self.geom.mu1()

    @property
    def side_condition(self):
        """[[rho_*]] (rho_*(h_upper) - rho_*(-h_lower)); case-(ii) stability sign."""
        return self.jump_rho * (self.rho_top - self.rho_bottom)

    @property
    def lcuni_margin(self):
        """rho1^2/c1 + rho2^2/c2 - gamma [[rho]]; positive for every equilibrium."""
        return (
            self.rho_minus**2 / self.c1
            + self.rho_plus**2 / self.c2
            - self.gamma * self.jump_rho
        )

    @property
    def lcunii_value(self):
        """gamma c - [[rho]], equal to rho_*(-h_lower) - rho_*(h_upper)."""
        return self.gamma * self.c - self.jump_rho

    def report(self):
        rep = {
            "case": self.case,
            "a1": self.profile.a1,
            "a2": self.profile.a2,
            "h": self.h,
            "p_b": self.p_b,
            "rho_minus": self.rho_minus,
            "rho_plus": self.rho_plus,
            "jump_rho": self.jump_rho,
            "c1": self.c1,
            "c2": self.c2,
            "c": self.c,
            "M1": self.masses[0],
            "M2": self.masses[1],
            "rho_bottom": self.rho_bottom,
            "rho_top": self.rho_top,
            "lcuni_margin": self.lcuni_margin,
            "sigma_star": self.sigma_star(),
        }
        if self.case == "ii":
            rep["lcunii_value"] = self.lcunii_value
            rep["side_condition"] = self.side_condition
        return rep


def _build_equilibrium(case, prof, geom):
    p1h = float(prof.p_of_y(1, prof.h))
    p2h = float(prof.p_of_y(2, prof.h))
    c1, c2 = _c_constants(prof, geom)
    m1, m2 = phase_masses(prof, geom)
    eq = FlatEquilibrium(
        case=case,
        profile=prof,
        geom=geom,
        gamma=prof.gamma,
        p_b=0.5 * (p1h + p2h),
        rho_minus=float(prof.rho_of_y(1, prof.h)),
        rho_plus=float(prof.rho_of_y(2, prof.h)),
        c1=c1,
        c2=c2,
        masses=(m1, m2),
        rho_bottom=float(prof.rho_of_y(1, -geom.h_lower)),
        rho_top=float(prof.rho_of_y(2, geom.h_upper)),
    )
    return eq


# --- case (i) solver --------------------------------------------------------


def _g_and_jac_i(z, gamma, specs, geom, targets):
    a1, a2, h = z
    prof = hydrostatic_profile(
        "i", (a1, a2), h, gamma, specs, geom, n_samples=9, validate_ode=False
    )
    m1, m2 = phase_masses(prof, geom)
    p1h = float(prof.p_of_y(1, h))
    p2h = float(prof.p_of_y(2, h))
    rho1 = float(specs[0].density(p1h))
    rho2 = float(specs[1].density(p2h))
    c1, c2 = _c_constants(prof, geom)
    A = geom.area
    g = np.array([m1 - targets[0], m2 - targets[1], p2h - p1h])
    jac = np.array(
        [
            [A * c1, 0.0, A * rho1],
            [0.0, A * c2, -A * rho2],
            [-rho1, rho2, -gamma * (rho2 - rho1)],
        ]
    )
    return g, jac, prof


def _seed_i(targets, gamma, specs, geom):
    """Zero-gravity closed-form seed: shared pressure, h from the masses."""
    A = geom.area
    hl, hu = geom.h_lower, geom.h_upper

    def jump_at(h):
        r1 = targets[0] / (A * (h + hl))
        r2 = targets[1] / (A * (hu - h))
        return float(specs[0].pressure(r1) - specs[1].pressure(r2)), r1, r2

    # bracket h where both densities stay inside the valid intervals
    hs = np.linspace(-hl, hu, 4001)[1:-1]
    feas = []
    for h in hs:
        r1 = targets[0] / (A * (h + hl))
        r2 = targets[1] / (A * (hu - h))
        if specs[0].rho_min < r1 < specs[0].rho_max and specs[1].rho_min < r2 < specs[1].rho_max:
            feas.append(h)
    if not feas:
        raise FeasibilityError("no interface height renders both target masses feasible")
    lo, hi = feas[0], feas[-1]
    flo = jump_at(lo)[0]
    fhi = jump_at(hi)[0]
    if flo * fhi > 0:
        # fall back to the feasible h with the smallest jump
        h = min(feas, key=lambda h: abs(jump_at(h)[0]))
    else:
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm = jump_at(mid)[0]
            if flo * fm <= 0:
                hi = mid
            else:
                lo, flo = mid, fm
            if hi - lo < 1e-14 * (geom.h_lower + geom.h_upper):
                break
        h = 0.5 * (lo + hi)
    _, r1, r2 = jump_at(h)
    p_hat = 0.5 * (float(specs[0].pressure(r1)) + float(specs[1].pressure(r2)))
    a1 = float(specs[0].Phi(p_hat))
    a2 = float(specs[1].Phi(p_hat))
    return np.array([a1, a2, h])


def solve_flat_equilibrium_i(
    targets,
    gamma,
    specs,
    geom,
    initial_guess=None,
    tol=1e-10,
    max_iter=50,
) -> FlatEquilibrium:
    """Newton on (M1 - M01, M2 - M02, [[p]]) in the (a1, a2, h) coordinates.

    Convergence is measured in scaled units (masses by the targets,
    pressure jump by the interface pressure).  The analytic Jacobian is
    cross-checked against its LU determinant formula on exit.
    """
    targets = (float(targets[0]), float(targets[1]))
    if min(targets) <= 0:
        raise FeasibilityError("target masses must be positive")
    z = np.asarray(initial_guess, dtype=float) if initial_guess is not None else _seed_i(
        targets, gamma, specs, geom
    )
    scale = np.array([targets[0], targets[1], 1.0])

    g, jac, prof = _g_and_jac_i(z, gamma, specs, geom, targets)
    scale[2] = max(abs(float(prof.p_of_y(1, z[2]))), 1e-30)
    gn = np.linalg.norm(g / scale)
    for _ in range(max_iter):
        if gn < tol:
            break
        try:
            step = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc
        lam = 1.0
        for _ in range(40):
            zc = z + lam * step
            if -geom.h_lower < zc[2] < geom.h_upper:
                try:
                    gc, jc, pc = _g_and_jac_i(zc, gamma, specs, geom, targets)
                except (FeasibilityError, RangeError):
                    lam *= 0.5
                    continue
                gcn = np.linalg.norm(gc / scale)
                if gcn < gn * (1.0 - 1e-4 * lam) or gcn < tol:
                    z, g, jac, prof, gn = zc, gc, jc, pc, gcn
                    break
            lam *= 0.5
        else:
            raise NoConvergence(
                f"case-i damping stalled at scaled residual {gn:.3e}"
            )
    else:
        raise NoConvergence(f"case-i Newton hit {max_iter} iterations, ||g|| = {gn:.3e}")

    prof = hydrostatic_profile("i", (z[0], z[1]), z[2], gamma, specs, geom)
    eq = _build_equilibrium("i", prof, geom)

    # determinant formula versus LU determinant
    A = geom.area
    det_formula = (
        A**2
        * eq.c1
        * eq.c2
        * (eq.rho_minus**2 / eq.c1 + eq.rho_plus**2 / eq.c2 - gamma * eq.jump_rho)
    )
    det_lu = float(np.linalg.det(jac))
    if abs(det_lu - det_formula) > 1e-8 * max(abs(det_lu), abs(det_formula)):
        raise InternalInvariantViolation(
            f"determinant formula {det_formula:.12e} vs LU {det_lu:.12e}"
        )
    if not eq.lcuni_margin > 0:
        raise InternalInvariantViolation(
            f"isolation inequality violated: margin {eq.lcuni_margin:.3e}"
        )
    return eq


# --- case (ii) solver -------------------------------------------------------


def _g_and_jac_ii(z, gamma, specs, geom, target):
    a, h = z
    prof = hydrostatic_profile(
        "ii", a, h, gamma, specs, geom, n_samples=9, validate_ode=False
    )
    m1, m2 = phase_masses(prof, geom)
    rho1 = float(prof.rho_of_y(1, h))
    rho2 = float(prof.rho_of_y(2, h))
    jump = rho2 - rho1
    c1, c2 = _c_constants(prof, geom)
    A = geom.area
    f = float(specs[1].pressure(rho2) - specs[0].pressure(rho1))
    g = np.array([m1 + m2 - target, f])
    jac = np.array([[A * (c1 + c2), -A * jump], [jump, -gamma * jump]])
    return g, jac, prof


def _interface_state_ii(specs):
    """Solve [[p]] = [[phi]] = 0 for the interface densities (rho1, rho2).

    Parametrized by the shared interface pressure, which reduces the
    system to a scalar root of [[phi]](p) over the overlap of the two
    attainable pressure ranges; the first sign change (lowest pressure)
    is taken when several phase-equilibrium states exist.
    """
    s1, s2 = specs
    if s1.family == s2.family and s1.params == s2.params and s1.family != "custom":
        raise DegenerateEquilibrium(
            "identical phase laws force [[rho]] = 0 at any common state"
        )
    lo = max(s1.p_range[0], s2.p_range[0])
    hi = min(s1.p_range[1], s2.p_range[1])
    if not lo < hi:
        raise FeasibilityError("attainable pressure ranges of the two phases do not overlap")

    def jump_phi(p):
        return float(s2.phi(s2.density(p)) - s1.phi(s1.density(p)))

    # log-spaced scan (pressures are positive), then bisection
    grid = np.exp(np.linspace(np.log(lo * (1 + 1e-9)), np.log(hi * (1 - 1e-9)), 2049))
    vals = np.array([jump_phi(p) for p in grid])
    sign_change = np.nonzero(vals[:-1] * vals[1:] <= 0.0)[0]
    if len(sign_change) == 0:
        raise FeasibilityError(
            "no common interface state: [[phi]] has no zero on the shared pressure range"
        )
    i = int(sign_change[0])
    a, b, fa = grid[i], grid[i + 1], vals[i]
    for _ in range(200):
        mid = 0.5 * (a + b)
        fm = jump_phi(mid)
        if fa * fm <= 0:
            b = mid
        else:
            a, fa = mid, fm
        if b - a <= 1e-15 * b:
            break
    p_hat = 0.5 * (a + b)
    return float(s1.density(p_hat)), float(s2.density(p_hat))


def _seed_ii(target, gamma, specs, geom):
    r1, r2 = _interface_state_ii(specs)
    if abs(r2 - r1) < 1e-10 * max(r1, r2):
        raise DegenerateEquilibrium(
            f"interface densities coincide ({r1:.6g}); equilibrium is degenerate"
        )
    A = geom.area
    h = (target / A - geom.h_lower * r1 - geom.h_upper * r2) / (r1 - r2)
    h = min(max(h, -geom.h_lower * 0.95), geom.h_upper * 0.95)
    a = float(specs[0].phi(r1)) + gamma * h
    return np.array([a, h])


def solve_flat_equilibrium_ii(
    target,
    gamma,
    specs,
    geom,
    initial_guess=None,
    tol=1e-10,
    max_iter=50,
) -> FlatEquilibrium:
    """Newton on (M - M0, [[p]]) in the (a, h) coordinates.

    Requires a non-degenerate solution ([[rho]] != 0) and checks the
    isolation criterion [[rho]] != gamma*c on exit.
    """
    target = float(target)
    if target <= 0:
        raise FeasibilityError("target mass must be positive")
    z = (
        np.asarray(initial_guess, dtype=float)
        if initial_guess is not None
        else _seed_ii(target, gamma, specs, geom)
    )
    g, jac, prof = _g_and_jac_ii(z, gamma, specs, geom, target)
    scale = np.array([target, max(abs(float(prof.p_of_y(1, z[1]))), 1e-30)])
    gn = np.linalg.norm(g / scale)
    for _ in range(max_iter):
        if gn < tol:
            break
        try:
            step = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc
        lam = 1.0
        for _ in range(40):
            zc = z + lam * step
            if -geom.h_lower < zc[1] < geom.h_upper:
                try:
                    gc, jc, pc = _g_and_jac_ii(zc, gamma, specs, geom, target)
                except (FeasibilityError, RangeError):
                    lam *= 0.5
                    continue
                gcn = np.linalg.norm(gc / scale)
                if gcn < gn * (1.0 - 1e-4 * lam) or gcn < tol:
                    z, g, jac, prof, gn = zc, gc, jc, pc, gcn
                    break
            lam *= 0.5
        else:
            raise NoConvergence(f"case-ii damping stalled at scaled residual {gn:.3e}")
    else:
        raise NoConvergence(f"case-ii Newton hit {max_iter} iterations, ||g|| = {gn:.3e}")

    prof = hydrostatic_profile("ii", z[0], z[1], gamma, specs, geom)
    eq = _build_equilibrium("ii", prof, geom)

    rho_scale = max(eq.rho_minus, eq.rho_plus, eq.rho_bottom, eq.rho_top)
    if abs(eq.jump_rho) < 1e-8 * rho_scale:
        raise DegenerateEquilibrium(
            f"interface density jump {eq.jump_rho:.3e} is numerically zero"
        )
    gc = gamma * eq.c
    if abs(eq.jump_rho - gc) <= 1e-8 * max(abs(eq.jump_rho), abs(gc), 1e-30):
        raise IsolationFailure(
            f"[[rho]] = {eq.jump_rho:.6g} equals gamma*c = {gc:.6g}; "
            "equilibrium not isolated at fixed mass"
        )
    det_formula = geom.area * eq.jump_rho * (eq.jump_rho - gc)
    det_lu = float(np.linalg.det(jac))
    if abs(det_lu - det_formula) > 1e-6 * max(abs(det_lu), abs(det_formula)):
        raise InternalInvariantViolation(
            f"case-ii determinant formula {det_formula:.12e} vs LU {det_lu:.12e}"
        )
    # exact identity gamma*c - [[rho]] = rho_*(-h_lower) - rho_*(h_upper)
    lhs = eq.lcunii_value
    rhs = eq.rho_bottom - eq.rho_top
    if abs(lhs - rhs) > 1e-8 * max(abs(lhs), abs(rhs), rho_scale):
        raise InternalInvariantViolation(
            f"identity gamma*c - [[rho]] = {lhs:.12e} vs endpoint value {rhs:.12e}"
        )
    return eq
