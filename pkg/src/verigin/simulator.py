"""Nonlinear time integration of the transformed fixed-domain system.

The moving-interface problem is pulled back to the reference domain by
theta_h(x, y) = (x, y + chi(y) h(t, x)) with a C^2 quintic cutoff chi
(1 near the interface, 0 near the outer walls).  The unknowns are
v = p o theta_h (unit pressure scaling) and h.  Mass balance is
discretized in ALE conservation form

    d/dt [rho(v) J] + dx[J rho u_x] + dy[rho(u_y - chi dt_h) - chi dx_h rho u_x] = 0,
    J = 1 + chi'(y) h,

with vertex-centered finite volumes; the interface y = 0 carries
duplicated traces whose half cells are merged into the adjacent rows,
the interface mass flux is zero (no phase transition) or a single shared
unknown (with phase transition), and the outer/lateral walls are
zero-flux half cells.  Phase masses (total mass in case "ii") therefore
telescope exactly.

Gravity enters fluxes through the hydrostatic potential: the face flux
is -k rho_f^2 [(dPhi/dy)/J + gamma] with rho_f = dv/dPhi the potential-
consistent face density, so sampled hydrostatic columns are *exact*
discrete equilibria and equilibrium states are fixed points of the
stepper to solver tolerance.

Time stepping is semi-implicit: the frozen-coefficient principal parts
(diffusive fluxes, interface conditions, interface evolution) are
implicit, metric/cross terms explicit, and the nonlinear coefficients
are fixed-point corrected; iterating the correction to tolerance makes
the scheme conservative to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .equilibria import FlatEquilibrium
from .errors import (
    CompatibilityError,
    ConfigError,
    FitError,
    RangeError,
    SolveError,
    StepFailure,
)
from .geometry import Grid

__all__ = [
    "SimConfig",
    "SimState",
    "Diagnostics",
    "Simulator",
    "growth_rate_estimate",
]


def _smoothstep(t):
    return 6.0 * t**5 - 15.0 * t**4 + 10.0 * t**3


def _dsmoothstep(t):
    return 30.0 * t**2 * (t - 1.0) ** 2


def cutoff(y, h_lower, h_upper):
    """C^2 cutoff chi(y): 1 on (-h_lower/3, h_upper/3), 0 outside
    (-2 h_lower/3, 2 h_upper/3); returns (chi, chi')."""
    y = np.asarray(y, dtype=float)
    chi = np.ones_like(y)
    dchi = np.zeros_like(y)
    up = y > h_upper / 3.0
    t = np.clip((y[up] - h_upper / 3.0) / (h_upper / 3.0), 0.0, 1.0)
    chi[up] = 1.0 - _smoothstep(t)
    dchi[up] = np.where(t < 1.0, -_dsmoothstep(t) * 3.0 / h_upper, 0.0)
    lo = y < -h_lower / 3.0
    t = np.clip((-y[lo] - h_lower / 3.0) / (h_lower / 3.0), 0.0, 1.0)
    chi[lo] = 1.0 - _smoothstep(t)
    dchi[lo] = np.where(t < 1.0, _dsmoothstep(t) * 3.0 / h_lower, 0.0)
    return chi, dchi


@dataclass(frozen=True)
class SimConfig:
    dt: float
    t_end: float
    scheme: str = "semi_implicit"
    output_every: int = 1
    fp_tol: float = 1e-11
    fp_max: int = 12
    stall_tol: float = 1e-9
    max_halvings: int = 10
    growth_stop_fraction: float = 0.5  # of the diffeomorphism bound

    def __post_init__(self):
        if self.dt <= 0 or self.t_end <= 0:
            raise ConfigError("dt and t_end must be positive")
        if self.scheme != "semi_implicit":
            raise ConfigError(f"unknown scheme {self.scheme!r}")


@dataclass
class SimState:
    t: float
    v1: np.ndarray  # (n_below+1, nxp); row -1 is the trace v^-
    v2: np.ndarray  # (n_above+1, nxp); row 0 is the trace v^+
    h: np.ndarray   # (nxp,)

    def copy(self):
        return SimState(self.t, self.v1.copy(), self.v2.copy(), self.h.copy())


@dataclass(frozen=True)
class Diagnostics:
    t: float
    energy: float
    dissipation: float
    mass1: float
    mass2: float
    h_norm: float       # || h - mean(h) ||_2
    grad_h_norm: float
    u_norm: float
    h_mean: float

    @property
    def mass_total(self):
        return self.mass1 + self.mass2


class _Phase:
    """Static per-phase grid/coefficient data."""

    def __init__(self, grid: Grid, phase: int, spec):
        self.phase = phase
        self.spec = spec
        self.y = grid.y1 if phase == 1 else grid.y2
        self.ny = len(self.y) - 1
        self.dy = float(self.y[1] - self.y[0])
        self.vy = grid.vy(phase)
        hl, hu = grid.geom.h_lower, grid.geom.h_upper
        self.chi, self.dchi = cutoff(self.y, hl, hu)
        ymid = 0.5 * (self.y[:-1] + self.y[1:])
        self.chi_f, self.dchi_f = cutoff(ymid, hl, hu)
        nxp = grid.nxp
        if phase == 1:
            gm = np.empty((self.ny + 1, nxp), dtype=int)
            for j in range(self.ny):
                gm[j] = grid.idx1(j, 0) + np.arange(nxp)
            gm[self.ny] = grid.off_tm + np.arange(nxp)
            self.trace_level = self.ny
        else:
            gm = np.empty((self.ny + 1, nxp), dtype=int)
            gm[0] = grid.off_tp + np.arange(nxp)
            for j in range(1, self.ny + 1):
                gm[j] = grid.idx2(j, 0) + np.arange(nxp)
            self.trace_level = 0
        self.gmap = gm
        # balance-row owner of each y-level (merged trace slivers)
        own = np.arange(self.ny + 1)
        if phase == 1:
            own[self.ny] = self.ny - 1
        else:
            own[0] = 1
        self.owner = own
        # levels owning a balance row
        self.balance_levels = (
            np.arange(self.ny) if phase == 1 else np.arange(1, self.ny + 1)
        )


class Simulator:
    """Semi-implicit integrator bound to one equilibrium's phase laws.

    The equilibrium provides the constitutive closures and the reference
    profiles; arbitrary states on the same grid can be advanced.
    """

    def __init__(self, eq: FlatEquilibrium, grid: Grid, sigma: float, case: Optional[str] = None):
        self.eq = eq
        self.grid = grid
        self.sigma = float(sigma)
        self.case = case or eq.case
        if self.case not in ("i", "ii"):
            raise ConfigError(f"case must be 'i' or 'ii', got {self.case!r}")
        self.gamma = eq.gamma
        sgeom = eq.shifted_geom
        tol = 1e-12 * (sgeom.h_lower + sgeom.h_upper)
        if (
            abs(grid.geom.h_lower - sgeom.h_lower) > tol
            or abs(grid.geom.h_upper - sgeom.h_upper) > tol
        ):
            raise ConfigError(
                "grid must be built on eq.shifted_geom (interface at y = 0)"
            )
        self.ph = (_Phase(grid, 1, eq.specs[0]), _Phase(grid, 2, eq.specs[1]))
        hl, hu = grid.geom.h_lower, grid.geom.h_upper
        # sup of |chi'| for the quintic cutoff: 1.875 * 3 / min(h)
        dchi_sup = 1.875 * 3.0 / min(hl, hu)
        self.diffeo_bound = 0.999 * min(min(hl, hu) / 3.0, 1.0 / (2.0 * dchi_sup))
        self.n_unknowns = grid.n_base + (grid.nxp if self.case == "ii" else 0)
        self._psamp = (
            np.asarray(eq.p_star(1, self.ph[0].y), dtype=float),
            np.asarray(eq.p_star(2, self.ph[1].y), dtype=float),
        )

    # --- state constructors -------------------------------------------------

    def equilibrium_state(self) -> SimState:
        """Sampled flat equilibrium: an exact discrete fixed point."""
        g = self.grid
        v1 = np.tile(self._psamp[0][:, None], (1, g.nxp))
        v2 = np.tile(self._psamp[1][:, None], (1, g.nxp))
        return SimState(0.0, v1, v2, np.zeros(g.nxp))

    def perturbed_state(
        self,
        amplitude: float,
        mode: Optional[int] = 1,
        seed: Optional[int] = None,
        n_modes: int = 4,
        omega: Optional[float] = None,
    ) -> SimState:
        """Equilibrium plus an interface perturbation with the pressure
        correction solved from the discrete compatibility system."""
        g = self.grid
        x = g.x
        L = g.geom.L
        if mode is not None:
            h0 = amplitude * np.cos(mode * np.pi * x / L)
        else:
            rng = np.random.default_rng(seed)
            coef = rng.standard_normal(n_modes)
            coef /= np.linalg.norm(coef)
            h0 = amplitude * sum(
                c * np.cos((n + 1) * np.pi * x / L) for n, c in enumerate(coef)
            )
        if np.max(np.abs(h0)) >= self.diffeo_bound:
            raise ConfigError(
                f"perturbation amplitude {amplitude} violates the mesh bound "
                f"{self.diffeo_bound:.4g}"
            )
        return self.compatible_state(h0, omega=omega)

    def eigenmode_state(self, disc, lam, vec_reduced, amplitude: float) -> SimState:
        """Equilibrium plus a discrete eigenvector of the linearization.

        Maps the pressure-relative eigenvariable w (p = p_*(1 + w)) into
        the transformed unknown v = p o theta_h via
        v = p_* + eps (p_* w + p_*' chi h); normalized so max|h| equals
        ``amplitude``.
        """
        _, _, lift = disc.reduce()
        full = lift(lam, np.asarray(vec_reduced, dtype=float))
        w1, w2, hvec = disc.extract_fields(full)
        hmax = np.abs(hvec).max()
        if hmax <= 0:
            raise ConfigError("eigenvector carries no interface component")
        eps = amplitude / hmax
        g = self.grid
        vs = []
        for ph, psamp, w in zip(self.ph, self._psamp, (w1, w2)):
            dp = -self.gamma * np.asarray(self.eq.rho_star(ph.phase, ph.y), dtype=float)
            v = (
                psamp[:, None]
                + eps * psamp[:, None] * w
                + eps * (dp * ph.chi)[:, None] * hvec[None, :]
            )
            vs.append(v)
        return SimState(0.0, vs[0], vs[1], eps * hvec.copy())

    def compatible_state(self, h0: np.ndarray, omega: Optional[float] = None) -> SimState:
        """Solve the damped elliptic compatibility system at fixed h = h0."""
        g = self.grid
        h0 = np.asarray(h0, dtype=float)
        state = SimState(0.0, None, None, h0.copy())
        # start from the equilibrium profile evaluated through theta_h
        vs = []
        for ph in self.ph:
            Y = ph.y[:, None] + ph.chi[:, None] * h0[None, :]
            lo, hi = (-g.geom.h_lower, 0.0) if ph.phase == 1 else (0.0, g.geom.h_upper)
            Yc = np.clip(Y, lo, hi)
            vs.append(np.asarray(self.eq.p_star(ph.phase, Yc), dtype=float))
        state.v1, state.v2 = vs
        if omega is None:
            p_b = self.eq.p_b
            d = min(
                ph.spec.k * float(ph.spec.density(p_b)) ** 2 / float(
                    ph.spec.drho_dp(p_b)
                ) / p_b
                for ph in self.ph
            )
            omega = d / (g.geom.h_lower + g.geom.h_upper) ** 2
        ref = state.copy()
        for _ in range(6):
            A, b = self._assemble(state, state, dt=None, fixed_h=h0, omega=omega, ref=ref)
            z = self._solve(A, b)
            new = self._unpack(z, state, fixed_h=h0)
            delta = self._state_delta(new, state)
            state = new
            if delta < 1e-13:
                break
        return state

    # --- assembly -----------------------------------------------------------

    def _freeze(self, state: SimState):
        """Nonlinear coefficients at the current iterate."""
        out = []
        for ph, v in zip(self.ph, (state.v1, state.v2)):
            try:
                rho = np.asarray(ph.spec.density(v), dtype=float)
                Phi = np.asarray(ph.spec.Phi(v), dtype=float)
            except RangeError as exc:
                raise StepFailure(f"pressure left attainable range: {exc}") from exc
            drho = 1.0 / np.asarray(ph.spec.dp_drho(rho), dtype=float)
            rho_f = np.asarray(
                ph.spec.face_density(v[:-1, :], v[1:, :]), dtype=float
            )
            rho_fx = np.asarray(
                ph.spec.face_density(v[:, :-1], v[:, 1:]), dtype=float
            )
            out.append((rho, drho, Phi, rho_f, rho_fx))
        return out

    def _dxh(self, h):
        g = self.grid
        dxh = np.zeros_like(h)
        dxh[1:-1] = (h[2:] - h[:-2]) / (2.0 * g.dx)
        return dxh  # Neumann ends: zero slope

    def _assemble(
        self,
        state_n: SimState,
        state_s: SimState,
        dt: Optional[float],
        fixed_h: Optional[np.ndarray] = None,
        omega: Optional[float] = None,
        ref: Optional[SimState] = None,
    ):
        """Linear system for the implicit step (or the compatibility solve).

        state_n: previous time level (mass contents, h^n);
        state_s: current fixed-point iterate (frozen coefficients).
        fixed_h: compatibility mode - h is data, outer one-sided
        conditions replace the outer balances and the time term becomes
        omega-damping towards ``ref``.
        """
        g = self.grid
        nxp = g.nxp
        wx = g.wx
        dx = g.dx
        gamma = self.gamma
        compat = fixed_h is not None
        hs = state_s.h if not compat else fixed_h
        hn = state_n.h
        frozen = self._freeze(state_s)
        dxh = self._dxh(hs)
        n = self.n_unknowns if not compat else g.n_base - (0 if self.case == "ii" else 0)
        n = g.n_base + (nxp if self.case == "ii" else 0)
        rows: List[np.ndarray] = []
        cols: List[np.ndarray] = []
        vals: List[np.ndarray] = []
        b = np.zeros(n)
        i_h = g.off_h + np.arange(nxp)
        i_J = g.n_base + np.arange(nxp) if self.case == "ii" else None

        def add(r, c, v):
            rows.append(np.asarray(r, dtype=int).ravel())
            cols.append(np.asarray(c, dtype=int).ravel())
            vals.append(np.asarray(v, dtype=float).ravel())

        ih_col = i_h  # h columns (absent in compat mode: masked later)

        # ---- phase balances
        for ph, (vsL, vnL), fz in zip(
            self.ph,
            (((state_s.v1), (state_n.v1)), ((state_s.v2), (state_n.v2))),
            frozen,
        ):
            vs, vn = vsL, vnL
            rho, drho, Phi, rho_f, rho_fx = fz
            ny = ph.ny
            dy = ph.dy
            k = ph.spec.k
            J_node = 1.0 + ph.dchi[:, None] * hs[None, :]
            # previous-level exact content
            rho_n = np.asarray(ph.spec.density(vn), dtype=float)
            J_n = 1.0 + ph.dchi[:, None] * hn[None, :]
            content_n = rho_n * J_n

            own_rows = ph.gmap[ph.owner]  # (ny+1, nxp): owner row per level

            # time terms (or compatibility damping)
            for lvl in range(ny + 1):
                vol = ph.vy[lvl]
                R = own_rows[lvl]
                if compat:
                    # damping towards the reference state on interior rows only
                    continue
                coef = J_node[lvl] * drho[lvl] * vol * wx / dt
                add(R, ph.gmap[lvl], coef)
                const = (
                    rho[lvl] * J_node[lvl]
                    - J_node[lvl] * drho[lvl] * vs[lvl]
                    - rho[lvl] * ph.dchi[lvl] * hs
                    - content_n[lvl]
                ) * vol * wx / dt
                hcoef = rho[lvl] * ph.dchi[lvl] * vol * wx / dt
                add(R, ih_col, hcoef)
                b[R] -= const

            if compat:
                vref = ref.v1 if ph.phase == 1 else ref.v2
                for lvl in range(ny + 1):
                    if lvl == ph.trace_level:
                        continue
                    if (ph.phase == 1 and lvl == 0) or (
                        ph.phase == 2 and lvl == ny
                    ):
                        continue  # outer rows handled below
                    vol = ph.vy[lvl]
                    R = own_rows[lvl]
                    coef = J_node[lvl] * drho[lvl] * vol * wx * omega
                    add(R, ph.gmap[lvl], coef)
                    b[R] += coef * vref[lvl]

            # y-faces (interior to the phase)
            faces = [
                f
                for f in range(ny)
                if not (ph.phase == 1 and f == ny - 1) and not (ph.phase == 2 and f == 0)
            ]
            for f in faces:
                lo, hi = f, f + 1
                Jf = 1.0 + ph.dchi_f[f] * hs
                fac = 1.0 + (ph.chi_f[f] * dxh) ** 2
                C = k * rho_f[f] ** 2 * fac / (Jf * dy)
                # implicit Phi-difference
                clo = C / rho[lo]
                chi_ = C / rho[hi]
                dPhi_s = Phi[hi] - Phi[lo]
                const_flux = (
                    -C * (dPhi_s - vs[hi] / rho[hi] + vs[lo] / rho[lo])
                    - k * rho_f[f] ** 2 * gamma
                )
                # cross term (explicit): + k rho_f chi_f dxh * d_x v at the face
                dxv = np.zeros(nxp)
                vmid = 0.5 * (vs[lo] + vs[hi])
                dxv[1:-1] = (vmid[2:] - vmid[:-2]) / (2 * dx)
                const_flux = const_flux + k * rho_f[f] * ph.chi_f[f] * dxh * dxv
                # mesh motion: - rho_f chi_f (h - h^n)/dt  (implicit in h)
                R_lo = own_rows[lo]
                R_hi = own_rows[hi]
                if not compat:
                    hcoef = -rho_f[f] * ph.chi_f[f] / dt
                    add(R_lo, ih_col, hcoef * wx)
                    add(R_hi, ih_col, -hcoef * wx)
                    b[R_lo] -= (rho_f[f] * ph.chi_f[f] / dt) * hn * wx
                    b[R_hi] += (rho_f[f] * ph.chi_f[f] / dt) * hn * wx
                # attribution: row below gets +flux*wx, row above -flux*wx
                add(R_lo, ph.gmap[hi], -chi_ * wx)
                add(R_lo, ph.gmap[lo], clo * wx)
                add(R_hi, ph.gmap[hi], chi_ * wx)
                add(R_hi, ph.gmap[lo], -clo * wx)
                b[R_lo] -= const_flux * wx
                b[R_hi] += const_flux * wx

            # x-faces
            dyv = np.zeros((ny + 1, nxp))
            dyv[1:-1] = (vs[2:] - vs[:-2]) / (2 * dy)
            dyv[0] = (-3 * vs[0] + 4 * vs[1] - vs[2]) / (2 * dy)
            dyv[-1] = (3 * vs[-1] - 4 * vs[-2] + vs[-3]) / (2 * dy)
            hmid = 0.5 * (hs[:-1] + hs[1:])
            gmid = (hs[1:] - hs[:-1]) / dx
            for lvl in range(ny + 1):
                height = ph.vy[lvl]
                Jf = 1.0 + ph.dchi[lvl] * hmid
                Cx = k * Jf * rho_fx[lvl] / dx
                dyv_f = 0.5 * (dyv[lvl, :-1] + dyv[lvl, 1:])
                cross = k * rho_fx[lvl] * ph.chi[lvl] * gmid * dyv_f
                R = own_rows[lvl]
                gl = ph.gmap[lvl]
                add(R[:-1], gl[1:], -Cx * height)
                add(R[:-1], gl[:-1], Cx * height)
                add(R[1:], gl[1:], Cx * height)
                add(R[1:], gl[:-1], -Cx * height)
                b[R[:-1]] -= cross * height
                b[R[1:]] += cross * height

        # interface mass flux (case ii): phase-1 merged row +J wx, phase-2 -J wx
        if self.case == "ii":
            R1 = self.ph[0].gmap[self.ph[0].owner[self.ph[0].trace_level]]
            R2 = self.ph[1].gmap[self.ph[1].owner[self.ph[1].trace_level]]
            add(R1, i_J, wx)
            add(R2, i_J, -wx)

        # ---- interface condition rows
        tm = g.off_tm + np.arange(nxp)
        tp = g.off_tp + np.arange(nxp)
        # Laplace-Young at the trace- rows
        bmid = 1.0 / np.sqrt(1.0 + ((hs[1:] - hs[:-1]) / dx) ** 2)
        add(tm, tp, np.ones(nxp))
        add(tm, tm, -np.ones(nxp))
        # - sigma * div(beta grad h): assemble nodal operator rows
        lap_rows = []
        for i in range(nxp):
            cs = {}
            if i < nxp - 1:
                cs[i + 1] = bmid[i] / dx
                cs[i] = cs.get(i, 0.0) - bmid[i] / dx
            if i > 0:
                cs[i - 1] = cs.get(i - 1, 0.0) + bmid[i - 1] / dx
                cs[i] = cs.get(i, 0.0) - bmid[i - 1] / dx
            lap_rows.append(cs)
        if not compat:
            for i in range(nxp):
                for jcol, cv in lap_rows[i].items():
                    add([tm[i]], [i_h[jcol]], [-self.sigma * cv / wx[i]])
        else:
            for i in range(nxp):
                lap = sum(cv * fixed_h[jcol] for jcol, cv in lap_rows[i].items())
                b[tm[i]] += self.sigma * lap / wx[i]

        # one-sided interface flux functionals Psi_-, Psi_+
        (cm_entries, cm_const), (cp_entries, cp_const) = self._psi_rows(
            state_s, frozen, dxh
        )

        def add_psi(rowvec, entries, scale):
            for pos, ccols, cvals in entries:
                s = scale[pos] if np.ndim(scale) else scale
                add(rowvec[pos], ccols, s * cvals)

        if self.case == "i":
            # [[Psi]] = 0 at the trace+ rows
            add_psi(tp, cp_entries, 1.0)
            add_psi(tp, cm_entries, -1.0)
            b[tp] -= cp_const - cm_const
            # h rows: (h - h^n)/dt + (Psi+ + Psi-)/2 = 0
            if not compat:
                add(i_h, i_h, np.full(nxp, 1.0 / dt))
                b[i_h] += hn / dt
                add_psi(i_h, cp_entries, 0.5)
                add_psi(i_h, cm_entries, 0.5)
                b[i_h] -= 0.5 * (cp_const + cm_const)
            else:
                add(i_h, i_h, np.ones(nxp))  # h pinned to the given data
                b[i_h] += fixed_h
        else:
            rho_m = frozen[0][0][self.ph[0].trace_level]
            rho_p = frozen[1][0][self.ph[1].trace_level]
            vs_m = state_s.v1[-1]
            vs_p = state_s.v2[0]
            phi_m = np.asarray(self.ph[0].spec.phi(rho_m), dtype=float)
            phi_p = np.asarray(self.ph[1].spec.phi(rho_p), dtype=float)
            # [[phi(rho(v))]] = 0 linearized at the trace+ rows
            add(tp, tp, 1.0 / rho_p)
            add(tp, tm, -1.0 / rho_m)
            b[tp] += vs_p / rho_p - vs_m / rho_m - (phi_p - phi_m)
            jump_s = rho_p - rho_m
            mean_rho = 0.5 * (rho_m + rho_p)
            if not compat:
                # [[rho]](h-h^n)/dt + (rho+ Psi+ - rho- Psi-) = 0
                add(i_h, i_h, jump_s / dt)
                b[i_h] += jump_s * hn / dt
                add_psi(i_h, cp_entries, rho_p)
                add_psi(i_h, cm_entries, -rho_m)
                b[i_h] -= rho_p * cp_const - rho_m * cm_const
                # flux definition: J + mean(rho (Psi + dt_h)) = 0
                add(i_J, i_J, np.ones(nxp))
                add(i_J, i_h, mean_rho / dt)
                b[i_J] += mean_rho * hn / dt
                add_psi(i_J, cp_entries, 0.5 * rho_p)
                add_psi(i_J, cm_entries, 0.5 * rho_m)
                b[i_J] -= 0.5 * (rho_p * cp_const + rho_m * cm_const)
            else:
                add(i_h, i_h, np.ones(nxp))
                b[i_h] += fixed_h
                add(i_J, i_J, np.ones(nxp))
                add_psi(i_J, cp_entries, 0.5 * rho_p)
                add_psi(i_J, cm_entries, 0.5 * rho_m)
                b[i_J] -= 0.5 * (rho_p * cp_const + rho_m * cm_const)

        A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )

        # ---- compatibility outer rows replace the outer balances wholesale
        if compat:
            outer_rows = np.concatenate([self.ph[0].gmap[0], self.ph[1].gmap[-1]])
            mask = np.ones(n)
            mask[outer_rows] = 0.0
            A = sp.diags(mask) @ A
            b = mask * b
            rows2, cols2, vals2 = [], [], []
            b2 = np.zeros(n)
            for ph, fz, vsL in zip(self.ph, frozen, (state_s.v1, state_s.v2)):
                rho, drho, Phi, _, _ = fz
                dy = ph.dy
                if ph.phase == 1:
                    lvls = (0, 1, 2)
                    coefs = np.array([-3.0, 4.0, -1.0]) / (2 * dy)
                    R = ph.gmap[0]
                else:
                    ny = ph.ny
                    lvls = (ny, ny - 1, ny - 2)
                    coefs = np.array([3.0, -4.0, 1.0]) / (2 * dy)
                    R = ph.gmap[ny]
                const = np.full(nxp, gamma)
                for lv, cf in zip(lvls, coefs):
                    rows2.append(R)
                    cols2.append(ph.gmap[lv])
                    vals2.append(np.full(nxp, cf) / rho[lv])
                    const = const + cf * (Phi[lv] - vsL[lv] / rho[lv])
                b2[R] -= const
            A = A + sp.csr_matrix(
                (
                    np.concatenate(vals2),
                    (np.concatenate(rows2), np.concatenate(cols2)),
                ),
                shape=(n, n),
            )
            b = b + b2
        return A, b

    def _psi_rows(self, state_s: SimState, frozen, dxh):
        """Linearized one-sided interface fluxes Psi_-/Psi_+.

        Psi = k [(1+|dx h|^2) rho d_y Phi(v) - dx h d_x v + gamma rho(v)],
        with the y-derivative one-sided (second order) in the potential,
        exact on flat hydrostatic states.  Returns, per side,
        (entries, const) with entries a list of (pos, cols, vals): pos
        indexes the x-nodes the term lives on, cols the global unknown
        columns, vals the coefficients.
        """
        g = self.grid
        nxp = g.nxp
        dx = g.dx
        pos_all = np.arange(nxp)
        pos_in = np.arange(1, nxp - 1)
        out = []
        for ph, fz, vs in zip(self.ph, frozen, (state_s.v1, state_s.v2)):
            rho, drho, Phi, _, _ = fz
            dy = ph.dy
            k = ph.spec.k
            if ph.phase == 1:
                lvls = (ph.ny, ph.ny - 1, ph.ny - 2)
                coefs = np.array([3.0, -4.0, 1.0]) / (2 * dy)
            else:
                lvls = (0, 1, 2)
                coefs = np.array([-3.0, 4.0, -1.0]) / (2 * dy)
            tr = ph.trace_level
            fac = 1.0 + dxh**2
            rho_tr = rho[tr]
            drho_tr = drho[tr]
            vtr = vs[tr]
            entries = []
            const = np.zeros(nxp)
            for lv, cf in zip(lvls, coefs):
                coef = k * fac * rho_tr * cf / rho[lv]
                entries.append((pos_all, ph.gmap[lv], coef))
                const += k * fac * rho_tr * cf * (Phi[lv] - vs[lv] / rho[lv])
            # - k dx h d_x v along the trace row (implicit, centered;
            # zero at the lateral ends by the Neumann mirror)
            gl = ph.gmap[tr]
            cplus = -k * dxh[pos_in] / (2 * dx)
            entries.append((pos_in, gl[2:], cplus))
            entries.append((pos_in, gl[:-2], -cplus))
            # gravity: k gamma (rho_s + rho'_s (v - v_s))
            entries.append((pos_all, gl, k * self.gamma * drho_tr))
            const += k * self.gamma * (rho_tr - drho_tr * vtr)
            out.append((entries, const))
        return out[0], out[1]

    # --- linear algebra helpers ----------------------------------------------

    def _solve(self, A, b):
        try:
            lu = spla.splu(sp.csc_matrix(A))
        except RuntimeError as exc:
            raise StepFailure(f"implicit system singular: {exc}") from exc
        z = lu.solve(b)
        if not np.all(np.isfinite(z)):
            raise StepFailure("implicit solve produced non-finite values")
        return z

    def _unpack(self, z, like: SimState, fixed_h=None) -> SimState:
        g = self.grid
        nxp = g.nxp
        v1 = np.empty_like(like.v1)
        v2 = np.empty_like(like.v2)
        for j in range(g.n_below):
            v1[j] = z[g.idx1(j, 0) : g.idx1(j, 0) + nxp]
        v1[-1] = z[g.off_tm : g.off_tm + nxp]
        v2[0] = z[g.off_tp : g.off_tp + nxp]
        for j in range(1, g.n_above + 1):
            v2[j] = z[g.idx2(j, 0) : g.idx2(j, 0) + nxp]
        h = fixed_h.copy() if fixed_h is not None else z[g.off_h : g.off_h + nxp]
        return SimState(like.t, v1, v2, h)

    def _state_delta(self, a: SimState, b: SimState):
        scale_v = max(np.abs(b.v1).max(), np.abs(b.v2).max(), 1e-300)
        scale_h = max(self.grid.geom.h_lower, self.grid.geom.h_upper)
        return max(
            np.abs(a.v1 - b.v1).max() / scale_v,
            np.abs(a.v2 - b.v2).max() / scale_v,
            np.abs(a.h - b.h).max() / scale_h,
        )

    # --- stepping -------------------------------------------------------------

    def step(self, state: SimState, dt: float, config: Optional[SimConfig] = None) -> SimState:
        """One semi-implicit step with fixed-point correction."""
        fp_tol = config.fp_tol if config else 1e-11
        fp_max = config.fp_max if config else 12
        cur = state
        new = None
        for it in range(fp_max):
            A, b = self._assemble(state, cur, dt)
            z = self._solve(A, b)
            new = self._unpack(z, state)
            new.t = state.t + dt
            delta = self._state_delta(new, cur) if it > 0 else np.inf
            cur = new
            if it > 0 and delta < fp_tol:
                break
        if np.max(np.abs(new.h)) >= self.diffeo_bound:
            raise StepFailure(
                f"|h| = {np.max(np.abs(new.h)):.4g} exceeds the mesh bound "
                f"{self.diffeo_bound:.4g}"
            )
        return new

    def run(self, state: SimState, config: SimConfig):
        """Integrate to t_end; returns (final_state, series, verdict).

        series is a list of Diagnostics at the configured cadence;
        verdict is one of ConvergedToEquilibrium / GrowingPerturbation /
        ReachedTEnd / StepFailureCascade.
        """
        series = [self.diagnostics(state)]
        verdict = "ReachedTEnd"
        nstep = 0
        t = state.t
        while config.t_end - t > 1e-8 * config.dt:
            dt = min(config.dt, config.t_end - t)
            attempt = dt
            for halving in range(config.max_halvings + 1):
                try:
                    new = self.step(state, attempt, config)
                    break
                except StepFailure:
                    attempt *= 0.5
            else:
                verdict = "StepFailureCascade"
                break
            rate = self._state_delta(new, state) / attempt
            state = new
            t = state.t
            nstep += 1
            if nstep % config.output_every == 0:
                series.append(self.diagnostics(state))
            if series[-1].h_norm > config.growth_stop_fraction * self.diffeo_bound:
                if state.t - series[-1].t > 1e-8 * config.dt:
                    series.append(self.diagnostics(state))
                verdict = "GrowingPerturbation"
                break
            if rate < config.stall_tol:
                if state.t - series[-1].t > 1e-8 * config.dt:
                    series.append(self.diagnostics(state))
                verdict = "ConvergedToEquilibrium"
                break
        else:
            if state.t - series[-1].t > 1e-8 * config.dt:
                series.append(self.diagnostics(state))
        return state, series, verdict

    # --- diagnostics -----------------------------------------------------------

    def validate_initial_state(self, state: SimState, tol: float = 1e-6):
        """Residuals of the compatibility conditions; raises on violation.

        Checks the outer no-flux condition (hydrostatic-potential form),
        the Laplace-Young balance, the lateral Neumann condition on h,
        and the case flux-jump / enthalpy-jump condition, each scaled by
        its natural magnitude.
        """
        g = self.grid
        res = {}
        frozen = self._freeze(state)
        dxh = self._dxh(state.h)
        # outer condition
        worst = 0.0
        for ph, fz, vs in zip(self.ph, frozen, (state.v1, state.v2)):
            rho, _, Phi, _, _ = fz
            dy = ph.dy
            if ph.phase == 1:
                d = (-3 * Phi[0] + 4 * Phi[1] - Phi[2]) / (2 * dy)
                r = rho[0] * (d + self.gamma)
                scale = max(self.gamma * rho[0].max(), np.abs(rho[0] * d).max(), 1e-30)
            else:
                d = (3 * Phi[-1] - 4 * Phi[-2] + Phi[-3]) / (2 * dy)
                r = rho[-1] * (d + self.gamma)
                scale = max(self.gamma * rho[-1].max(), np.abs(rho[-1] * d).max(), 1e-30)
            worst = max(worst, np.abs(r).max() / scale)
        res["outer_flux"] = worst
        # Laplace-Young
        bmid = 1.0 / np.sqrt(1.0 + ((state.h[1:] - state.h[:-1]) / g.dx) ** 2)
        div = np.zeros(g.nxp)
        flux = bmid * (state.h[1:] - state.h[:-1]) / g.dx
        div[:-1] += flux / g.wx[:-1]
        div[1:] -= flux / g.wx[1:]
        ly = state.v2[0] - state.v1[-1] - self.sigma * div
        res["laplace_young"] = float(np.abs(ly).max() / max(self.eq.p_b, 1e-30))
        # lateral Neumann on h holds structurally (mirror convention in every
        # h-operator); the one-sided derivative is reported as information
        # only, since nodal data cannot encode a violation the scheme sees.
        dh0 = abs(-3 * state.h[0] + 4 * state.h[1] - state.h[2]) / (2 * g.dx)
        dh1 = abs(3 * state.h[-1] - 4 * state.h[-2] + state.h[-3]) / (2 * g.dx)
        hscale = max(np.abs(state.h).max() / g.geom.L, 1e-30)
        res["contact_angle_onesided_info"] = (
            float(max(dh0, dh1) / hscale) if np.abs(state.h).max() > 0 else 0.0
        )
        # case condition
        psi_m, psi_p = self._psi_values(state, frozen, dxh)
        if self.case == "i":
            rho_max = max(float(frozen[0][0].max()), float(frozen[1][0].max()))
            kmax = max(ph.spec.k for ph in self.ph)
            scale = max(
                kmax * self.gamma * rho_max,
                np.abs(psi_m).max(),
                np.abs(psi_p).max(),
                1e-30,
            )
            res["flux_jump"] = float(np.abs(psi_p - psi_m).max() / scale)
        else:
            rho_m = frozen[0][0][-1]
            rho_p = frozen[1][0][0]
            phi_m = np.asarray(self.ph[0].spec.phi(rho_m), dtype=float)
            phi_p = np.asarray(self.ph[1].spec.phi(rho_p), dtype=float)
            scale = max(np.abs(phi_m).max(), np.abs(phi_p).max(), 1e-30)
            res["enthalpy_jump"] = float(np.abs(phi_p - phi_m).max() / scale)
            jr = np.abs(rho_p - rho_m)
            res["density_jump_min"] = float(jr.min())
            if jr.min() < 1e-8 * max(rho_m.max(), rho_p.max()):
                res["degenerate_jump"] = 1.0
        skip = ("density_jump_min", "contact_angle_onesided_info")
        bad = [(k, v) for k, v in res.items() if k not in skip and v > tol]
        if bad:
            raise CompatibilityError(
                "; ".join(f"{k} residual {v:.3e}" for k, v in bad), violations=bad
            )
        return res

    def _psi_values(self, state: SimState, frozen, dxh):
        """Evaluate the one-sided interface fluxes at a state (no lin.)."""
        g = self.grid
        dx = g.dx
        out = []
        for ph, fz, vs in zip(self.ph, frozen, (state.v1, state.v2)):
            rho, _, Phi, _, _ = fz
            dy = ph.dy
            k = ph.spec.k
            if ph.phase == 1:
                d = (3 * Phi[-1] - 4 * Phi[-2] + Phi[-3]) / (2 * dy)
                tr = -1
            else:
                d = (-3 * Phi[0] + 4 * Phi[1] - Phi[2]) / (2 * dy)
                tr = 0
            vtr = vs[tr]
            dxv = np.zeros(g.nxp)
            dxv[1:-1] = (vtr[2:] - vtr[:-2]) / (2 * dx)
            psi = k * (
                (1.0 + dxh**2) * rho[tr] * d - dxh * dxv + self.gamma * rho[tr]
            )
            out.append(psi)
        return out

    def quadrature_gradient_defect(self) -> float:
        """O(dy^2) mean-interface gradient defect of the energy quadrature.

        The trapezoid-lumped diagnostics give the discrete energy a
        spurious gradient G0 * |G| along the mean-interface direction at
        the equilibrium (the exact integral of (p_* chi)' vanishes, its
        trapezoid sum does not).  The energy-dissipation identity for
        mean-shifting trajectories holds after subtracting
        G0 * |G| * d(mean h)/dt; the defect vanishes as dy^2.
        """
        G0 = 0.0
        for ph, psamp in zip(self.ph, self._psamp):
            rho = np.asarray(ph.spec.density(psamp), dtype=float)
            G0 += float(np.sum((-psamp * ph.dchi + self.gamma * rho * ph.chi) * ph.vy))
        return G0

    def diagnostics(self, state: SimState) -> Diagnostics:
        """Energy, dissipation, masses and norms in transformed coordinates."""
        g = self.grid
        wx = g.wx
        frozen = self._freeze(state)
        dxh = self._dxh(state.h)
        energy = 0.0
        diss = 0.0
        masses = []
        u_sq_tot = 0.0
        for ph, fz, vs in zip(self.ph, frozen, (state.v1, state.v2)):
            rho, _, Phi, _, _ = fz
            dy = ph.dy
            k = ph.spec.k
            J = 1.0 + ph.dchi[:, None] * state.h[None, :]
            # physical height of each node (undo the interface shift)
            Y = ph.y[:, None] + ph.chi[:, None] * state.h[None, :] + self.eq.h
            psi_val = np.asarray(ph.spec.psi(rho), dtype=float)
            cellw = ph.vy[:, None] * wx[None, :]
            energy += float(np.sum((rho * psi_val + self.gamma * rho * Y) * J * cellw))
            masses.append(float(np.sum(rho * J * cellw)))
            # velocity field at nodes
            dyPhi = np.zeros_like(vs)
            dyPhi[1:-1] = (Phi[2:] - Phi[:-2]) / (2 * dy)
            dyPhi[0] = (-3 * Phi[0] + 4 * Phi[1] - Phi[2]) / (2 * dy)
            dyPhi[-1] = (3 * Phi[-1] - 4 * Phi[-2] + Phi[-3]) / (2 * dy)
            dxv = np.zeros_like(vs)
            dxv[:, 1:-1] = (vs[:, 2:] - vs[:, :-2]) / (2 * g.dx)
            dyv = rho * dyPhi
            a_geom = ph.chi[:, None] * dxh[None, :] / J
            u_x = -k * (dxv - a_geom * dyv)
            u_y = -k * (dyv / J + self.gamma * rho)
            u_sq = u_x**2 + u_y**2
            diss += float(np.sum(u_sq / k * J * cellw))
            u_sq_tot += float(np.sum(u_sq * J * cellw))
        dh = np.diff(state.h) / g.dx
        energy += self.sigma * float(np.sum(np.sqrt(1.0 + dh**2)) * g.dx)
        hbar = float(np.sum(state.h * wx) / np.sum(wx))
        h_norm = float(np.sqrt(np.sum((state.h - hbar) ** 2 * wx)))
        return Diagnostics(
            t=state.t,
            energy=energy,
            dissipation=-diss,
            mass1=masses[0],
            mass2=masses[1],
            h_norm=h_norm,
            grad_h_norm=float(np.sqrt(np.sum(dh**2) * g.dx)),
            u_norm=float(np.sqrt(u_sq_tot)),
            h_mean=hbar,
        )


def growth_rate_estimate(
    times,
    norms,
    min_window: int = 20,
    floor: float = 1e-14,
    lo: Optional[float] = None,
    hi: Optional[float] = None,
):
    """Least-squares slope of log(norm) over the longest monotone window.

    ``lo``/``hi`` clamp the usable norm range; for growth runs pass
    lo = 10 * amplitude so the fit starts after the initial transient has
    decayed relative to the growing mode, for decay runs pass
    hi = amplitude / 3 for the same reason.  Returns
    (rate, r_squared, (i0, i1)); raises FitError when no monotone
    stretch of at least ``min_window`` samples survives.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(norms, dtype=float)
    ok = y > floor
    if lo is not None:
        ok &= y >= lo
    if hi is not None:
        ok &= y <= hi
    t, y = t[ok], y[ok]
    if len(t) < min_window:
        raise FitError(f"only {len(t)} usable samples (need {min_window})")
    d = np.sign(np.diff(y))
    best = (0, 0)
    i = 0
    while i < len(d):
        j = i
        while j < len(d) and (d[j] == d[i] or d[j] == 0):
            j += 1
        if j - i > best[1] - best[0]:
            best = (i, j)
        i = j if j > i else i + 1
    i0, i1 = best[0], best[1] + 1
    if i1 - i0 + 1 < min_window:
        raise FitError(
            f"longest monotone window has {i1 - i0 + 1} samples (need {min_window})"
        )
    tw = t[i0 : i1 + 1]
    yw = np.log(y[i0 : i1 + 1])
    A = np.vstack([tw, np.ones_like(tw)]).T
    coef, _, _, _ = np.linalg.lstsq(A, yw, rcond=None)
    fit = A @ coef
    ss_res = float(np.sum((yw - fit) ** 2))
    ss_tot = float(np.sum((yw - yw.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2, (i0, i1)
