"""Stability classification of flat equilibria.

Closed-form route: with mu_* = gamma [[rho_*]]/sigma and mu_1 the first
nontrivial Neumann eigenvalue of the cross-section, an equilibrium is
normally stable when mu_* < mu_1 (case "ii" additionally needs
[[rho_*]](rho_*(h_upper) - rho_*(-h_lower)) > 0) and normally hyperbolic
when mu_1 < mu_* (or, in case "ii", when mu_* < mu_1 and that product is
negative).  Spectral route: lambda > 0 is a growth rate iff the
interface operator B_lambda = lambda T_lambda + A_Sigma is singular,
where T_lambda is the Neumann-to-Dirichlet map of the resolvent problem;
as lambda sweeps from 0 to +infinity every unstable mode crosses zero
once, so the crossing count reproduces the Morse index

    m = sum over nontrivial mu_l < mu_* of mult(mu_l)
        + (1 if the zero-mode block of B_0 is negative else 0).

For case "i" that block is (rho-^2/c1 + rho+^2/c2 - gamma [[rho]])/p_b,
positive for every equilibrium, so the constant mode never destabilizes;
for case "ii" it is [[rho]]([[rho]] - gamma c)/(p_b c), whose sign is the
side condition above.

All interface matrices are represented in the measure-weighted nodal
basis g_sym = sqrt(w_x) g, in which they are exactly symmetric and share
the nodal spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import linops
from .equilibria import FlatEquilibrium
from .errors import (
    BranchTrackingError,
    ConfigError,
    DegenerateEquilibrium,
    DegenerateThreshold,
    InternalInvariantViolation,
    SolveError,
)
from .geometry import CapillaryGeometry, Grid, eigenvalues_below, neumann_eigenvalues

__all__ = [
    "StabilityReport",
    "NtDOperator",
    "classify",
    "morse_index",
    "assemble_ntd",
    "b_lambda",
    "b_zero",
    "lambda_pd_bound",
    "positive_eigenvalue_count_via_ntd",
    "second_variation",
]

_DEGEN_RTOL = 1e-9


@dataclass(frozen=True)
class StabilityReport:
    case: str
    mu_star: float
    mu1: float
    mu_list: List[Tuple[float, int]]
    sigma: float
    sigma_star: float
    classification: str  # NormallyStable | NormallyHyperbolic | Degenerate
    morse_index: Optional[int]
    side_condition: Optional[float] = None
    degenerate_reason: Optional[str] = None

    def to_dict(self):
        return {
            "case": self.case,
            "mu_star": self.mu_star,
            "mu1": self.mu1,
            "mu_list": [[mu, m] for mu, m in self.mu_list],
            "sigma": self.sigma,
            "sigma_star": self.sigma_star,
            "classification": self.classification,
            "morse_index": self.morse_index,
            "side_condition": self.side_condition,
            "degenerate_reason": self.degenerate_reason,
        }


def _zero_mode_block(eq: FlatEquilibrium) -> float:
    """Constant-mode coefficient of the small-lambda interface operator."""
    if eq.case == "i":
        return eq.lcuni_margin / eq.p_b
    return eq.side_condition / (eq.p_b * eq.c)


def _near_spectrum(mu_star, eigs, mu1):
    tol = _DEGEN_RTOL * max(abs(mu_star), mu1)
    for mu, _ in eigs:
        if abs(mu_star - mu) <= tol:
            return mu
    return None


def classify(
    eq: FlatEquilibrium, geom: CapillaryGeometry, sigma: float, case: Optional[str] = None
) -> StabilityReport:
    """Rayleigh-Taylor classification from the analytic criteria."""
    case = case or eq.case
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    rho_scale = max(eq.rho_minus, eq.rho_plus)
    if case == "ii" and abs(eq.jump_rho) < 1e-8 * rho_scale:
        raise DegenerateEquilibrium("case-ii classification needs [[rho_*]] != 0")
    mu1 = geom.mu1()
    mu_star = eq.mu_star(sigma)
    eigs = eigenvalues_below(geom, max(mu_star, mu1) * (1 + 1e-6) + 1.0)
    side = eq.side_condition if case == "ii" else None
    sigma_star = eq.sigma_star()

    reason = None
    near = _near_spectrum(mu_star, eigs, mu1)
    if near is not None:
        reason = f"mu_star = {mu_star:.12g} coincides with Neumann eigenvalue {near:.12g}"
    if case == "ii" and side is not None and abs(side) <= 1e-12 * rho_scale**2:
        reason = "case-ii side condition vanishes"
    if reason is not None:
        return StabilityReport(
            case, mu_star, mu1, eigs, sigma, sigma_star, "Degenerate", None, side, reason
        )

    if mu_star < mu1 and (case == "i" or side > 0):
        cls = "NormallyStable"
        m = 0
    else:
        cls = "NormallyHyperbolic"
        m = morse_index(eq, geom, sigma, case)
    return StabilityReport(case, mu_star, mu1, eigs, sigma, sigma_star, cls, m, side)


def morse_index(
    eq: FlatEquilibrium, geom: CapillaryGeometry, sigma: float, case: Optional[str] = None
) -> int:
    """Dimension of the unstable eigenspace of the linearization.

    Counts nontrivial Neumann eigenvalues below mu_* (with multiplicity)
    and adds the constant mode exactly when the zero-mode block of the
    lambda -> 0 interface operator is negative.
    """
    case = case or eq.case
    mu1 = geom.mu1()
    mu_star = eq.mu_star(sigma)
    eigs = eigenvalues_below(geom, max(mu_star, mu1) * (1 + 1e-6) + 1.0)
    if _near_spectrum(mu_star, eigs, mu1) is not None:
        raise DegenerateThreshold("mu_star lies on the Neumann spectrum")
    m = sum(mult for mu, mult in eigs if 0.0 < mu < mu_star)
    z = _zero_mode_block(eq)
    if case == "i":
        if z <= 0:
            raise InternalInvariantViolation(
                "case-i zero-mode block must be positive by the isolation inequality"
            )
    else:
        rho_scale = max(eq.rho_minus, eq.rho_plus)
        if abs(eq.rho_bottom - eq.rho_top) <= 1e-12 * rho_scale:
            raise DegenerateThreshold(
                "case-ii Morse index undefined when rho_*(-h_lower) = rho_*(h_upper)"
            )
        if z < 0:
            m += 1
    return m


# --- Neumann-to-Dirichlet family --------------------------------------------


@dataclass(frozen=True)
class NtDOperator:
    """T_lambda on the h-mesh, in the measure-weighted symmetric basis."""

    lam: float
    case: str
    matrix: np.ndarray = field(repr=False)
    grid: Grid = field(repr=False)

    @property
    def nodal(self):
        """Matrix acting on plain nodal values."""
        w = self.grid.wx
        return (self.matrix / np.sqrt(w)[:, None]) * np.sqrt(w)[None, :]


def _w_selectors(disc: linops.DiscreteLinearization):
    g = disc.grid
    nw = disc.n_w
    nxp = g.nxp

    def sel(idx):
        return sp.csr_matrix(
            (np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), nw)
        )

    i_tm = g.off_tm + np.arange(nxp)
    i_tp = g.off_tp + np.arange(nxp)
    return sel(i_tm), sel(i_tp)


def assemble_ntd(
    disc_or_eq,
    grid: Optional[Grid] = None,
    lam: float = 1.0,
    case: Optional[str] = None,
    sigma: float = 1.0,
    verify: bool = True,
) -> NtDOperator:
    """Assemble T_lambda by solving the resolvent problem per unit datum.

    Accepts either a DiscreteLinearization or (equilibrium, grid).  The
    identity (T_lambda g | g) = (1/p_b)[lambda |w|^2_n + energy(w)] is
    verified by independent face quadrature when ``verify`` is set.
    """
    if isinstance(disc_or_eq, linops.DiscreteLinearization):
        disc = disc_or_eq
    else:
        disc = linops.assemble(disc_or_eq, grid, sigma=sigma, case=case)
    if not lam > 0:
        raise ConfigError("T_lambda is defined for lambda > 0")
    g = disc.grid
    nxp = g.nxp
    wx = g.wx
    eq = disc.eq
    p_b = eq.p_b
    P_tm, P_tp = _w_selectors(disc)
    K = sp.csc_matrix(sp.diags(lam * disc.mass_w) + disc.S_w)

    if disc.case == "i":
        D = (P_tp - P_tm).T.tocsc()  # nw x nxp
        try:
            lu = spla.splu(K)
        except RuntimeError as exc:
            raise SolveError(f"interior resolvent system singular: {exc}") from exc
        W_sol = lu.solve(D.toarray() * (p_b * wx)[None, :])
        T_nodal = D.T @ W_sol
        w_probe = W_sol[:, nxp // 2] / (p_b * wx[nxp // 2])
    else:
        rm, rp = eq.rho_minus, eq.rho_plus
        jump = eq.jump_rho
        nnt = disc.n_w - 2 * nxp
        i_nt = np.arange(disc.n_w)
        mask = np.ones(disc.n_w, bool)
        mask[g.off_tm : g.off_tm + 2 * nxp] = False
        i_nt = i_nt[mask]
        Z = sp.lil_matrix((disc.n_w, nnt + nxp))
        Z[i_nt, np.arange(nnt)] = 1.0
        Z[g.off_tm + np.arange(nxp), nnt + np.arange(nxp)] = rm
        Z[g.off_tp + np.arange(nxp), nnt + np.arange(nxp)] = rp
        Z = sp.csc_matrix(Z)
        Khat = sp.csc_matrix(Z.T @ K @ Z)
        try:
            lu = spla.splu(Khat)
        except RuntimeError as exc:
            raise SolveError(f"interior resolvent system singular: {exc}") from exc
        B = np.zeros((nnt + nxp, nxp))
        B[nnt:, :] = np.diag(p_b * jump * wx)
        X = lu.solve(B)
        T_nodal = jump * X[nnt:, :]
        w_probe = Z @ X[:, nxp // 2]

    rw = np.sqrt(wx)
    T_sym = rw[:, None] * T_nodal / rw[None, :]
    T_sym = 0.5 * (T_sym + T_sym.T)

    if verify:
        j = nxp // 2
        g_vec = np.zeros(nxp)
        g_vec[j] = 1.0
        if disc.case == "i":
            w = W_sol[:, j]
            lhs = float((T_nodal[:, j] * g_vec * wx).sum())
        else:
            w = w_probe
            lhs = float((T_nodal[:, j] * g_vec * wx).sum())
        x_full = np.zeros(disc.n_total)
        x_full[: disc.n_w] = w
        a_w, b_w = disc.energy_forms(x_full)
        # energy_forms adds h-terms; h = 0 here, so a_w is the |w|^2_n part
        rhs = (lam * a_w + b_w) / p_b
        if abs(lhs - rhs) > 1e-6 * max(abs(lhs), abs(rhs), 1e-300):
            raise InternalInvariantViolation(
                f"NtD identity violated: lhs {lhs:.12e} vs rhs {rhs:.12e}"
            )
    return NtDOperator(lam=lam, case=disc.case, matrix=T_sym, grid=g)


def _asym_sym(disc: linops.DiscreteLinearization):
    """A_Sigma in the measure-weighted symmetric basis."""
    g = disc.grid
    K1d, wx = g.neumann_laplacian_1d()
    rw = np.sqrt(wx)
    eq = disc.eq
    L_sym = (K1d.toarray() / rw[:, None]) / rw[None, :]
    return (disc.sigma / eq.p_b) * L_sym - (eq.gamma * eq.jump_rho / eq.p_b) * np.eye(
        g.nxp
    )


def b_lambda(disc: linops.DiscreteLinearization, lam: float) -> np.ndarray:
    """B_lambda = lambda T_lambda + A_Sigma (symmetric basis);
    lambda = 0 returns the closed-form limit."""
    if lam == 0.0:
        return b_zero(disc)
    T = assemble_ntd(disc, lam=lam, verify=False)
    return lam * T.matrix + _asym_sym(disc)


def b_zero(disc: linops.DiscreteLinearization) -> np.ndarray:
    """Closed-form lambda -> 0+ limit of B_lambda.

    -(sigma/p_b)(Lap_N + mu_*) on the mean-zero part plus the case
    zero-mode block on the constant mode.
    """
    g = disc.grid
    eq = disc.eq
    wx = g.wx
    rw = np.sqrt(wx)
    K1d, _ = g.neumann_laplacian_1d()
    L_sym = (K1d.toarray() / rw[:, None]) / rw[None, :]
    v = rw / np.sqrt(wx.sum())
    Pbar = np.outer(v, v)
    Q = np.eye(g.nxp) - Pbar
    mu_star = eq.mu_star(disc.sigma)
    z = _zero_mode_block(eq)
    return (disc.sigma / eq.p_b) * L_sym - (disc.sigma * mu_star / eq.p_b) * Q + z * Pbar


def lambda_pd_bound(disc: linops.DiscreteLinearization, lam0: float = 1.0) -> float:
    """A lambda at which B_lambda is positive definite (doubling search)."""
    lam = lam0
    for _ in range(60):
        B = b_lambda(disc, lam)
        if np.linalg.eigvalsh(B)[0] > 0:
            return lam
        lam *= 2.0
    raise SolveError("no positive-definite B_lambda found up to huge lambda")


def positive_eigenvalue_count_via_ntd(
    disc: linops.DiscreteLinearization, lambdas: Sequence[float]
) -> int:
    """Count eigenvalue branches of B_lambda crossing zero on [0, lam_max].

    The grid must start at 0 (closed-form B_0) and end past positive
    definiteness.  Branches are the sorted eigenvalues, continuous and
    nondecreasing in lambda; a non-monotone sign pattern raises
    BranchTrackingError (grid too coarse).
    """
    lambdas = np.asarray(sorted(lambdas), dtype=float)
    if lambdas[0] != 0.0:
        raise ConfigError("lambda grid must start at 0")
    evs = np.vstack([np.sort(np.linalg.eigvalsh(b_lambda(disc, l))) for l in lambdas])
    if evs[-1, 0] <= 0:
        raise ConfigError("lambda grid must end past positive definiteness of B_lambda")
    crossings = 0
    for kb in range(evs.shape[1]):
        signs = np.sign(evs[:, kb])
        ups = int(np.sum((signs[:-1] < 0) & (signs[1:] >= 0)))
        downs = int(np.sum((signs[:-1] >= 0) & (signs[1:] < 0)))
        if downs > 0 or ups > 1:
            raise BranchTrackingError(
                f"branch {kb} changes sign non-monotonically; refine the lambda grid"
            )
        crossings += ups
    return crossings


# --- second variation of the available energy --------------------------------


def second_variation(
    eq: FlatEquilibrium,
    geom: CapillaryGeometry,
    tau,
    g_fn,
    case: Optional[str] = None,
    nq_x: int = 65,
    nq_y: int = 129,
    project: bool = True,
):
    """Quadratic form of the constrained second variation at the equilibrium.

    tau(phase, x, y) is the density variation per phase; g_fn(x) the
    interface variation.  The direction is first projected onto the
    kernel of the linearized mass constraints (discrete least squares),
    then int phi'(rho_*) tau^2 + sigma-free interface part
    -int (sigma H' g) g - gamma [[rho]] g^2 is evaluated by tensor
    trapezoid quadrature (H' = Lap_x at a flat equilibrium); the sigma
    factor multiplies |grad g|^2, so pass sigma via the closure or use
    the returned pieces.

    Returns (value_fn, pieces) where value_fn(sigma) gives the form and
    pieces = (tau_term, grad_g_term, g2_term).
    """
    case = case or eq.case
    prof = eq.profile
    x = np.linspace(0.0, geom.L, nq_x)
    wxq = np.full(nq_x, geom.L / (nq_x - 1))
    wxq[0] *= 0.5
    wxq[-1] *= 0.5
    fields = []
    for phase, (ylo, yhi) in ((1, (-geom.h_lower, eq.h)), (2, (eq.h, geom.h_upper))):
        y = np.linspace(ylo, yhi, nq_y)
        wy = np.full(nq_y, (yhi - ylo) / (nq_y - 1))
        wy[0] *= 0.5
        wy[-1] *= 0.5
        X, Y = np.meshgrid(x, y, indexing="ij")
        t = np.asarray(tau(phase, X, Y), dtype=float)
        spec = eq.specs[phase - 1]
        dphi = spec.dphi(prof.rho_of_y(phase, y))[None, :]
        fields.append((t, wy, dphi))
    gv = np.asarray(g_fn(x), dtype=float)

    if project:
        # linearized constraints: case i twice, case ii once
        cons = []
        if case == "i":
            cons.append((1, eq.rho_minus))
            cons.append((2, -eq.rho_plus))
        else:
            cons.append((None, -eq.jump_rho))
        # Riesz vectors under the L2 product: indicator(tau over phase) + coeff on g
        vals = []
        for phase_c, gcoef in cons:
            v = 0.0
            for phase, (t, wy, _) in enumerate(fields, start=1):
                if phase_c in (None, phase):
                    v += float(np.einsum("ij,i,j->", t, wxq, wy))
            v += gcoef * float(np.sum(gv * wxq))
            vals.append(v)
        # Gram of the constraint gradients
        grams = []
        for pa, ga in cons:
            row = []
            for pb, gb in cons:
                gr = 0.0
                for phase, (t, wy, _) in enumerate(fields, start=1):
                    if pa in (None, phase) and pb in (None, phase):
                        gr += float(np.sum(wxq) * np.sum(wy))
                gr += ga * gb * float(np.sum(wxq))
                row.append(gr)
            grams.append(row)
        coef = np.linalg.solve(np.array(grams), np.array(vals))
        new_fields = []
        for phase, (t, wy, dphi) in enumerate(fields, start=1):
            shift = sum(
                c for c, (pc, _) in zip(coef, cons) if pc in (None, phase)
            )
            new_fields.append((t - shift, wy, dphi))
        fields = new_fields
        gv = gv - sum(c * gc for c, (_, gc) in zip(coef, cons))

    tau_term = 0.0
    for t, wy, dphi in fields:
        tau_term += float(np.einsum("ij,ij,i,j->", dphi * np.ones_like(t), t**2, wxq, wy))
    dg = np.diff(gv) / (x[1] - x[0])
    grad_g_term = float(np.sum(dg**2) * (x[1] - x[0]))
    g2_term = eq.gamma * eq.jump_rho * float(np.sum(gv**2 * wxq))

    def value(sigma):
        return tau_term + sigma * grad_g_term - g2_term

    return value, (tau_term, grad_g_term, g2_term)
