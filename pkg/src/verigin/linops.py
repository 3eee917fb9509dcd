"""Discrete full linearization at a flat equilibrium and its spectrum.

The linearization acts on (w, h), where w is the relative pressure
perturbation (p = p_*(1 + w)) and h the interface height.  With

    m_* = p_* rho_*',   n_* = m_* p_* / rho_*,
    A_* w = -div_x(k p_* rho_* grad_x w) - d_y(rho_* B_* w),
    B_* w = k p_* (d_y w + gamma (rho_*' - rho_*/p_*) w),
    A_Sigma h = -(sigma/p_b) Lap_N h - (gamma [[rho_*]]/p_b) h,

the evolution reads m_* dt w + A_* w = 0 in the phases with B_* w = 0 at
top/bottom, Neumann laterally, [[w]] + A_Sigma h = 0 on the interface,
and the case-dependent interface flux coupling.  Eigenvalues here are
growth rates: the pencil convention is  lambda E x + A x = 0.

Discretization notes.  B_* w = k p_* f (d/dy)(w/f) with f = rho_*/p_*,
so y-fluxes are differenced in the ratio u = w/f; the analytic kernel
w = alpha rho_*/p_* is then annihilated *exactly*.  Outer and lateral
boundary conditions fold into half-cell balances, which keeps the
w-operator exactly symmetric in the n_*-weighted inner product (the
discrete counterpart of the self-adjointness driving the theory).  The
interface conditions enter through explicit one-sided flux unknowns
shared between the adjacent half cells, so [[B_* w]] = 0 (case i) holds
structurally and the linearized phase masses telescope exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .equilibria import FlatEquilibrium
from .errors import ConfigError, DegenerateThreshold, EigSolveFailure
from .geometry import Grid

__all__ = [
    "DiscreteLinearization",
    "SpectrumResult",
    "assemble",
    "spectrum",
    "eigenvalue_identity_residual",
    "semisimplicity_check",
    "unstable_count",
]


# --- equilibrium coefficient sampling --------------------------------------


@dataclass(frozen=True)
class PhaseFields:
    """Equilibrium coefficients sampled on one phase's y-nodes and faces."""

    y: np.ndarray
    p: np.ndarray
    rho: np.ndarray
    rho_p: np.ndarray          # rho'(p)
    m: np.ndarray              # p rho'
    n: np.ndarray              # rho' p^2 / rho
    f: np.ndarray              # rho / p  (kernel profile)
    rho_face: np.ndarray       # rho at y-face midpoints
    k: float

    @property
    def dy(self):
        return float(self.y[1] - self.y[0])

    @property
    def vy(self):
        ny = len(self.y) - 1
        v = np.full(ny + 1, self.dy)
        v[0] = v[-1] = 0.5 * self.dy
        return v


def sample_phase(eq: FlatEquilibrium, grid: Grid, phase: int) -> PhaseFields:
    # grid lives in shifted coordinates: interface plane at y = 0
    y = grid.y1 if phase == 1 else grid.y2
    p = np.asarray(eq.p_star(phase, y), dtype=float)
    rho = np.asarray(eq.rho_star(phase, y), dtype=float)
    rho_p = np.asarray(eq.drho_dp_star(phase, y), dtype=float)
    ymid = 0.5 * (y[:-1] + y[1:])
    rho_face = np.asarray(eq.rho_star(phase, ymid), dtype=float)
    return PhaseFields(
        y=y, p=p, rho=rho, rho_p=rho_p, m=p * rho_p,
        n=rho_p * p**2 / rho, f=rho / p, rho_face=rho_face,
        k=eq.specs[phase - 1].k,
    )


def _phase_operator(pf: PhaseFields, grid: Grid, glob: np.ndarray):
    """Weighted stiffness (COO triplets in global indices) and lumped mass.

    Rows carry the p_*/rho_* weight, so the stiffness is symmetric and
    w^T S w equals the face quadrature of k p_*^2 |grad_x w|^2 + |B_* w|^2/k.
    """
    ny = len(pf.y) - 1
    nxp = grid.nxp
    dy = pf.dy
    dx = grid.dx
    wx = grid.wx
    vy = pf.vy
    invf = 1.0 / pf.f

    rows, cols, vals = [], [], []

    def quad(r0, r1, c):
        rows.extend((r0, r0, r1, r1))
        cols.extend((r0, r1, r0, r1))
        vals.extend((c[0], c[1], c[1], c[2]))

    loc = glob.reshape(ny + 1, nxp)
    for j in range(ny):
        C = pf.k * pf.rho_face[j] ** 2 / dy
        a, b = invf[j], invf[j + 1]
        for i in range(nxp):
            cw = C * wx[i]
            quad(loc[j, i], loc[j + 1, i], (cw * a * a, -cw * a * b, cw * b * b))
    for j in range(ny + 1):
        C = pf.k * pf.rho[j] * pf.p[j] * vy[j] / dx * invf[j]
        for i in range(nxp - 1):
            quad(loc[j, i], loc[j, i + 1], (C, -C, C))

    mass = np.zeros(glob.max() + 1)
    mass_loc = np.repeat(pf.n * vy, nxp) * np.tile(wx, ny + 1)
    np.add.at(mass, glob, mass_loc)
    return (rows, cols, vals), mass_loc


# --- the assembled pencil ---------------------------------------------------


@dataclass
class DiscreteLinearization:
    """Generalized pencil lambda E x + A x = 0 for the full linearization.

    Unknowns: phase-1/2 non-trace w, one-sided traces w-, w+, heights h,
    then the interface flux unknowns (one column per x-node in case "i",
    two in case "ii").  E is diagonal and vanishes exactly on the
    constraint rows (Laplace-Young and, in case "ii", the [[w/rho]]
    ratio condition), which sit in the rows paired with the fluxes.
    """

    case: str
    grid: Grid
    eq: FlatEquilibrium
    sigma: float
    E: sp.csr_matrix = field(repr=False)
    A: sp.csr_matrix = field(repr=False)
    constraint_rows: np.ndarray = field(repr=False)
    asym_nodal: sp.csr_matrix = field(repr=False)   # A_Sigma on the h-mesh
    S_w: sp.csr_matrix = field(repr=False)          # weighted w-stiffness
    mass_w: np.ndarray = field(repr=False)          # n_* dV lumped masses
    pf1: PhaseFields = field(repr=False)
    pf2: PhaseFields = field(repr=False)

    # ---- layout ----

    @property
    def n_flux(self):
        return self.grid.nxp if self.case == "i" else 2 * self.grid.nxp

    @property
    def n_total(self):
        return self.grid.n_base + self.n_flux

    @property
    def n_w(self):
        g = self.grid
        return g.n1 + g.n2 + 2 * g.nxp

    def glob(self, phase):
        """Phase-local (y-major) node indices into the w-block."""
        g = self.grid
        nxp = g.nxp
        if phase == 1:
            parts = [np.arange(nxp) + g.idx1(j, 0) for j in range(g.n_below)]
            parts.append(g.off_tm + np.arange(nxp))
        else:
            parts = [g.off_tp + np.arange(nxp)]
            parts += [np.arange(nxp) + g.idx2(j, 0) for j in range(1, g.n_above + 1)]
        return np.concatenate(parts)

    # ---- reduction to an eigen-ready pencil ----

    def reduce(self):
        """Eliminate constraints and interface fluxes.

        Case "i": reduced variables (w non-trace, w-, h); Laplace-Young
        substitutes w+ = w- - A_Sigma h and the h-dynamics substitutes
        the shared flux q = -lambda h, moving p_b-weighted couplings
        into E.  Case "ii": reduced variables (w non-trace, h) with
        w-+ = -(rho-+/[[rho]]) A_Sigma h; the h-row is the rho-weighted
        combination of the trace balances.

        Returns (E_r, A_r, lift) with ``lift(lam, x)`` recovering the
        full unknown vector of an eigenpair.
        """
        g = self.grid
        nxp = g.nxp
        nw = self.n_w
        wx = g.wx
        eq = self.eq
        p_b = eq.p_b
        Asig = self.asym_nodal
        i_nt = np.concatenate([np.arange(g.n1), g.n1 + np.arange(g.n2)])
        i_tm = g.off_tm + np.arange(nxp)
        i_tp = g.off_tp + np.arange(nxp)
        i_h = g.off_h + np.arange(nxp)

        def sel(idx, n):
            return sp.csr_matrix(
                (np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n)
            )

        P_nt = sel(i_nt, nw)
        P_tm = sel(i_tm, nw)
        P_tp = sel(i_tp, nw)
        M_w = sp.diags(self.mass_w)
        S = self.S_w

        if self.case == "i":
            nnt = len(i_nt)
            # columns: x_red = (w_nt, w-, h);  w-all = C x_red
            Cw = sp.bmat(
                [
                    [sp.eye(nnt), None, None],
                    [None, sp.eye(nxp), None],
                    [None, sp.eye(nxp), -Asig],
                ],
                format="csr",
            )
            C = _expand(Cw, i_nt, i_tm, i_tp, nw)
            # rows: nt balances, trace- balances, trace+ balances
            R = sp.vstack([P_nt, P_tm, P_tp], format="csr")
            A_r = (R @ S) @ C
            E_r = sp.lil_matrix((R @ M_w) @ C)
            # flux coupling q = -lambda h: trace- rows gain +p_b wx on h,
            # trace+ rows gain -p_b wx
            col_h = nnt + nxp
            for i in range(nxp):
                E_r[nnt + i, col_h + i] += p_b * wx[i]
                E_r[nnt + nxp + i, col_h + i] -= p_b * wx[i]
            Asig_d = Asig.tocsr()

            def lift(lam, x):
                x = np.asarray(x)
                full = np.zeros(self.n_total, dtype=x.dtype)
                full[i_nt] = x[:nnt]
                wm = x[nnt : nnt + nxp]
                h = x[nnt + nxp :]
                full[i_tm] = wm
                full[i_tp] = wm - Asig_d @ h
                full[i_h] = h
                full[g.n_base :] = -lam * h
                return full

            return sp.csr_matrix(A_r), sp.csr_matrix(E_r), lift

        # case "ii"
        jump = eq.jump_rho
        rm, rp = eq.rho_minus, eq.rho_plus
        Tm = sp.csr_matrix(-(rm / jump) * Asig)
        Tp = sp.csr_matrix(-(rp / jump) * Asig)
        nnt = len(i_nt)
        Cw = sp.bmat(
            [[sp.eye(nnt), None], [None, Tm], [None, Tp]], format="csr"
        )
        C = _expand(Cw, i_nt, i_tm, i_tp, nw)
        R_h = rm * P_tm + rp * P_tp
        R = sp.vstack([P_nt, R_h], format="csr")
        A_r = (R @ S) @ C
        E_r = sp.lil_matrix((R @ M_w) @ C)
        for i in range(nxp):
            E_r[nnt + i, nnt + i] -= jump * p_b * wx[i]
        S_tm = P_tm @ S
        S_tp = P_tp @ S
        mass_tm = self.mass_w[i_tm]
        mass_tp = self.mass_w[i_tp]
        Tm_d, Tp_d = Tm.toarray(), Tp.toarray()

        def lift(lam, x):
            x = np.asarray(x)
            full = np.zeros(self.n_total, dtype=x.dtype)
            full[i_nt] = x[:nnt]
            h = x[nnt:]
            wm = Tm_d @ h
            wp = Tp_d @ h
            full[i_tm] = wm
            full[i_tp] = wp
            full[i_h] = h
            w_all = np.zeros(nw, dtype=x.dtype)
            w_all[i_nt] = x[:nnt]
            w_all[i_tm] = wm
            w_all[i_tp] = wp
            # one-sided fluxes from the trace balances
            Qm = (rm / (p_b * wx)) * (lam * mass_tm * wm + S_tm @ w_all)
            Qp = -(rp / (p_b * wx)) * (lam * mass_tp * wp + S_tp @ w_all)
            full[g.n_base : g.n_base + nxp] = Qm
            full[g.n_base + nxp :] = Qp
            return full

        return sp.csr_matrix(A_r), sp.csr_matrix(E_r), lift

    # ---- diagnostics used by tests and identity checks ----

    def extract_fields(self, x_full):
        """Split a full unknown vector into (w1, w2, h) nodal arrays."""
        g = self.grid
        w1 = x_full[self.glob(1)].reshape(g.n_below + 1, g.nxp)
        w2 = x_full[self.glob(2)].reshape(g.n_above + 1, g.nxp)
        h = x_full[g.off_h : g.off_h + g.nxp]
        return w1, w2, h

    def energy_forms(self, x_full):
        """Face-quadrature evaluation of the eigenvalue-identity terms.

        Returns (a, b) with a = int |w|^2 n_* + int_G h p_b (A_Sigma h)
        and b = int (k p_*^2 |grad_x w|^2 + |B_* w|^2 / k).
        """
        g = self.grid
        wx = g.wx
        eq = self.eq
        w1, w2, h = self.extract_fields(x_full)
        a = 0.0
        b = 0.0
        for pf, w in ((self.pf1, w1), (self.pf2, w2)):
            vy = pf.vy
            dy = pf.dy
            a += float(np.einsum("j,ji,i->", pf.n * vy, np.abs(w) ** 2, wx))
            du = np.diff(w / pf.f[:, None], axis=0) / dy
            b += float(
                np.einsum("j,ji,i->", pf.k * pf.rho_face**2 * dy, np.abs(du) ** 2, wx)
            )
            dwx = np.diff(w, axis=1) / g.dx
            b += float(np.einsum("j,ji->", pf.k * pf.p**2 * vy, np.abs(dwx) ** 2) * g.dx)
        dh = np.diff(h) / g.dx
        a += self.sigma * float(np.sum(np.abs(dh) ** 2) * g.dx)
        a -= eq.gamma * eq.jump_rho * float(np.sum(np.abs(h) ** 2 * wx))
        return a, b

    def analytic_kernel(self):
        """Exact discrete kernel vectors (full layout): w = alpha rho_*/p_*
        per phase with gamma [[rho_*]] mean(h) = [[alpha rho_*]]."""
        g = self.grid
        eq = self.eq
        gj = eq.gamma * eq.jump_rho
        if abs(gj) < 1e-14 * max(abs(eq.rho_minus), abs(eq.rho_plus)):
            raise DegenerateThreshold("gamma [[rho]] ~ 0: kernel has a different form")
        vecs = []
        alphas = [(1.0, 0.0), (0.0, 1.0)] if self.case == "i" else [(1.0, 1.0)]
        for a1, a2 in alphas:
            x = np.zeros(self.n_total)
            x[self.glob(1)] = a1 * np.repeat(self.pf1.f, g.nxp)
            x[self.glob(2)] = a2 * np.repeat(self.pf2.f, g.nxp)
            x[g.off_h : g.off_h + g.nxp] = (a2 * eq.rho_plus - a1 * eq.rho_minus) / gj
            vecs.append(x)
        return vecs

    def mass_rows_reduced(self):
        """Linearized mass functionals as rows over the reduced variables.

        Case "i": two rows (phase masses); case "ii": one row (total)."""
        g = self.grid
        nxp = g.nxp
        wx = g.wx
        eq = self.eq
        nw = self.n_w
        m_w = np.zeros((2, nw))
        for r, (pf, phase) in enumerate(((self.pf1, 1), (self.pf2, 2))):
            m_w[r, self.glob(phase)] = np.repeat(pf.m * pf.vy, nxp) * np.tile(
                wx, len(pf.y)
            )
        m_h = np.vstack([eq.rho_minus * wx, -eq.rho_plus * wx])
        i_nt = np.concatenate([np.arange(g.n1), g.n1 + np.arange(g.n2)])
        i_tm = g.off_tm + np.arange(nxp)
        i_tp = g.off_tp + np.arange(nxp)
        Asig = self.asym_nodal.toarray()
        if self.case == "i":
            nnt = len(i_nt)
            rows = np.zeros((2, nnt + 2 * nxp))
            for r in range(2):
                rows[r, :nnt] = m_w[r, i_nt]
                rows[r, nnt : nnt + nxp] = m_w[r, i_tm] + m_w[r, i_tp]
                rows[r, nnt + nxp :] = m_h[r] - m_w[r, i_tp] @ Asig
            return rows
        jump = eq.jump_rho
        Tm = -(eq.rho_minus / jump) * Asig
        Tp = -(eq.rho_plus / jump) * Asig
        msum = m_w[0] + m_w[1]
        row = np.zeros(len(i_nt) + nxp)
        row[: len(i_nt)] = msum[i_nt]
        row[len(i_nt) :] = (m_h[0] + m_h[1]) + msum[i_tm] @ Tm + msum[i_tp] @ Tp
        return row[None, :]


def _expand(Cw, i_nt, i_tm, i_tp, nw):
    """Row-reorder a (nt, w-, w+)-stacked substitution matrix back to the
    natural w-block ordering so that S @ C makes sense."""
    n_red = Cw.shape[1]
    order = np.concatenate([i_nt, i_tm, i_tp])
    P = sp.csr_matrix(
        (np.ones(nw), (order, np.arange(nw))), shape=(nw, nw)
    )
    return P @ Cw


def assemble(
    eq: FlatEquilibrium, grid: Grid, sigma: float, case: Optional[str] = None
) -> DiscreteLinearization:
    """Assemble the discrete linearization pencil at a flat equilibrium."""
    case = case or eq.case
    if case not in ("i", "ii"):
        raise ConfigError(f"case must be 'i' or 'ii', got {case!r}")
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    sgeom = eq.shifted_geom
    tol = 1e-12 * (sgeom.h_lower + sgeom.h_upper)
    if (
        abs(grid.geom.h_lower - sgeom.h_lower) > tol
        or abs(grid.geom.h_upper - sgeom.h_upper) > tol
        or abs(grid.geom.L - sgeom.L) > tol
    ):
        raise ConfigError(
            "grid must be built on the interface-shifted geometry "
            "(eq.shifted_geom), with the equilibrium interface at y = 0"
        )
    g = grid
    nxp = g.nxp
    wx = g.wx
    pf1 = sample_phase(eq, g, 1)
    pf2 = sample_phase(eq, g, 2)
    glob1 = np.concatenate(
        [np.arange(nxp) + g.idx1(j, 0) for j in range(g.n_below)]
        + [g.off_tm + np.arange(nxp)]
    )
    glob2 = np.concatenate(
        [g.off_tp + np.arange(nxp)]
        + [np.arange(nxp) + g.idx2(j, 0) for j in range(1, g.n_above + 1)]
    )
    nw = g.n1 + g.n2 + 2 * nxp
    (r1, c1, v1), mloc1 = _phase_operator(pf1, g, glob1)
    (r2, c2, v2), mloc2 = _phase_operator(pf2, g, glob2)
    S_w = sp.csr_matrix(
        (np.concatenate([v1, v2]), (np.concatenate([r1, r2]), np.concatenate([c1, c2]))),
        shape=(nw, nw),
    )
    mass_w = np.zeros(nw)
    np.add.at(mass_w, glob1, mloc1)
    np.add.at(mass_w, glob2, mloc2)

    K1d, wx_h = g.neumann_laplacian_1d()
    p_b = eq.p_b
    asym = sp.csr_matrix(
        (sigma / p_b) * sp.diags(1.0 / wx_h) @ K1d
        - (eq.gamma * eq.jump_rho / p_b) * sp.eye(nxp)
    )

    n_flux = nxp if case == "i" else 2 * nxp
    n_tot = g.n_base + n_flux
    i_tm = g.off_tm + np.arange(nxp)
    i_tp = g.off_tp + np.arange(nxp)
    i_h = g.off_h + np.arange(nxp)

    rows = list(S_w.tocoo().row)
    cols = list(S_w.tocoo().col)
    vals = list(S_w.tocoo().data)
    E_diag = np.zeros(n_tot)
    E_diag[:nw] = mass_w

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    A_coo = sp.coo_matrix(asym)
    if case == "i":
        i_q = g.n_base + np.arange(nxp)
        for i in range(nxp):
            put(i_tm[i], i_q[i], -p_b * wx[i])
            put(i_tp[i], i_q[i], +p_b * wx[i])
            put(i_h[i], i_q[i], 1.0)  # lambda h + q = 0
            E_diag[i_h[i]] = 1.0
            put(i_q[i], i_tp[i], 1.0)  # constraint: [[w]] + A_Sigma h = 0
            put(i_q[i], i_tm[i], -1.0)
        for r, c, v in zip(A_coo.row, A_coo.col, A_coo.data):
            put(i_q[r], i_h[c], v)
        constraint_rows = i_q
    else:
        i_qm = g.n_base + np.arange(nxp)
        i_qp = g.n_base + nxp + np.arange(nxp)
        rm, rp = eq.rho_minus, eq.rho_plus
        jump = eq.jump_rho
        for i in range(nxp):
            put(i_tm[i], i_qm[i], -(p_b / rm) * wx[i])
            put(i_tp[i], i_qp[i], +(p_b / rp) * wx[i])
            put(i_h[i], i_qp[i], 1.0 / jump)  # lambda h + [[Q]]/[[rho]] = 0
            put(i_h[i], i_qm[i], -1.0 / jump)
            E_diag[i_h[i]] = 1.0
            put(i_qm[i], i_tp[i], 1.0)   # Laplace-Young
            put(i_qm[i], i_tm[i], -1.0)
            put(i_qp[i], i_tp[i], 1.0 / rp)  # [[w/rho]] = 0
            put(i_qp[i], i_tm[i], -1.0 / rm)
        for r, c, v in zip(A_coo.row, A_coo.col, A_coo.data):
            put(i_qm[r], i_h[c], v)
        constraint_rows = np.concatenate([i_qm, i_qp])

    A = sp.csr_matrix((vals, (rows, cols)), shape=(n_tot, n_tot))
    E = sp.diags(E_diag, format="csr")
    return DiscreteLinearization(
        case=case, grid=g, eq=eq, sigma=sigma,
        E=E, A=A, constraint_rows=np.asarray(constraint_rows),
        asym_nodal=asym, S_w=S_w, mass_w=mass_w, pf1=pf1, pf2=pf2,
    )


# --- spectrum ---------------------------------------------------------------


@dataclass
class SpectrumResult:
    eigenvalues: np.ndarray
    residuals: np.ndarray
    n_unstable: int
    n_zero: int
    tol_zero: float
    vectors_reduced: np.ndarray = field(repr=False)
    lift: Callable = field(repr=False, default=None)


def _residuals(E_r, A_r, lams, X, nrmA, nrmE):
    out = np.empty(len(lams))
    for i, lam in enumerate(lams):
        x = X[:, i]
        r = A_r @ x + lam * (E_r @ x)
        out[i] = np.linalg.norm(r) / (
            (abs(lam) * nrmE + nrmA) * max(np.linalg.norm(x), 1e-300)
        )
    return out


def cosine_mode_basis(disc: DiscreteLinearization, l: int) -> np.ndarray:
    """Basis of the l-th cosine x-mode subspace of the reduced pencil.

    The flat equilibrium has x-independent coefficients and the FV
    Neumann Laplacian has the discrete cosines as exact eigenvectors, so
    these subspaces are exactly invariant; restricting the pencil to
    them is an exact block-diagonalization over l = 0..nx.
    """
    g = disc.grid
    c = np.cos(l * np.pi * g.x / g.geom.L)
    n_slots = g.n_below + g.n_above + (2 if disc.case == "i" else 1)
    return np.kron(np.eye(n_slots), c[:, None])


def mode_spectrum(disc: DiscreteLinearization, modes=None):
    """Full spectrum resolved by cosine x-mode.

    Returns a list of (l, eigenvalues, vectors_reduced) with eigenvalues
    sorted descending by real part; the union over l is the spectrum of
    the reduced pencil.
    """
    A_r, E_r, _ = disc.reduce()
    out = []
    if modes is None:
        modes = range(disc.grid.nx + 1)
    for l in modes:
        B = cosine_mode_basis(disc, l)
        A_l = B.T @ (A_r @ B)
        E_l = B.T @ (E_r @ B)
        lam, Z = sla.eig(-A_l, E_l)
        finite = np.isfinite(lam)
        lam, Z = lam[finite], Z[:, finite]
        order = np.argsort(-lam.real, kind="stable")
        out.append((l, lam[order], B @ Z[:, order]))
    return out


def spectrum(
    disc: DiscreteLinearization,
    k: int = 20,
    shift: float = 0.0,
    method: str = "auto",
    dense_cutoff: int = 2600,
    residual_tol: float = 1e-8,
) -> SpectrumResult:
    """Eigenvalues of the reduced pencil nearest the shift.

    The default route block-diagonalizes over the exact cosine x-modes
    and runs dense QZ per block; "dense" runs QZ on the full reduced
    pencil, "sparse" ARPACK shift-invert with a deterministic start
    vector.  Residuals against the 2D reduced pencil are verified for
    every reported pair.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    A_r, E_r, lift = disc.reduce()
    n = A_r.shape[0]
    nrmA = spla.norm(A_r, np.inf)
    nrmE = spla.norm(E_r, np.inf)
    if method in ("auto", "modes"):
        per_mode = mode_spectrum(disc)
        lam_all = np.concatenate([lam for _, lam, _ in per_mode])
        X_all = np.hstack([V for _, _, V in per_mode])
        order = np.argsort(np.abs(lam_all - shift), kind="stable")
        sel = order[: min(k, len(order))]
        lams, X = lam_all[sel], X_all[:, sel]
    elif method == "dense":
        lam_all, X = sla.eig(-A_r.toarray(), E_r.toarray())
        finite = np.isfinite(lam_all)
        lam_all, X = lam_all[finite], X[:, finite]
        order = np.argsort(np.abs(lam_all - shift), kind="stable")
        sel = order[: min(k, len(order))]
        lams, X = lam_all[sel], X[:, sel]
    else:
        op = sp.csc_matrix(-A_r - shift * E_r)
        try:
            lu = spla.splu(op)
        except RuntimeError as exc:
            raise EigSolveFailure(f"shift-invert factorization failed: {exc}") from exc
        lo = spla.LinearOperator((n, n), matvec=lambda x: lu.solve(E_r @ x), dtype=float)
        v0 = np.ones(n) / np.sqrt(n)
        try:
            nu, X = spla.eigs(lo, k=min(k, n - 2), which="LM", v0=v0, maxiter=8000)
        except spla.ArpackNoConvergence as exc:
            raise EigSolveFailure(str(exc)) from exc
        lams = shift + 1.0 / nu
        order = np.argsort(np.abs(lams - shift), kind="stable")
        lams, X = lams[order], X[:, order]

    res = _residuals(E_r, A_r, lams, X, nrmA, nrmE)
    scale = float(np.max(np.abs(lams))) if len(lams) else 1.0
    tol_zero = 1e-8 * max(scale, 1.0)
    bad = res > residual_tol
    if np.any(bad):
        raise EigSolveFailure(
            f"{int(bad.sum())} eigenpairs exceed residual {residual_tol:g} "
            f"(worst {res.max():.3e})"
        )
    return SpectrumResult(
        eigenvalues=lams,
        residuals=res,
        n_unstable=int(np.sum(lams.real > tol_zero)),
        n_zero=int(np.sum(np.abs(lams) < tol_zero)),
        tol_zero=tol_zero,
        vectors_reduced=X,
        lift=lift,
    )


def eigenvalue_identity_residual(disc: DiscreteLinearization, lam, x_reduced):
    """Residual of the fundamental identity lambda*a + b = 0.

    a and b are evaluated by independent face quadrature of the energy
    integrals (not by pencil algebra); returns |lambda a + b| divided by
    |lambda||a| + |b|.
    """
    _, _, lift = disc.reduce()
    x_full = lift(lam, np.asarray(x_reduced))
    a, b = disc.energy_forms(x_full)
    denom = abs(lam) * abs(a) + abs(b)
    if denom == 0.0:
        return 0.0
    return abs(lam * a + b) / denom


def semisimplicity_check(disc: DiscreteLinearization, tol: float = 1e-6):
    """Verify there is no Jordan chain above the zero eigenvalue.

    Using the kernel basis x0, zero is semi-simple iff A x1 = -E x0 is
    inconsistent for every kernel combination, i.e. the least-squares
    residual matrix has smallest singular value bounded away from zero.
    Returns (semisimple, defect_estimate).
    """
    A_r, E_r, _ = disc.reduce()
    spec_res = spectrum(disc, k=min(12, A_r.shape[0] - 2))
    kmask = np.abs(spec_res.eigenvalues) < spec_res.tol_zero
    if not np.any(kmask):
        raise DegenerateThreshold("no zero eigenvalue found; nothing to check")
    X0 = spec_res.vectors_reduced[:, kmask].real
    B = -(E_r @ X0)
    Ad = A_r.toarray()
    sol, _, _, _ = np.linalg.lstsq(Ad, B, rcond=None)
    R = Ad @ sol - B
    scale = np.linalg.norm(B, axis=0)
    sig = np.linalg.svd(R / np.maximum(scale, 1e-300), compute_uv=False)
    defect = float(sig[-1]) if len(sig) else 0.0
    return defect > tol, defect


def unstable_count(disc: DiscreteLinearization, k: Optional[int] = None) -> int:
    """Number of strictly positive growth rates of the linearization.

    Uses the exact cosine-mode block diagonalization, so all modes are
    covered regardless of grid size.
    """
    per_mode = mode_spectrum(disc)
    lam_all = np.concatenate([lam for _, lam, _ in per_mode]).real
    scale = float(np.max(np.abs(lam_all)))
    tol_zero = 1e-8 * max(scale, 1.0)
    return int(np.sum(lam_all > tol_zero))


def leading_mode_eigenvalue(disc: DiscreteLinearization, l: int, skip_zero: bool = True):
    """Largest growth rate carried by the l-th cosine x-mode."""
    (_, lam, _), = mode_spectrum(disc, modes=[l])
    lam = lam.real
    scale = float(np.max(np.abs(lam)))
    tol = 1e-8 * max(scale, 1.0)
    if skip_zero:
        lam = lam[np.abs(lam) > tol]
    return float(lam[0])


def interface_mode_eigenpair(disc: DiscreteLinearization, l: int):
    """Mode-l eigenpair with the strongest interface (h) content.

    Bulk diffusion branches carry almost no h; the branch returned here
    is the one that dominates the interface-norm decay of h-seeded
    initial data.  Returns (lam, vec_reduced).
    """
    (_, lam, V), = mode_spectrum(disc, modes=[l])
    _, _, lift = disc.reduce()
    scale = float(np.max(np.abs(lam.real)))
    tol = 1e-8 * max(scale, 1.0)
    best = None
    for j in range(len(lam)):
        lj = lam[j].real
        if abs(lam[j].imag) > tol or abs(lj) < tol:
            continue
        full = lift(lj, V[:, j].real)
        w1, w2, h = disc.extract_fields(full)
        wmax = max(np.abs(w1).max(), np.abs(w2).max(), 1e-300)
        ratio = np.abs(h).max() / wmax
        if best is None or ratio > best[0]:
            best = (ratio, lj, V[:, j].real)
    if best is None:
        raise EigSolveFailure(f"no usable eigenpair found in mode {l}")
    return best[1], best[2]
