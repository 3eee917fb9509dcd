"""Capillary geometry and the interface-fitted reference grid.

The capillary is G x (-h_lower, h_upper) with cross-section G either an
interval (0, L) or a rectangle (0, L1) x (0, L2).  The stability theory
only consumes the Neumann-Laplacian spectrum of G, which is analytic for
both shapes.  The PDE discretizations (linearization, simulator) are
implemented for the interval cross-section on a tensor grid of the fixed
reference domain with the interface plane y = 0 as a mesh line; interface
values are carried twice (one-sided traces), so jumps are exact.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError

__all__ = ["CapillaryGeometry", "Grid", "neumann_eigenvalues", "build_grid"]


@dataclass(frozen=True)
class CapillaryGeometry:
    """Cross-section and vertical extent of the capillary."""

    cross_section: str  # "interval" | "rectangle"
    L: float = 1.0
    L2: float = 1.0
    h_lower: float = 1.0
    h_upper: float = 1.0

    def __post_init__(self):
        if self.cross_section not in ("interval", "rectangle"):
            raise ConfigError(f"unknown cross-section {self.cross_section!r}")
        if min(self.L, self.h_lower, self.h_upper) <= 0:
            raise ConfigError("L, h_lower, h_upper must all be positive")
        if self.cross_section == "rectangle" and self.L2 <= 0:
            raise ConfigError("L2 must be positive")

    @property
    def area(self):
        """|G|: length of the interval or area of the rectangle."""
        if self.cross_section == "interval":
            return self.L
        return self.L * self.L2

    def mu1(self):
        """Smallest nontrivial Neumann eigenvalue of -Laplace on G."""
        if self.cross_section == "interval":
            return (np.pi / self.L) ** 2
        return (np.pi / max(self.L, self.L2)) ** 2


def neumann_eigenvalues(geom: CapillaryGeometry, count: int):
    """First ``count`` eigenvalues of -Laplace_N on G with multiplicities.

    Returns a list of (mu, multiplicity) pairs in nondecreasing order,
    starting with mu_0 = 0.  Interval (0, L): mu_n = (n pi / L)^2, all
    simple.  Rectangle: mu = (n1 pi/L1)^2 + (n2 pi/L2)^2 with
    multiplicities from coincidences (grouped at relative tol 1e-12).
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if geom.cross_section == "interval":
        return [((n * np.pi / geom.L) ** 2, 1) for n in range(count)]
    # rectangle: lazily merge the two quadratic lattices with a heap
    vals = []
    seen = set()
    heap = [(0.0, 0, 0)]
    while len(vals) < 4 * count + 16 and heap:
        mu, n1, n2 = heapq.heappop(heap)
        vals.append(mu)
        for m1, m2 in ((n1 + 1, n2), (n1, n2 + 1)):
            if (m1, m2) not in seen:
                seen.add((m1, m2))
                heapq.heappush(
                    heap,
                    ((m1 * np.pi / geom.L) ** 2 + (m2 * np.pi / geom.L2) ** 2, m1, m2),
                )
    vals.sort()
    grouped = []
    for mu in vals:
        if grouped and abs(mu - grouped[-1][0]) <= 1e-12 * max(mu, 1.0):
            grouped[-1][1] += 1
        else:
            grouped.append([mu, 1])
    return [(mu, mult) for mu, mult in grouped[:count]]


def eigenvalues_below(geom: CapillaryGeometry, bound: float):
    """All (mu_l, mult) with mu_l < bound, plus the first one above it."""
    n = 4
    while True:
        eigs = neumann_eigenvalues(geom, n)
        if eigs[-1][0] >= bound:
            return eigs
        n *= 2
        if n > 1 << 22:
            raise ConfigError("eigenvalue bound unreasonably large")


@dataclass(frozen=True)
class Grid:
    """Tensor grid on the reference domain, interval cross-section.

    Nodes are vertex-centered; y = 0 carries duplicated one-sided trace
    unknowns.  Global ordering of the base unknown vector:

      phase-1 non-trace nodes (y-major: iy = 0..n_below-1, ix inner),
      phase-2 non-trace nodes (iy = 1..n_above),
      w^- traces, w^+ traces, h nodes.

    ``wx`` are trapezoid x-weights (half cells at the lateral ends), so
    lateral and outer Neumann conditions fold into half-cell balances.
    """

    geom: CapillaryGeometry
    nx: int
    n_below: int
    n_above: int
    x: np.ndarray = field(repr=False)
    y1: np.ndarray = field(repr=False)  # -h_lower .. 0, n_below+1 nodes
    y2: np.ndarray = field(repr=False)  # 0 .. h_upper, n_above+1 nodes

    @property
    def nxp(self):
        return self.nx + 1

    @property
    def dx(self):
        return self.geom.L / self.nx

    @property
    def dy1(self):
        return self.geom.h_lower / self.n_below

    @property
    def dy2(self):
        return self.geom.h_upper / self.n_above

    @property
    def wx(self):
        w = np.full(self.nxp, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    # volumes of the y control segments, including the trace half cells
    def vy(self, phase):
        if phase == 1:
            v = np.full(self.n_below + 1, self.dy1)
            v[0] = v[-1] = 0.5 * self.dy1
            return v
        v = np.full(self.n_above + 1, self.dy2)
        v[0] = v[-1] = 0.5 * self.dy2
        return v

    # --- index maps -------------------------------------------------------

    @property
    def n1(self):
        """Phase-1 non-trace node count."""
        return self.n_below * self.nxp

    @property
    def n2(self):
        return self.n_above * self.nxp

    def idx1(self, iy, ix):
        """Phase-1 non-trace node (iy = 0 bottom .. n_below-1 just below 0)."""
        return iy * self.nxp + ix

    def idx2(self, iy, ix):
        """Phase-2 non-trace node (iy = 1 just above 0 .. n_above top)."""
        return self.n1 + (iy - 1) * self.nxp + ix

    @property
    def off_tm(self):
        return self.n1 + self.n2

    @property
    def off_tp(self):
        return self.off_tm + self.nxp

    @property
    def off_h(self):
        return self.off_tp + self.nxp

    @property
    def n_base(self):
        """Unknowns before any extra flux variables: w (both phases,
        including traces) plus h."""
        return self.off_h + self.nxp

    def neumann_laplacian_1d(self):
        """Nodal Neumann Laplacian on the h-mesh and its lumped weights.

        Returns (K, w) with K the symmetric stiffness matrix (CSR) such
        that the nodal operator is -Delta_N = diag(1/w) @ K; discrete
        cosine vectors cos(l pi x_i / L) are exact eigenvectors.
        """
        n = self.nxp
        dx = self.dx
        main = np.full(n, 2.0 / dx)
        main[0] = main[-1] = 1.0 / dx
        off = np.full(n - 1, -1.0 / dx)
        K = sp.diags([off, main, off], [-1, 0, 1], format="csr")
        return K, self.wx


def build_grid(geom: CapillaryGeometry, nx: int, n_below: int, n_above: int) -> Grid:
    """Construct the interface-fitted tensor grid (interval cross-section)."""
    if geom.cross_section != "interval":
        raise ConfigError(
            "PDE grids are implemented for the interval cross-section; "
            "rectangle geometry is supported by the analytic spectrum only"
        )
    for name, n in (("nx", nx), ("n_below", n_below), ("n_above", n_above)):
        if n < 4:
            raise ConfigError(f"{name} must be >= 4, got {n}")
    x = np.linspace(0.0, geom.L, nx + 1)
    y1 = np.linspace(-geom.h_lower, 0.0, n_below + 1)
    y2 = np.linspace(0.0, geom.h_upper, n_above + 1)
    return Grid(geom, nx, n_below, n_above, x, y1, y2)
