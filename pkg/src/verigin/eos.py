"""Per-phase thermodynamics.

A phase is described by its mass-specific free energy density psi(rho).
The pressure follows from Maxwell's law p = rho^2 psi'(rho), which is
strictly increasing whenever psi' > 0 and phi' > 0 with
phi(rho) = psi(rho) + rho psi'(rho); then p' = rho phi'.  Inverting the
pressure law gives the equation of state rho(p).  The pseudo-potential
Phi(p), defined by Phi'(p) = 1/rho(p) and Phi(1) = 0, is the hydrostatic
potential: Phi(p) + gamma*y is constant along a column at rest.

Two closed-form families cover the regimes of interest:

* ``ideal_gas``:  psi = R_theta * ln(rho), so p = R_theta * rho.
* ``affine``:     p = c2*(rho - rho_ref) + p_ref, a near-incompressible
  liquid.  The free energy is fixed by choosing the integration constant
  zero: psi = c2*ln(rho) + (c2*rho_ref - p_ref)/rho, which makes
  phi = c2*(ln(rho) + 1).

A ``custom`` family takes callables (psi, psi', psi'') so that phi' is
exact; no numerical differentiation happens in hot paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad

from .errors import ConfigError, DomainError, NoConvergence, RangeError

__all__ = [
    "FreeEnergySpec",
    "ideal_gas",
    "affine_compressible",
    "custom_spec",
    "pressure_from_density",
    "density_from_pressure",
    "phi_of_density",
    "capital_phi_of_pressure",
]

_REL_SLACK = 1e-12  # roundoff slack at interval endpoints


@dataclass(frozen=True)
class FreeEnergySpec:
    """One phase: free energy family, valid density window, permeability."""

    family: str
    rho_min: float
    rho_max: float
    k: float
    params: tuple = ()
    psi_fn: Optional[Callable] = field(default=None, repr=False)
    dpsi_fn: Optional[Callable] = field(default=None, repr=False)
    d2psi_fn: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        if not (0.0 < self.rho_min < self.rho_max):
            raise ConfigError(
                f"need 0 < rho_min < rho_max, got ({self.rho_min}, {self.rho_max})"
            )
        if not self.k > 0.0:
            raise ConfigError(f"permeability k must be positive, got {self.k}")
        if self.family not in ("ideal_gas", "affine", "custom"):
            raise ConfigError(f"unknown free-energy family {self.family!r}")
        if self.family == "custom" and (
            self.psi_fn is None or self.dpsi_fn is None or self.d2psi_fn is None
        ):
            raise ConfigError("custom family requires psi, psi' and psi'' callables")
        # standing assumptions: psi' > 0 and phi' > 0 on the whole interval
        s = np.linspace(self.rho_min, self.rho_max, 257)
        if np.any(self.dpsi(s) <= 0.0):
            raise ConfigError("psi'(rho) must be positive on the density interval")
        if np.any(self.dphi(s) <= 0.0):
            raise ConfigError("phi'(rho) must be positive on the density interval")

    # --- free energy and derivatives -------------------------------------

    def psi(self, rho):
        rho = np.asarray(rho, dtype=float)
        if self.family == "ideal_gas":
            (rt,) = self.params
            return rt * np.log(rho)
        if self.family == "affine":
            c2, rho_ref, p_ref = self.params
            return c2 * np.log(rho) + (c2 * rho_ref - p_ref) / rho
        return self.psi_fn(rho)

    def dpsi(self, rho):
        rho = np.asarray(rho, dtype=float)
        if self.family == "ideal_gas":
            (rt,) = self.params
            return rt / rho
        if self.family == "affine":
            c2, rho_ref, p_ref = self.params
            return c2 / rho - (c2 * rho_ref - p_ref) / rho**2
        return self.dpsi_fn(rho)

    def d2psi(self, rho):
        rho = np.asarray(rho, dtype=float)
        if self.family == "ideal_gas":
            (rt,) = self.params
            return -rt / rho**2
        if self.family == "affine":
            c2, rho_ref, p_ref = self.params
            return -c2 / rho**2 + 2.0 * (c2 * rho_ref - p_ref) / rho**3
        return self.d2psi_fn(rho)

    # --- pressure, enthalpy, potentials ----------------------------------

    def _check_rho(self, rho):
        rho = np.asarray(rho, dtype=float)
        slack = _REL_SLACK * self.rho_max
        if np.any(rho < self.rho_min - slack) or np.any(rho > self.rho_max + slack):
            bad = rho[(rho < self.rho_min - slack) | (rho > self.rho_max + slack)]
            raise DomainError(
                f"density {np.atleast_1d(bad).ravel()[0]:.6g} outside valid interval "
                f"({self.rho_min:.6g}, {self.rho_max:.6g})"
            )
        return np.clip(rho, self.rho_min, self.rho_max)

    def pressure(self, rho):
        """Maxwell's law p = rho^2 psi'(rho)."""
        rho = self._check_rho(rho)
        return rho**2 * self.dpsi(rho)

    def dp_drho(self, rho):
        """p'(rho) = 2 rho psi' + rho^2 psi'' = rho phi'(rho)."""
        rho = np.asarray(rho, dtype=float)
        return 2.0 * rho * self.dpsi(rho) + rho**2 * self.d2psi(rho)

    def phi(self, rho):
        """Specific free enthalpy phi = psi + rho psi'."""
        rho = self._check_rho(rho)
        return self.psi(rho) + rho * self.dpsi(rho)

    def dphi(self, rho):
        rho = np.asarray(rho, dtype=float)
        return 2.0 * self.dpsi(rho) + rho * self.d2psi(rho)

    @property
    def p_range(self):
        """Attainable (open) pressure interval."""
        lo = float(self.pressure(self.rho_min))
        hi = float(self.pressure(self.rho_max))
        return lo, hi

    @property
    def phi_range(self):
        return float(self.phi(self.rho_min)), float(self.phi(self.rho_max))

    def _check_p(self, p):
        p = np.asarray(p, dtype=float)
        lo, hi = self.p_range
        slack = _REL_SLACK * max(abs(lo), abs(hi), 1.0)
        if np.any(p < lo - slack) or np.any(p > hi + slack):
            bad = p[(p < lo - slack) | (p > hi + slack)]
            raise RangeError(
                f"pressure {np.atleast_1d(bad).ravel()[0]:.6g} outside attainable "
                f"range ({lo:.6g}, {hi:.6g})"
            )
        return np.clip(p, lo, hi)

    def density(self, p):
        """Equation of state rho(p): inverse of Maxwell's law."""
        p = self._check_p(p)
        if self.family == "ideal_gas":
            (rt,) = self.params
            return p / rt
        if self.family == "affine":
            c2, rho_ref, p_ref = self.params
            return rho_ref + (p - p_ref) / c2
        return self._density_newton(p)

    def _density_newton(self, p):
        """Bisection-safeguarded Newton on p(rho) = p, rel tol 1e-12."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        lo = np.full_like(p, self.rho_min)
        hi = np.full_like(p, self.rho_max)
        rho = 0.5 * (lo + hi)
        for _ in range(100):
            f = rho**2 * self.dpsi(rho) - p
            hi = np.where(f > 0.0, rho, hi)
            lo = np.where(f <= 0.0, rho, lo)
            step = f / self.dp_drho(rho)
            cand = rho - step
            outside = (cand <= lo) | (cand >= hi)
            cand = np.where(outside, 0.5 * (lo + hi), cand)
            done = np.abs(cand - rho) <= 1e-12 * np.abs(cand)
            rho = cand
            if np.all(done):
                break
        else:
            raise NoConvergence("density(p) Newton did not converge in 100 iterations")
        return rho if rho.shape else float(rho)

    def drho_dp(self, p):
        """rho'(p) = 1 / p'(rho(p))."""
        return 1.0 / self.dp_drho(self.density(p))

    # --- hydrostatic potential Phi ----------------------------------------

    @property
    def _phi_anchor(self):
        """Anchor pressure for Phi: 1 when attainable, else mid-range."""
        lo, hi = self.p_range
        if lo < 1.0 < hi:
            return 1.0
        return math.sqrt(lo * hi) if lo > 0 else 0.5 * (lo + hi)

    def Phi(self, p, check_anchor=False):
        """Pseudo-potential with Phi'(p) = 1/rho(p), normalized Phi(1) = 0.

        Closed forms for the built-in families; adaptive quadrature
        (abs tol 1e-12) for custom specs.
        """
        p = self._check_p(p)
        anchor = self._phi_anchor
        if check_anchor and anchor != 1.0:
            lo, hi = self.p_range
            raise RangeError(
                f"normalization point p=1 outside attainable range ({lo:.6g}, {hi:.6g})"
            )
        if self.family == "ideal_gas":
            (rt,) = self.params
            return rt * (np.log(p) - np.log(anchor))
        if self.family == "affine":
            c2, rho_ref, p_ref = self.params
            rho_anchor = rho_ref + (anchor - p_ref) / c2
            return c2 * (np.log(rho_ref + (p - p_ref) / c2) - np.log(rho_anchor))
        scalar = np.ndim(p) == 0
        pv = np.atleast_1d(p)
        out = np.empty_like(pv)
        for i, pi in enumerate(pv):
            val, _ = quad(
                lambda s: 1.0 / float(self.density(s)),
                anchor,
                float(pi),
                epsabs=1e-12,
                epsrel=1e-13,
                limit=200,
            )
            out[i] = val
        return float(out[0]) if scalar else out

    def Phi_inv(self, val):
        """Inverse of Phi (strictly increasing)."""
        val = np.asarray(val, dtype=float)
        anchor = self._phi_anchor
        if self.family == "ideal_gas":
            (rt,) = self.params
            return anchor * np.exp(val / rt)
        if self.family == "affine":
            c2, rho_ref, p_ref = self.params
            rho_anchor = rho_ref + (anchor - p_ref) / c2
            return p_ref + c2 * (rho_anchor * np.exp(val / c2) - rho_ref)
        return self._phi_inv_newton(val)

    def _phi_inv_newton(self, val):
        val = np.atleast_1d(np.asarray(val, dtype=float))
        lo_p, hi_p = self.p_range
        lo = np.full_like(val, lo_p)
        hi = np.full_like(val, hi_p)
        p = 0.5 * (lo + hi)
        for _ in range(100):
            f = np.atleast_1d(self.Phi(p)) - val
            hi = np.where(f > 0.0, p, hi)
            lo = np.where(f <= 0.0, p, lo)
            cand = p - f * np.atleast_1d(self.density(p))
            outside = (cand <= lo) | (cand >= hi)
            cand = np.where(outside, 0.5 * (lo + hi), cand)
            done = np.abs(cand - p) <= 1e-13 * np.maximum(np.abs(cand), 1.0)
            p = cand
            if np.all(done):
                break
        else:
            raise NoConvergence("Phi_inv Newton did not converge in 100 iterations")
        return p if p.shape else float(p)

    def phi_inv(self, val):
        """Inverse of phi(rho) (strictly increasing)."""
        val = np.asarray(val, dtype=float)
        if self.family == "ideal_gas":
            (rt,) = self.params
            return np.exp(val / rt - 1.0)
        if self.family == "affine":
            c2, _, _ = self.params
            return np.exp(val / c2 - 1.0)
        return self._phi_inv_rho_newton(val)

    def _phi_inv_rho_newton(self, val):
        val = np.atleast_1d(np.asarray(val, dtype=float))
        lo = np.full_like(val, self.rho_min)
        hi = np.full_like(val, self.rho_max)
        r = 0.5 * (lo + hi)
        for _ in range(100):
            f = self.psi(r) + r * self.dpsi(r) - val
            hi = np.where(f > 0.0, r, hi)
            lo = np.where(f <= 0.0, r, lo)
            cand = r - f / self.dphi(r)
            outside = (cand <= lo) | (cand >= hi)
            cand = np.where(outside, 0.5 * (lo + hi), cand)
            done = np.abs(cand - r) <= 1e-13 * np.abs(cand)
            r = cand
            if np.all(done):
                break
        else:
            raise NoConvergence("phi_inv Newton did not converge in 100 iterations")
        return r if r.shape else float(r)

    def face_density(self, pa, pb):
        """Density average consistent with the hydrostatic potential.

        Returns (pb - pa) / (Phi(pb) - Phi(pa)), the unique mean for which
        a discrete flux rho_face * (dPhi/dy + gamma) vanishes exactly on
        sampled hydrostatic columns.  Falls back to the midpoint density
        when the arguments (nearly) coincide.
        """
        pa = np.asarray(pa, dtype=float)
        pb = np.asarray(pb, dtype=float)
        dp = pb - pa
        mid = self.density(0.5 * (pa + pb))
        dPhi = self.Phi(pb) - self.Phi(pa)
        tiny = np.abs(dp) <= 1e-10 * np.maximum(np.abs(pa), np.abs(pb))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(tiny, mid, dp / np.where(dPhi == 0.0, 1.0, dPhi))
        return np.where(tiny, mid, ratio)


def ideal_gas(R_theta, rho_min=1e-6, rho_max=1e6, k=1.0):
    """Ideal isothermal gas: psi = R_theta ln(rho), p = R_theta rho."""
    if R_theta <= 0:
        raise ConfigError("R_theta must be positive")
    return FreeEnergySpec("ideal_gas", rho_min, rho_max, k, params=(float(R_theta),))


def affine_compressible(c2, rho_ref, p_ref, rho_min=None, rho_max=None, k=1.0):
    """Affine pressure law p = c2 (rho - rho_ref) + p_ref.

    The valid interval defaults to the positive-pressure part of a wide
    window around rho_ref.
    """
    if c2 <= 0 or rho_ref <= 0:
        raise ConfigError("need c2 > 0 and rho_ref > 0")
    if rho_min is None:
        rho_min = max(1e-6 * rho_ref, rho_ref - (p_ref - 1e-9) / c2 if p_ref > 0 else 1e-6)
        rho_min = max(rho_min, 1e-6 * rho_ref)
    if rho_max is None:
        rho_max = 100.0 * rho_ref
    return FreeEnergySpec(
        "affine", rho_min, rho_max, k, params=(float(c2), float(rho_ref), float(p_ref))
    )


def custom_spec(psi, dpsi, d2psi, rho_min, rho_max, k=1.0):
    """Free energy given by closures (psi, psi', psi'')."""
    return FreeEnergySpec(
        "custom", rho_min, rho_max, k, psi_fn=psi, dpsi_fn=dpsi, d2psi_fn=d2psi
    )


# --- module-level operation surface ---------------------------------------


def pressure_from_density(spec: FreeEnergySpec, rho):
    return spec.pressure(rho)


def density_from_pressure(spec: FreeEnergySpec, p):
    return spec.density(p)


def phi_of_density(spec: FreeEnergySpec, rho):
    return spec.phi(rho)


def capital_phi_of_pressure(spec: FreeEnergySpec, p):
    return spec.Phi(p, check_anchor=True)
