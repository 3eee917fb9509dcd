"""Numerical laboratory for compressible two-phase Darcy flow in a capillary.

Computes flat hydrostatic equilibria under mass constraints, classifies
their Rayleigh-Taylor stability, resolves the spectrum of the full
linearization, and integrates the nonlinear transformed-domain dynamics
with energy/dissipation/mass diagnostics.
"""

from . import eos, equilibria, geometry  # noqa: F401

__version__ = "0.1.0"
