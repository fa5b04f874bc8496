"""Lattice laboratory for the multiplicative stochastic heat equation and
KPZ-type growth driven by white-in-time noise with heavy spatial tails.

Subsystems:

- ``grid``: periodic lattice geometry, exact spectral heat semigroup,
  continuum heat / Brownian-bridge kernels.
- ``noise``: heavy-tailed spatial covariance model, amplitude calibration,
  coupled synthesis of noise slices across observation scales.
- ``she``: time stepping of the multiplicative equation, Green's function
  runs, the total-mass process, and the log-transform height field.
- ``stationary``: long-lookback estimates of the stationary field, the
  effective-variance functional, and the forward/backward duality check.
- ``homog``: the Green's-function factorization defect and its decay-rate
  fits, plus the deterministic bridge-kernel integral.
- ``fluct``: macroscopic pairings of transformed solutions against the
  coupled additive equation, normality diagnostics, height-limit checks.
- ``oracles``: solver-independent references (Feynman-Kac second moment,
  covariance integrals, Riesz composition constant, Ito isometry targets).
- ``runner`` / ``cli``: experiment configs, deterministic replica
  scheduling, persistence, and the ``lab`` command line.
"""

from .grid import FieldFrame, GridSpec, bridge_kernel, heat_kernel, semigroup_apply
from .noise import CovarianceModel, NoiseSlice, build_covariance, calibrate_amplitude, mollifier, sample_slice

__all__ = [
    "GridSpec",
    "FieldFrame",
    "heat_kernel",
    "bridge_kernel",
    "semigroup_apply",
    "CovarianceModel",
    "NoiseSlice",
    "mollifier",
    "build_covariance",
    "calibrate_amplitude",
    "sample_slice",
]

__version__ = "0.1.0"
