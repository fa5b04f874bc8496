"""Factorization defect of the Green's function and the bridge-kernel integral.

The defect rho = w/P - C * (stationary proxy) measures how far the
Green's function is from the product of its total mass and the forward
stationary field, relative to deterministic heat flow.  Its decay rate in
the time lag (target exponent mu = 1/2 - 1/kappa) and its linear scaling in
the coupling are the quantitative core of the scaling-limit argument.

The proxy for the stationary field is a flat-start run from a fixed early
time sharing the noise realization; past the torus mixing time ~ 2 (L/2pi)^2
its distance from the true stationary field is exponentially small, which is
tighter at desk scale than the power-law prescription.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .errors import ContractError, ResolutionError
from .grid import GridSpec, delta_frame, semigroup_apply
from .noise import CovarianceModel
from .she import RunState, effective_coupling, run_coupled
from .stats import SlopeFit, loglog_slope

MIN_KERNEL_DENSITY = 1e-300


def decay_exponent(kappa: float) -> float:
    """mu = 1/2 - 1/kappa, the defect decay rate in the time lag."""
    return 0.5 - 1.0 / kappa


def bulk_exponent(kappa: float) -> float:
    """mu-tilde = 1 - 2/kappa, the bridge-integral decay rate."""
    return 1.0 - 2.0 / kappa


def defect_weight(lag: float, offset: float, kappa: float) -> float:
    """Space-time weight (1+r)^-mu (1 + (1+r)^-1/2 |z|)."""
    mu = decay_exponent(kappa)
    return (1.0 + lag) ** -mu * (1.0 + (1.0 + lag) ** -0.5 * offset)


@dataclass(frozen=True)
class DefectEnsemble:
    lags: list[float]
    offsets: list[float]            # offset distances (0 -> source site)
    beta: float
    kappa: float
    # samples[(lag, offset)] has shape (replicas, sites_at_offset)
    samples: dict
    skipped_cells: list


def _offset_sites(grid: GridSpec, y: tuple[int, ...], dist_sites: int) -> list[tuple[int, ...]]:
    if dist_sites == 0:
        return [y]
    sites = []
    for axis in range(grid.dim):
        for sgn in (+1, -1):
            v = list(y)
            v[axis] = (v[axis] + sgn * dist_sites) % grid.n_per_side
            sites.append(tuple(v))
    return sites


def defect_ensemble(model: CovarianceModel, beta: float, lags: list[float],
                    offsets_sites: list[int], replicas: int, master_seed: int,
                    proxy_lookback: float = 32.0,
                    y: tuple[int, ...] = None) -> DefectEnsemble:
    """Sample the defect at each (lag, offset) cell.

    Per replica, one shared noise realization drives: the delta-start run
    (whose snapshots give w and its total mass C) and the flat-start proxy
    from -proxy_lookback.  The denominator is the deterministic lattice heat
    kernel (the coupling-free delta run), so the defect vanishes identically
    at beta = 0.
    """
    grid = model.grid
    y = y or (0,) * grid.dim
    lag_steps = {lag: int(round(lag / grid.dt)) for lag in lags}
    proxy_steps = int(round(proxy_lookback / grid.dt))
    beta_eff = effective_coupling(beta, 1.0, model.kappa)
    cell = grid.cell_volume

    # deterministic lattice heat kernel at each lag
    kernels = {}
    for lag in lags:
        kern = semigroup_apply(delta_frame(grid, 0.0, y), lag).reshaped()
        kernels[lag] = kern

    offset_sites = {d: _offset_sites(grid, y, d) for d in offsets_sites}
    skipped = []
    for lag in lags:
        for dist in offsets_sites:
            dens = [kernels[lag][s] for s in offset_sites[dist]]
            if min(dens) < MIN_KERNEL_DENSITY:
                skipped.append((lag, dist * grid.dx, "kernel underflow"))

    samples = {(lag, dist * grid.dx): np.empty((replicas, len(offset_sites[dist])))
               for lag in lags for dist in offsets_sites
               if (lag, dist * grid.dx, "kernel underflow") not in skipped}

    snap_steps = set(lag_steps.values())
    for rep in range(replicas):
        w_state = RunState(name="w", epsilon=1.0, beta_eff=beta_eff,
                           init_values=delta_frame(grid, 0.0, y).reshaped().copy(),
                           start_step=0)
        proxy = RunState(name="proxy", epsilon=1.0, beta_eff=beta_eff,
                         init_values=np.ones(grid.shape), start_step=-proxy_steps)
        run_coupled(model, [w_state, proxy], max(lag_steps.values()),
                    master_seed, rep, snapshot_steps=snap_steps)
        for lag in lags:
            k = lag_steps[lag]
            w_frame = w_state.snapshots[k]
            z_frame = proxy.snapshots[k]
            c_val = float(w_frame.sum() * cell)
            for dist in offsets_sites:
                key = (lag, dist * grid.dx)
                if key not in samples:
                    continue
                for j, site in enumerate(offset_sites[dist]):
                    ratio = w_frame[site] / kernels[lag][site]
                    samples[key][rep, j] = ratio - c_val * z_frame[site]

    return DefectEnsemble(lags=list(lags), offsets=[d * grid.dx for d in offsets_sites],
                          beta=beta, kappa=model.kappa, samples=samples,
                          skipped_cells=skipped)


def defect_norms(ens: DefectEnsemble) -> dict:
    """L2(ensemble) norm per cell with replica-clustered standard errors."""
    out = {}
    for key, arr in ens.samples.items():
        per_rep = (arr**2).mean(axis=1)
        msq = per_rep.mean()
        se_msq = per_rep.std(ddof=1) / np.sqrt(per_rep.shape[0])
        norm = float(np.sqrt(msq))
        out[key] = (norm, float(se_msq / (2.0 * norm)) if norm > 0 else 0.0)
    return out


def homog_report(ens: DefectEnsemble, offset: float = 0.0) -> dict:
    """Rate fit at one offset plus the weighted sup statistic over all cells."""
    if len(ens.lags) < 3:
        raise ContractError(f"homog_report needs >= 3 lags, got {len(ens.lags)}")
    span = max(ens.lags) / min(ens.lags)
    if span < 8:
        raise ContractError(f"lags must span at least one decade-ish range, got x{span:g}")
    norms = defect_norms(ens)
    xs = [lag for lag in ens.lags if (lag, offset) in norms]
    ys = [norms[(lag, offset)][0] for lag in xs]
    fit = loglog_slope(xs, ys)
    weighted = max(norms[(lag, off)][0] / defect_weight(lag, off, ens.kappa)
                   for (lag, off) in norms)
    mu = decay_exponent(ens.kappa)
    return {
        "kappa": ens.kappa,
        "mu_target": mu,
        "slope_hat": fit.slope,
        "ci_lo": fit.ci_lo,
        "ci_hi": fit.ci_hi,
        "weighted_sup": weighted,
        "beta": ens.beta,
        "offsets": ens.offsets,
        "norms": {f"{lag:g}|{off:g}": norms[(lag, off)][0] for (lag, off) in norms},
    }


def beta_scaling_fit(norm_by_beta: dict[float, float]) -> SlopeFit:
    """Exponent of the defect norm in the coupling (target 1)."""
    if len(norm_by_beta) < 2:
        raise ContractError("beta scaling needs at least two couplings")
    betas = sorted(norm_by_beta)
    return loglog_slope(betas, [norm_by_beta[b] for b in betas])


# ----------------------------------------------------------------------
# Deterministic bridge-kernel integral
# ----------------------------------------------------------------------

def _spectral_gaussians(grid: GridSpec, shift_units: np.ndarray):
    """Wavenumbers and the phase factor for a real-space shift (rfftn layout)."""
    n, length = grid.n_per_side, grid.box_length
    full = 2 * np.pi * np.fft.fftfreq(n) * n / length
    half = 2 * np.pi * np.fft.rfftfreq(n) * n / length
    ks = []
    for axis in range(grid.dim):
        k = half if axis == grid.dim - 1 else full
        sh = [1] * grid.dim
        sh[axis] = len(k)
        ks.append(k.reshape(sh))
    k2 = sum(k**2 for k in ks)
    phase = sum(k * s for k, s in zip(ks, shift_units))
    return k2, phase


def _kernel_with_shift(grid: GridSpec, variance: float, shift: np.ndarray) -> np.ndarray:
    """Band-limited Gaussian of given variance centered at -shift.

    Fourier samples are exact (e^{-k^2 v/2} e^{i k.shift}), so the kernel has
    exactly unit lattice mass at any width - no aliasing of narrow kernels.
    """
    k2, phase = _spectral_gaussians(grid, shift)
    spec = np.exp(-0.5 * variance * k2) * np.exp(1j * phase)
    out = sfft.irfftn(spec, s=grid.shape, axes=tuple(range(grid.dim)))
    return out / grid.cell_volume


def _graded_midpoints(t: float, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric geometric grading of [0, t] toward both endpoints."""
    m = n_cells // 2
    edges = 0.5 * t * (np.geomspace(1.0, 2.0**m, m + 1) - 1.0) / (2.0**m - 1.0)
    left = edges
    right = t - edges[::-1]
    all_edges = np.concatenate([left, right[1:]])
    mids = 0.5 * (all_edges[1:] + all_edges[:-1])
    widths = np.diff(all_edges)
    return mids, widths


def bridge_defect_integral(t: float, x: np.ndarray, kappa: float, grid: GridSpec,
                           core: float = 0.1, amplitude: float = 1.0,
                           n_r: int = 48, max_self_error: float = 0.10,
                           _richardson: bool = True) -> tuple[float, float]:
    """Integral of |bridge - two endpoint kernels| squared against the covariance.

    J_t(x) = int_0^t iint |H(r,z1)| |H(r,z2)| R(z1-z2) dz dr with
    H(r,z) = P_{r(t-r)/t}(z + (r/t) x) - P_r(z) - P_{t-r}(z + x).

    Midpoint quadrature on a geometrically graded r-grid; spatial integrals
    by FFT convolution against the closed-form covariance on the quadrature
    grid.  Self-error is a Richardson estimate from halving the r-grid.
    """
    if t <= 0:
        raise ContractError(f"bridge integral needs t > 0, got {t}")
    if grid.box_length < 8.0 * np.sqrt(t):
        raise ContractError(f"box {grid.box_length} too small for t = {t} (need >= 8 sqrt t)")
    x = np.asarray(x, dtype=float)
    r2 = grid.radius_sq()
    cov = amplitude**2 * (core + r2) ** (-kappa / 2.0)
    cov_spec = sfft.rfftn(cov)
    axes = tuple(range(grid.dim))
    cell = grid.cell_volume

    def evaluate(cells: int) -> float:
        mids, widths = _graded_midpoints(t, cells)
        total = 0.0
        for r, wgt in zip(mids, widths):
            var_bridge = r * (t - r) / t
            h = (_kernel_with_shift(grid, var_bridge, (r / t) * x)
                 - _kernel_with_shift(grid, r, np.zeros_like(x))
                 - _kernel_with_shift(grid, t - r, x))
            h = np.abs(h)
            conv = sfft.irfftn(cov_spec * sfft.rfftn(h), s=grid.shape, axes=axes) * cell
            total += float(np.sum(h * conv)) * cell * wgt
        return total

    fine = evaluate(n_r)
    if not _richardson:
        return fine, float("nan")
    coarse = evaluate(n_r // 2)
    err = abs(fine - coarse) / 3.0
    if err / max(abs(fine), 1e-300) > max_self_error:
        raise ResolutionError(
            f"bridge integral self-error {err/abs(fine):.2e} > {max_self_error}; "
            f"suggest n_r >= {2 * n_r}")
    return fine, float(err)
