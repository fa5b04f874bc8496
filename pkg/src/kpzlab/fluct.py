"""Macroscopic fluctuation pairings and limit diagnostics.

Transformed solutions are paired against fixed smooth bumps and compared,
replica by replica under the shared noise coupling, with the additive
equation driven by the same slices.  The regression of the transformed
pairing on the additive pairing estimates the effective variance; normality
statistics probe the Gaussian limit; the height-field check couples the
nonlinear growth run to heat flow plus the additive solution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.fft as sfft

from .errors import ContractError
from .grid import FieldFrame, GridSpec, semigroup_apply
from .noise import CovarianceModel
from .she import RunState, effective_coupling, run_coupled
from .stationary import TransformSpec
from .stats import (anderson_darling_normal, excess_kurtosis_with_se, loglog_slope,
                    mean_with_se, skewness_with_se)


@dataclass(frozen=True)
class TestFunction:
    """Compactly supported tensor bump g_z^lam(y) = lam^-d g((y-z)/lam),
    g(x) = prod_i (1 - (2 x_i / width)^2)^3 on |x_i| < width/2.

    Scaling preserves the integral; support must stay strictly inside the
    torus.
    """

    __test__ = False  # not a test case despite the Test- prefix

    grid: GridSpec
    width: float
    center: tuple[float, ...] | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.scale * self.width / 2.0 >= self.grid.box_length / 2.0:
            raise ContractError("test function support must lie strictly inside the torus")

    def tabulate(self) -> np.ndarray:
        grid = self.grid
        center = self.center or (0.0,) * grid.dim
        c = grid.axis_coords()
        out = np.ones(grid.shape)
        for axis in range(grid.dim):
            s = c - center[axis]
            s = (s + grid.box_length / 2.0) % grid.box_length - grid.box_length / 2.0
            s = s / self.scale
            prof = np.where(np.abs(s) < self.width / 2.0,
                            (1.0 - (2.0 * s / self.width) ** 2) ** 3, 0.0)
            sh = [1] * grid.dim
            sh[axis] = grid.n_per_side
            out = out * prof.reshape(sh)
        return out * self.scale ** (-grid.dim)

    def integral(self) -> float:
        return float(self.tabulate().sum() * self.grid.cell_volume)


@dataclass(frozen=True)
class PairingRecord:
    epsilon: float
    t: float
    replica: int
    Y: float
    U: float
    transform: str
    u_phi_pairing: float


def loo_center(values: np.ndarray) -> np.ndarray:
    """x_i minus the mean of the other entries (leave-one-out centering)."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        raise ContractError("leave-one-out centering needs >= 2 replicas")
    total = values.sum()
    return values - (total - values) / (n - 1)


def pair_with(values_nd: np.ndarray, g_values: np.ndarray, grid: GridSpec) -> float:
    return float(np.sum(values_nd * g_values) * grid.cell_volume)


def fluct_ensemble(model: CovarianceModel, beta: float, eps_list: list[float],
                   times: list[float], transforms: list[TransformSpec],
                   g_values: np.ndarray, replicas: int, master_seed: int) -> dict:
    """Raw pairings of Phi(u_eps) and of the coupled additive solution.

    Returns {"raw": {(eps, t, name): array}, "U": {(eps, t): array}} over
    replicas; all runs in one replica share the noise realization (the
    additive state uses the bare coupling, the multiplicative one the
    rescaled coupling).
    """
    grid = model.grid
    for t in times:
        if abs(round(t / grid.dt) * grid.dt - t) > 1e-9:
            raise ContractError(f"time {t} is not on the step grid (dt = {grid.dt})")
    steps = sorted({int(round(t / grid.dt)) for t in times})
    raw = {(e, t, tr.name): np.empty(replicas) for e in eps_list for t in times for tr in transforms}
    upair = {(e, t): np.empty(replicas) for e in eps_list for t in times}
    for rep in range(replicas):
        states = []
        for e in eps_list:
            states.append(RunState(name=f"u{e}", epsilon=e,
                                   beta_eff=effective_coupling(beta, e, model.kappa),
                                   init_values=np.ones(grid.shape), start_step=0))
            states.append(RunState(name=f"V{e}", epsilon=e, beta_eff=beta,
                                   init_values=np.zeros(grid.shape), start_step=0,
                                   multiplicative=False))
        run_coupled(model, states, max(steps), master_seed, rep, snapshot_steps=set(steps))
        for i, e in enumerate(eps_list):
            ust, vst = states[2 * i], states[2 * i + 1]
            for t in times:
                k = int(round(t / grid.dt))
                for tr in transforms:
                    raw[(e, t, tr.name)][rep] = pair_with(tr.func(ust.snapshots[k]), g_values, grid)
                upair[(e, t)][rep] = pair_with(vst.snapshots[k], g_values, grid)
    return {"raw": raw, "U": upair}


def finalize_pairings(ensemble: dict, model: CovarianceModel) -> list[PairingRecord]:
    """Build records with leave-one-out centered, rescaled pairings."""
    records = []
    for (e, t, name), arr in ensemble["raw"].items():
        scale = e ** (1.0 - model.kappa / 2.0)
        ys = scale * loo_center(arr)
        u_phi = scale * (arr - arr.mean())
        uarr = ensemble["U"][(e, t)]
        for rep in range(arr.size):
            records.append(PairingRecord(epsilon=e, t=t, replica=rep,
                                         Y=float(ys[rep]), U=float(uarr[rep]),
                                         transform=name, u_phi_pairing=float(u_phi[rep])))
    return records


def _records_by_eps(records: list[PairingRecord], transform: str, t: float):
    eps = sorted({r.epsilon for r in records if r.transform == transform and r.t == t},
                 reverse=True)
    by_eps = {}
    for e in eps:
        rs = [r for r in records if r.transform == transform and r.t == t and r.epsilon == e]
        rs.sort(key=lambda r: r.replica)
        by_eps[e] = (np.array([r.Y for r in rs]), np.array([r.U for r in rs]))
    return by_eps


def compare_fluct_to_additive(records: list[PairingRecord], transform: str, t: float,
                              nu_hat: float) -> dict:
    """Per-scale RMS of Y - nu*U, the decay-rate fit, and the Y-on-U slope."""
    by_eps = _records_by_eps(records, transform, t)
    if len(by_eps) < 3:
        raise ContractError(f"need >= 3 epsilon values, got {len(by_eps)}")
    report = {"transform": transform, "t": t, "nu_hat": nu_hat, "per_eps": {}}
    eps_sorted = sorted(by_eps, reverse=True)
    rms_list = []
    for e in eps_sorted:
        y, u = by_eps[e]
        resid = y - nu_hat * u
        rms = float(np.sqrt((resid**2).mean()))
        sd_u = float(u.std(ddof=1))
        varu = u.var(ddof=1)
        slope = float(np.cov(y, u, ddof=1)[0, 1] / varu)
        resid_reg = y - slope * u
        slope_se = float(np.sqrt(resid_reg.var(ddof=1) / (varu * (y.size - 2))))
        rms_list.append(rms)
        report["per_eps"][e] = {"rms": rms, "sd_u": sd_u, "rms_over_sd": rms / sd_u,
                                "regression_slope": slope, "slope_se": slope_se,
                                "var_y": float(y.var(ddof=1)), "n": int(y.size)}
    fit = loglog_slope(eps_sorted, rms_list)
    report["rms_decay_slope"] = fit.slope   # positive = decays as eps shrinks
    report["rms_decay_ci"] = (fit.ci_lo, fit.ci_hi)
    return report


def gaussianity_report(samples: np.ndarray, min_samples: int = 300) -> dict:
    """Skewness / excess kurtosis with standard errors and an
    Anderson-Darling statistic against the fitted normal (1% gate)."""
    samples = np.asarray(samples, dtype=float)
    if samples.size < min_samples:
        raise ContractError(
            f"gaussianity_report needs >= {min_samples} samples, got {samples.size}")
    skew, skew_se = skewness_with_se(samples)
    kurt, kurt_se = excess_kurtosis_with_se(samples)
    ad_stat, ad_crit, ad_pass = anderson_darling_normal(samples)
    return {
        "n": int(samples.size),
        "skew": skew, "skew_se": skew_se, "skew_ok": abs(skew) < 3 * skew_se,
        "excess_kurtosis": kurt, "kurtosis_se": kurt_se, "kurt_ok": abs(kurt) < 3 * kurt_se,
        "ad_statistic": ad_stat, "ad_crit_1pct": ad_crit, "ad_pass_1pct": ad_pass,
    }


def kpz_limit_check(model: CovarianceModel, beta: float, h0: FieldFrame,
                    g_values: np.ndarray, t: float, eps_list: list[float],
                    replicas: int, master_seed: int, t_min: float = 1.0) -> dict:
    """Height pairing against heat flow plus the coupled additive solution.

    The comparison target uses the exact nonlinear-initial-condition
    transient eps^(1-kappa/2) log(1 + S_t(e^(eps^(kappa/2-1) h0) - 1)), which
    equals the heat flow of h0 up to O(eps^(kappa-2)) and makes the beta = 0
    difference vanish identically.  Centering uses companion flat runs.
    """
    if t < t_min:
        raise ContractError(f"height-limit check needs t >= {t_min}, got {t}")
    grid = model.grid
    k_t = int(round(t / grid.dt))
    lhs_raw = {e: np.empty(replicas) for e in eps_list}
    flat_raw = {e: np.empty(replicas) for e in eps_list}
    v_raw = {e: np.empty(replicas) for e in eps_list}
    target = {}
    for e in eps_list:
        scale = e ** (1.0 - model.kappa / 2.0)
        psi = np.exp(e ** (model.kappa / 2.0 - 1.0) * h0.reshaped()) - 1.0
        flow = semigroup_apply(FieldFrame(grid, 0.0, psi.reshape(-1)), t).reshaped()
        target[e] = pair_with(scale * np.log1p(flow), g_values, grid)

    for rep in range(replicas):
        states = []
        for e in eps_list:
            be = effective_coupling(beta, e, model.kappa)
            init_h = np.exp(e ** (model.kappa / 2.0 - 1.0) * h0.reshaped()).reshape(grid.shape)
            states.append(RunState(name=f"uh{e}", epsilon=e, beta_eff=be,
                                   init_values=init_h, start_step=0))
            states.append(RunState(name=f"uf{e}", epsilon=e, beta_eff=be,
                                   init_values=np.ones(grid.shape), start_step=0))
            states.append(RunState(name=f"V{e}", epsilon=e, beta_eff=beta,
                                   init_values=np.zeros(grid.shape), start_step=0,
                                   multiplicative=False))
        run_coupled(model, states, k_t, master_seed, rep, snapshot_steps={k_t})
        for i, e in enumerate(eps_list):
            scale = e ** (1.0 - model.kappa / 2.0)
            uh, uf, vv = states[3 * i], states[3 * i + 1], states[3 * i + 2]
            lhs_raw[e][rep] = pair_with(scale * np.log(uh.snapshots[k_t]), g_values, grid)
            flat_raw[e][rep] = pair_with(scale * np.log(uf.snapshots[k_t]), g_values, grid)
            v_raw[e][rep] = pair_with(vv.snapshots[k_t], g_values, grid)

    report = {"t": t, "beta": beta, "per_eps": {}}
    for e in eps_list:
        center = loo_center(flat_raw[e])          # removes the deterministic drift
        flat_mean_loo = flat_raw[e] - center      # per-replica LOO mean of flat pairings
        diff = (lhs_raw[e] - flat_mean_loo) - (target[e] + v_raw[e])
        rms = float(np.sqrt((diff**2).mean()))
        report["per_eps"][e] = {
            "rms": rms,
            "sd_rhs": float(np.std(v_raw[e], ddof=1)) if replicas > 1 else 0.0,
            "target_flow_pairing": target[e],
        }
    return report


def lln_remainder_check(model: CovarianceModel, beta: float,
                        weight_fn: Callable[[np.ndarray], np.ndarray],
                        eps_list: list[float], lookback: float, replicas: int,
                        master_seed: int) -> dict:
    """Law-of-large-numbers rate of the stationary field against a shrinking
    weight: T_eps = eps^d sum_w (Z(w) - 1) F(eps x_w) dx^d.

    ``weight_fn`` maps positions (n, d) to weights; its support radius must
    be <= eps * L / 2 for the smallest scale so the sum never wraps.
    The RMS is expected to shrink like eps^(kappa/2 - 1).
    """
    grid = model.grid
    c = grid.axis_coords()
    mesh = np.stack(np.meshgrid(*([c] * grid.dim), indexing="ij"), axis=-1)
    flat_pos = mesh.reshape(-1, grid.dim)
    weights = {e: weight_fn(e * flat_pos).reshape(grid.shape) for e in eps_list}
    steps = int(round(lookback / grid.dt))
    beta_eff = effective_coupling(beta, 1.0, model.kappa)

    stats = {e: np.empty(replicas) for e in eps_list}
    for rep in range(replicas):
        st = RunState(name="Z", epsilon=1.0, beta_eff=beta_eff,
                      init_values=np.ones(grid.shape), start_step=-steps)
        run_coupled(model, [st], 0, master_seed, rep, snapshot_steps={0})
        z = st.snapshots[0]
        for e in eps_list:
            stats[e][rep] = float(e**grid.dim * np.sum((z - 1.0) * weights[e])
                                  * grid.cell_volume)
    rms = {e: float(np.sqrt((stats[e] ** 2).mean())) for e in eps_list}
    fit = loglog_slope(sorted(eps_list), [rms[e] for e in sorted(eps_list)])
    return {"rms": rms, "slope": fit.slope, "ci": (fit.ci_lo, fit.ci_hi),
            "target": model.kappa / 2.0 - 1.0, "samples": stats}


# ----------------------------------------------------------------------
# Double-Riesz pairing functional (tolerance bookkeeping for pairings)
# ----------------------------------------------------------------------

def _singular_kernel_table(grid: GridSpec, exponent: float, refine_cells: int = 4,
                           sub: int = 8) -> np.ndarray:
    """|v|^exponent tabulated min-image, with cells near the origin replaced
    by sub-cell averages (midpoint subsampling never hits the singularity)."""
    r2 = grid.radius_sq()
    rad = np.sqrt(r2)
    with np.errstate(divide="ignore"):
        table = np.where(rad > 0, rad**exponent, 0.0)
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    sub_mesh = np.stack(np.meshgrid(*([offs * grid.dx] * grid.dim), indexing="ij"),
                        axis=-1).reshape(-1, grid.dim)
    near = np.argwhere(rad <= refine_cells * grid.dx)
    coords = grid.axis_coords()
    for site in near:
        base = np.array([coords[i] for i in site])
        pts = base[None, :] + sub_mesh
        table[tuple(site)] = float(np.mean(np.sum(pts**2, axis=1) ** (exponent / 2.0)))
    return table


def double_riesz_functional(f_values: np.ndarray, grid: GridSpec, kappa: float,
                            delta: float) -> float:
    """iint |f(x1)||f(x2)| |x1-y1|^(d-delta)... paired through the power
    kernels: smooth |f| by |.|^(delta-d) on both arguments, then contract
    with |y1-y2|^(-kappa)."""
    if not (0.0 < delta < kappa / 2.0):
        raise ContractError(f"delta must lie in (0, kappa/2), got {delta}")
    k1 = _singular_kernel_table(grid, delta - grid.dim)
    k2 = _singular_kernel_table(grid, -kappa)
    axes = tuple(range(grid.dim))
    fabs = np.abs(np.asarray(f_values).reshape(grid.shape))
    h = sfft.irfftn(sfft.rfftn(k1) * sfft.rfftn(fabs), s=grid.shape, axes=axes) * grid.cell_volume
    k2h = sfft.irfftn(sfft.rfftn(k2) * sfft.rfftn(h), s=grid.shape, axes=axes)
    return float(np.sum(h * k2h) * grid.cell_volume**2)


def _bump_fourier_1d(a: np.ndarray, width: float) -> np.ndarray:
    """1d Fourier transform of (1 - (2x/w)^2)^3 on |x| < w/2 at wavenumbers a.

    Gauss-Legendre on [0, 1] (machine precision for the polynomial-times-
    cosine integrand at any argument scale that matters here).
    """
    nodes, weights = np.polynomial.legendre.leggauss(64)
    u = 0.5 * (nodes + 1.0)
    w_u = 0.5 * weights
    prof = (1.0 - u**2) ** 3
    phase = np.cos(np.multiply.outer(a * (width / 2.0), u))
    return width * (phase * (prof * w_u)).sum(axis=-1)


def double_riesz_bump(width: float, kappa: float, delta: float, scale: float = 1.0,
                      n_radial: int = 600, n_angular: int = 48) -> float:
    """The pairing functional for the tensor bump, evaluated in Fourier space.

    With f >= 0 and tensor-product structure, the functional equals
    c(kappa) c(delta)^2 (2 pi)^-3 * int |f_hat(k)|^2 |k|^(kappa - 2 delta - 3) dk
    (Fourier constants of the two power kernels); the integrand is smooth
    and rapidly decaying, so spherical product quadrature converges fast.
    Evaluating at different ``scale`` values tabulates genuinely different
    integrands, so the scaling relation is a non-circular numerical check.
    """
    from scipy.special import gamma as _gamma
    if not (0.0 < delta < kappa / 2.0):
        raise ContractError(f"delta must lie in (0, kappa/2), got {delta}")
    d = 3

    def riesz_ft_const(alpha: float) -> float:
        # FT of |x|^(-alpha) is c |k|^(alpha - d), c = pi^(d/2) 2^(d-alpha)
        # Gamma((d-alpha)/2) / Gamma(alpha/2)
        return np.pi ** (d / 2.0) * 2.0 ** (d - alpha) * _gamma((d - alpha) / 2.0) / _gamma(alpha / 2.0)

    c_total = riesz_ft_const(kappa) * riesz_ft_const(d - delta) ** 2 / (2.0 * np.pi) ** d
    # exponent of |k|: (kappa - d) + 2 ((d - delta) - d) = kappa - 2 delta - d
    expo = kappa - 2.0 * delta - d

    # angular nodes: Gauss in cos(theta), trapezoid in phi
    ct_nodes, ct_weights = np.polynomial.legendre.leggauss(n_angular)
    phi = (np.arange(2 * n_angular) + 0.5) * (np.pi / n_angular)
    st = np.sqrt(1.0 - ct_nodes**2)
    dirs = np.stack([np.outer(st, np.cos(phi)).ravel(),
                     np.outer(st, np.sin(phi)).ravel(),
                     np.repeat(ct_nodes, phi.size)], axis=-1)
    ang_w = np.repeat(ct_weights, phi.size) * (np.pi / n_angular)

    # radial grid: r = u^2 flattens the r^(-1/2)-type singularity at 0.
    # k_max is scale-independent so different scales tabulate genuinely
    # different integrands (no change of variables hides in the grid)
    k_max = 240.0 / width
    u = (np.arange(n_radial) + 0.5) * (np.sqrt(k_max) / n_radial)
    r = u**2
    jac = 2.0 * u * (np.sqrt(k_max) / n_radial)

    total = 0.0
    for ri, ji in zip(r, jac):
        karg = ri * dirs * scale
        fhat = (_bump_fourier_1d(karg[:, 0], width)
                * _bump_fourier_1d(karg[:, 1], width)
                * _bump_fourier_1d(karg[:, 2], width))
        total += ji * ri ** (expo + 2.0) * float(np.sum(ang_w * fhat**2))
    return c_total * total


def variance_stabilization(records: list[PairingRecord], transform: str, t: float) -> dict:
    """Ratio of pairing variances between successive scales (limit check)."""
    by_eps = _records_by_eps(records, transform, t)
    eps_sorted = sorted(by_eps, reverse=True)
    out = {}
    for e1, e2 in zip(eps_sorted, eps_sorted[1:]):
        v1 = by_eps[e1][0].var(ddof=1)
        v2 = by_eps[e2][0].var(ddof=1)
        out[(e1, e2)] = float(v1 / v2)
    return out


def coupling_correlations(records: list[PairingRecord], transform: str, t: float) -> dict:
    """corr(Y, U) per scale (increases toward 1 under the good coupling)."""
    by_eps = _records_by_eps(records, transform, t)
    return {e: float(np.corrcoef(y, u)[0, 1]) for e, (y, u) in by_eps.items()}
