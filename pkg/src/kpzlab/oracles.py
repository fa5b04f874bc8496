"""Solver-independent references.

None of these call into the stepping engine: kernels are evaluated from
their continuum formulas (or closed-form spectral sums), and Monte Carlo
paths use a dedicated random stream.  Agreement with the engine is therefore
evidential rather than circular.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError, ResolutionError
from .grid import GridSpec
from .noise import CovarianceModel, origin_cell_average
from .rng import TAG_FK_PATHS, generator
from .stats import SlopeFit, loglog_slope


@dataclass(frozen=True)
class OracleResult:
    name: str
    value: float
    error_estimate: float
    inputs: dict = field(default_factory=dict)
    flags: tuple[str, ...] = ()

    def digest(self) -> str:
        payload = json.dumps({"name": self.name, "inputs": self.inputs}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ----------------------------------------------------------------------
# Riesz composition constant
# ----------------------------------------------------------------------

def _bracket_over_r(r: np.ndarray, c: float) -> np.ndarray:
    """((1-r)^c - (1+r)^c) / r evaluated stably (series below r = 0.05)."""
    out = np.empty_like(r)
    small = r < 0.05
    rs = r[small]
    # (1-r)^c - (1+r)^c = -2 sum_{k odd} C(c,k) r^k
    c1 = c
    c3 = c * (c - 1.0) * (c - 2.0) / 6.0
    c5 = c * (c - 1.0) * (c - 2.0) * (c - 3.0) * (c - 4.0) / 120.0
    c7 = c5 * (c - 5.0) * (c - 6.0) / 42.0
    out[small] = -2.0 * (c1 + c3 * rs**2 + c5 * rs**4 + c7 * rs**6)
    rb = r[~small]
    out[~small] = ((1.0 - rb) ** c - (1.0 + rb) ** c) / rb
    return out


def _riesz_reduced_integrals(a: float, n_cells: int) -> float:
    """Product-integration evaluation of the radially reduced composition.

    I(a) = 4 pi / (a-2) * [ int_0^{1/2} r^{2-a} G(r) dr
                          + int_{1/2}^inf r^{1-a} (r^{2-a} - (1+r)^{2-a}) dr ]

    with G(r) = ((1-r)^{2-a} - (1+r)^{2-a})/r smooth, obtained from spherical
    coordinates about the two singular points (the integrand is symmetric
    under z -> e - z, so both halves reduce to the same 1d pieces).  The
    r^{2-a} weight is integrated exactly per cell; the outer piece is mapped
    to [0, 2] by r = 1/v.
    """
    c = 2.0 - a
    # piece 1: product rule with exact cell moments of r^{2-a}
    edges = np.linspace(0.0, 0.5, n_cells + 1)
    mids = 0.5 * (edges[1:] + edges[:-1])
    moments = (edges[1:] ** (3.0 - a) - edges[:-1] ** (3.0 - a)) / (3.0 - a)
    piece1 = float(np.sum(_bracket_over_r(mids, c) * moments))
    # piece 2: r in [1/2, inf) mapped by r = 1/v
    v = (np.arange(n_cells) + 0.5) * (2.0 / n_cells)
    f2 = v ** (2.0 * a - 5.0) * (1.0 - (1.0 + v) ** (2.0 - a))
    piece2 = float(np.sum(f2)) * (2.0 / n_cells)
    return 4.0 * np.pi / (a - 2.0) * (piece1 + piece2)


def riesz_constant(kappa: float, dim: int, resolution: int = 4096,
                   max_rel_error: float = 1e-2) -> OracleResult:
    """Quadrature of int |z|^-a |e-z|^-a dz, a = (d+kappa)/2, in d = 3."""
    if not (2.0 < kappa < dim):
        raise ConfigurationError(f"kappa must lie in (2, d) = (2, {dim}), got {kappa}")
    if dim != 3:
        raise ConfigurationError("riesz_constant is implemented for d = 3 only")
    if resolution < 64:
        raise ResolutionError(f"resolution {resolution} too coarse (need >= 64 cells)")
    a = (dim + kappa) / 2.0
    coarse = _riesz_reduced_integrals(a, resolution // 2)
    fine = _riesz_reduced_integrals(a, resolution)
    err = abs(fine - coarse) / 3.0  # midpoint rule is second order
    if err / abs(fine) > max_rel_error:
        raise ResolutionError(
            f"riesz quadrature self-error {err/abs(fine):.2e} > {max_rel_error}; "
            f"suggest resolution >= {resolution * 4}"
        )
    return OracleResult("riesz_constant", float(fine), float(err),
                        {"kappa": kappa, "dim": dim, "resolution": resolution})


# ----------------------------------------------------------------------
# Feynman-Kac second moment
# ----------------------------------------------------------------------

def _interp_table_periodic(table: np.ndarray, pos: np.ndarray, dx: float) -> np.ndarray:
    """Trilinear periodic interpolation of a lattice table at positions (n, d)."""
    n = table.shape[0]
    g = pos / dx
    i0 = np.floor(g).astype(np.int64)
    frac = g - i0
    out = np.zeros(pos.shape[0])
    d = pos.shape[1]
    for corner in range(1 << d):
        w = np.ones(pos.shape[0])
        idx = []
        for axis in range(d):
            if corner >> axis & 1:
                w = w * frac[:, axis]
                idx.append((i0[:, axis] + 1) % n)
            else:
                w = w * (1.0 - frac[:, axis])
                idx.append(i0[:, axis] % n)
        out += w * table[tuple(idx)]
    return out


def _difference_jump_cdf(grid: GridSpec) -> np.ndarray:
    """CDF of the per-axis difference of two independent one-step walk jumps.

    The one-step transition is built from this module's own Laplacian symbol
    (no engine code); the difference distribution is its self-correlation.
    """
    n, dx, length = grid.n_per_side, grid.dx, grid.box_length
    k = 2 * np.pi * np.fft.rfftfreq(n) * n / length
    lam = (2.0 / dx**2) * (1.0 - np.cos(k * dx))
    jump_spec = np.exp(-lam * grid.dt / 2.0)
    diff = sfft.irfftn(jump_spec**2, s=(n,), axes=(0,))
    diff = np.clip(diff, 0.0, None)
    diff /= diff.sum()
    return np.cumsum(diff)


def fk_second_moment(t: float, beta: float, model: CovarianceModel, paths: int = 10000,
                     master_seed: int = 0, epsilon: float = 1.0,
                     walks: str = "lattice") -> OracleResult:
    """E[u(t,0)^2] as the exponential moment of the covariance accumulated
    along the difference of two independent paths.

    ``walks="lattice"`` uses the heat-kernel walk dual to the stepping
    scheme (difference jumps sampled per axis, covariance read off the
    lattice table directly), making this the exact second-moment identity of
    the simulated system.  ``walks="gaussian"`` uses Brownian increments
    with trilinear table interpolation (the continuum-flavored variant that
    pairs with fk_beta2_coefficient).

    Increments are drawn per time step from a counter-keyed stream, so the
    estimate at time t is a pathwise prefix of the estimate at any later
    time (making monotonicity in t exact on matched seeds).
    """
    if paths < 1000:
        raise ConfigurationError(f"fk_second_moment needs >= 1000 paths, got {paths}")
    if t <= 0:
        raise ConfigurationError(f"fk_second_moment needs t > 0, got {t}")
    if walks not in ("lattice", "gaussian"):
        raise ConfigurationError(f"walks must be 'lattice' or 'gaussian', got {walks!r}")
    grid = model.grid
    beta_eff = beta * epsilon ** (model.kappa / 2.0 - 1.0)
    inputs = {"t": t, "beta": beta, "epsilon": epsilon, "paths": paths,
              "seed": master_seed, "walks": walks}
    if beta == 0.0:
        return OracleResult("fk_second_moment", 1.0, 1e-16, inputs)
    n_steps = int(round(t / grid.dt))
    table = model.slice_covariance(epsilon)  # the law the engine's noise actually has
    accum = np.zeros(paths)
    if walks == "lattice":
        cdf = _difference_jump_cdf(grid)
        delta = np.zeros((paths, grid.dim), dtype=np.int64)
        for step_i in range(n_steps):
            g = generator(master_seed, 0, step_i, TAG_FK_PATHS)
            jumps = np.minimum(np.searchsorted(cdf, g.random((paths, grid.dim))),
                               grid.n_per_side - 1)
            delta = (delta + jumps) % grid.n_per_side
            accum += table[tuple(delta.T)]
    else:
        dx = grid.dx
        half = grid.box_length / 2.0
        delta = np.zeros((paths, grid.dim))
        sigma = np.sqrt(2.0 * grid.dt)  # variance of a two-path difference increment
        for step_i in range(n_steps):
            g = generator(master_seed, 0, step_i, TAG_FK_PATHS)
            delta = delta + sigma * g.standard_normal((paths, grid.dim))
            wrapped = (delta + half) % grid.box_length - half
            accum += _interp_table_periodic(table, wrapped, dx)
    weights = np.exp(beta_eff**2 * grid.dt * accum)
    value = float(weights.mean())
    se = float(weights.std(ddof=1) / np.sqrt(paths))
    flags = []
    rel = lambda w: w.std(ddof=1) / (np.sqrt(w.size) * w.mean())
    quarter, halfn = paths // 4, paths // 2
    if rel(weights[:quarter]) < rel(weights[:halfn]) < rel(weights):
        flags.append("weak-disorder-violation")
    return OracleResult("fk_second_moment", value, se, inputs, tuple(flags))


def _axis_hat_weights(grid: GridSpec, var: float) -> np.ndarray:
    """E[hat_i(Z)] per lattice node for Z ~ N(0, var): the exact per-axis
    weights of a periodically wrapped piecewise-linear (hat) interpolant."""
    from scipy.special import ndtr
    sigma = np.sqrt(var)
    h = grid.dx
    nodes = grid.axis_coords()

    def triangle_overlap(a: np.ndarray) -> np.ndarray:
        phi = lambda z: np.exp(-z**2 / (2 * var)) / (sigma * np.sqrt(2 * np.pi))
        cdf = lambda z: ndtr(z / sigma)
        left = cdf(a) - cdf(a - h)
        right = cdf(a + h) - cdf(a)
        # int z phi over [c, d] = var (phi(c) - phi(d))
        int_z_left = var * (phi(a - h) - phi(a))
        int_z_right = var * (phi(a) - phi(a + h))
        part_left = left - (a * left - int_z_left) / h
        part_right = right - (int_z_right - a * right) / h
        return part_left + part_right

    w = np.zeros_like(nodes)
    for image in (-1, 0, 1):
        w += triangle_overlap(nodes + image * grid.box_length)
    return w


def fk_beta2_coefficient(t: float, model: CovarianceModel) -> OracleResult:
    """dt * sum_m E[R_interp(Delta at m dt)] over the path-sampling times:
    the beta^2 coefficient of the second-moment expansion in the same time
    and interpolation convention the path estimator uses.

    The Gaussian expectation of the trilinearly interpolated table
    factorizes into exact per-axis hat-function weights, so the spatial part
    is a deterministic tensor contraction (no Monte Carlo anywhere).
    """
    if model.dim != 3:
        raise ConfigurationError("fk_beta2_coefficient implemented for d = 3")
    grid = model.grid
    n_steps = int(round(t / grid.dt))
    table = model.slice_covariance(1.0)
    acc = 0.0
    for m in range(1, n_steps + 1):
        w = _axis_hat_weights(grid, 2.0 * m * grid.dt)
        acc += float(np.einsum("i,j,k,ijk->", w, w, w, table))
    value = acc * grid.dt
    return OracleResult("fk_beta2_coefficient", value, max(abs(value) * 1e-12, 1e-15),
                        {"t": t, "dt": grid.dt})


# ----------------------------------------------------------------------
# Covariance integrals (spatial-decay references)
# ----------------------------------------------------------------------

def _quad_grid_tables(kappa: float, grid: GridSpec, core: float, amplitude: float):
    r2 = grid.radius_sq()
    cov = amplitude**2 * (core + r2) ** (-kappa / 2.0)
    return r2, cov


def _gauss_kernel(grid: GridSpec, r2: np.ndarray, t: float) -> np.ndarray:
    """Band-limited Gaussian: exact Fourier samples e^(-k^2 t / 2), so unit
    lattice mass and exact convolution semigroup at any width."""
    n, length = grid.n_per_side, grid.box_length
    full = 2 * np.pi * np.fft.fftfreq(n) * n / length
    half = 2 * np.pi * np.fft.rfftfreq(n) * n / length
    k2 = np.zeros([n] * (grid.dim - 1) + [n // 2 + 1])
    for axis in range(grid.dim):
        k = half if axis == grid.dim - 1 else full
        sh = [1] * grid.dim
        sh[axis] = len(k)
        k2 = k2 + k.reshape(sh) ** 2
    out = sfft.irfftn(np.exp(-0.5 * t * k2), s=grid.shape, axes=tuple(range(grid.dim)))
    return out / grid.cell_volume


def _convolve(a: np.ndarray, b: np.ndarray, grid: GridSpec) -> np.ndarray:
    spec = sfft.rfftn(a) * sfft.rfftn(b)
    return sfft.irfftn(spec, s=grid.shape, axes=tuple(range(grid.dim))) * grid.cell_volume


def cov_integral_checks(kappa: float, grid: GridSpec, core: float = 0.1,
                        amplitude: float = 1.0,
                        t_grid: tuple[float, ...] = (4.0, 8.0, 16.0, 32.0, 64.0),
                        x_offsets: tuple[float, ...] = (4.0, 8.0, 12.0, 16.0),
                        n_r: int = 16, max_self_error: float = 0.05) -> dict:
    """Quadrature of the three covariance-decay integrals and their rate fits.

    Returns fitted exponents for: heat-kernel smoothing of R at the origin
    (target -kappa against sqrt(t)); the Green-function smoothing in |x|
    (target 2 - kappa); and the time-linearity ratio of the two-kernel
    integral (target 1 at every t).
    """
    if grid.dim != 3:
        raise ConfigurationError("cov_integral_checks implemented for d = 3")
    if max(t_grid) > (grid.box_length / 8.0) ** 2:
        raise ConfigurationError(
            f"largest t {max(t_grid)} needs box >= 8 sqrt(t); have L = {grid.box_length}")
    r2, cov = _quad_grid_tables(kappa, grid, core, amplitude)

    # I1(t, 0) = (P_t * R)(0)
    i1_at_zero = []
    i1_fields = {}
    for t in t_grid:
        field = _convolve(_gauss_kernel(grid, r2, t), cov, grid)
        i1_fields[t] = field
        i1_at_zero.append(float(field[(0, 0, 0)]))
    fit_time = loglog_slope(np.sqrt(np.asarray(t_grid)), i1_at_zero)

    # I2(x) = int_0^inf (P_r * R)(x) dr = ((2 pi |.|)^-1 * R)(x), d = 3
    rad = np.sqrt(r2)
    green = np.empty_like(rad)
    nz = rad > 0
    green[nz] = 1.0 / (2.0 * np.pi * rad[nz])
    r_eq = grid.dx * (3.0 / (4.0 * np.pi)) ** (1.0 / 3.0)
    green[~nz] = 3.0 / (2.0 * r_eq) / (2.0 * np.pi)
    i2_field = _convolve(green, cov, grid)
    xs = []
    i2_vals = []
    for x in x_offsets:
        site = int(round(x / grid.dx))
        xs.append(site * grid.dx)
        i2_vals.append(float(i2_field[(site, 0, 0)]))
    fit_space = loglog_slope(xs, i2_vals)

    # I3(t, x) by midpoint quadrature in r; identity I3 = t * I1
    ratios = []
    self_errs = []
    for t in t_grid[:3]:
        def eval_i3(cells: int) -> float:
            total = 0.0
            dr = t / cells
            for j in range(cells):
                r = (j + 0.5) * dr
                pr = _gauss_kernel(grid, r2, r)
                ptr = _gauss_kernel(grid, r2, t - r)
                total += float(_convolve(pr, _convolve(ptr, cov, grid), grid)[(0, 0, 0)]) * dr
            return total
        i3 = eval_i3(n_r)
        i3_coarse = eval_i3(n_r // 2)
        err = abs(i3 - i3_coarse) / max(abs(i3), 1e-300)
        self_errs.append(err)
        if err > max_self_error:
            raise ResolutionError(f"I3 quadrature self-error {err:.2e} at t={t}")
        ratios.append(i3 / (t * i1_at_zero[list(t_grid).index(t)]))

    return {
        "time_decay": OracleResult("cov_time_decay_exponent", fit_time.slope,
                                   fit_time.stderr, {"kappa": kappa, "t_grid": list(t_grid)}),
        "space_decay": OracleResult("cov_space_decay_exponent", fit_space.slope,
                                    fit_space.stderr, {"kappa": kappa, "x": xs}),
        "time_linearity": OracleResult("cov_time_linearity_ratio",
                                       float(np.mean(ratios)), float(np.max(self_errs)),
                                       {"t_checked": list(t_grid[:3])}),
        "i1_at_zero": i1_at_zero,
        "i2_values": i2_vals,
        "fit_time": fit_time,
        "fit_space": fit_space,
        "i3_ratios": ratios,
    }


# ----------------------------------------------------------------------
# Ito isometry variance targets
# ----------------------------------------------------------------------

def _own_laplacian_symbol(grid: GridSpec) -> np.ndarray:
    # deliberately independent of grid.laplacian_symbol (no shared code path)
    n, dx, length = grid.n_per_side, grid.dx, grid.box_length
    full = 2 * np.pi * np.fft.fftfreq(n) * n / length
    half = 2 * np.pi * np.fft.rfftfreq(n) * n / length
    lam = np.zeros([n] * (grid.dim - 1) + [n // 2 + 1])
    for axis in range(grid.dim):
        k = half if axis == grid.dim - 1 else full
        sh = [1] * grid.dim
        sh[axis] = len(k)
        lam = lam + (2.0 / dx**2) * (1.0 - np.cos(k.reshape(sh) * dx))
    return lam


def limit_kernel_spectrum(grid: GridSpec, kappa: float) -> np.ndarray:
    """Spectrum of the pure-power kernel |v|^-kappa (min-image, PSD-clipped,
    uniform mode removed to match the synthesis convention)."""
    r2 = grid.radius_sq()
    rad = np.sqrt(r2)
    kern = np.empty_like(rad)
    nz = rad > 0
    kern[nz] = rad[nz] ** -kappa
    kern[~nz] = origin_cell_average(0.0, kappa, grid.dx, grid.dim)
    spec = np.clip(sfft.rfftn(kern).real, 0.0, None)
    spec[(0,) * grid.dim] = 0.0
    return spec


def ito_variance_target(model: CovarianceModel, g_values: np.ndarray, t: float,
                        beta: float, epsilon: float | None = 1.0) -> OracleResult:
    """Exact variance of the test-function pairing of the additive equation.

    With V_{m+1} = S_dt(V_m + beta * slice_m), the pairing <V_n, g> is a
    Gaussian sum whose variance is a closed-form spectral expression (the
    discrete Ito isometry); ``epsilon=None`` uses the pure-power limit
    kernel |v|^-kappa instead of the model's scale-eps table.
    """
    grid = model.grid
    n_steps = int(round(t / grid.dt))
    if abs(n_steps * grid.dt - t) > 1e-9:
        raise ConfigurationError(f"t = {t} is not a multiple of dt = {grid.dt}")
    if beta == 0.0:
        return OracleResult("ito_variance_target", 0.0, 1e-16,
                            {"t": t, "beta": beta, "epsilon": epsilon})
    spec = (limit_kernel_spectrum(grid, model.kappa) * model.amplitude**2
            if epsilon is None else model.slice_spectrum(epsilon))
    lam = _own_laplacian_symbol(grid)
    ghat2 = np.abs(sfft.rfftn(np.asarray(g_values).reshape(grid.shape))) ** 2
    # sum over propagation counts: sum_{m=1}^{n} e^(-lam dt m)
    q = np.exp(-lam * grid.dt)
    with np.errstate(divide="ignore", invalid="ignore"):
        geom = np.where(lam > 0, q * (1.0 - q**n_steps) / (1.0 - q), float(n_steps))
    weights = np.full(grid.shape[:-1] + (grid.n_per_side // 2 + 1,), 2.0)
    weights[..., 0] = 1.0
    weights[..., -1] = 1.0
    var = (beta**2 * grid.dt * grid.cell_volume**2 / grid.n_sites
           * float(np.sum(weights * spec * ghat2 * geom)))
    return OracleResult("ito_variance_target", var, max(var * 1e-13, 1e-300),
                        {"t": t, "beta": beta, "epsilon": epsilon if epsilon is not None else "limit"})
