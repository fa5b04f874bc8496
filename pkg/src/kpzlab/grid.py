"""Periodic lattice geometry and the exact spectral heat semigroup.

All fields live on a d-dimensional torus of side ``box_length`` sampled at
``n_per_side`` points per dimension.  The heat semigroup is applied by exact
exponentiation of the standard second-order discrete Laplacian symbol, so
applications compose exactly: apply(a) then apply(b) equals apply(a+b).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

_DT_SAFETY_FACTOR = 1.2
_REL_TOL = 1e-9


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """Periodic lattice: ``dim`` dimensions, ``n_per_side`` sites per side,
    physical side ``box_length``, time step ``dt``.

    ``dt`` must respect dt <= dx^2/(2 dim) * safety; the semigroup itself is
    exact for any duration, but noise increments are applied in an Euler
    fashion between semigroup applications.
    """

    dim: int
    n_per_side: int
    box_length: float
    dt: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not _is_power_of_two(self.n_per_side):
            raise ValueError(f"n_per_side must be a power of two, got {self.n_per_side}")
        if self.box_length <= 0:
            raise ValueError(f"box_length must be positive, got {self.box_length}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        bound = self.dx**2 / (2 * self.dim) * _DT_SAFETY_FACTOR
        if self.dt > bound * (1 + _REL_TOL):
            raise ValueError(
                f"dt={self.dt} violates stability bound dx^2/(2d)*{_DT_SAFETY_FACTOR} = {bound:.6g}"
            )

    @property
    def dx(self) -> float:
        return self.box_length / self.n_per_side

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_per_side,) * self.dim

    @property
    def n_sites(self) -> int:
        return self.n_per_side**self.dim

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    def axis_coords(self) -> np.ndarray:
        """Minimum-image signed coordinates along one axis."""
        idx = np.arange(self.n_per_side)
        return np.where(idx <= self.n_per_side // 2, idx, idx - self.n_per_side) * self.dx

    def radius_sq(self) -> np.ndarray:
        """|x|^2 under the minimum-image convention, shaped like the lattice."""
        c = self.axis_coords()
        r2 = np.zeros(self.shape)
        for axis in range(self.dim):
            sh = [1] * self.dim
            sh[axis] = self.n_per_side
            r2 = r2 + (c.reshape(sh)) ** 2
        return r2

    def site_index(self, site: tuple[int, ...]) -> tuple[int, ...]:
        if len(site) != self.dim:
            raise ValueError(f"site {site} does not match dim {self.dim}")
        return tuple(int(s) % self.n_per_side for s in site)


@dataclass(frozen=True)
class FieldFrame:
    """One spatial scalar field at a fixed time.

    ``values`` is the flat (lexicographic, C-order) array of length
    n_per_side**dim; it is stored read-only so frames can be shared freely
    between workers.
    """

    grid: GridSpec
    time: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if arr.size != self.grid.n_sites:
            raise ValueError(f"values has {arr.size} entries, grid needs {self.grid.n_sites}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("FieldFrame values must all be finite")
        arr = arr.copy() if arr.flags.writeable and arr.base is None else np.array(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def reshaped(self) -> np.ndarray:
        """Read-only view shaped as the lattice."""
        return self.values.reshape(self.grid.shape)

    def lattice_sum(self) -> float:
        """cell_volume * sum(values), the lattice integral."""
        return float(self.values.sum() * self.grid.cell_volume)

    def at_site(self, site: tuple[int, ...]) -> float:
        return float(self.reshaped()[self.grid.site_index(site)])


def constant_frame(grid: GridSpec, time: float, value: float) -> FieldFrame:
    return FieldFrame(grid, time, np.full(grid.n_sites, float(value)))


def delta_frame(grid: GridSpec, time: float, site: tuple[int, ...]) -> FieldFrame:
    """Unit-mass lattice delta: value 1/dx^d at one site, 0 elsewhere."""
    vals = np.zeros(grid.shape)
    vals[grid.site_index(site)] = 1.0 / grid.cell_volume
    return FieldFrame(grid, time, vals.reshape(-1))


def heat_kernel(t: float, x, d: int | None = None) -> np.ndarray | float:
    """Gaussian heat kernel of the generator Laplacian/2: variance t per axis.

    ``x`` is a displacement with the last axis of length d (or a scalar for
    d = 1); returns (2 pi t)^(-d/2) exp(-|x|^2 / (2t)).
    """
    if t <= 0:
        raise ValueError(f"heat_kernel needs t > 0, got {t}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        if d not in (None, 1):
            raise ValueError("scalar displacement implies d = 1")
        d = 1
        r2 = x**2
    else:
        if d is None:
            d = x.shape[-1]
        elif x.shape[-1] != d:
            raise ValueError(f"displacement last axis {x.shape[-1]} != d = {d}")
        r2 = np.sum(x**2, axis=-1)
    out = (2 * np.pi * t) ** (-d / 2) * np.exp(-r2 / (2 * t))
    return float(out) if np.ndim(out) == 0 else out


def bridge_kernel(s: float, t: float, x, y, r: float, z, d: int | None = None):
    """Transition density at (r, z) of the Brownian bridge from y at time s
    to x at time t: P_{(r-s)(t-r)/(t-s)}(z - y - ((r-s)/(t-s)) (x-y)).
    """
    if not (s < r < t):
        raise ValueError(f"bridge_kernel needs s < r < t, got s={s}, r={r}, t={t}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    frac = (r - s) / (t - s)
    var = (r - s) * (t - r) / (t - s)
    return heat_kernel(var, z - y - frac * (x - y), d)


_SYMBOL_CACHE: dict[GridSpec, np.ndarray] = {}
_MULT_CACHE: dict[tuple[GridSpec, float], np.ndarray] = {}
_CACHE_LOCK = threading.Lock()


def laplacian_symbol(grid: GridSpec) -> np.ndarray:
    """Symbol of the second-order discrete Laplacian in rfftn layout:
    (2/dx^2) sum_j (1 - cos(2 pi k_j dx / L)).
    """
    with _CACHE_LOCK:
        cached = _SYMBOL_CACHE.get(grid)
    if cached is not None:
        return cached
    n, dx, length = grid.n_per_side, grid.dx, grid.box_length
    full = 2 * np.pi * np.fft.fftfreq(n) * n / length
    half = 2 * np.pi * np.fft.rfftfreq(n) * n / length
    shape = [n] * (grid.dim - 1) + [n // 2 + 1]
    lam = np.zeros(shape)
    for axis in range(grid.dim):
        k = half if axis == grid.dim - 1 else full
        sh = [1] * grid.dim
        sh[axis] = len(k)
        lam = lam + (2.0 / dx**2) * (1.0 - np.cos(k.reshape(sh) * dx))
    lam.flags.writeable = False
    with _CACHE_LOCK:
        _SYMBOL_CACHE[grid] = lam
    return lam


def semigroup_multiplier(grid: GridSpec, duration: float) -> np.ndarray:
    key = (grid, float(duration))
    with _CACHE_LOCK:
        cached = _MULT_CACHE.get(key)
    if cached is not None:
        return cached
    mult = np.exp(-duration * laplacian_symbol(grid) / 2.0)
    mult.flags.writeable = False
    with _CACHE_LOCK:
        _MULT_CACHE[key] = mult
    return mult


def semigroup_apply_array(values_nd: np.ndarray, grid: GridSpec, duration: float) -> np.ndarray:
    """Heat semigroup on a lattice-shaped array (internal fast path)."""
    if duration < 0:
        raise ValueError(f"semigroup duration must be >= 0, got {duration}")
    if duration == 0:
        return values_nd
    spec = sfft.rfftn(values_nd)
    spec *= semigroup_multiplier(grid, duration)
    return sfft.irfftn(spec, s=grid.shape, axes=tuple(range(grid.dim)))


def semigroup_apply(frame: FieldFrame, duration: float) -> FieldFrame:
    """Apply exp(duration * Laplacian / 2) spectrally.

    Exactly mass preserving (zero-mode multiplier is 1) and exactly
    compositional in duration; duration 0 returns the frame unchanged.
    """
    if duration < 0:
        raise ValueError(f"semigroup duration must be >= 0, got {duration}")
    if duration == 0:
        return frame
    out = semigroup_apply_array(frame.reshaped(), frame.grid, duration)
    return FieldFrame(frame.grid, frame.time, out.reshape(-1))
