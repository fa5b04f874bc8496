"""Time stepping of the multiplicative stochastic heat equation.

One update = multiply by the compensated exponential noise factor, then one
exact semigroup application over dt (noise then diffusion, the mild-form
ordering).  The compensator uses the exact per-site slice variance, so the
noise factor has mean one exactly, positivity is exact, and for flat initial
data every site is a mean-one martingale in the step index.

Runs at observation scale eps solve the diffusively rescaled equation: the
multiplicative coupling is beta * eps^(kappa/2 - 1) and the noise slice has
covariance dt * eps^(-kappa) R(./eps).  At eps = 1 this is the bare equation.
After the log rescaling of the height field, the accumulated compensator
equals the standard diverging height renormalisation, so no further
subtraction is needed downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.fft as sfft

from .errors import ContractError, SimulationDivergedError
from .grid import FieldFrame, GridSpec, delta_frame, semigroup_multiplier
from .noise import CovarianceModel, NoiseSlice, synthesize_slice_values
from .rng import TAG_NOISE, SeedLineage, white_field

InitKind = Literal["ones", "delta", "exp_height"]


def effective_coupling(beta: float, epsilon: float, kappa: float) -> float:
    return beta * epsilon ** (kappa / 2.0 - 1.0)


def step(frame: FieldFrame, noise: NoiseSlice, beta: float, model: CovarianceModel) -> FieldFrame:
    """One update: semigroup_apply(frame * exp(beta*slice - compensator), dt).

    ``beta`` is the multiplicative coupling actually applied (already
    rescaled by the caller when the run is at scale eps < 1).
    """
    grid = frame.grid
    if noise.frame.grid != grid:
        raise ContractError("noise slice grid does not match the field grid")
    rate = model.slice_variance_rate(noise.epsilon)
    factor = np.exp(beta * noise.frame.reshaped() - 0.5 * beta**2 * grid.dt * rate)
    out = _half_step(frame.reshaped() * factor, grid)
    return FieldFrame(grid, frame.time + grid.dt, out.reshape(-1))


def _half_step(values_nd: np.ndarray, grid: GridSpec) -> np.ndarray:
    spec = sfft.rfftn(values_nd)
    spec *= semigroup_multiplier(grid, grid.dt)
    return sfft.irfftn(spec, s=grid.shape, axes=tuple(range(grid.dim)))


@dataclass
class RunState:
    """One evolving field inside a coupled stepping loop.

    ``multiplicative`` states follow the compensated-exponential update;
    additive states follow V <- S_dt(V + beta * slice) (the discrete
    stochastic convolution, exact for the additive equation).
    ``start_step`` is the absolute step index at which the state activates.
    """

    name: str
    epsilon: float
    beta_eff: float
    init_values: np.ndarray
    start_step: int
    multiplicative: bool = True
    values: np.ndarray | None = None
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)


def run_coupled(model: CovarianceModel, states: list[RunState], end_step: int,
                master_seed: int, replica: int,
                snapshot_steps: set[int] | None = None) -> None:
    """Advance all states to ``end_step`` under one shared noise realization.

    Noise for step i is keyed by (master_seed, replica, i) only, so any two
    runs (or the same run re-executed on another worker) sharing a lineage
    see identical slices.  Distinct epsilons filter the same white field.
    """
    grid = model.grid
    if not states:
        return
    first = min(s.start_step for s in states)
    snapshot_steps = snapshot_steps or set()
    mult = semigroup_multiplier(grid, grid.dt)
    axes = tuple(range(grid.dim))
    rates = {}
    for s in states:
        s.values = None
        rates.setdefault(s.epsilon, model.slice_variance_rate(s.epsilon))

    for s in states:
        if s.start_step == end_step:  # degenerate run: snapshot-at-start only
            s.values = s.init_values.copy()
            if end_step in snapshot_steps:
                s.snapshots[end_step] = s.values.copy()

    for i in range(first, end_step):
        for s in states:
            if s.start_step == i:
                s.values = s.init_values.copy()
                if i in snapshot_steps:
                    s.snapshots[i] = s.values.copy()
        w = white_field(grid.shape, master_seed, replica, i, TAG_NOISE)
        wspec = sfft.rfftn(w)
        slices: dict[float, np.ndarray] = {}
        for s in states:
            if s.values is None:
                continue
            sl = slices.get(s.epsilon)
            if sl is None:
                sl = sfft.irfftn(np.sqrt(grid.dt * model.slice_spectrum(s.epsilon)) * wspec,
                                 s=grid.shape, axes=axes)
                slices[s.epsilon] = sl
            with np.errstate(invalid="ignore", over="ignore"):  # guard below reports
                if s.multiplicative:
                    upd = s.values * np.exp(
                        s.beta_eff * sl - 0.5 * s.beta_eff**2 * grid.dt * rates[s.epsilon])
                else:
                    upd = s.values + s.beta_eff * sl
                spec = sfft.rfftn(upd)
                spec *= mult
                s.values = sfft.irfftn(spec, s=grid.shape, axes=axes)
            if not np.isfinite(s.values[(0,) * grid.dim]) or not np.all(np.isfinite(s.values)):
                raise SimulationDivergedError(i + 1, (i + 1) * grid.dt)
        if (i + 1) in snapshot_steps:
            for s in states:
                if s.values is not None:
                    s.snapshots[i + 1] = s.values.copy()


@dataclass(frozen=True)
class SheRun:
    """Snapshots of one solution of the (rescaled) multiplicative equation."""

    grid: GridSpec
    model: CovarianceModel
    beta: float
    epsilon: float
    start_time: float
    init_kind: InitKind
    lineage: SeedLineage
    trajectory: list[tuple[float, FieldFrame]]
    renorm_rate: float
    init_site: tuple[int, ...] | None = None

    def frame_at(self, time: float) -> FieldFrame:
        for t, fr in self.trajectory:
            if abs(t - time) < 1e-9:
                return fr
        raise ContractError(f"no snapshot at t = {time}; have {[t for t, _ in self.trajectory]}")


def _step_of(time: float, dt: float) -> int:
    k = round(time / dt)
    if abs(k * dt - time) > 1e-9 * max(1.0, abs(time)):
        raise ContractError(f"time {time} is not on the step grid (dt = {dt})")
    return int(k)


def solve(model: CovarianceModel, beta: float, snapshot_times: list[float],
          master_seed: int, replica: int, epsilon: float = 1.0,
          start_time: float = 0.0, init_kind: InitKind = "ones",
          init_site: tuple[int, ...] | None = None,
          init_height: FieldFrame | None = None) -> SheRun:
    """Run one trajectory and record the requested snapshots.

    Deterministic given (master_seed, replica): re-running reproduces the
    trajectory bit-for-bit on any worker.
    """
    grid = model.grid
    kappa = model.kappa
    start_step = _step_of(start_time, grid.dt)
    snap_steps = sorted({_step_of(t, grid.dt) for t in snapshot_times})
    if snap_steps and snap_steps[0] < start_step:
        raise ContractError("snapshot before start time")

    if init_kind == "ones":
        init = np.ones(grid.shape)
    elif init_kind == "delta":
        if init_site is None:
            raise ContractError("delta initial data needs init_site")
        init = delta_frame(grid, start_time, init_site).reshaped().copy()
    elif init_kind == "exp_height":
        if init_height is None:
            raise ContractError("exp_height initial data needs init_height")
        init = np.exp(epsilon ** (kappa / 2.0 - 1.0) * init_height.reshaped())
    else:
        raise ContractError(f"unknown init kind {init_kind!r}")

    beta_eff = effective_coupling(beta, epsilon, kappa)
    state = RunState(name="u", epsilon=epsilon, beta_eff=beta_eff,
                     init_values=init, start_step=start_step)
    end_step = max(snap_steps) if snap_steps else start_step
    run_coupled(model, [state], end_step, master_seed, replica, set(snap_steps))

    trajectory = [(k * grid.dt, FieldFrame(grid, k * grid.dt, state.snapshots[k].reshape(-1)))
                  for k in snap_steps]
    return SheRun(
        grid=grid, model=model, beta=beta, epsilon=epsilon, start_time=start_time,
        init_kind=init_kind, lineage=SeedLineage(master_seed, replica, start_step),
        trajectory=trajectory,
        renorm_rate=0.5 * beta_eff**2 * model.slice_variance_rate(epsilon),
        init_site=init_site,
    )


def green_function(model: CovarianceModel, beta: float, s: float, y: tuple[int, ...],
                   t_list: list[float], master_seed: int, replica: int,
                   epsilon: float = 1.0) -> SheRun:
    """Delta-start run w_{s,y}; shares noise with any co-lineage run."""
    if any(t < s for t in t_list):
        raise ContractError("green_function snapshot before the source time")
    return solve(model, beta, t_list, master_seed, replica, epsilon=epsilon,
                 start_time=s, init_kind="delta", init_site=y)


@dataclass(frozen=True)
class MassSeries:
    """Total lattice mass of a Green's-function run at each snapshot."""

    source_time: float
    source_site: tuple[int, ...]
    times: list[float]
    values: list[float]


def mass_process(run: SheRun) -> MassSeries:
    if run.init_kind != "delta":
        raise ContractError("mass_process needs a delta-start run")
    times = [t for t, _ in run.trajectory]
    values = [fr.lattice_sum() for _, fr in run.trajectory]
    return MassSeries(source_time=run.start_time, source_site=run.init_site,
                      times=times, values=values)


def cole_hopf_height(run: SheRun) -> list[tuple[float, FieldFrame]]:
    """Height frames eps^(1 - kappa/2) log u along the trajectory.

    The diverging renormalisation is already absorbed by the per-step
    compensator (recorded as run.renorm_rate); the returned field is the
    centered height up to the deterministic drift of E[log u].
    """
    out = []
    scale = run.epsilon ** (1.0 - run.model.kappa / 2.0)
    for t, fr in run.trajectory:
        vals = fr.values
        if np.any(vals <= 0):
            raise ContractError("cole_hopf_height needs strictly positive frames")
        out.append((t, FieldFrame(run.grid, t, scale * np.log(vals))))
    return out


def log_noise_factor(noise: NoiseSlice, beta: float, model: CovarianceModel) -> np.ndarray:
    """log of the multiplicative factor applied in one step (for law checks)."""
    rate = model.slice_variance_rate(noise.epsilon)
    return beta * noise.frame.reshaped() - 0.5 * beta**2 * noise.frame.grid.dt * rate
