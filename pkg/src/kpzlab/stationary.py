"""Long-lookback estimation of the stationary field and derived constants.

The solution started from flat data in the far past converges to a
stationary random field; its samples feed the log-mean constant (strictly
negative) and the effective-variance functional E[Z Phi'(Z)] that governs
large-scale fluctuations of transformed solutions.  The backward-in-time
partner field is never simulated directly: it is reached through the
total-mass process of Green's-function runs, equal in law to the forward
field at matched time separation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError
from .grid import GridSpec
from .noise import CovarianceModel
from .she import RunState, effective_coupling, green_function, mass_process, run_coupled
from .stats import SlopeFit, jackknife_se, ks_two_sample, loglog_slope, mean_with_se


@dataclass(frozen=True)
class TransformSpec:
    """A transformation of the solution with analytic derivative.

    Admissible transforms have |Phi| + |Phi'| + |Phi''| <= M (z^-q + z^q) on
    the positive axis; (M, q) are recorded for the envelope check.
    """

    name: str
    func: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    second: Callable[[np.ndarray], np.ndarray]
    envelope_m: float
    envelope_q: float

    def envelope_ok(self, z_lo: float = 1e-6, z_hi: float = 1e6, n: int = 200) -> bool:
        z = np.geomspace(z_lo, z_hi, n)
        total = np.abs(self.func(z)) + np.abs(self.deriv(z)) + np.abs(self.second(z))
        return bool(np.all(total <= self.envelope_m * (z**-self.envelope_q + z**self.envelope_q)))


def transform(name: str, power: float | None = None) -> TransformSpec:
    if name == "log":
        return TransformSpec("log", np.log, lambda z: 1.0 / z, lambda z: -1.0 / z**2,
                             envelope_m=2.0, envelope_q=2.0)
    if name == "identity":
        return TransformSpec("identity", lambda z: z, lambda z: np.ones_like(z),
                             lambda z: np.zeros_like(z), envelope_m=2.0, envelope_q=1.0)
    if name == "power":
        if power is None or power <= 0:
            raise ContractError("power transform needs a positive exponent")
        q = float(power)
        return TransformSpec(f"power{q:g}", lambda z: z**q, lambda z: q * z ** (q - 1),
                             lambda z: q * (q - 1) * z ** (q - 2),
                             envelope_m=max(2.0, q * q), envelope_q=max(q, 2.0))
    raise ContractError(f"unknown transform {name!r}")


def default_probes(grid: GridSpec) -> list[tuple[int, ...]]:
    """Probe sites spaced half a box apart (>= L/4 in every direction)."""
    h = grid.n_per_side // 2
    probes = []
    for bits in range(2**grid.dim):
        probes.append(tuple(h if (bits >> a) & 1 else 0 for a in range(grid.dim)))
    return probes


@dataclass(frozen=True)
class StationaryEstimate:
    """Samples of the lookback solution at time 0 at decorrelated probes."""

    lookback: float
    samples: np.ndarray          # shape (replicas, n_probes)
    beta: float

    @property
    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1)

    @property
    def mean(self) -> float:
        return float(self.flat.mean())

    @property
    def mean_se(self) -> float:
        # cluster by replica: probe values within a replica are correlated
        per_rep = self.samples.mean(axis=1)
        return float(per_rep.std(ddof=1) / np.sqrt(per_rep.size))

    @property
    def variance(self) -> float:
        return float(self.flat.var(ddof=1))

    @property
    def c_hat(self) -> float:
        return float(np.log(self.flat).mean())

    @property
    def c_hat_se(self) -> float:
        per_rep = np.log(self.samples).mean(axis=1)
        return float(per_rep.std(ddof=1) / np.sqrt(per_rep.size))


def estimate_stationary(model: CovarianceModel, beta: float, lookbacks: list[float],
                        replicas: int, master_seed: int,
                        probes: list[tuple[int, ...]] | None = None,
                        ) -> tuple[dict[float, StationaryEstimate], dict[float, np.ndarray]]:
    """Run flat-start solutions from each lookback under one shared noise.

    Returns per-lookback estimates plus the pathwise differences between
    consecutive lookbacks (for the convergence-rate fit).  All lookbacks in
    one replica share the same noise realization, keyed by absolute step.
    """
    grid = model.grid
    if sorted(lookbacks) != list(lookbacks):
        raise ContractError("lookbacks must be increasing")
    probes = probes or default_probes(grid)
    pidx = tuple(np.array([p[a] for p in probes]) for a in range(grid.dim))
    steps = {lb: int(round(lb / grid.dt)) for lb in lookbacks}
    beta_eff = effective_coupling(beta, 1.0, model.kappa)

    values = {lb: np.empty((replicas, len(probes))) for lb in lookbacks}
    for rep in range(replicas):
        states = [RunState(name=f"lb{lb}", epsilon=1.0, beta_eff=beta_eff,
                           init_values=np.ones(grid.shape), start_step=-steps[lb])
                  for lb in lookbacks]
        run_coupled(model, states, 0, master_seed, rep, snapshot_steps={0})
        for lb, st in zip(lookbacks, states):
            values[lb][rep] = st.snapshots[0][pidx]

    estimates = {lb: StationaryEstimate(lookback=lb, samples=values[lb], beta=beta)
                 for lb in lookbacks}
    diffs = {lookbacks[j]: values[lookbacks[j]] - values[lookbacks[j + 1]]
             for j in range(len(lookbacks) - 1)}
    return estimates, diffs


def stationarity_rate(diffs: dict[float, np.ndarray]) -> SlopeFit:
    """Log-log fit of the pathwise lookback-to-doubled-lookback L2 norms."""
    lbs = sorted(diffs)
    norms = [float(np.sqrt((diffs[lb] ** 2).mean())) for lb in lbs]
    return loglog_slope(lbs, norms)


def effective_variance(spec: TransformSpec, est: StationaryEstimate) -> tuple[float, float]:
    """Sample mean of Z Phi'(Z) with replica-level jackknife standard error."""
    z = est.samples
    if np.any(z <= 0):
        raise ContractError("effective_variance needs strictly positive samples")
    per_rep = (z * spec.deriv(z)).mean(axis=1)
    return jackknife_se(per_rep)


@dataclass(frozen=True)
class DualityReport:
    t_minus_s: float
    mass_mean: float
    mass_se: float
    forward_mean: float
    forward_se: float
    ks_statistic: float
    ks_pvalue: float
    n_per_side_samples: int


def backward_field_check(model: CovarianceModel, beta: float, s: float,
                         y: tuple[int, ...], t_list: list[float], replicas: int,
                         master_seed: int) -> list[DualityReport]:
    """Mass process of Green's-function runs vs forward flat-start samples.

    The two ensembles use disjoint random streams, so the two-sample test
    sees independent draws on both sides.  Equality in law holds at matched
    time separation (time reversal plus stationarity of the noise).
    """
    if replicas < 100:
        raise ContractError(f"backward_field_check needs >= 100 samples per side, got {replicas}")
    grid = model.grid
    probe = (0,) * grid.dim

    mass_samples = {t: np.empty(replicas) for t in t_list}
    for rep in range(replicas):
        run = green_function(model, beta, s, y, t_list, master_seed, rep)
        series = mass_process(run)
        for t, v in zip(series.times, series.values):
            mass_samples[t][rep] = v

    fwd_samples = {t: np.empty(replicas) for t in t_list}
    horizon = [t - s for t in t_list]
    beta_eff = effective_coupling(beta, 1.0, model.kappa)
    steps = {h: int(round(h / grid.dt)) for h in horizon}
    fwd_offset = 1_000_000  # disjoint replica block for the forward stream
    for rep in range(replicas):
        st = RunState(name="fwd", epsilon=1.0, beta_eff=beta_eff,
                      init_values=np.ones(grid.shape), start_step=0)
        run_coupled(model, [st], max(steps.values()), master_seed, fwd_offset + rep,
                    snapshot_steps=set(steps.values()))
        for h in horizon:
            fwd_samples[h][rep] = st.snapshots[steps[h]][probe]

    reports = []
    for t in t_list:
        h = t - s
        m_mean, m_se = mean_with_se(mass_samples[t])
        f_mean, f_se = mean_with_se(fwd_samples[h])
        ks_stat, ks_p = ks_two_sample(mass_samples[t], fwd_samples[h])
        reports.append(DualityReport(
            t_minus_s=h, mass_mean=m_mean, mass_se=m_se,
            forward_mean=f_mean, forward_se=f_se,
            ks_statistic=ks_stat, ks_pvalue=ks_p, n_per_side_samples=replicas))
    return reports
