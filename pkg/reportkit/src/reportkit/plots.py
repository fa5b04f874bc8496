"""Deterministic batch plots with machine-written captions."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

KINDS = ("rate", "scatter", "covariance", "qq")

_STYLE = {
    "figure.figsize": (6.0, 4.5),
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
}


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class PlotSpec:
    kind: str
    inputs: tuple[str, ...]
    out_dir: str
    target_exponent: float | None = None
    target_label: str | None = None
    epsilon: float | None = None
    transform: str | None = None
    column: str | None = None
    x_col: str = "x"
    y_col: str = "y"
    stem: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ReportError(f"unknown plot kind {self.kind!r}; valid: {', '.join(KINDS)}")
        if not self.inputs:
            raise ReportError("plot spec needs at least one input file")


def _read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    return header, rows


def _need_columns(header: list[str], needed: list[str], path: str) -> dict[str, int]:
    missing = [c for c in needed if c not in header]
    if missing:
        raise ReportError(
            f"{path}: expected columns {needed}, found {header} (missing {missing})")
    return {c: header.index(c) for c in needed}


def _fit_loglog(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    n = x.size
    if n > 2:
        resid = ly - (slope * lx + intercept)
        se = float(np.sqrt((resid**2).sum() / (n - 2) / ((lx - lx.mean()) ** 2).sum()))
    else:
        se = 0.0
    return float(slope), float(intercept), se


def _caption_path(spec: PlotSpec) -> tuple[str, str]:
    stem = spec.stem or spec.kind
    return (os.path.join(spec.out_dir, f"{stem}.png"),
            os.path.join(spec.out_dir, f"{stem}_caption.txt"))


def _norm_ppf(p: np.ndarray) -> np.ndarray:
    """Standard normal quantile (Acklam's rational approximation)."""
    a = [-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00]
    b = [-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01]
    c = [-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00]
    d = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00]
    p = np.asarray(p, dtype=float)
    out = np.empty_like(p)
    plow, phigh = 0.02425, 1 - 0.02425
    lo = p < plow
    hi = p > phigh
    mid = ~(lo | hi)
    if lo.any():
        q = np.sqrt(-2 * np.log(p[lo]))
        out[lo] = ((((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
                   / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1))
    if hi.any():
        q = np.sqrt(-2 * np.log(1 - p[hi]))
        out[hi] = -((((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
                    / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1))
    if mid.any():
        q = p[mid] - 0.5
        r = q * q
        out[mid] = ((((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
                    / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1))
    return out


def _render_rate(spec: PlotSpec, ax) -> str:
    path = spec.inputs[0]
    target = spec.target_exponent
    label = spec.target_label or "target"
    if path.endswith(".json"):
        with open(path) as fh:
            data = json.load(fh)
        if "norms" in data:  # defect-rate report
            pts = {}
            for key, val in data["norms"].items():
                lag, off = key.split("|")
                if float(off) == 0.0:
                    pts[float(lag)] = float(val)
            fit = data.get("rate_fit") or {}
            if target is None and fit.get("mu_target") is not None:
                target = -fit["mu_target"]
                label = spec.target_label or "-mu"
        elif "points" in data:
            pts = {float(k): float(v) for k, v in data["points"].items()}
            if target is None and "target" in data:
                target = float(data["target"])
                label = spec.target_label or data.get("target_label", "target")
        else:
            raise ReportError(f"{path}: JSON rate input needs 'norms' or 'points'")
        xs = np.array(sorted(pts))
        ys = np.array([pts[x] for x in xs])
    else:
        header, rows = _read_csv(path)
        idx = _need_columns(header, [spec.x_col, spec.y_col], path)
        xs = np.array([float(r[idx[spec.x_col]]) for r in rows])
        ys = np.array([float(r[idx[spec.y_col]]) for r in rows])
    if xs.size < 2:
        raise ReportError(f"{path}: rate plot needs at least two points")
    slope, intercept, se = _fit_loglog(xs, ys)
    ax.loglog(xs, ys, "o", label="data")
    xf = np.geomspace(xs.min(), xs.max(), 50)
    ax.loglog(xf, np.exp(intercept) * xf**slope, "-", label=f"fit slope {slope:.3f}")
    if target is not None:
        ax.loglog(xf, ys[0] * (xf / xs[0]) ** target, "--",
                  label=f"{label} = {target:.3f}")
    ax.set_xlabel(spec.x_col)
    ax.set_ylabel(spec.y_col)
    ax.legend()
    if target is not None:
        return f"slope {slope:.3f} (target {label} = {target:.3f}); fit se {se:.3f}"
    return f"slope {slope:.3f} (no target); fit se {se:.3f}"


def _render_scatter(spec: PlotSpec, ax) -> str:
    path = spec.inputs[0]
    header, rows = _read_csv(path)
    idx = _need_columns(header, ["epsilon", "t", "replica", "Y", "U", "transform"], path)
    eps_all = sorted({float(r[idx["epsilon"]]) for r in rows})
    eps = spec.epsilon if spec.epsilon is not None else eps_all[0]
    name = spec.transform or sorted({r[idx["transform"]] for r in rows})[0]
    ys, us = [], []
    for r in rows:
        if float(r[idx["epsilon"]]) == eps and r[idx["transform"]] == name:
            ys.append(float(r[idx["Y"]]))
            us.append(float(r[idx["U"]]))
    ys, us = np.array(ys), np.array(us)
    if ys.size == 0:
        raise ReportError(f"{path}: no rows match epsilon={eps}, transform={name}")
    ax.plot(us, ys, ".", ms=3, alpha=0.7)
    ax.set_xlabel("additive pairing U")
    ax.set_ylabel("transformed pairing Y")
    var_u = float(us.var()) if us.size > 1 else 0.0
    ref = spec.target_exponent
    if var_u == 0.0:
        note = "degenerate fit: zero-variance pairings"
        if ref is not None:
            note += f" (reference slope {ref:.3f} not drawn)"
        return f"eps={eps:g}, transform={name}: {note}"
    slope = float(np.cov(ys, us, ddof=1)[0, 1] / us.var(ddof=1))
    xf = np.linspace(us.min(), us.max(), 10)
    ax.plot(xf, slope * xf, "-", label=f"regression slope {slope:.3f}")
    caption = f"eps={eps:g}, transform={name}: regression slope {slope:.3f}"
    if ref is not None:
        ax.plot(xf, ref * xf, "--", label=f"reference {ref:.3f}")
        caption += f" (reference nu = {ref:.3f})"
    ax.legend()
    return caption


def _render_covariance(spec: PlotSpec, ax) -> str:
    csv_path = spec.inputs[0]
    header, rows = _read_csv(csv_path)
    idx = _need_columns(header, ["epsilon", "lag", "replica", "cov_product"], csv_path)
    summary = {}
    if len(spec.inputs) > 1:
        with open(spec.inputs[1]) as fh:
            summary = json.load(fh).get("cells", {})
    eps_all = sorted({float(r[idx["epsilon"]]) for r in rows})
    eps = spec.epsilon if spec.epsilon is not None else eps_all[0]
    acc: dict[str, list[float]] = {}
    for r in rows:
        if float(r[idx["epsilon"]]) == eps:
            acc.setdefault(r[idx["lag"]], []).append(float(r[idx["cov_product"]]))
    if not acc:
        raise ReportError(f"{csv_path}: no rows at epsilon={eps}")
    lags, means, ses, targets = [], [], [], []
    for lag, vals in sorted(acc.items(), key=lambda kv: kv[0]):
        sites = [int(x) for x in lag.split("|")]
        dist = math.sqrt(sum(s * s for s in sites))
        if dist == 0:
            continue
        lags.append(dist)
        arr = np.array(vals)
        means.append(arr.mean())
        ses.append(arr.std(ddof=1) / np.sqrt(arr.size) if arr.size > 1 else 0.0)
        cell = summary.get(f"{eps:g}|{lag}", {})
        targets.append(cell.get("target"))
    order = np.argsort(lags)
    lags = np.array(lags)[order]
    means = np.array(means)[order]
    ses = np.array(ses)[order]
    ax.errorbar(lags, means, yerr=4 * ses, fmt="o", label="empirical (4 SE)")
    if any(t is not None for t in targets):
        tg = np.array([t for t in targets], dtype=float)[order]
        ax.plot(lags, tg, "s", mfc="none", label="model table")
    worst = 0.0
    for m, s, t in zip(means, ses, [t for t in targets]):
        if t is not None and s > 0:
            worst = max(worst, abs(m - t) / s)
    ax.set_xlabel("lag distance (site units)")
    ax.set_ylabel("slice covariance")
    ax.legend()
    return (f"eps={eps:g}: empirical slice covariance vs model table at "
            f"{len(lags)} lags; worst |z| = {worst:.2f}")


def _render_qq(spec: PlotSpec, ax) -> str:
    path = spec.inputs[0]
    header, rows = _read_csv(path)
    column = spec.column or "Y"
    needed = [column]
    filters = {}
    if "epsilon" in header and spec.epsilon is not None:
        needed.append("epsilon")
        filters["epsilon"] = spec.epsilon
    if "transform" in header and spec.transform is not None:
        needed.append("transform")
        filters["transform"] = spec.transform
    idx = _need_columns(header, needed, path)
    vals = []
    for r in rows:
        if "epsilon" in filters and float(r[idx["epsilon"]]) != filters["epsilon"]:
            continue
        if "transform" in filters and r[idx["transform"]] != filters["transform"]:
            continue
        vals.append(float(r[idx[column]]))
    x = np.sort(np.array(vals))
    n = x.size
    if n < 10:
        raise ReportError(f"{path}: need >= 10 samples for a quantile plot, got {n}")
    probs = (np.arange(n) + 0.5) / n
    theo = _norm_ppf(probs)
    mu, sd = x.mean(), x.std(ddof=1)
    ax.plot(theo, (x - mu) / sd, ".", ms=3)
    lim = [min(theo[0], (x[0] - mu) / sd), max(theo[-1], (x[-1] - mu) / sd)]
    ax.plot(lim, lim, "--", label="normal reference")
    ax.set_xlabel("normal quantiles")
    ax.set_ylabel("sample quantiles (standardized)")
    ax.legend()
    z = (x - mu) / sd
    skew = float((z**3).mean())
    kurt = float((z**4).mean() - 3.0)
    se_skew = math.sqrt(6.0 / n)
    se_kurt = math.sqrt(24.0 / n)
    return (f"{column} (n={n}): skew {skew:.3f} (se {se_skew:.3f}), "
            f"excess kurtosis {kurt:.3f} (se {se_kurt:.3f})")


_RENDERERS = {
    "rate": _render_rate,
    "scatter": _render_scatter,
    "covariance": _render_covariance,
    "qq": _render_qq,
}


def render(spec: PlotSpec) -> tuple[str, str]:
    """Produce the figure and its caption file; returns both paths.

    Captions are derived from the same fitted numbers as the figure and the
    text file is written byte-deterministically.
    """
    for path in spec.inputs:
        if not os.path.exists(path):
            raise ReportError(f"input does not exist: {path}")
    os.makedirs(spec.out_dir, exist_ok=True)
    img_path, cap_path = _caption_path(spec)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        try:
            caption = _RENDERERS[spec.kind](spec, ax)
            fig.savefig(img_path, metadata={"Software": "reportkit"})
        finally:
            plt.close(fig)
    with open(cap_path, "w") as fh:
        fh.write(caption + "\n")
    return img_path, cap_path
