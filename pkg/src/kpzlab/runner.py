"""Experiment orchestration: deterministic replica scheduling, atomic
persistence, manifests, resume.

Every replica task is pure given (config, replica index); workers run on a
thread pool sized by the THREADS environment variable, and the reducer
merges shards in replica order, so outputs are byte-identical for any
worker count.  Files are written to a temp name and renamed, so partial
files are never visible; the manifest (with checksums of every output) is
written last.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .errors import ConfigurationError
from .fluct import TestFunction, gaussianity_report, loo_center, pair_with
from .grid import FieldFrame, GridSpec, semigroup_apply
from .homog import defect_ensemble, defect_norms, homog_report
from .noise import calibrate_amplitude, probe_lags, sample_slice
from .oracles import (fk_beta2_coefficient, fk_second_moment, ito_variance_target,
                      riesz_constant)
from .she import RunState, effective_coupling, green_function, mass_process, run_coupled, solve
from .stationary import default_probes, effective_variance, estimate_stationary, transform
from .stats import loglog_slope, mean_with_se

MANIFEST_NAME = "manifest.json"


def _threads() -> int:
    raw = os.environ.get("THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def atomic_write_text(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _csv_text(header: list[str], rows: list[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class RunManifest:
    digest: str
    version: str
    kind: str
    replicas: int
    seed_table: dict
    files: dict
    failures: dict

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def _model_for(config: ExperimentConfig):
    grid = GridSpec(dim=config.dim, n_per_side=config.n_per_side,
                    box_length=config.box_length, dt=config.dt)
    return calibrate_amplitude(grid, config.kappa, config.core)


# ----------------------------------------------------------------------
# per-kind replica workers: (config, model, replica) -> list of rows
# ----------------------------------------------------------------------

def _w_noise(config, model, rep):
    grid = model.grid
    rows = []
    for eps in config.epsilons:
        sl = sample_slice(model, grid, eps, config.master_seed, rep, rep).frame.reshaped()
        for lag in probe_lags(grid, eps):
            shifted = np.roll(sl, shift=[-c for c in lag], axis=tuple(range(grid.dim)))
            rows.append((_fmt(eps), "|".join(map(str, lag)), rep, _fmt(float((sl * shifted).mean()))))
    return rows


def _w_she(config, model, rep):
    run = solve(model, config.beta, list(config.times), config.master_seed, rep)
    probes = default_probes(model.grid)
    rows = []
    for t, frame in run.trajectory:
        vals = frame.reshaped()
        for p in probes:
            rows.append((rep, _fmt(t), "|".join(map(str, p)), _fmt(float(vals[p]))))
        rows.append((rep, _fmt(t), "mean", _fmt(float(vals.mean()))))
        rows.append((rep, _fmt(t), "mean_sq", _fmt(float((vals**2).mean()))))
        if config.dump_frames:
            _dump_frame(config, rep, t, frame)
    return rows


def _dump_frame(config, rep: int, t: float, frame) -> None:
    """Raw-frame binary blob: header (N, d, time), payload lexicographic doubles."""
    import struct
    out_dir = os.environ.get("OUTPUT_DIR", config.out_dir)
    d = os.path.join(out_dir, "frames")
    os.makedirs(d, exist_ok=True)
    path = os.path.join(d, f"r{rep:06d}_t{t:g}.bin")
    header = struct.pack("<IId", frame.grid.n_per_side, frame.grid.dim, t)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(frame.values, dtype="<f8").tobytes())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _w_green(config, model, rep):
    y = (0,) * model.grid.dim
    run = green_function(model, config.beta, 0.0, y, list(config.times),
                         config.master_seed, rep)
    series = mass_process(run)
    return [(rep, _fmt(t), _fmt(v)) for t, v in zip(series.times, series.values)]


def _w_stationary(config, model, rep):
    spec = transform(config.transform if config.transform != "power" else "power",
                     power=2.0 if config.transform == "power" else None)
    ests, _ = estimate_stationary(model, config.beta, list(config.lookbacks),
                                  replicas=1, master_seed=config.master_seed + rep)
    probes = default_probes(model.grid)
    rows = []
    for lb, est in ests.items():
        for j, p in enumerate(probes):
            z = float(est.samples[0, j])
            rows.append((_fmt(lb), "|".join(map(str, p)), rep, _fmt(z),
                         _fmt(float(np.log(z))), _fmt(float(z * spec.deriv(np.array(z))))))
    return rows


def _w_fluct(config, model, rep):
    grid = model.grid
    spec = transform(config.transform)
    g_vals = TestFunction(grid, width=grid.box_length / 4.0).tabulate()
    steps = sorted({int(round(t / grid.dt)) for t in config.times})
    states = []
    for e in config.epsilons:
        states.append(RunState(name=f"u{e}", epsilon=e,
                               beta_eff=effective_coupling(config.beta, e, model.kappa),
                               init_values=np.ones(grid.shape), start_step=0))
        states.append(RunState(name=f"V{e}", epsilon=e, beta_eff=config.beta,
                               init_values=np.zeros(grid.shape), start_step=0,
                               multiplicative=False))
    run_coupled(model, states, max(steps), config.master_seed, rep, set(steps))
    rows = []
    for i, e in enumerate(config.epsilons):
        ust, vst = states[2 * i], states[2 * i + 1]
        for t in config.times:
            k = int(round(t / grid.dt))
            raw = pair_with(spec.func(ust.snapshots[k]), g_vals, grid)
            upar = pair_with(vst.snapshots[k], g_vals, grid)
            rows.append((_fmt(e), _fmt(t), rep, _fmt(raw), _fmt(upar), spec.name))
    return rows


def _w_homog(config, model, rep):
    ens = defect_ensemble(model, config.beta, list(config.lags), list(config.offsets),
                          replicas=1, master_seed=config.master_seed + rep,
                          proxy_lookback=config.proxy_lookback)
    rows = []
    for (lag, off), arr in ens.samples.items():
        for v in arr[0]:
            rows.append((_fmt(lag), _fmt(off), rep, _fmt(float(v))))
    return rows


def _w_kpz(config, model, rep):
    grid = model.grid
    g_vals = TestFunction(grid, width=grid.box_length / 4.0).tabulate()
    c = grid.axis_coords()
    h0 = np.cos(2 * np.pi * c / grid.box_length)[:, None, None] * np.ones(grid.shape)
    h0f = FieldFrame(grid, 0.0, h0.reshape(-1))
    t = max(config.times)
    k_t = int(round(t / grid.dt))
    rows = []
    states = []
    for e in config.epsilons:
        be = effective_coupling(config.beta, e, model.kappa)
        states.append(RunState(name=f"uh{e}", epsilon=e, beta_eff=be,
                               init_values=np.exp(e ** (model.kappa / 2 - 1) * h0),
                               start_step=0))
        states.append(RunState(name=f"uf{e}", epsilon=e, beta_eff=be,
                               init_values=np.ones(grid.shape), start_step=0))
        states.append(RunState(name=f"V{e}", epsilon=e, beta_eff=config.beta,
                               init_values=np.zeros(grid.shape), start_step=0,
                               multiplicative=False))
    run_coupled(model, states, k_t, config.master_seed, rep, {k_t})
    for i, e in enumerate(config.epsilons):
        scale = e ** (1.0 - model.kappa / 2.0)
        uh, uf, vv = states[3 * i], states[3 * i + 1], states[3 * i + 2]
        psi = np.exp(e ** (model.kappa / 2 - 1) * h0) - 1.0
        flow = semigroup_apply(FieldFrame(grid, 0.0, psi.reshape(-1)), t).reshaped()
        target = pair_with(scale * np.log1p(flow), g_vals, grid)
        rows.append((_fmt(e), _fmt(t), rep,
                     _fmt(pair_with(scale * np.log(uh.snapshots[k_t]), g_vals, grid)),
                     _fmt(pair_with(scale * np.log(uf.snapshots[k_t]), g_vals, grid)),
                     _fmt(pair_with(vv.snapshots[k_t], g_vals, grid)),
                     _fmt(target)))
    return rows


_WORKERS = {
    "noise-check": (_w_noise, ["epsilon", "lag", "replica", "cov_product"]),
    "she": (_w_she, ["replica", "time", "probe_site", "value"]),
    "green": (_w_green, ["replica", "time", "mass"]),
    "stationary": (_w_stationary, ["lookback", "probe", "replica", "sample",
                                   "log_sample", "z_phiprime"]),
    "fluct": (_w_fluct, ["epsilon", "t", "replica", "raw_pairing", "U", "transform"]),
    "homog": (_w_homog, ["lag", "offset", "replica", "rho"]),
    "kpz": (_w_kpz, ["epsilon", "t", "replica", "log_h_pair", "log_flat_pair",
                     "v_pair", "flow_target"]),
}


def _postprocess(kind: str, model, header: list[str], rows: list[tuple]):
    """Shards hold per-replica raw pairings; the merged file carries the
    documented columns (leave-one-out centered, rescaled)."""
    if kind == "fluct":
        groups = {}
        for eps, t, rep, raw, upar, name in rows:
            groups.setdefault((eps, t, name), []).append((int(rep), float(raw), float(upar)))
        out = []
        for (eps, t, name), entries in sorted(groups.items(), key=lambda kv: (
                float(kv[0][0]), float(kv[0][1]), kv[0][2])):
            entries.sort()
            raws = np.array([r for _, r, _ in entries])
            scale = float(eps) ** (1.0 - model.kappa / 2.0)
            ys = scale * loo_center(raws) if raws.size > 1 else raws * 0.0
            for (rep, _, upar), y in zip(entries, ys):
                out.append((eps, t, rep, _fmt(float(y)), _fmt(upar), name))
        return ["epsilon", "t", "replica", "Y", "U", "transform"], out
    if kind == "kpz":
        groups = {}
        for eps, t, rep, lh, lf, vp, tgt in rows:
            groups.setdefault((eps, t), []).append(
                (int(rep), float(lh), float(lf), float(vp), float(tgt)))
        out = []
        for (eps, t), entries in sorted(groups.items(), key=lambda kv: (
                float(kv[0][0]), float(kv[0][1]))):
            entries.sort()
            lf = np.array([x[2] for x in entries])
            centers = lf - loo_center(lf) if lf.size > 1 else lf
            for (rep, lh, _, vp, tgt), center in zip(entries, centers):
                out.append((eps, t, rep, _fmt(lh - center), _fmt(tgt + vp)))
        return ["epsilon", "t", "replica", "height_pairing", "additive_pairing"], out
    return header, rows


# ----------------------------------------------------------------------
# summaries written next to the merged CSV
# ----------------------------------------------------------------------

def _summarize(kind: str, config: ExperimentConfig, model, rows: list[tuple]) -> dict:
    if kind == "noise-check":
        by_key = {}
        for eps, lag, rep, prod in rows:
            by_key.setdefault((eps, lag), []).append(float(prod))
        grid = model.grid
        out = {}
        for (eps, lag), vals in sorted(by_key.items()):
            lag_sites = tuple(int(x) for x in lag.split("|"))
            target = float(grid.dt * model.slice_covariance(float(eps))[lag_sites])
            mean, se = mean_with_se(np.array(vals))
            out[f"{eps}|{lag}"] = {"empirical": mean, "se": se, "target": target,
                                   "z": (mean - target) / se if se > 0 else 0.0}
        return {"cells": out}
    if kind == "she":
        by_t = {}
        for rep, t, site, value in rows:
            if site in ("mean", "mean_sq"):
                by_t.setdefault((float(t), site), []).append(float(value))
        summary = {}
        for (t, stat), vals in sorted(by_t.items()):
            mean, se = mean_with_se(np.array(vals))
            summary.setdefault(f"t={t:g}", {})[stat] = {"value": mean, "se": se}
        for t in config.times:
            fk = fk_second_moment(t, config.beta, model, paths=config.paths,
                                  master_seed=config.master_seed + 777)
            summary[f"t={t:g}"]["fk_second_moment"] = {"value": fk.value,
                                                       "se": fk.error_estimate}
        return summary
    if kind == "green":
        by_t = {}
        for rep, t, mass in rows:
            by_t.setdefault(float(t), []).append(float(mass))
        return {f"t={t:g}": dict(zip(("mass_mean", "mass_se"),
                                     mean_with_se(np.array(v))))
                for t, v in sorted(by_t.items())}
    if kind == "stationary":
        by_lb = {}
        for lb, probe, rep, sample, logs, zphi in rows:
            e = by_lb.setdefault(float(lb), {"z": [], "logz": [], "zphi": []})
            e["z"].append(float(sample))
            e["logz"].append(float(logs))
            e["zphi"].append(float(zphi))
        out = {}
        for lb, e in sorted(by_lb.items()):
            zm, zse = mean_with_se(np.array(e["z"]))
            cm, cse = mean_with_se(np.array(e["logz"]))
            nm, nse = mean_with_se(np.array(e["zphi"]))
            out[f"lookback={lb:g}"] = {"mean": zm, "mean_se": zse, "c_hat": cm,
                                       "c_hat_se": cse, "nu_hat": nm, "nu_se": nse}
        return out
    if kind == "fluct":
        groups = {}
        for eps, t, rep, raw, upar, name in rows:
            groups.setdefault((float(eps), float(t), name), []).append(
                (int(rep), float(raw), float(upar)))
        summary = {}
        for (eps, t, name), entries in sorted(groups.items()):
            entries.sort()
            raws = np.array([r for _, r, _ in entries])
            us = np.array([u for _, _, u in entries])
            scale = eps ** (1.0 - model.kappa / 2.0)
            ys = scale * loo_center(raws)
            varu = us.var(ddof=1)
            slope = float(np.cov(ys, us, ddof=1)[0, 1] / varu) if varu > 0 else float("nan")
            target = ito_variance_target(model, TestFunction(
                model.grid, width=model.grid.box_length / 4.0).tabulate(), t,
                beta=config.beta, epsilon=eps)
            summary[f"eps={eps:g}|t={t:g}|{name}"] = {
                "var_y": float(ys.var(ddof=1)), "var_u": float(varu),
                "var_u_target": target.value,
                "regression_slope": slope,
                "gaussianity_u": gaussianity_report(us, min_samples=50)
                if us.size >= 50 else None,
            }
        return summary
    if kind == "homog":
        by_cell = {}
        for lag, off, rep, rho in rows:
            by_cell.setdefault((float(lag), float(off)), []).append(float(rho))
        norms = {f"{lag:g}|{off:g}": float(np.sqrt(np.mean(np.square(v))))
                 for (lag, off), v in sorted(by_cell.items())}
        lags = sorted({lag for lag, off in by_cell if off == 0.0})
        fit = None
        if len(lags) >= 3:
            ys = [norms[f"{lag:g}|0"] for lag in lags]
            f = loglog_slope(lags, ys)
            mu = 0.5 - 1.0 / model.kappa
            fit = {"kappa": model.kappa, "mu_target": mu, "slope_hat": f.slope,
                   "ci_lo": f.ci_lo, "ci_hi": f.ci_hi}
        return {"norms": norms, "rate_fit": fit}
    if kind == "kpz":
        groups = {}
        for eps, t, rep, lh, lf, vp, tgt in rows:
            groups.setdefault((float(eps), float(t)), []).append(
                (int(rep), float(lh), float(lf), float(vp), float(tgt)))
        out = {}
        for (eps, t), entries in sorted(groups.items()):
            entries.sort()
            lh = np.array([x[1] for x in entries])
            lf = np.array([x[2] for x in entries])
            vp = np.array([x[3] for x in entries])
            tgt = entries[0][4]
            centered = lh - (lf - loo_center(lf))
            diff = centered - (tgt + vp)
            out[f"eps={eps:g}|t={t:g}"] = {"rms": float(np.sqrt((diff**2).mean())),
                                           "n": len(entries)}
        return out
    raise ConfigurationError(f"no summary for kind {kind!r}")


def _run_oracle(config: ExperimentConfig, model, out_dir: str) -> dict:
    results = []
    results.append(riesz_constant(config.kappa, config.dim))
    for t in config.times:
        results.append(fk_second_moment(t, config.beta, model, paths=config.paths,
                                        master_seed=config.master_seed))
    results.append(fk_beta2_coefficient(min(config.times), model))
    g_vals = TestFunction(model.grid, width=model.grid.box_length / 4.0).tabulate()
    for eps in config.epsilons:
        results.append(ito_variance_target(model, g_vals, min(config.times),
                                           beta=config.beta, epsilon=eps))
    payload = [{"name": r.name, "value": r.value, "error": r.error_estimate,
                "inputs": r.inputs, "flags": list(r.flags)} for r in results]
    path = os.path.join(out_dir, "oracle.json")
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True))
    return {os.path.basename(path): sha256_file(path)}


def run(config: ExperimentConfig) -> RunManifest:
    """Execute the configured experiment; returns the manifest (also written
    to the output directory as the final artifact)."""
    out_dir = os.environ.get("OUTPUT_DIR", config.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    model = _model_for(config)
    failures: dict[int, str] = {}
    files: dict[str, str] = {}

    if config.kind == "oracle":
        files = _run_oracle(config, model, out_dir)
    else:
        worker, header = _WORKERS[config.kind]
        shard_dir = os.path.join(out_dir, "shards")
        os.makedirs(shard_dir, exist_ok=True)

        def shard_path(rep: int) -> str:
            return os.path.join(shard_dir, f"{config.kind}_r{rep:06d}.csv")

        def one(rep: int):
            path = shard_path(rep)
            if os.path.exists(path):
                return rep, "cached"
            try:
                rows = worker(config, model, rep)
            except Exception:
                return rep, traceback.format_exc()
            atomic_write_text(path, _csv_text(header, rows))
            return rep, "ok"

        with ThreadPoolExecutor(_threads()) as pool:
            for rep, status in pool.map(one, range(config.replicas)):
                if status not in ("ok", "cached"):
                    failures[rep] = status

        all_rows = []
        for rep in range(config.replicas):
            if rep in failures:
                continue
            with open(shard_path(rep)) as fh:
                reader = csv.reader(fh)
                next(reader)
                all_rows.extend(tuple(r) for r in reader)
        out_header, out_rows = _postprocess(config.kind, model, header, all_rows)
        merged = os.path.join(out_dir, f"{config.kind}.csv")
        atomic_write_text(merged, _csv_text(out_header, out_rows))
        files[os.path.basename(merged)] = sha256_file(merged)

        if config.kind == "she":  # event-stream form of the probe records
            lines = [json.dumps({"replica": int(r), "time": float(t),
                                 "probe_site": site, "value": float(v)},
                                sort_keys=True)
                     for r, t, site, v in out_rows]
            ndjson = os.path.join(out_dir, "she.ndjson")
            atomic_write_text(ndjson, "\n".join(lines) + "\n")
            files[os.path.basename(ndjson)] = sha256_file(ndjson)

        summary = _summarize(config.kind, config, model, all_rows)
        spath = os.path.join(out_dir, f"{config.kind}_summary.json")
        atomic_write_text(spath, json.dumps(summary, indent=2, sort_keys=True))
        files[os.path.basename(spath)] = sha256_file(spath)

    manifest = RunManifest(
        digest=config.digest(), version=__version__, kind=config.kind,
        replicas=config.replicas,
        seed_table={str(r): config.master_seed for r in range(config.replicas)},
        files=files, failures={str(k): v for k, v in failures.items()},
    )
    atomic_write_text(os.path.join(out_dir, MANIFEST_NAME), manifest.to_json())
    return manifest


def verify(manifest_path: str) -> tuple[bool, list[str]]:
    """Re-check every file checksum recorded in a manifest."""
    with open(manifest_path) as fh:
        data = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    problems = []
    for name, digest in data.get("files", {}).items():
        path = os.path.join(base, name)
        if not os.path.exists(path):
            problems.append(f"missing: {name}")
        elif sha256_file(path) != digest:
            problems.append(f"checksum mismatch: {name}")
    return not problems, problems


def failure_rate(manifest: RunManifest) -> float:
    if manifest.replicas == 0:
        return 0.0
    return len(manifest.failures) / manifest.replicas
