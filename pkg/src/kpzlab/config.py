"""Plain-text experiment configuration.

Format: INI-style sections with key=value pairs (configparser grammar, see
README).  Unknown keys are rejected by name; physics constraints are
enforced at parse time and rejections cite the violated constraint.
Manifests refer to configs by a canonicalized digest, so a config fully
determines a run.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field

from .errors import ConfigurationError

KINDS = ("noise-check", "she", "green", "stationary", "homog", "fluct", "kpz", "oracle")

_ALLOWED = {
    "experiment": {"kind"},
    "grid": {"d", "n", "l", "dt"},
    "noise": {"kappa", "core"},
    "run": {"beta", "epsilons", "replicas", "master_seed", "times", "transform",
            "lookbacks", "lags", "offsets", "proxy_lookback", "paths"},
    "output": {"dir", "dump_frames"},
}

_DEFAULTS = {
    "d": 3, "n": 32, "l": 16.0, "dt": 0.05,
    "kappa": 2.5, "core": 0.1,
    "beta": 0.1, "epsilons": (1.0,), "replicas": 200, "master_seed": 0,
    "times": (1.0, 2.0, 4.0), "transform": "log",
    "lookbacks": (1.0, 2.0, 4.0, 8.0, 16.0), "lags": (2.0, 4.0, 8.0, 16.0),
    "offsets": (0, 2, 4), "proxy_lookback": 32.0, "paths": 20000,
    "dir": "out", "dump_frames": False,
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    dim: int
    n_per_side: int
    box_length: float
    dt: float
    kappa: float
    core: float
    beta: float
    epsilons: tuple[float, ...]
    replicas: int
    master_seed: int
    times: tuple[float, ...]
    transform: str
    lookbacks: tuple[float, ...]
    lags: tuple[float, ...]
    offsets: tuple[int, ...]
    proxy_lookback: float
    paths: int
    out_dir: str
    dump_frames: bool

    def digest(self) -> str:
        lines = []
        for key in sorted(self.__dataclass_fields__):
            lines.append(f"{key}={getattr(self, key)!r}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def canonical_text(self) -> str:
        return "\n".join(f"{k}={getattr(self, k)!r}" for k in sorted(self.__dataclass_fields__))


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.replace(",", " ").split())


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.replace(",", " ").split())


def parse_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    """Read, validate, and default-fill a config file."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"config file not found: {path}")
    return _from_parser(parser, overrides or {})


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.read_file(io.StringIO(text))
    return _from_parser(parser, overrides or {})


def _from_parser(parser: configparser.ConfigParser, overrides: dict) -> ExperimentConfig:
    unknown = []
    for section in parser.sections():
        if section not in _ALLOWED:
            unknown.append(f"[{section}]")
            continue
        for key in parser[section]:
            if key not in _ALLOWED[section]:
                unknown.append(f"{section}.{key}")
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")

    def get(section, key, conv, default):
        if parser.has_option(section, key):
            return conv(parser.get(section, key))
        return default

    kind = get("experiment", "kind", str, None)
    if kind is None:
        raise ConfigurationError("config must set experiment.kind")
    if kind not in KINDS:
        raise ConfigurationError(f"unknown experiment kind {kind!r}; valid: {', '.join(KINDS)}")

    d = get("grid", "d", int, _DEFAULTS["d"])
    n = get("grid", "n", int, _DEFAULTS["n"])
    length = get("grid", "l", float, _DEFAULTS["l"])
    dt = get("grid", "dt", float, _DEFAULTS["dt"])
    kappa = get("noise", "kappa", float, _DEFAULTS["kappa"])
    core = get("noise", "core", float, _DEFAULTS["core"])
    beta = get("run", "beta", float, _DEFAULTS["beta"])
    epsilons = get("run", "epsilons", _floats, _DEFAULTS["epsilons"])
    replicas = get("run", "replicas", int, _DEFAULTS["replicas"])
    master_seed = get("run", "master_seed", int, _DEFAULTS["master_seed"])
    times = get("run", "times", _floats, _DEFAULTS["times"])
    transform = get("run", "transform", str, _DEFAULTS["transform"])
    lookbacks = get("run", "lookbacks", _floats, _DEFAULTS["lookbacks"])
    lags = get("run", "lags", _floats, _DEFAULTS["lags"])
    offsets = get("run", "offsets", _ints, _DEFAULTS["offsets"])
    proxy_lookback = get("run", "proxy_lookback", float, _DEFAULTS["proxy_lookback"])
    paths = get("run", "paths", int, _DEFAULTS["paths"])
    out_dir = get("output", "dir", str, _DEFAULTS["dir"])
    dump_frames = get("output", "dump_frames", lambda s: s.lower() in ("1", "true", "yes"),
                      _DEFAULTS["dump_frames"])

    for key, value in overrides.items():
        if key == "master_seed":
            master_seed = int(value)
        elif key == "replicas":
            replicas = int(value)
        elif key == "out_dir":
            out_dir = str(value)
        else:
            raise ConfigurationError(f"unknown override {key!r}")

    # constraints named after the range they violate
    if d < 3:
        raise ConfigurationError(f"d = {d} rejected: physics experiments need d >= 3")
    if not (2.0 < kappa < d):
        raise ConfigurationError(f"kappa = {kappa} rejected: need kappa in (2, d) with d = {d}")
    for eps in epsilons:
        if not (0.0 < eps <= 1.0):
            raise ConfigurationError(f"epsilon = {eps} rejected: need epsilon in (0, 1]")
    if beta < 0:
        raise ConfigurationError(f"beta = {beta} rejected: need beta >= 0")
    if replicas < 1:
        raise ConfigurationError(f"replicas = {replicas} rejected: need >= 1")

    return ExperimentConfig(
        kind=kind, dim=d, n_per_side=n, box_length=length, dt=dt, kappa=kappa,
        core=core, beta=beta, epsilons=epsilons, replicas=replicas,
        master_seed=master_seed, times=times, transform=transform,
        lookbacks=lookbacks, lags=lags, offsets=offsets,
        proxy_lookback=proxy_lookback, paths=paths,
        out_dir=out_dir, dump_frames=dump_frames,
    )
