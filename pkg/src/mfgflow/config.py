"""Run configuration: defaults, YAML loading, flag overrides and validation."""

import copy
from dataclasses import dataclass
import hashlib
import json

import numpy as np
import yaml

from .errors import ConfigError, ParamOutOfRange

# Every numeric default lives here and is echoed into the diagnostics.
DEFAULTS = {
    "model": {"kind": "nonlq", "eps1": 1e-7, "eps2": 0.5, "eps3": 0.005, "eps4": 0.5, "path": None},
    "measure": {"kind": "gaussian", "x0": 1.0, "mean": 0.0, "std": 1.0, "n": 64, "seed": 7, "path": None},
    "horizon": {"t0": 0.0, "T": 1.0},
    "solver": {
        "dt": 1e-3,
        "picard_tol": 1e-10,
        "picard_max": 200,
        "damping": 1.0,
        "epsilon_init": 0.125,
        "epsilon_min": 1e-3,
        "deterministic": True,
    },
    "control": {"newton_tol": 1e-12, "max_iter": 50},
    "probes": {"count": 10, "lower": None, "upper": None},
    "checks": {"fd_step": 1e-5, "audit_samples": 1024, "value_record": True},
    "outputs": {
        "directory": "mfgflow_out",
        "emit": ["trajectories", "diagnostics", "plotdata"],
        "stride": 10,
    },
}

MODEL_KINDS = ("lq", "nonlq", "custom")
MEASURE_KINDS = ("dirac", "gaussian", "file")
EMIT_KINDS = ("trajectories", "diagnostics", "plotdata", "audit")


def leaf_keys(tree=DEFAULTS, prefix=""):
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from leaf_keys(value, dotted + ".")
        else:
            yield dotted


def _merge(base, update, prefix=""):
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(dotted, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(dotted, "expected a mapping")
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = value


def _set_dotted(tree, dotted, value):
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(dotted, "unknown key")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(dotted, "unknown key")
    node[parts[-1]] = value


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully resolved configuration (a nested plain mapping)."""

    data: dict

    def __getitem__(self, section):
        return self.data[section]

    def as_dict(self):
        return copy.deepcopy(self.data)

    @property
    def digest(self):
        """sha256 of the canonical JSON form; the output directory is excluded."""
        body = self.as_dict()
        body["outputs"].pop("directory")
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def seed(self):
        return int(self.data["measure"]["seed"])


def _number(cfg, dotted, positive=False, integer=False, allow_none=False):
    section, key = dotted.split(".")
    value = cfg[section][key]
    if value is None and allow_none:
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise ConfigError(dotted, f"expected a finite number, got {value!r}")
    if integer:
        if int(value) != value:
            raise ConfigError(dotted, f"expected an integer, got {value!r}")
        cfg[section][key] = int(value)
    else:
        cfg[section][key] = float(value)
    if positive and not value > 0:
        raise ConfigError(dotted, f"must be positive, got {value!r}")


def validate(cfg):
    model, measure = cfg["model"], cfg["measure"]
    if model["kind"] not in MODEL_KINDS:
        raise ConfigError("model.kind", f"expected one of {', '.join(MODEL_KINDS)}")
    if model["kind"] == "custom" and not model["path"]:
        raise ConfigError("model.path", "custom models need a path")
    for k in ("eps1", "eps2", "eps3", "eps4"):
        _number(cfg, f"model.{k}")
    if measure["kind"] not in MEASURE_KINDS:
        raise ConfigError("measure.kind", f"expected one of {', '.join(MEASURE_KINDS)}")
    if measure["kind"] == "file" and not measure["path"]:
        raise ConfigError("measure.path", "file measures need a path")
    for k in ("x0", "mean"):
        _number(cfg, f"measure.{k}")
    _number(cfg, "measure.std", positive=True)
    _number(cfg, "measure.n", positive=True, integer=True)
    _number(cfg, "measure.seed", integer=True)
    _number(cfg, "horizon.t0")
    _number(cfg, "horizon.T")
    if not cfg["horizon"]["T"] > cfg["horizon"]["t0"]:
        raise ConfigError("horizon.T", "must exceed horizon.t0")
    for k in ("dt", "picard_tol", "damping", "epsilon_init", "epsilon_min"):
        _number(cfg, f"solver.{k}", positive=True)
    _number(cfg, "solver.picard_max", positive=True, integer=True)
    if cfg["solver"]["damping"] > 1:
        raise ConfigError("solver.damping", "must lie in (0, 1]")
    if not isinstance(cfg["solver"]["deterministic"], bool):
        raise ConfigError("solver.deterministic", "expected true or false")
    span = cfg["horizon"]["T"] - cfg["horizon"]["t0"]
    steps = span / cfg["solver"]["dt"]
    if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
        raise ConfigError("solver.dt", f"must divide the horizon length {span:g}")
    _number(cfg, "control.newton_tol", positive=True)
    _number(cfg, "control.max_iter", positive=True, integer=True)
    _number(cfg, "probes.count", integer=True)
    if cfg["probes"]["count"] < 0:
        raise ConfigError("probes.count", "must be nonnegative")
    _number(cfg, "probes.lower", allow_none=True)
    _number(cfg, "probes.upper", allow_none=True)
    _number(cfg, "checks.fd_step", positive=True)
    _number(cfg, "checks.audit_samples", positive=True, integer=True)
    if not isinstance(cfg["checks"]["value_record"], bool):
        raise ConfigError("checks.value_record", "expected true or false")
    emit = cfg["outputs"]["emit"]
    if isinstance(emit, str):
        emit = [e.strip() for e in emit.split(",") if e.strip()]
    bad = [e for e in emit if e not in EMIT_KINDS]
    if bad:
        raise ConfigError("outputs.emit", f"unknown output kind {bad[0]!r}")
    cfg["outputs"]["emit"] = sorted(set(emit), key=EMIT_KINDS.index)
    _number(cfg, "outputs.stride", positive=True, integer=True)
    return cfg


def load_config(path=None, overrides=None):
    """Defaults, then the YAML file, then explicitly given flag overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as err:
            raise ConfigError("config", f"cannot read {path}: {err.strerror}") from None
        except yaml.YAMLError as err:
            raise ConfigError("config", f"invalid YAML: {err}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top level must be a mapping")
        _merge(cfg, loaded)
    for dotted, value in (overrides or {}).items():
        _set_dotted(cfg, dotted, value)
    return RunConfig(validate(cfg))


def build_model(config):
    from .model import lq_model, nonlq_model

    m = config["model"]
    if m["kind"] == "lq":
        return lq_model()
    if m["kind"] == "nonlq":
        try:
            return nonlq_model(eps1=m["eps1"], eps2=m["eps2"], eps3=m["eps3"], eps4=m["eps4"])
        except ParamOutOfRange as err:
            key = str(err).split("=")[0]
            raise ConfigError(f"model.{key}", str(err)) from None
    from .expressions import load_model

    try:
        return load_model(m["path"])
    except OSError as err:
        raise ConfigError("model.path", f"cannot read {m['path']}: {err.strerror}") from None


def build_measure(config):
    from .measure import dirac, from_csv, gaussian

    m = config["measure"]
    if m["kind"] == "dirac":
        mu = dirac(m["x0"])
    elif m["kind"] == "gaussian":
        mu = gaussian(m["mean"], m["std"], m["n"], m["seed"])
    else:
        try:
            with open(m["path"]) as fh:
                mu = from_csv(fh.read())
        except OSError as err:
            raise ConfigError("measure.path", f"cannot read {m['path']}: {err.strerror}") from None
        except ValueError as err:
            raise ConfigError("measure.path", str(err)) from None
    if mu.dim != 1:
        raise ConfigError("measure", "only one-dimensional measures can be solved")
    return mu.with_probes(probe_positions(config, mu))


def probe_positions(config, mu):
    p = config["probes"]
    pts = mu.points[:, 0]
    lower = pts.min() - 0.5 if p["lower"] is None else p["lower"]
    upper = pts.max() + 0.5 if p["upper"] is None else p["upper"]
    return np.linspace(lower, upper, p["count"])


def solver_settings(config):
    from .solver import SolverSettings

    s = config["solver"]
    return SolverSettings(
        picard_tol=s["picard_tol"], max_picard=s["picard_max"], damping=s["damping"],
        epsilon_init=s["epsilon_init"], epsilon_min=s["epsilon_min"],
        newton_tol=config["control"]["newton_tol"], newton_max_iter=config["control"]["max_iter"],
    )


def dump_yaml(config):
    return yaml.safe_dump(config.as_dict(), sort_keys=True)
