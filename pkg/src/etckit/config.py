"""Experiment configuration: TOML in, validated dataclasses out.

A config file has an [experiment] table naming the system, the method, and
the output directory, plus optional [train], [evaluation], [integration],
[system], and [sweep] tables. Validation collects every problem it finds and
raises once, listing the offending fields, so a bad file is fixed in one
round trip instead of five.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field, fields as dc_fields
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .tensor import ContractViolation
from .training import TrainConfig

__all__ = [
    "METHODS",
    "SYSTEMS",
    "SCHEMA",
    "TOOL_VERSION",
    "PAPER_EVAL_SEEDS",
    "ConfigError",
    "EvaluationConfig",
    "SweepSpec",
    "ExperimentConfig",
    "parse_arch",
    "format_arch",
    "apply_override",
    "build_config",
    "load_config",
    "substream_seed",
]

METHODS = ("netc-pi", "netc-mc", "nlc", "quad-nlc", "lqr", "balsa")
SYSTEMS = ("grn", "lorenz", "cell")
SCHEMA = "etckit-report-v1"
TOOL_VERSION = "0.1.0"

# default evaluation seeds per system; any config can override them
PAPER_EVAL_SEEDS = {
    "grn": (2, 4, 5, 6, 7),
    "lorenz": (3, 5, 7, 8, 9),
    "cell": (0, 3, 4, 5, 6),
}


class ConfigError(ContractViolation):
    """A config failed validation; the message lists the offending fields."""


def substream_seed(root: int, name: str) -> list:
    """Child seed for a named random stream, suitable for default_rng.

    Distinct names give statistically independent streams under the same
    root, and the same (root, name) pair always reproduces the same stream.
    """
    return [int(root) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]


# ------------------------------------------------------- architecture specs

_ARCH_RE = re.compile(r"^\s*([A-Za-z]+)\s*\(\s*(\d+(?:\s*,\s*\d+)*)\s*\)\s*$")

# accepted leading tags per field; the tag documents what the widths build
_ARCH_TAGS = {
    "icnn_arch": ("ICNN", "MLP", "Quad"),
    "control_arch": ("Control", "MLP"),
    "classk_arch": ("K",),
}

_ARCH_DEFAULT_TAG = {"icnn_arch": "ICNN", "control_arch": "Control",
                     "classk_arch": "K"}


def parse_arch(value, field_name: str) -> tuple:
    """Accept "ICNN(2,10,10,1)" style strings or plain integer arrays."""
    if isinstance(value, str):
        m = _ARCH_RE.match(value)
        if m is None:
            raise ConfigError(
                f"{field_name}: expected e.g. 'ICNN(2,10,10,1)', got {value!r}")
        tag, body = m.group(1), m.group(2)
        allowed = _ARCH_TAGS.get(field_name)
        if allowed is not None and tag not in allowed:
            raise ConfigError(
                f"{field_name}: tag '{tag}' not in {sorted(allowed)}")
        return tuple(int(tok) for tok in body.split(","))
    if isinstance(value, Sequence) and not isinstance(value, (bytes, str)):
        try:
            dims = tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{field_name}: layer widths must be integers") from None
        if len(dims) < 2:
            raise ConfigError(f"{field_name}: need at least two layer widths")
        return dims
    raise ConfigError(f"{field_name}: expected a string spec or integer array")


def format_arch(dims: Sequence[int], field_name: str) -> str:
    tag = _ARCH_DEFAULT_TAG.get(field_name, "MLP")
    return f"{tag}({','.join(str(int(d)) for d in dims)})"


# ------------------------------------------------------------- dataclasses


@dataclass
class EvaluationConfig:
    """Closed-loop evaluation settings shared by all methods."""

    seeds: tuple = ()
    sigma: float = 0.5
    trigger_budget: Optional[int] = 10
    window_frac: float = 0.1
    horizon: Optional[float] = None
    n_initial_conditions: Optional[int] = None
    project: bool = False
    min_dwell_steps: int = 1


@dataclass
class SweepSpec:
    key: str
    values: list


@dataclass
class ExperimentConfig:
    name: str
    system: str
    method: str
    out_dir: str
    train: TrainConfig
    evaluation: EvaluationConfig
    system_overrides: dict = field(default_factory=dict)
    integration: dict = field(default_factory=dict)
    sweep: Optional[SweepSpec] = None

    def echo_dict(self) -> dict:
        """Fully resolved config as plain data, for embedding in reports."""
        train = {}
        for f in dc_fields(TrainConfig):
            v = getattr(self.train, f.name)
            if f.name in _ARCH_DEFAULT_TAG:
                v = format_arch(v, f.name)
            train[f.name] = v
        return {
            "experiment": {"name": self.name, "system": self.system,
                           "method": self.method, "out_dir": self.out_dir},
            "system": dict(self.system_overrides),
            "train": train,
            "evaluation": {
                "seeds": [int(s) for s in self.evaluation.seeds],
                "sigma": self.evaluation.sigma,
                "trigger_budget": self.evaluation.trigger_budget,
                "window_frac": self.evaluation.window_frac,
                "horizon": self.evaluation.horizon,
                "n_initial_conditions": len(self.evaluation.seeds),
                "project": self.evaluation.project,
                "min_dwell_steps": self.evaluation.min_dwell_steps,
            },
            "integration": dict(self.integration),
            "sweep": (None if self.sweep is None
                      else {"key": self.sweep.key,
                            "values": list(self.sweep.values)}),
        }


# --------------------------------------------------------------- overrides


def _parse_override_value(text: str):
    # borrow the TOML grammar for scalars and arrays, fall back to a string
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(data: dict, spec: str) -> None:
    """Apply one 'dotted.key=value' override to a raw config dict."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form key=value")
    path, _, raw = spec.partition("=")
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {spec!r} has an empty key path")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {spec!r}: '{k}' is not a table")
    node[keys[-1]] = _parse_override_value(raw.strip())


# -------------------------------------------------------------- validation

_TRAIN_INT = {"n_samples", "batch_size", "m_alpha", "m_warm", "m_main",
              "seed", "diag_probes"}
_TRAIN_FLOAT = {"learning_rate", "lambda1", "lambda2", "sigma", "v_eps",
                "decay_delta", "alpha_weight"}
_TRAIN_OPT_FLOAT = {"step", "event_tol", "alpha_grid_max"}
_TRAIN_STR = {"controller_mode", "activation"}
_TRAIN_BOOL = {"pi_alpha_hybrid"}
_TRAIN_ARCH = {"icnn": "icnn_arch", "control": "control_arch",
               "classk": "classk_arch", "icnn_arch": "icnn_arch",
               "control_arch": "control_arch", "classk_arch": "classk_arch"}


def _build_train(table: dict, system: str, problems: list) -> TrainConfig:
    kwargs = {"system": system}
    for key, value in table.items():
        try:
            if key in _TRAIN_ARCH:
                kwargs[_TRAIN_ARCH[key]] = parse_arch(value, _TRAIN_ARCH[key])
            elif key in _TRAIN_INT:
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"train.{key}: expected an integer")
                kwargs[key] = value
            elif key in _TRAIN_FLOAT:
                kwargs[key] = float(value)
            elif key in _TRAIN_OPT_FLOAT:
                kwargs[key] = None if value is None else float(value)
            elif key in _TRAIN_STR:
                kwargs[key] = str(value)
            elif key in _TRAIN_BOOL:
                if not isinstance(value, bool):
                    raise ConfigError(f"train.{key}: expected true/false")
                kwargs[key] = value
            else:
                raise ConfigError(f"train.{key}: unknown field")
        except ConfigError as err:
            problems.append(str(err))
        except (TypeError, ValueError):
            problems.append(f"train.{key}: cannot interpret {value!r}")
    cfg = TrainConfig(**{k: v for k, v in kwargs.items()
                         if k == "system" or k in {f.name for f in dc_fields(TrainConfig)}})
    try:
        cfg.validate()
    except ContractViolation as err:
        problems.append(f"train: {err}")
    return cfg


def _build_evaluation(table: dict, system: str, problems: list) -> EvaluationConfig:
    known = {f.name for f in dc_fields(EvaluationConfig)}
    for key in table:
        if key not in known:
            problems.append(f"evaluation.{key}: unknown field")
    seeds = table.get("seeds", PAPER_EVAL_SEEDS.get(system, ()))
    try:
        seeds = tuple(int(s) for s in seeds)
    except (TypeError, ValueError):
        problems.append("evaluation.seeds: must be a list of integers")
        seeds = ()
    if len(seeds) == 0:
        problems.append("evaluation.seeds: must be nonempty")
    n_ic = table.get("n_initial_conditions")
    if n_ic is not None and int(n_ic) != len(seeds):
        problems.append(
            f"evaluation.n_initial_conditions: {n_ic} does not match "
            f"{len(seeds)} seeds")
    sigma = float(table.get("sigma", 0.5))
    if not 0.0 < sigma < 1.0:
        problems.append(f"evaluation.sigma: must lie in (0, 1), got {sigma}")
    budget = table.get("trigger_budget", 10)
    if budget is not None:
        if isinstance(budget, bool) or not isinstance(budget, int) or budget < 0:
            problems.append("evaluation.trigger_budget: must be an integer >= 0")
            budget = None
    window_frac = float(table.get("window_frac", 0.1))
    if not 0.0 < window_frac <= 1.0:
        problems.append("evaluation.window_frac: must lie in (0, 1]")
    horizon = table.get("horizon")
    if horizon is not None and not float(horizon) > 0:
        problems.append("evaluation.horizon: must be positive")
    project = table.get("project", False)
    if not isinstance(project, bool):
        problems.append("evaluation.project: expected true/false")
        project = False
    dwell = table.get("min_dwell_steps", 1)
    if isinstance(dwell, bool) or not isinstance(dwell, int) or dwell < 1:
        problems.append("evaluation.min_dwell_steps: must be an integer >= 1")
        dwell = 1
    return EvaluationConfig(
        seeds=seeds, sigma=sigma, trigger_budget=budget,
        window_frac=window_frac,
        horizon=None if horizon is None else float(horizon),
        n_initial_conditions=len(seeds), project=project,
        min_dwell_steps=dwell)


def build_config(data: dict) -> ExperimentConfig:
    """Validate a raw (already parsed) config dict all at once."""
    problems: list = []
    exp = data.get("experiment")
    if not isinstance(exp, dict):
        raise ConfigError("invalid configuration: missing [experiment] table")
    system = exp.get("system", "")
    method = exp.get("method", "")
    name = exp.get("name", "")
    out_dir = exp.get("out_dir", "")
    if system not in SYSTEMS:
        problems.append(f"experiment.system: '{system}' not in {list(SYSTEMS)}")
    if method not in METHODS:
        problems.append(f"experiment.method: '{method}' not in {list(METHODS)}")
    if method == "lqr" and system == "cell":
        problems.append(
            "experiment.method: no Riccati cost matrices are defined for the "
            "cell network, so 'lqr' cannot run on 'cell'")
    if not name:
        problems.append("experiment.name: must be a nonempty string")
    if not out_dir:
        problems.append("experiment.out_dir: must be a nonempty string")
    for key in exp:
        if key not in {"name", "system", "method", "out_dir"}:
            problems.append(f"experiment.{key}: unknown field")

    train = _build_train(data.get("train", {}), system, problems)
    evaluation = _build_evaluation(data.get("evaluation", {}), system, problems)

    integration = dict(data.get("integration", {}))
    for key in integration:
        if key not in {"step", "event_tol", "method", "max_steps"}:
            problems.append(f"integration.{key}: unknown field")
    step = integration.get("step")
    if step is not None and not float(step) > 0:
        problems.append("integration.step: must be positive")

    sweep_table = data.get("sweep")
    sweep = None
    if sweep_table is not None:
        key = sweep_table.get("key")
        values = sweep_table.get("values")
        if not key or not isinstance(key, str):
            problems.append("sweep.key: must be a dotted config path")
        if not isinstance(values, list) or len(values) == 0:
            problems.append("sweep.values: must be a nonempty list")
        else:
            sweep = SweepSpec(key=str(key), values=list(values))

    known_tables = {"experiment", "train", "evaluation", "integration",
                    "system", "sweep"}
    for key in data:
        if key not in known_tables:
            problems.append(f"[{key}]: unknown table")

    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))

    return ExperimentConfig(
        name=str(name), system=str(system), method=str(method),
        out_dir=str(out_dir), train=train, evaluation=evaluation,
        system_overrides=dict(data.get("system", {})),
        integration=integration, sweep=sweep)


def load_config(path, overrides: Sequence[str] = (),
                seed: Optional[int] = None) -> ExperimentConfig:
    """Read a TOML config file, apply CLI overrides, validate."""
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"cannot parse {path}: {err}") from None
    for spec in overrides:
        apply_override(data, spec)
    if seed is not None:
        data.setdefault("train", {})["seed"] = int(seed)
    return build_config(data)
