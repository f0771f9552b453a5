"""End-to-end experiment runner: train, simulate, bound, report, tabulate.

One experiment is (system, method, seeds). The runner trains when the method
needs it, closes the loop with the matching event function, simulates every
evaluation seed twice (free-running and under the trigger budget), and writes
a JSON report whose aggregates are recomputable from the per-seed rows.
Reruns of the same config produce byte-identical reports.
"""

from __future__ import annotations

import csv
import io
import json
import os
import pathlib
import re
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as ops
from .baselines import (BALSA_P1, balsa_controller, build_nlc_nets,
                        build_quad_nets, lqr_controller, lqr_for_system,
                        train_nlc, train_quad_nlc)
from .config import (SCHEMA, TOOL_VERSION, ConfigError, ExperimentConfig,
                     load_config, substream_seed)
from .etcsim import (EventFunction, SimulationDiverged, compute_metrics,
                     export_trace_csv, simulate_etc)
from .guarantees import (BoundInputs, bound_report, estimate_lipschitz,
                         project_controller)
from .nets import ClassKNet
from .odeint import IntegrationConfig
from .systems import ControlSystem, get_system
from .tensor import ContractViolation, load_checkpoint, save_checkpoint
from .training import TrainReport, _alpha_grid, build_nets, train_mc, train_pi

__all__ = [
    "TRAINED_METHODS",
    "NLC_ANCHORS",
    "METRIC_KEYS",
    "TABLE_COLUMNS",
    "resolve_system",
    "initial_condition",
    "train_for_method",
    "load_method_params",
    "make_closed_loop",
    "integration_config",
    "aggregate_metrics",
    "estimate_bound_inputs",
    "train_and_save",
    "evaluate_seeds",
    "run_experiment",
    "simulate_only",
    "compute_bound",
    "run_sweep",
    "emit_table",
    "read_table",
]

TRAINED_METHODS = ("netc-pi", "netc-mc", "nlc", "quad-nlc")

# certificate anchor for the unconstrained trainer; the chaotic benchmark
# works better with the one-sided penalty
NLC_ANCHORS = {"grn": "square", "lorenz": "hinge", "cell": "square"}

# half-width of the uniform box around the start state for evaluation
# initial conditions; systems without a start state draw from the
# training dataset instead
_IC_HALF_WIDTH = {"grn": 1.0, "cell": 0.5}

METRIC_KEYS = ("num_triggers", "min_inter_event", "mse_window",
               "temporal_variance", "mse_budget")

TABLE_COLUMNS = ("method", "system", "triggers_mean", "triggers_std",
                 "min_inter_event_mean", "min_inter_event_std",
                 "mse_budget_mean", "mse_budget_std")


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_system(cfg: ExperimentConfig) -> ControlSystem:
    try:
        return get_system(cfg.system, **cfg.system_overrides)
    except TypeError as err:
        raise ConfigError(f"system: {err}") from None


def initial_condition(system: ControlSystem, eval_seed: int, train_cfg) -> np.ndarray:
    """Evaluation start state for one seed.

    Systems with a designated start state get a uniform perturbation around
    it; the rest draw one point from the training dataset, which is rebuilt
    from the training seed so evaluation never depends on trainer internals.
    """
    rng = np.random.default_rng(int(eval_seed))
    if system.start is not None:
        w = _IC_HALF_WIDTH.get(system.name, 1.0)
        return system.start + rng.uniform(-w, w, system.dim)
    data = system.sample_domain(np.random.default_rng(train_cfg.seed),
                                train_cfg.n_samples)
    return data[int(rng.integers(len(data)))]


def train_for_method(cfg: ExperimentConfig, system: ControlSystem) -> Optional[TrainReport]:
    method = cfg.method
    if method == "netc-pi":
        return train_pi(cfg.train, system)
    if method == "netc-mc":
        return train_mc(cfg.train, system)
    if method == "nlc":
        return train_nlc(cfg.train, system,
                         anchor=NLC_ANCHORS.get(system.name, "square"))
    if method == "quad-nlc":
        return train_quad_nlc(cfg.train, system)
    return None


def _method_nets(cfg: ExperimentConfig, system: ControlSystem):
    """(V, u, alpha_or_None) with architectures from the train config."""
    tc = cfg.train
    if cfg.method in ("netc-pi", "netc-mc"):
        V, u = build_nets(tc, system)
        alpha = ClassKNet(tc.classk_arch) if cfg.method == "netc-mc" else None
        return V, u, alpha
    if cfg.method == "nlc":
        V, u = build_nlc_nets(tc, system)
        return V, u, None
    if cfg.method == "quad-nlc":
        V, u = build_quad_nets(tc, system)
        return V, u, None
    raise ContractViolation(f"method '{cfg.method}' has no trainable nets")


def load_method_params(cfg: ExperimentConfig, system: ControlSystem,
                       checkpoint_path):
    """Load a checkpoint, validating shapes against the configured nets."""
    if cfg.method not in TRAINED_METHODS:
        return None
    V, u, alpha = _method_nets(cfg, system)
    rng = np.random.default_rng(cfg.train.seed)
    expect = V.init_params(rng)
    expect.update(u.init_params(rng))
    if alpha is not None:
        expect.update(alpha.init_params(rng))
    return load_checkpoint(checkpoint_path, expect=expect)


_EVENT_KIND = {
    "netc-pi": "h_sigma_V",
    "netc-mc": "h_tilde_alpha",
    "nlc": "nlc_ratio",
    "quad-nlc": "h_sigma_V",
    "balsa": "h_sigma_V",
    "lqr": "lqr_quadratic",
}


def make_closed_loop(cfg: ExperimentConfig, system: ControlSystem,
                     params=None):
    """(controller, event, info) for one method.

    The controller is a plain state -> control callable and the event
    function evaluates it for the fresh-control comparison, so the pair is
    always self-consistent, including under projection.
    """
    sigma = cfg.evaluation.sigma
    if cfg.method == "lqr":
        sol = lqr_for_system(system)
        controller = lqr_controller(sol, system.target)
        event = EventFunction(kind="lqr_quadratic", sigma=sigma, system=system,
                              Q1=sol.Q1, S=sol.S, B=sol.B, K=sol.K)
        return controller, event, {"care_residual": float(sol.residual),
                                   "lqr": sol}

    if cfg.method == "balsa":
        p1 = BALSA_P1[system.name]
        controller = balsa_controller(system, p1)
        target = system.target

        def V_value(x):
            y = np.asarray(x, dtype=np.float64) - target
            return 0.5 * float(y @ y)

        def V_grad(x):
            return np.asarray(x, dtype=np.float64) - target

        event = EventFunction(kind="h_sigma_V", sigma=sigma, system=system,
                              V_value=V_value, V_grad=V_grad, u_eval=controller)
        return controller, event, {"p1": p1, "V_grad": V_grad}

    if params is None:
        raise ContractViolation(
            f"method '{cfg.method}' needs trained parameters")
    V, u, alpha = _method_nets(cfg, system)

    def V_value(x):
        return float(ops._val(V.value(params, np.asarray(x, dtype=np.float64))))

    def V_grad(x):
        return V.gradient(params, np.asarray(x, dtype=np.float64))

    def u_eval(x):
        out = u.value(params, np.asarray(x, dtype=np.float64))
        return np.asarray(ops._val(out), dtype=np.float64)

    controller = u_eval
    if cfg.evaluation.project:
        controller = project_controller(u_eval, V_value, V_grad, system,
                                        allow_affine_extension=True)
    alpha_eval = None
    if alpha is not None:
        def alpha_eval(r):
            return float(alpha.alpha(params, float(r)))
    event = EventFunction(kind=_EVENT_KIND[cfg.method], sigma=sigma,
                          system=system, V_value=V_value, V_grad=V_grad,
                          u_eval=controller, alpha_eval=alpha_eval)
    info = {"V_value": V_value, "V_grad": V_grad, "alpha_net": alpha,
            "nets": (V, u)}
    return controller, event, info


def integration_config(cfg: ExperimentConfig, system: ControlSystem) -> IntegrationConfig:
    table = cfg.integration
    step = table.get("step") or cfg.train.step or system.default_step
    kwargs = {"step": float(step)}
    if "event_tol" in table:
        kwargs["event_tol"] = float(table["event_tol"])
    if "method" in table:
        kwargs["method"] = str(table["method"])
    if "max_steps" in table:
        kwargs["max_steps"] = int(table["max_steps"])
    return IntegrationConfig(**kwargs)


def aggregate_metrics(per_seed: Sequence[dict]) -> dict:
    """Mean and population std of every metric over the seed rows."""
    if len(per_seed) == 0:
        raise ContractViolation("no per-seed rows to aggregate")
    out = {}
    for key in METRIC_KEYS:
        vals = [row[key] for row in per_seed]
        if any(v is None for v in vals):
            out[key] = None
            continue
        arr = np.asarray(vals, dtype=np.float64)
        out[key] = {"mean": float(arr.mean()), "std": float(arr.std())}
    return out


def estimate_bound_inputs(system: ControlSystem, controller: Callable,
                          V_grad: Callable, q_min: float, sigma: float,
                          root_seed: int, n_pairs: int = 256) -> BoundInputs:
    """Sampled Lipschitz data feeding the inter-event-time floors.

    l_u is taken over the sampling box, l_f jointly over the box times the
    observed control range (padded), and the gradient bound comes from the
    same state sample. All are lower estimates, so the resulting floor is an
    estimate rather than a certificate; the report marks it as such by
    carrying the empirical minimum alongside.
    """
    box = (system.domain_lo, system.domain_hi)
    l_u = estimate_lipschitz(controller, box, n_pairs=n_pairs,
                             seed=substream_seed(root_seed, "lip-u"))
    rng = np.random.default_rng(substream_seed(root_seed, "lip-f"))
    X = system.sample_domain(rng, max(64, n_pairs))
    U = np.stack([np.atleast_1d(np.asarray(controller(x), dtype=np.float64))
                  for x in X])
    pad = 0.5 * (U.max(axis=0) - U.min(axis=0)) + 1e-3
    z_lo = np.concatenate([system.domain_lo, U.min(axis=0) - pad])
    z_hi = np.concatenate([system.domain_hi, U.max(axis=0) + pad])
    d = system.dim

    def f_joint(z):
        return np.asarray(system.vector_field(z[:d], z[d:]), dtype=np.float64)

    l_f = estimate_lipschitz(f_joint, (z_lo, z_hi), n_pairs=n_pairs,
                             seed=substream_seed(root_seed, "lip-f"))
    grad_max = max(float(np.linalg.norm(V_grad(x))) for x in X)
    return BoundInputs(l_f=l_f, l_u=l_u, l_alpha_inv=1.0 / float(q_min),
                       c=grad_max * l_f, sigma=float(sigma))


def _write_curves(report: TrainReport, out_dir: pathlib.Path) -> list:
    paths = []
    for name, values in sorted(report.curves.items()):
        path = out_dir / f"curve_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "value"])
            for i, v in enumerate(values):
                w.writerow([i, repr(float(v))])
        paths.append(path.name)
    return paths


def _simulate_seed(system, controller, event, x0, cfg: ExperimentConfig,
                   int_cfg, traces_dir: pathlib.Path, tag: str) -> dict:
    ev = cfg.evaluation
    tr_kwargs = dict(T=ev.horizon, cfg=int_cfg,
                     min_dwell_steps=ev.min_dwell_steps)
    try:
        trace = simulate_etc(system, controller, event, x0, **tr_kwargs)
        budget_trace = None
        if ev.trigger_budget is not None:
            budget_trace = simulate_etc(system, controller, event, x0,
                                        budget=ev.trigger_budget, **tr_kwargs)
    except SimulationDiverged as err:
        # keep whatever integrated before the blow-up for post-mortems
        export_trace_csv(err.partial_trace, traces_dir / f"{tag}_partial.csv")
        raise
    metrics = compute_metrics(trace, system.target, ev.window_frac,
                              budget_trace=budget_trace)
    export_trace_csv(trace, traces_dir / f"{tag}.csv")
    row = {
        "num_triggers": metrics.num_triggers,
        "min_inter_event": metrics.min_inter_event,
        "mse_window": metrics.mse_window,
        "temporal_variance": metrics.temporal_variance,
        "mse_budget": metrics.mse_budget,
        "trace": f"traces/{tag}.csv",
        "trace_budget": None,
    }
    if budget_trace is not None:
        export_trace_csv(budget_trace, traces_dir / f"{tag}_budget.csv")
        row["trace_budget"] = f"traces/{tag}_budget.csv"
    return row


def train_and_save(cfg: ExperimentConfig, system: ControlSystem,
                   out: pathlib.Path):
    """Train if the method needs it; write checkpoint, report, and curves.

    Returns (params_or_None, summary_or_None).
    """
    tr = train_for_method(cfg, system)
    if tr is None:
        return None, None
    save_checkpoint(tr.checkpoint, out / "checkpoint.json")
    _write_json(out / "train_report.json",
                {"schema": SCHEMA, **tr.to_json_dict()})
    curves = _write_curves(tr, out)
    summary = {
        "wall_seconds": float(tr.wall_seconds),
        "report_path": "train_report.json",
        "checkpoint_path": "checkpoint.json",
        "curve_files": curves,
        "final_loss": (float(tr.curves["loss_total"][-1])
                       if tr.curves.get("loss_total") else None),
    }
    return tr.checkpoint, summary


def evaluate_seeds(cfg: ExperimentConfig, system: ControlSystem, controller,
                   event: EventFunction, out: pathlib.Path) -> list:
    """Simulate every evaluation seed, exporting traces as they finish."""
    traces_dir = out / "traces"
    traces_dir.mkdir(exist_ok=True)
    int_cfg = integration_config(cfg, system)
    per_seed = []
    for sd in cfg.evaluation.seeds:
        x0 = initial_condition(system, sd, cfg.train)
        row = _simulate_seed(system, controller, event, x0, cfg, int_cfg,
                             traces_dir, tag=f"seed{int(sd)}")
        per_seed.append({"seed": int(sd), "x0": [float(v) for v in x0], **row})
    return per_seed


def _analytic_bound(cfg: ExperimentConfig, system: ControlSystem, controller,
                    info: dict, params, per_seed) -> dict:
    grid = _alpha_grid(cfg.train, system)
    q = np.asarray(info["alpha_net"].q_values(params, grid), dtype=np.float64)
    inputs = estimate_bound_inputs(system, controller, info["V_grad"],
                                   q_min=float(q.min()),
                                   sigma=cfg.evaluation.sigma,
                                   root_seed=cfg.train.seed)
    empirical = None
    if per_seed:
        empirical = min(row["min_inter_event"] for row in per_seed)
    return bound_report(inputs, empirical_min_inter_event=empirical)


def run_experiment(cfg, out_dir=None) -> dict:
    """Run one configured experiment end to end and write its artifacts.

    Accepts an ExperimentConfig or a path to a TOML file. The config echo
    lands on disk before any training starts and partial traces are exported
    before a divergence propagates, so a failed run still leaves enough to
    diagnose.
    """
    if isinstance(cfg, (str, os.PathLike)):
        cfg = load_config(cfg)
    out = pathlib.Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config_echo.json",
                {"schema": SCHEMA, "tool_version": TOOL_VERSION,
                 "config": cfg.echo_dict()})

    system = resolve_system(cfg)
    params, train_summary = train_and_save(cfg, system, out)
    controller, event, info = make_closed_loop(cfg, system, params)
    per_seed = evaluate_seeds(cfg, system, controller, event, out)
    aggregate = aggregate_metrics(per_seed)

    bound = None
    if cfg.method == "netc-mc":
        bound = _analytic_bound(cfg, system, controller, info, params, per_seed)

    report = {
        "schema": SCHEMA,
        "tool_version": TOOL_VERSION,
        "experiment": cfg.name,
        "system": cfg.system,
        "method": cfg.method,
        "config": cfg.echo_dict(),
        "per_seed": per_seed,
        "aggregate": aggregate,
        "bound": bound,
        "train": train_summary,
    }
    if "care_residual" in info:
        report["care_residual"] = info["care_residual"]
    _write_json(out / "report.json", report)
    return report


def simulate_only(cfg: ExperimentConfig, checkpoint_path=None,
                  out_dir=None) -> dict:
    """Closed-loop evaluation from an existing checkpoint, no training.

    Methods without trainable parameters ignore the checkpoint entirely.
    """
    out = pathlib.Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    system = resolve_system(cfg)
    params = None
    if cfg.method in TRAINED_METHODS:
        path = checkpoint_path or (out / "checkpoint.json")
        params = load_method_params(cfg, system, path)
    controller, event, info = make_closed_loop(cfg, system, params)
    per_seed = evaluate_seeds(cfg, system, controller, event, out)
    payload = {
        "schema": SCHEMA,
        "tool_version": TOOL_VERSION,
        "experiment": cfg.name,
        "system": cfg.system,
        "method": cfg.method,
        "per_seed": per_seed,
        "aggregate": aggregate_metrics(per_seed),
    }
    if "care_residual" in info:
        payload["care_residual"] = info["care_residual"]
    _write_json(out / "metrics.json", payload)
    return payload


def compute_bound(cfg: ExperimentConfig, checkpoint_path=None,
                  report_path=None, out_dir=None) -> dict:
    """Analytic inter-event floor from a trained class-K checkpoint.

    When a report is available its smallest observed inter-event gap rides
    along for comparison; otherwise that field stays null.
    """
    if cfg.method != "netc-mc":
        raise ConfigError(
            "the analytic inter-event floor needs the trained class-K "
            "margin, which only method 'netc-mc' produces; got "
            f"'{cfg.method}'")
    out = pathlib.Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    system = resolve_system(cfg)
    path = checkpoint_path or (out / "checkpoint.json")
    params = load_method_params(cfg, system, path)
    controller, _, info = make_closed_loop(cfg, system, params)
    per_seed = []
    if report_path is None:
        candidate = out / "report.json"
        report_path = candidate if candidate.exists() else None
    if report_path is not None:
        with open(report_path) as fh:
            per_seed = json.load(fh).get("per_seed", [])
    rep = _analytic_bound(cfg, system, controller, info, params, per_seed)
    _write_json(out / "bound.json",
                {"schema": SCHEMA, "tool_version": TOOL_VERSION, **rep})
    return rep


def _toml_literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    return '"' + str(value).replace('"', '\\"') + '"'


def _leaf_name(key: str, value) -> str:
    tail = key.split(".")[-1]
    safe = re.sub(r"[^A-Za-z0-9_.+-]", "_", str(value))
    return f"{tail}-{safe}"


def run_sweep(config_path, overrides: Sequence[str] = (),
              seed: Optional[int] = None) -> list:
    """Run the [sweep] axis of a config: one full experiment per value.

    Each value gets its own subdirectory under the base out_dir and its own
    report; an index file ties them together.
    """
    base = load_config(config_path, overrides, seed)
    if base.sweep is None:
        raise ConfigError("sweep requires a [sweep] table in the config")
    reports = []
    entries = []
    for value in base.sweep.values:
        ov = list(overrides) + [f"{base.sweep.key}={_toml_literal(value)}"]
        cfg = load_config(config_path, ov, seed)
        cfg.sweep = None
        leaf = _leaf_name(base.sweep.key, value)
        cfg.out_dir = os.path.join(base.out_dir, leaf)
        cfg.name = f"{base.name}-{leaf}"
        reports.append(run_experiment(cfg))
        entries.append({"value": value, "report": f"{leaf}/report.json"})
    index = {"schema": SCHEMA, "tool_version": TOOL_VERSION,
             "sweep_key": base.sweep.key, "runs": entries}
    pathlib.Path(base.out_dir).mkdir(parents=True, exist_ok=True)
    _write_json(pathlib.Path(base.out_dir) / "sweep_index.json", index)
    return reports


# ------------------------------------------------------------ result table


def _table_row(report: dict) -> dict:
    agg = report["aggregate"]

    def pick(key: str, stat: str):
        cell = agg.get(key)
        return None if cell is None else float(cell[stat])

    return {
        "method": report["method"],
        "system": report["system"],
        "triggers_mean": pick("num_triggers", "mean"),
        "triggers_std": pick("num_triggers", "std"),
        "min_inter_event_mean": pick("min_inter_event", "mean"),
        "min_inter_event_std": pick("min_inter_event", "std"),
        "mse_budget_mean": pick("mse_budget", "mean"),
        "mse_budget_std": pick("mse_budget", "std"),
    }


def emit_table(reports: Sequence, path=None) -> str:
    """Comparison table as CSV text: one row per (method, system).

    Accepts report dicts, report paths, or previously parsed table rows; the
    three can be mixed. Rows sort by (system, method) so the column and row
    order is deterministic, and float cells use repr so parsing the table
    back reproduces the values exactly.
    """
    rows = []
    for item in reports:
        if isinstance(item, (str, os.PathLike)):
            with open(item) as fh:
                item = json.load(fh)
        if "aggregate" in item:
            schema = item.get("schema")
            if schema != SCHEMA:
                raise ContractViolation(
                    f"report schema mismatch: this tool writes '{SCHEMA}' "
                    f"but the report carries '{schema}'")
            rows.append(_table_row(item))
        else:
            missing = [c for c in TABLE_COLUMNS if c not in item]
            if missing:
                raise ContractViolation(f"table row is missing {missing}")
            rows.append({c: item[c] for c in TABLE_COLUMNS})
    rows.sort(key=lambda row: (row["system"], row["method"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for row in rows:
        cells = [row["method"], row["system"]]
        for col in TABLE_COLUMNS[2:]:
            v = row[col]
            cells.append("" if v is None else repr(float(v)))
        w.writerow(cells)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_table(text: str) -> list:
    """Parse emit_table output back into row dicts (None for empty cells)."""
    rdr = csv.reader(io.StringIO(text))
    header = next(rdr, None)
    if header != list(TABLE_COLUMNS):
        raise ContractViolation(
            f"unexpected table header {header}, expected {list(TABLE_COLUMNS)}")
    out = []
    for rec in rdr:
        if len(rec) != len(TABLE_COLUMNS):
            raise ContractViolation(f"malformed table row {rec}")
        row = {"method": rec[0], "system": rec[1]}
        for col, cell in zip(TABLE_COLUMNS[2:], rec[2:]):
            row[col] = None if cell == "" else float(cell)
        out.append(row)
    return out
