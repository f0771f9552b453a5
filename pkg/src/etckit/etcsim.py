"""Event functions and closed-loop event-triggered simulation.

Between triggers the control input is frozen at its value from the last
trigger state. The simulator integrates the augmented pair (x, e) with
e' = -x', so x + e reproduces the trigger state exactly and the held control
never needs re-evaluation inside the integrator; the event function is the
only place the current controller output u(x(t)) is needed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .odeint import IntegrationConfig, find_event, integrate
from .systems import ControlSystem
from .tensor import ContractViolation, NumericError

__all__ = [
    "EventFunction",
    "ETCTrace",
    "ETCMetrics",
    "SimulationDiverged",
    "simulate_etc",
    "compute_metrics",
    "export_trace_csv",
]

EVENT_KINDS = ("h_sigma_V", "h_tilde_alpha", "nlc_ratio", "lqr_quadratic",
               "always_negative")

TARGET_HIT_TOL = 1e-10
ZENO_LIMIT = 1_000_000


class SimulationDiverged(NumericError):
    """Integration blew up; carries whatever trace was accumulated."""

    def __init__(self, message: str, partial_trace: "ETCTrace"):
        super().__init__(message)
        self.partial_trace = partial_trace


@dataclass
class EventFunction:
    """Trigger condition h(x, e); an event fires when the value reaches zero.

    kind selects the formula: "h_sigma_V" compares the certificate decay under
    held vs. fresh control against sigma*V; "h_tilde_alpha" uses a class-K
    margin alpha(||x - x*||) instead of V; "nlc_ratio" compares full-field
    certificate derivatives; "lqr_quadratic" is the classical quadratic
    trigger; "always_negative" never fires.
    """

    kind: str
    sigma: float = 0.5
    system: Optional[ControlSystem] = None
    V_value: Optional[Callable] = None
    V_grad: Optional[Callable] = None
    u_eval: Optional[Callable] = None
    alpha_eval: Optional[Callable] = None
    Q1: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ContractViolation(f"unknown event kind '{self.kind}'")
        if self.kind != "always_negative" and not 0.0 < self.sigma < 1.0:
            raise ContractViolation("sigma must lie in (0, 1)")
        needs = {
            "h_sigma_V": ("system", "V_value", "V_grad", "u_eval"),
            "h_tilde_alpha": ("system", "V_grad", "u_eval", "alpha_eval"),
            "nlc_ratio": ("system", "V_grad", "u_eval"),
            "lqr_quadratic": ("system", "Q1", "S", "B", "K"),
            "always_negative": (),
        }[self.kind]
        for name in needs:
            if getattr(self, name) is None:
                raise ContractViolation(f"event kind '{self.kind}' needs {name}")

    def evaluate(self, x: np.ndarray, e: np.ndarray) -> float:
        """Generic form: evaluates the controller at x + e itself."""
        if self.kind == "always_negative":
            return -1.0
        if self.kind == "lqr_quadratic":
            return self._lqr(x, e)
        return self.evaluate_held(x, e, self.u_eval(x + e))

    def evaluate_held(self, x: np.ndarray, e: np.ndarray,
                      u_held: np.ndarray) -> float:
        """Fast form: the caller supplies u(x+e) (constant between triggers)."""
        if self.kind == "always_negative":
            return -1.0
        if self.kind == "lqr_quadratic":
            return self._lqr(x, e)
        sys = self.system
        u_now = np.asarray(self.u_eval(x))
        grad = self.V_grad(x)
        if self.kind == "nlc_ratio":
            lie_held = float(grad @ np.asarray(sys.vector_field(x, u_held)))
            lie_now = float(grad @ np.asarray(sys.vector_field(x, u_now)))
            return lie_held - self.sigma * lie_now
        diff = (np.asarray(sys.control_effect(x, u_held))
                - np.asarray(sys.control_effect(x, u_now)))
        lead = float(grad @ diff)
        if self.kind == "h_sigma_V":
            return lead - self.sigma * float(self.V_value(x))
        r = float(np.linalg.norm(x - sys.target))
        return lead - self.sigma * float(self.alpha_eval(r))

    def _lqr(self, x: np.ndarray, e: np.ndarray) -> float:
        y = x - self.system.target
        quad = float(y @ self.Q1 @ y)
        cross = float(y @ self.S @ self.B @ (self.K @ e))
        return (self.sigma - 1.0) * quad + 2.0 * cross


@dataclass
class ETCTrace:
    times: np.ndarray          # (K,)
    states: np.ndarray         # (K, d)
    errors: np.ndarray         # (K, d)
    controls: np.ndarray       # (K, m), control active at/after each knot
    trigger_flags: np.ndarray  # (K,) 1 where a control evaluation happened
    trigger_times: np.ndarray  # t0 = 0 < t1 < ...
    held_controls: np.ndarray  # (num_triggers + 1, m)
    horizon: float
    target: np.ndarray
    budget_exhausted_at: Optional[float] = None
    stopped_at_target: bool = False


@dataclass
class ETCMetrics:
    num_triggers: int
    min_inter_event: float
    mse_window: float
    temporal_variance: float
    mse_budget: Optional[float] = None


class _TraceBuilder:
    def __init__(self, dim: int, m: int, horizon: float, target: np.ndarray):
        self.ts: list[float] = []
        self.xs: list[np.ndarray] = []
        self.es: list[np.ndarray] = []
        self.us: list[np.ndarray] = []
        self.flags: list[int] = []
        self.trigger_times: list[float] = []
        self.held: list[np.ndarray] = []
        self.horizon = horizon
        self.target = target
        self.budget_exhausted_at: Optional[float] = None
        self.stopped_at_target = False

    def knot(self, t: float, x: np.ndarray, e: np.ndarray, u: np.ndarray,
             flag: int = 0) -> None:
        if self.ts and t <= self.ts[-1] + 1e-15 and flag == 0:
            return  # duplicate segment boundary
        self.ts.append(float(t))
        self.xs.append(np.asarray(x, dtype=np.float64).copy())
        self.es.append(np.asarray(e, dtype=np.float64).copy())
        self.us.append(np.asarray(u, dtype=np.float64).copy())
        self.flags.append(flag)

    def build(self) -> ETCTrace:
        return ETCTrace(
            times=np.array(self.ts),
            states=np.stack(self.xs),
            errors=np.stack(self.es),
            controls=np.stack(self.us),
            trigger_flags=np.array(self.flags, dtype=np.int64),
            trigger_times=np.array(self.trigger_times),
            held_controls=np.stack(self.held),
            horizon=self.horizon,
            target=self.target,
            budget_exhausted_at=self.budget_exhausted_at,
            stopped_at_target=self.stopped_at_target,
        )


def simulate_etc(
    system: ControlSystem,
    controller: Callable,
    event: EventFunction,
    x0: np.ndarray,
    T: Optional[float] = None,
    budget: Optional[int] = None,
    cfg: Optional[IntegrationConfig] = None,
    min_dwell_steps: int = 1,
) -> ETCTrace:
    """Closed-loop run: hold control, march to the next event, reset, repeat.

    After each trigger the error state resets to zero and one integration step
    of dwell is enforced before the event function is consulted again (the
    dwell knot itself may trigger). With a trigger budget, the control from
    the final permitted trigger is held to the horizon.
    """
    T = float(system.horizon if T is None else T)
    cfg = cfg or IntegrationConfig(step=system.default_step)
    if budget is not None and budget < 0:
        raise ContractViolation("trigger budget must be >= 0")
    d = system.dim
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (d,):
        raise ContractViolation(f"x0 must have shape ({d},)")

    u_held = np.asarray(controller(x), dtype=np.float64)
    tb = _TraceBuilder(d, system.control_dim, T, system.target)
    tb.trigger_times.append(0.0)
    tb.held.append(u_held.copy())
    tb.knot(0.0, x, np.zeros(d), u_held, flag=1)

    def aug_field_for(u_hold):
        def field(s):
            f = np.asarray(system.vector_field(s[:d], u_hold))
            return np.concatenate([f, -f])
        return field

    def h_for(u_hold):
        return lambda s: event.evaluate_held(s[:d], s[d:], u_hold)

    if budget == 0:
        # no triggers permitted: the initial control is held for the whole run
        tb.budget_exhausted_at = 0.0
        s0 = np.concatenate([x, np.zeros(d)])
        try:
            tail = integrate(aug_field_for(u_held), s0, 0.0, T, cfg)
        except NumericError as err:
            raise SimulationDiverged(str(err), tb.build()) from err
        for j in range(1, len(tail.ts)):
            tb.knot(tail.ts[j], tail.xs[j, :d], tail.xs[j, d:], u_held)
        return tb.build()

    t = 0.0
    s = np.concatenate([x, np.zeros(d)])
    while t < T - 1e-12:
        if np.linalg.norm(s[:d] - system.target) < TARGET_HIT_TOL:
            tb.stopped_at_target = True
            tb.knot(T, s[:d], s[d:], u_held)
            break
        if len(tb.trigger_times) > ZENO_LIMIT:
            raise SimulationDiverged("Zeno behaviour: trigger count exceeded 1e6",
                                     tb.build())
        field = aug_field_for(u_held)
        h = h_for(u_held)
        # one-step dwell after the reset
        seg_end = min(t + min_dwell_steps * cfg.step, T) if min_dwell_steps else t
        if seg_end > t:
            try:
                dwell = integrate(field, s, t, seg_end, cfg)
            except NumericError as err:
                raise SimulationDiverged(str(err), tb.build()) from err
            for j in range(1, len(dwell.ts)):
                tb.knot(dwell.ts[j], dwell.xs[j, :d], dwell.xs[j, d:], u_held)
            s = dwell.x_end.copy()
            t = seg_end
        triggered = False
        if t >= T - 1e-12:
            if float(h(s)) >= 0:
                triggered = True  # horizon knot counts if the event is active
            else:
                break
        elif float(h(s)) >= 0:
            triggered = True
        else:
            try:
                res = find_event(field, h, s, t, T, cfg)
            except NumericError as err:
                raise SimulationDiverged(str(err), tb.build()) from err
            traj = res.trajectory
            inside = traj.ts < res.t_event - 1e-15 if res.converged else \
                np.ones(len(traj.ts), dtype=bool)
            for j in range(1, len(traj.ts)):
                if inside[j]:
                    tb.knot(traj.ts[j], traj.xs[j, :d], traj.xs[j, d:], u_held)
            if not res.converged:
                s = traj.x_end.copy()
                t = T
                break
            t = res.t_event
            s = res.x_event.copy()
            triggered = True
        if triggered:
            x_now = s[:d].copy()
            u_held = np.asarray(controller(x_now), dtype=np.float64)
            tb.trigger_times.append(t)
            tb.held.append(u_held.copy())
            s = np.concatenate([x_now, np.zeros(d)])  # reset e
            tb.knot(t, x_now, np.zeros(d), u_held, flag=1)
            if budget is not None and len(tb.trigger_times) - 1 >= budget:
                tb.budget_exhausted_at = t
                if t < T - 1e-12:
                    try:
                        tail = integrate(aug_field_for(u_held), s, t, T, cfg)
                    except NumericError as err:
                        raise SimulationDiverged(str(err), tb.build()) from err
                    for j in range(1, len(tail.ts)):
                        tb.knot(tail.ts[j], tail.xs[j, :d], tail.xs[j, d:], u_held)
                break
    return tb.build()


def _window_average(ts: np.ndarray, vals: np.ndarray, t_lo: float) -> float:
    mask = ts >= t_lo - 1e-12
    tw = ts[mask]
    vw = vals[mask]
    if len(tw) < 2:
        return float(vw[-1]) if len(tw) else 0.0
    span = tw[-1] - tw[0]
    if span <= 0:
        return float(vw[-1])
    return float(np.trapezoid(vw, tw) / span)


def compute_metrics(trace: ETCTrace, target: np.ndarray,
                    window_frac: float = 0.1,
                    budget_trace: Optional[ETCTrace] = None) -> ETCMetrics:
    """Table-style summary of one closed-loop run."""
    if len(trace.times) == 0:
        raise ContractViolation("empty trace")
    target = np.asarray(target, dtype=np.float64)
    positive = trace.trigger_times[1:]
    num_triggers = int(len(positive))
    if num_triggers >= 2:
        min_gap = float(np.min(np.diff(positive)))
    else:
        min_gap = float(trace.horizon)
    t_lo = trace.horizon * (1.0 - window_frac)
    err2 = np.sum((trace.states - target) ** 2, axis=1)
    mse_window = _window_average(trace.times, err2, t_lo)
    mean_x = np.array([
        _window_average(trace.times, trace.states[:, i], t_lo)
        for i in range(trace.states.shape[1])
    ])
    mean_x2 = np.array([
        _window_average(trace.times, trace.states[:, i] ** 2, t_lo)
        for i in range(trace.states.shape[1])
    ])
    temporal_variance = float(np.sum(np.maximum(mean_x2 - mean_x ** 2, 0.0)))
    mse_budget = None
    if budget_trace is not None:
        mse_budget = compute_metrics(budget_trace, target, window_frac).mse_window
    return ETCMetrics(
        num_triggers=num_triggers,
        min_inter_event=min_gap,
        mse_window=float(mse_window),
        temporal_variance=temporal_variance,
        mse_budget=mse_budget,
    )


def export_trace_csv(trace: ETCTrace, path) -> None:
    d = trace.states.shape[1]
    m = trace.controls.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(d)]
                   + [f"u{i + 1}" for i in range(m)] + ["trigger_flag"])
        for k in range(len(trace.times)):
            w.writerow([repr(float(trace.times[k]))]
                       + [repr(float(v)) for v in trace.states[k]]
                       + [repr(float(v)) for v in trace.controls[k]]
                       + [int(trace.trigger_flags[k])])
