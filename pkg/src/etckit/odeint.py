"""Fixed-step RK4 integration, dense output, event localization, event gradients.

Event times are found by stepping until the event function changes sign across
a knot interval, then bisecting on the cubic Hermite interpolant. Their
parameter sensitivities come from the implicit function theorem: the numerator
is the gradient of h at the event state, obtained by re-running the exact same
step layout with taped parameters; the denominator is the time derivative of h
along the stored trajectory, by central differences on the dense output.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Mapping

import numpy as np

from . import tensor as ops
from .tensor import ContractViolation, GradientMap, NumericError, Tape

__all__ = [
    "IntegrationConfig",
    "Trajectory",
    "EventSolveResult",
    "integrate",
    "find_event",
    "event_time_gradient",
    "solver_calls",
]

# global count of numeric integrate/find_event invocations; lets tests assert
# that sample-efficient training paths never touch the solver
SOLVER_CALLS = 0


def solver_calls() -> int:
    return SOLVER_CALLS


@dataclass(frozen=True)
class IntegrationConfig:
    step: float
    method: str = "rk4"
    max_steps: int = 10_000_000
    event_tol: float = 1e-9

    def __post_init__(self):
        if self.method != "rk4":
            raise ContractViolation(f"unsupported method '{self.method}'")
        if not self.step > 0:
            raise ContractViolation("step must be positive")
        if not self.event_tol < self.step:
            raise ContractViolation("event_tol must be smaller than the step")
        if self.max_steps < 1:
            raise ContractViolation("max_steps must be >= 1")


@dataclass
class Trajectory:
    """Knot states plus derivatives; dense output by cubic Hermite."""

    ts: np.ndarray
    xs: np.ndarray
    fs: np.ndarray

    @property
    def t_end(self) -> float:
        return float(self.ts[-1])

    @property
    def x_end(self) -> np.ndarray:
        return self.xs[-1]

    def eval(self, t: float) -> np.ndarray:
        ts = self.ts
        if len(ts) == 1:
            return self.xs[0].copy()
        # clamp to the outermost intervals; a hair of extrapolation is fine
        i = int(np.searchsorted(ts, t, side="right")) - 1
        i = min(max(i, 0), len(ts) - 2)
        t0, t1 = ts[i], ts[i + 1]
        h = t1 - t0
        s = (t - t0) / h
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return (h00 * self.xs[i] + h10 * h * self.fs[i]
                + h01 * self.xs[i + 1] + h11 * h * self.fs[i + 1])


@dataclass
class EventSolveResult:
    t_event: float
    x_event: np.ndarray
    converged: bool
    steps_taken: int
    trajectory: Trajectory


def _step_layout(t0: float, t1: float, step: float) -> tuple[int, float]:
    """Number of full steps and the truncated remainder covering [t0, t1]."""
    span = t1 - t0
    n_full = int(np.floor(span / step + 1e-12))
    remainder = span - n_full * step
    if remainder < 1e-12 * max(1.0, abs(t1)):
        remainder = 0.0
    return n_full, remainder


def _rk4_step(field: Callable, x, h: float):
    k1 = field(x)
    k2 = field(ops.add(x, ops.mul(h / 2.0, k1)))
    k3 = field(ops.add(x, ops.mul(h / 2.0, k2)))
    k4 = field(ops.add(x, ops.mul(h, k3)))
    incr = ops.add(ops.add(k1, ops.mul(2.0, k2)), ops.add(ops.mul(2.0, k3), k4))
    return ops.add(x, ops.mul(h / 6.0, incr)), k1


def _check_finite(x: np.ndarray, t: float, t_last: float) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(
            f"integration diverged at t={t:.6g} (last finite time t={t_last:.6g})"
        )


def integrate(field: Callable, x0, t0: float, t1: float,
              cfg: IntegrationConfig) -> Trajectory:
    """RK4 from t0 to t1 with fixed steps, final step truncated."""
    global SOLVER_CALLS
    SOLVER_CALLS += 1
    if not t1 > t0:
        raise ContractViolation("integrate needs t1 > t0")
    x = np.asarray(x0, dtype=np.float64).copy()
    n_full, remainder = _step_layout(t0, t1, cfg.step)
    if n_full + (1 if remainder else 0) > cfg.max_steps:
        raise ContractViolation("integration span exceeds max_steps")
    ts = [t0]
    xs = [x.copy()]
    fs = [np.asarray(field(x))]
    t = t0
    for k in range(n_full):
        x, _ = _rk4_step(field, x, cfg.step)
        t = t0 + (k + 1) * cfg.step
        _check_finite(x, t, ts[-1])
        ts.append(t)
        xs.append(x.copy())
        fs.append(np.asarray(field(x)))
    if remainder:
        x, _ = _rk4_step(field, x, remainder)
        _check_finite(x, t1, ts[-1])
        ts.append(t1)
        xs.append(x.copy())
        fs.append(np.asarray(field(x)))
    return Trajectory(np.array(ts), np.stack(xs), np.stack(fs))


def find_event(field: Callable, h: Callable, state0, t0: float, t_max: float,
               cfg: IntegrationConfig) -> EventSolveResult:
    """March until h crosses zero, then bisect the Hermite interpolant.

    Requires h(state0) < 0. Returns the first crossing in (t0, t_max];
    if h never reaches zero, converged=False with t_event=t_max.
    """
    global SOLVER_CALLS
    SOLVER_CALLS += 1
    if not t_max > t0:
        raise ContractViolation("find_event needs t_max > t0")
    x = np.asarray(state0, dtype=np.float64).copy()
    h_prev = float(h(x))
    if not h_prev < 0:
        raise ContractViolation(
            f"event already active at t0 (h={h_prev:.3e} >= 0)"
        )
    ts = [t0]
    xs = [x.copy()]
    fs = [np.asarray(field(x))]
    n_full, remainder = _step_layout(t0, t_max, cfg.step)
    sizes = [cfg.step] * n_full + ([remainder] if remainder else [])
    if len(sizes) > cfg.max_steps:
        raise ContractViolation("event search span exceeds max_steps")
    t = t0
    for k, dt in enumerate(sizes):
        x, _ = _rk4_step(field, x, dt)
        t = t_max if k == len(sizes) - 1 else t0 + (k + 1) * cfg.step
        _check_finite(x, t, ts[-1])
        ts.append(t)
        xs.append(x.copy())
        fs.append(np.asarray(field(x)))
        h_cur = float(h(x))
        if h_cur >= 0:
            traj = Trajectory(np.array(ts), np.stack(xs), np.stack(fs))
            lo, hi = ts[-2], t
            for _ in range(40):
                if hi - lo <= cfg.event_tol:
                    break
                mid = 0.5 * (lo + hi)
                if float(h(traj.eval(mid))) < 0:
                    lo = mid
                else:
                    hi = mid
            t_event = 0.5 * (lo + hi)
            return EventSolveResult(
                t_event=t_event,
                x_event=traj.eval(t_event),
                converged=True,
                steps_taken=k + 1,
                trajectory=traj,
            )
    traj = Trajectory(np.array(ts), np.stack(xs), np.stack(fs))
    return EventSolveResult(
        t_event=t_max, x_event=x.copy(), converged=False,
        steps_taken=len(sizes), trajectory=traj,
    )


def event_time_gradient(
    field: Callable,
    h: Callable,
    state0: np.ndarray,
    t_event: float,
    params: Mapping[str, np.ndarray],
    cfg: IntegrationConfig,
    t0: float = 0.0,
    trajectory: Trajectory | None = None,
) -> GradientMap:
    """dt*/dparam by the implicit function theorem.

    ``field(state, params)`` and ``h(state, params)`` must route through the
    generic ops so the re-integration can run with taped parameters. The
    trajectory from the original event solve is reused for the time-derivative
    denominator; if absent, a fresh numeric pass is made.
    """
    if not t_event > t0:
        raise ContractViolation("event time must exceed t0")
    # numerator: d h(x(t*)) / d params via taped re-integration
    tape = Tape()
    leaves = tape.leaves(params)
    x = np.asarray(state0, dtype=np.float64)
    n_full, remainder = _step_layout(t0, t_event, cfg.step)
    taped_field = lambda s: field(s, leaves)
    for _ in range(n_full):
        x, _ = _rk4_step(taped_field, x, cfg.step)
    if remainder:
        x, _ = _rk4_step(taped_field, x, remainder)
    h_end = h(x, leaves)
    if isinstance(h_end, ops.Tensor):
        numerator = ops.grad(h_end, leaves)
    else:
        # neither the field nor h touched the parameters
        numerator = GradientMap({k: np.zeros_like(np.asarray(v))
                                 for k, v in params.items()})

    # denominator: dh/dt at t* by central differences on the dense output;
    # the window must stay tight because h can carry large third derivatives
    # along stiff controlled trajectories
    delta = 1e-6 * max(1.0, abs(t_event))
    if trajectory is None or trajectory.t_end < t_event:
        num_field = lambda s: ops._val(field(s, params))
        trajectory = integrate(num_field, state0, t0,
                               t_event + max(cfg.step, 10 * delta), cfg)
    h_num = lambda s: float(ops._val(h(s, params)))
    denom = (h_num(trajectory.eval(t_event + delta))
             - h_num(trajectory.eval(t_event - delta))) / (2 * delta)
    if abs(denom) < 1e-10:
        raise NumericError(
            f"tangential event crossing: |dh/dt|={abs(denom):.2e} at t*={t_event:.6g}"
        )
    return GradientMap({name: -g / denom for name, g in numerator.items()})
