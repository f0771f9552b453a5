"""Loss terms, Adam, and the two certificate/controller training loops.

The proportional-integral-style loop ("pi") alternates full-dataset
stabilization descent with per-batch first-event solves whose times enter the
loss through implicit-function-theorem sensitivities. The margin-curve loop
("mc") never touches the ODE solver: the event geometry is shaped indirectly
by regularizing the class-K integrand.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as ops
from .nets import ClassKNet, ControllerNet, LyapunovNet, lie_derivative, project_nonneg
from .odeint import IntegrationConfig, event_time_gradient, find_event, integrate
from .systems import ControlSystem, get_system
from .tensor import (
    ContractViolation,
    GradientMap,
    NumericError,
    ParameterSet,
    Tape,
    custom_grad_scalar,
)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "Adam",
    "loss_stab",
    "loss_stab_mc",
    "loss_lip",
    "loss_event_pi",
    "loss_alpha_inv",
    "train_pi",
    "train_mc",
    "training_diagnostics",
    "fd_gradient",
    "build_nets",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    system: str = "grn"
    n_samples: int = 1000
    batch_size: int = 10
    m_alpha: int = 100
    learning_rate: float = 0.01
    m_warm: int = 500
    m_main: int = 50
    lambda1: float = 1.0
    lambda2: float = 10.0
    sigma: float = 0.5
    seed: int = 0
    icnn_arch: Sequence[int] = (2, 10, 10, 1)
    control_arch: Sequence[int] = (2, 20, 20, 1)
    classk_arch: Sequence[int] = (1, 20, 1)
    controller_mode: str = "auto"
    activation: str = "relu"
    v_eps: float = 1e-3
    decay_delta: float = 1.0
    step: Optional[float] = None
    event_tol: float = 1e-9
    diag_probes: int = 16
    pi_alpha_hybrid: bool = False
    alpha_weight: float = 0.1
    alpha_grid_max: Optional[float] = None

    def validate(self) -> None:
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise ContractViolation("lambda weights must be nonnegative")
        if not 0.0 < self.sigma < 1.0:
            raise ContractViolation("sigma must lie in (0, 1)")
        if not self.learning_rate > 0:
            raise ContractViolation("learning rate must be positive")
        if self.n_samples < 1 or self.m_alpha < 1:
            raise ContractViolation("sample counts must be >= 1")
        if not 1 <= self.batch_size <= self.n_samples:
            raise ContractViolation("batch size must lie in [1, n_samples]")
        if self.m_warm < 0 or self.m_main < 0:
            raise ContractViolation("iteration counts must be >= 0")
        if self.decay_delta != 1.0:
            raise ContractViolation("the decay margin is fixed at 1")


@dataclass
class TrainReport:
    curves: dict
    trigger_counts: list
    grad_u_norm: list
    hessV_trace: list
    wall_seconds: float
    checkpoint: ParameterSet

    def to_json_dict(self) -> dict:
        return {
            "curves": {k: [float(v) for v in vs] for k, vs in self.curves.items()},
            "trigger_counts": [int(v) for v in self.trigger_counts],
            "grad_u_norm": [float(v) for v in self.grad_u_norm],
            "hessV_trace": [float(v) for v in self.hessV_trace],
            "wall_seconds": float(self.wall_seconds),
        }


class Adam:
    """Adam with deterministic name-ordered updates, applied in place."""

    def __init__(self, params: ParameterSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(self.params):
            g = grads.get(name)
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mh = self.m[name] / c1
            vh = self.v[name] / c2
            self.params[name] -= self.lr * mh / (np.sqrt(vh) + self.eps)


# ------------------------------------------------------------------ losses


def loss_stab(V: LyapunovNet, u: ControllerNet, system: ControlSystem,
              leaves: Mapping, X: np.ndarray, delta: float = 1.0):
    """Mean hinge of the certificate decay condition over a batch of states."""
    if len(X) == 0:
        raise ContractViolation("loss_stab needs a nonempty batch")
    U = u.value(leaves, X)
    F = system.vector_field(X, U)
    vals, lie = lie_derivative(lambda Y: V.value(leaves, Y), X, F)
    return ops.tmean(ops.maximum(ops.add(lie, ops.mul(delta, vals)), 0.0))


def loss_stab_mc(V: LyapunovNet, u: ControllerNet, alpha: ClassKNet,
                 system: ControlSystem, leaves: Mapping, X: np.ndarray,
                 radii: Optional[np.ndarray] = None):
    """Hinge with the class-K margin alpha(||x - x*||) in place of V."""
    if len(X) == 0:
        raise ContractViolation("loss_stab_mc needs a nonempty batch")
    if radii is None:
        radii = np.linalg.norm(X - system.target, axis=1)
    U = u.value(leaves, X)
    F = system.vector_field(X, U)
    _, lie = lie_derivative(lambda Y: V.value(leaves, Y), X, F)
    margin = alpha.alpha(leaves, radii)
    return ops.tmean(ops.maximum(ops.add(lie, margin), 0.0))


def loss_lip(u: ControllerNet, leaves: Mapping):
    """Sum of squared spectral norms of the controller weight matrices."""
    total = 0.0
    for name in u.weight_names():
        s = ops.spectral_norm(leaves[name])
        total = ops.add(total, ops.mul(s, s))
    return total


def loss_event_pi(t1_values: Sequence):
    """Mean reciprocal first-event time over a batch."""
    if len(t1_values) == 0:
        raise ContractViolation("loss_event_pi needs at least one event time")
    for t in t1_values:
        if not float(ops._val(t)) > 0:
            raise ContractViolation("event times must be positive")
    recips = [ops.div(1.0, t) for t in t1_values]
    return ops.tmean(ops.stack(recips))


def loss_alpha_inv(alpha: ClassKNet, leaves: Mapping, grid: np.ndarray):
    """Mean reciprocal of the class-K integrand on a radius grid."""
    if len(grid) == 0:
        raise ContractViolation("loss_alpha_inv needs a nonempty grid")
    q = alpha.q_values(leaves, np.asarray(grid, dtype=np.float64))
    return ops.tmean(ops.div(1.0, ops.maximum(q, 1e-6)))


# ------------------------------------------------------- event solving (pi)


def first_event_time(system: ControlSystem, V: LyapunovNet, u: ControllerNet,
                     params: ParameterSet, x0: np.ndarray, sigma: float,
                     cfg: IntegrationConfig, horizon: float,
                     want_gradient: bool = True):
    """First trigger of the sigma-V event from a fresh hold at x0.

    Returns (t1, status, gradmap) with status in {"converged", "dwell",
    "unconverged"}. A trigger at the mandatory one-step dwell knot and a
    no-trigger run both carry no usable time sensitivity, so gradmap is None
    there; NumericError propagates when the dynamics blow up or the crossing
    is tangential.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    u_held = np.asarray(u.value(params, x0), dtype=np.float64)

    def field_num(xt):
        return np.asarray(system.vector_field(xt, u_held))

    def h_num(xt):
        u_now = np.asarray(u.value(params, xt))
        diff = (np.asarray(system.control_effect(xt, u_held))
                - np.asarray(system.control_effect(xt, u_now)))
        gv = V.gradient(params, xt)
        return float(gv @ diff) - sigma * float(V.value(params, xt))

    t_dwell = min(cfg.step, horizon)
    dwell = integrate(field_num, x0, 0.0, t_dwell, cfg)
    if h_num(dwell.x_end) >= 0:
        return t_dwell, "dwell", None
    if t_dwell >= horizon - 1e-12:
        return horizon, "unconverged", None
    res = find_event(field_num, h_num, dwell.x_end, t_dwell, horizon, cfg)
    if not res.converged:
        return horizon, "unconverged", None
    if not want_gradient:
        return res.t_event, "converged", None

    cache: dict = {}

    def held_for(P):
        key = id(P)
        if key not in cache:
            cache[key] = u.value(P, x0)
        return cache[key]

    def field_p(state, P):
        return system.vector_field(state, held_for(P))

    def h_p(state, P):
        u_now = u.value(P, state)
        diff = ops.sub(system.control_effect(state, held_for(P)),
                       system.control_effect(state, u_now))
        gv = ops.input_gradient(lambda xx: V.value(P, xx), state)
        lead = ops.dot(gv, diff)
        return ops.sub(lead, ops.mul(sigma, V.value(P, state)))

    gm = event_time_gradient(field_p, h_p, x0, res.t_event, params, cfg,
                             t0=0.0, trajectory=res.trajectory)
    return res.t_event, "converged", gm


# --------------------------------------------------------------- training


def build_nets(cfg: TrainConfig, system: ControlSystem):
    V = LyapunovNet(cfg.icnn_arch, system.target, eps=cfg.v_eps)
    u = ControllerNet(cfg.control_arch, system.target,
                      mode=cfg.controller_mode, activation=cfg.activation)
    return V, u


def _alpha_grid(cfg: TrainConfig, system: ControlSystem) -> np.ndarray:
    if cfg.alpha_grid_max is not None:
        r_max = float(cfg.alpha_grid_max)
    else:
        corners = np.stack([system.domain_lo, system.domain_hi])
        # farthest corner of the sampling box from the target
        worst = np.max(np.abs(corners - system.target), axis=0)
        r_max = float(np.linalg.norm(worst))
    return np.linspace(0.0, r_max, cfg.m_alpha)


def training_diagnostics(V: LyapunovNet, u: ControllerNet, params: ParameterSet,
                         probe: np.ndarray, fd_step: float = 1e-4) -> dict:
    """Curvature of V (mean Laplacian) and controller sensitivity (mean
    Jacobian Frobenius norm), both by central differences."""
    probe = np.atleast_2d(np.asarray(probe, dtype=np.float64))
    if probe.size == 0:
        raise ContractViolation("diagnostics need a nonempty probe set")
    n, d = probe.shape
    shift = np.eye(d) * fd_step
    plus = (probe[None, :, :] + shift[:, None, :]).reshape(-1, d)
    minus = (probe[None, :, :] - shift[:, None, :]).reshape(-1, d)
    vals = np.asarray(ops._val(V.value(params, np.concatenate([plus, minus, probe]))))
    vp = vals[: d * n].reshape(d, n)
    vm = vals[d * n: 2 * d * n].reshape(d, n)
    v0 = vals[2 * d * n:]
    lap = (vp - 2.0 * v0[None, :] + vm).sum(axis=0) / fd_step ** 2
    ub = np.asarray(ops._val(u.value(params, np.concatenate([plus, minus]))))
    m = ub.shape[1]
    jac = (ub[: d * n].reshape(d, n, m) - ub[d * n:].reshape(d, n, m)) / (2 * fd_step)
    fro = np.sqrt(np.sum(jac ** 2, axis=(0, 2)))
    return {"grad_u_norm": float(fro.mean()), "hessV_trace": float(lap.mean())}


def _record_diag(V, u, params, probe, gun, hvt):
    if probe is None:
        return
    diag = training_diagnostics(V, u, params, probe)
    gun.append(diag["grad_u_norm"])
    hvt.append(diag["hessV_trace"])


def train_pi(cfg: TrainConfig, system: Optional[ControlSystem] = None) -> TrainReport:
    """Warm-up on the stabilization hinge, then event-time shaping.

    Each main iteration solves the first event for a fresh batch of initial
    states against an immutable parameter snapshot (deterministic batch
    order), splices the time sensitivities into one tape, and takes a single
    Adam step on the combined loss.
    """
    cfg.validate()
    t_wall = time.perf_counter()
    system = system or get_system(cfg.system)
    rng = np.random.default_rng(cfg.seed)
    V, u = build_nets(cfg, system)
    params = V.init_params(rng)
    params.update(u.init_params(rng))
    alpha = None
    grid = None
    if cfg.pi_alpha_hybrid:
        alpha = ClassKNet(cfg.classk_arch)
        params.update(alpha.init_params(rng))
        grid = _alpha_grid(cfg, system)
    X = system.sample_domain(rng, cfg.n_samples)
    probe = system.sample_domain(rng, cfg.diag_probes) if cfg.diag_probes > 0 else None
    opt = Adam(params, cfg.learning_rate)
    icfg = IntegrationConfig(step=cfg.step or system.default_step,
                             event_tol=cfg.event_tol)
    curves: dict = {"loss_stab": [], "loss_lip": [], "loss_event": [],
                    "loss_total": []}
    trig: list = []
    gun: list = []
    hvt: list = []

    def stab_term(leaves):
        if alpha is None:
            return loss_stab(V, u, system, leaves, X, delta=cfg.decay_delta)
        hinge = loss_stab_mc(V, u, alpha, system, leaves, X)
        return ops.add(hinge, ops.mul(cfg.alpha_weight,
                                      loss_alpha_inv(alpha, leaves, grid)))

    for _ in range(cfg.m_warm):
        tape = Tape()
        leaves = tape.leaves(params)
        l_s = stab_term(leaves)
        l_l = loss_lip(u, leaves)
        total = ops.add(l_s, ops.mul(cfg.lambda1, l_l))
        g = ops.grad(total, leaves)
        opt.step(g)
        project_nonneg(params)
        curves["loss_stab"].append(float(ops._val(l_s)))
        curves["loss_lip"].append(float(ops._val(l_l)))
        curves["loss_total"].append(float(ops._val(total)))
        _record_diag(V, u, params, probe, gun, hvt)

    for _ in range(cfg.m_main):
        idx = rng.choice(cfg.n_samples, size=cfg.batch_size, replace=False)
        solved = []
        n_triggered = 0
        for i in idx:
            try:
                t1, status, gm = first_event_time(
                    system, V, u, params, X[i], cfg.sigma, icfg, system.horizon)
            except NumericError:
                continue
            solved.append((t1, gm))
            if status in ("converged", "dwell"):
                n_triggered += 1
        if not solved:
            raise TrainingError(
                "first-event solve failed for the whole batch; the controller "
                "is likely still destabilizing. Increase m_warm before the "
                "event-shaping phase.")
        tape = Tape()
        leaves = tape.leaves(params)
        t1_nodes = [
            custom_grad_scalar(tape, t1, gm if gm is not None else GradientMap(),
                               leaves, name="t1")
            for t1, gm in solved
        ]
        l_s = stab_term(leaves)
        l_l = loss_lip(u, leaves)
        l_e = loss_event_pi(t1_nodes)
        total = ops.add(ops.add(l_s, ops.mul(cfg.lambda1, l_l)),
                        ops.mul(cfg.lambda2, l_e))
        g = ops.grad(total, leaves)
        opt.step(g)
        project_nonneg(params)
        curves["loss_stab"].append(float(ops._val(l_s)))
        curves["loss_lip"].append(float(ops._val(l_l)))
        curves["loss_event"].append(float(ops._val(l_e)))
        curves["loss_total"].append(float(ops._val(total)))
        trig.append(n_triggered)
        _record_diag(V, u, params, probe, gun, hvt)

    return TrainReport(curves=curves, trigger_counts=trig, grad_u_norm=gun,
                       hessV_trace=hvt,
                       wall_seconds=time.perf_counter() - t_wall,
                       checkpoint=params.clone())


def train_mc(cfg: TrainConfig, system: Optional[ControlSystem] = None) -> TrainReport:
    """Single-phase training of (V, u, alpha) with no ODE solving at all."""
    cfg.validate()
    t_wall = time.perf_counter()
    system = system or get_system(cfg.system)
    rng = np.random.default_rng(cfg.seed)
    V, u = build_nets(cfg, system)
    alpha = ClassKNet(cfg.classk_arch)
    params = V.init_params(rng)
    params.update(u.init_params(rng))
    params.update(alpha.init_params(rng))
    X = system.sample_domain(rng, cfg.n_samples)
    radii = np.linalg.norm(X - system.target, axis=1)
    grid = _alpha_grid(cfg, system)
    probe = system.sample_domain(rng, cfg.diag_probes) if cfg.diag_probes > 0 else None
    opt = Adam(params, cfg.learning_rate)
    curves: dict = {"loss_stab": [], "loss_lip": [], "loss_alpha_inv": [],
                    "loss_total": []}
    gun: list = []
    hvt: list = []

    for _ in range(cfg.m_warm + cfg.m_main):
        tape = Tape()
        leaves = tape.leaves(params)
        l_s = loss_stab_mc(V, u, alpha, system, leaves, X, radii=radii)
        l_l = loss_lip(u, leaves)
        l_a = loss_alpha_inv(alpha, leaves, grid)
        total = ops.add(ops.add(l_s, ops.mul(cfg.lambda1, l_l)),
                        ops.mul(cfg.lambda2, l_a))
        g = ops.grad(total, leaves)
        opt.step(g)
        project_nonneg(params)
        curves["loss_stab"].append(float(ops._val(l_s)))
        curves["loss_lip"].append(float(ops._val(l_l)))
        curves["loss_alpha_inv"].append(float(ops._val(l_a)))
        curves["loss_total"].append(float(ops._val(total)))
        _record_diag(V, u, params, probe, gun, hvt)

    return TrainReport(curves=curves, trigger_counts=[], grad_u_norm=gun,
                       hessV_trace=hvt,
                       wall_seconds=time.perf_counter() - t_wall,
                       checkpoint=params.clone())


# ------------------------------------------------------------------ testing


def fd_gradient(loss_fn: Callable[[ParameterSet], float], params: ParameterSet,
                step: float = 1e-6) -> GradientMap:
    """Central-difference gradient of a numeric loss over a parameter set."""
    out = GradientMap()
    work = params.clone()
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = work[name].reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            up = loss_fn(work)
            flat[j] = keep - step
            dn = loss_fn(work)
            flat[j] = keep
            gflat[j] = (up - dn) / (2 * step)
        out[name] = g
    return out
