"""Comparison controllers: Riccati feedback, an analytic one-constraint QP
policy, and two unconstrained certificate trainers.

The Riccati solver is a Kleinman-Newton iteration with dense Kronecker
Lyapunov solves, deliberately capped at small state dimensions; the QP policy
has a closed-form KKT solution because it carries a single inequality
constraint with a quadratic slack penalty. The two trainers mirror the main
training loops but drop every structural safeguard (no convex certificate, no
spectral penalty), which is exactly what makes them useful as a foil.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as ops
from .nets import ControllerNet, _is_batch, _primal, lie_derivative
from .systems import ControlSystem, get_system
from .tensor import ContractViolation, ParameterSet, Tape
from .training import Adam, TrainConfig, TrainReport, training_diagnostics

__all__ = [
    "BALSA_P1",
    "BalsaResult",
    "LQR_COSTS",
    "LQR_SIGMA",
    "LQRSolution",
    "MLPLyapunov",
    "QuadLyapunovNet",
    "StabilizabilityError",
    "balsa_control",
    "balsa_controller",
    "balsa_solve",
    "build_nlc_nets",
    "build_quad_nets",
    "care_residual",
    "linearize",
    "lqr_controller",
    "lqr_event",
    "lqr_for_system",
    "solve_care",
    "train_nlc",
    "train_quad_nlc",
]


class StabilizabilityError(RuntimeError):
    pass


# --------------------------------------------------------------- Riccati


@dataclass
class LQRSolution:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    K: np.ndarray
    Q1: np.ndarray
    residual: float

    def to_json_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("A", "B", "Q", "R", "S", "K", "Q1")} | {
                    "residual": float(self.residual)}


def _hurwitz(M: np.ndarray) -> bool:
    return float(np.max(np.linalg.eigvals(M).real)) < 0.0


def care_residual(A, B, Q, R, S) -> float:
    gain = S @ B @ np.linalg.solve(R, B.T @ S)
    return float(np.linalg.norm(A.T @ S + S @ A - gain + Q, ord="fro"))


def solve_care(A, B, Q, R, tol: float = 1e-10,
               max_iter: int = 60) -> LQRSolution:
    """Continuous algebraic Riccati solve by Kleinman-Newton iteration.

    Each step solves one Lyapunov equation through its d^2 x d^2 Kronecker
    system, so the state dimension is capped at 20. The initial gain is zero
    when the drift is already stable, otherwise c*B^T with c doubled until
    the loop closes stably.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    d = A.shape[0]
    if A.shape != (d, d) or B.shape[0] != d or Q.shape != (d, d):
        raise ContractViolation("matrix shapes are inconsistent")
    m = B.shape[1]
    if R.shape != (m, m):
        raise ContractViolation("R must be square with the control dimension")
    if d > 20:
        raise ContractViolation(
            f"state dimension {d} exceeds the dense Kronecker limit of 20")
    if not np.allclose(Q, Q.T) or not np.allclose(R, R.T):
        raise ContractViolation("Q and R must be symmetric")
    if float(np.min(np.linalg.eigvalsh(R))) <= 0.0:
        raise ContractViolation("R must be positive definite")
    if float(np.min(np.linalg.eigvalsh(Q))) < -1e-12:
        raise ContractViolation("Q must be positive semidefinite")

    K = np.zeros((m, d))
    if not _hurwitz(A - B @ K):
        for c in 2.0 ** np.arange(0, 11):
            K = c * B.T
            if _hurwitz(A - B @ K):
                break
        else:
            raise StabilizabilityError(
                "no stabilizing initial gain of the form c*B^T was found")

    eye = np.eye(d)
    res = np.inf
    for _ in range(max_iter):
        Acl = A - B @ K
        # row-major vec: Acl^T S + S Acl = -(Q + K^T R K)
        M = np.kron(Acl.T, eye) + np.kron(eye, Acl.T)
        rhs = -(Q + K.T @ R @ K)
        S = np.linalg.solve(M, rhs.reshape(-1)).reshape(d, d)
        S = 0.5 * (S + S.T)
        K = np.linalg.solve(R, B.T @ S)
        res = care_residual(A, B, Q, R, S)
        if res <= tol:
            break
    else:
        raise StabilizabilityError(
            f"Newton iteration stalled at residual {res:.3e}")
    if not _hurwitz(A - B @ K):
        raise StabilizabilityError("converged gain does not stabilize A - B K")
    return LQRSolution(A=A, B=B, Q=Q, R=R, S=S, K=K,
                       Q1=Q + K.T @ R @ K, residual=res)


def linearize(system: ControlSystem, step: float = 1e-5):
    """Drift Jacobian at the target by central differences, plus the actuator
    there. Exact up to rounding for polynomial drifts."""
    x0 = np.asarray(system.target, dtype=np.float64)
    d = system.dim
    zero_u = np.zeros(system.control_dim)
    A = np.zeros((d, d))
    for j in range(d):
        dx = np.zeros(d)
        dx[j] = step
        fp = np.asarray(system.vector_field(x0 + dx, zero_u), dtype=np.float64)
        fm = np.asarray(system.vector_field(x0 - dx, zero_u), dtype=np.float64)
        A[:, j] = (fp - fm) / (2.0 * step)
    B = np.atleast_2d(np.asarray(system.actuator_matrix(x0), dtype=np.float64))
    return A, B


LQR_COSTS = {
    "grn": (np.diag([10.0, 10.0]), np.array([[0.1]])),
    "lorenz": (np.diag([5.0, 10.0, 5.0]), 0.1 * np.eye(3)),
}

# the quadratic trigger needs a wider margin on the chaotic benchmark
LQR_SIGMA = {"grn": 0.5, "lorenz": 0.99}

BALSA_P1 = {"grn": 50.0, "cell": 50.0, "lorenz": 20.0}


def lqr_for_system(system: ControlSystem | str) -> LQRSolution:
    if isinstance(system, str):
        system = get_system(system)
    try:
        Q, R = LQR_COSTS[system.name]
    except KeyError:
        raise ContractViolation(
            f"no Riccati cost matrices for system '{system.name}'") from None
    A, B = linearize(system)
    return solve_care(A, B, Q, R)


def lqr_controller(sol: LQRSolution, target) -> Callable[[np.ndarray], np.ndarray]:
    tgt = np.asarray(target, dtype=np.float64)
    return lambda x: -(sol.K @ (np.asarray(x, dtype=np.float64) - tgt))


def lqr_event(sol: LQRSolution, x, e, sigma: float, target) -> float:
    """Quadratic trigger value: negative while the held control still buys
    at least the sigma fraction of the nominal decay."""
    y = np.asarray(x, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    quad = float(y @ sol.Q1 @ y)
    cross = float(y @ sol.S @ sol.B @ (sol.K @ np.asarray(e, dtype=np.float64)))
    return (sigma - 1.0) * quad + 2.0 * cross


# ------------------------------------------------------------- QP policy


@dataclass
class BalsaResult:
    u: np.ndarray
    d1: float
    lam: float
    a: float
    b: np.ndarray
    degenerate: bool  # constraint active but the control has no authority


def balsa_solve(system: ControlSystem, x, p1: float) -> BalsaResult:
    """Closed-form KKT point of min 0.5||u||^2 + p1*d1^2 subject to the
    relaxed decay constraint a + b.u <= d1.

    With V = 0.5||x - x*||^2 the constraint data are a = grad V . f0 - V and
    b = g^T grad V. An inactive constraint (a <= 0) costs nothing, so u = 0;
    otherwise the single multiplier has the closed form below. When b
    vanishes the slack absorbs the whole violation (d1 = a) and the result is
    flagged degenerate.
    """
    if not p1 > 0:
        raise ContractViolation("p1 must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = x - system.target
    v = 0.5 * float(y @ y)
    f0 = np.asarray(system.vector_field(x, np.zeros(system.control_dim)),
                    dtype=np.float64)
    a = float(y @ f0) - v
    b = np.atleast_2d(np.asarray(system.actuator_matrix(x),
                                 dtype=np.float64)).T @ y
    if a <= 0.0:
        return BalsaResult(u=np.zeros(system.control_dim), d1=0.0, lam=0.0,
                           a=a, b=b, degenerate=False)
    bb = float(b @ b)
    lam = a / (bb + 1.0 / (2.0 * p1))
    return BalsaResult(u=-lam * b, d1=lam / (2.0 * p1), lam=lam, a=a, b=b,
                       degenerate=bb == 0.0)


def balsa_control(system: ControlSystem, x, p1: float) -> np.ndarray:
    return balsa_solve(system, x, p1).u


def balsa_controller(system: ControlSystem, p1: float) -> Callable:
    return lambda x: balsa_solve(system, x, p1).u


# ------------------------------------------------- unconstrained trainers


class MLPLyapunov:
    """Unconstrained scalar candidate: a plain tanh MLP of y = x - x*.

    No convexity, no positivity, and no pinned zero at the target; the
    training loss has to buy all three. Hidden layers carry biases, the
    final layer is linear without one.
    """

    def __init__(self, dims: Sequence[int], target, prefix: str = "V."):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or dims[-1] != 1:
            raise ContractViolation(f"MLPLyapunov needs dims (d, ..., 1), got {dims}")
        self.dims = dims
        self.target = np.asarray(target, dtype=np.float64)
        if self.target.shape != (dims[0],):
            raise ContractViolation("target dimension does not match input dimension")
        self.prefix = prefix

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        out = ParameterSet()
        last = len(self.dims) - 2
        for i, (n_in, n_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            out[self.prefix + f"W{i}"] = rng.normal(size=(n_out, n_in)) / np.sqrt(n_in)
            if i < last:
                out[self.prefix + f"b{i}"] = np.zeros(n_out)
        return out

    def value(self, params: Mapping, X):
        Y = ops.sub(X, self.target)
        z = Y
        last = len(self.dims) - 2
        for i in range(last + 1):
            z = ops.matmul(z, ops.transpose(params[self.prefix + f"W{i}"]))
            if i < last:
                z = ops.tanh(ops.add(z, params[self.prefix + f"b{i}"]))
        if _is_batch(X):
            n = ops._val(_primal(z)).shape[0]
            return ops.reshape(z, (n,))
        return ops.getitem(z, 0)

    def gradient(self, params: Mapping, x: np.ndarray) -> np.ndarray:
        return ops.input_gradient_reverse(lambda xx: self.value(params, xx), x)


class QuadLyapunovNet:
    """V(x) = ||F (x - x*)||^2 with F the product of two bias-free linear
    maps. Quadratic by construction, so V >= 0 and V(x*) = 0 for any
    parameters; only the metric shape is learned."""

    def __init__(self, dims: Sequence[int], target, prefix: str = "V."):
        dims = [int(d) for d in dims]
        if len(dims) != 3:
            raise ContractViolation(f"QuadLyapunovNet needs dims (d, h, k), got {dims}")
        self.dims = dims
        self.target = np.asarray(target, dtype=np.float64)
        if self.target.shape != (dims[0],):
            raise ContractViolation("target dimension does not match input dimension")
        self.prefix = prefix

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        d, h, k = self.dims
        out = ParameterSet()
        out[self.prefix + "W0"] = rng.normal(size=(h, d)) / np.sqrt(d)
        out[self.prefix + "W1"] = rng.normal(size=(k, h)) / np.sqrt(h)
        return out

    def factor(self, params: Mapping):
        return ops.matmul(params[self.prefix + "W1"], params[self.prefix + "W0"])

    def value(self, params: Mapping, X):
        Y = ops.sub(X, self.target)
        Z = ops.matmul(Y, ops.transpose(self.factor(params)))
        if _is_batch(X):
            return ops.tsum(ops.mul(Z, Z), axis=1)
        return ops.dot(Z, Z)

    def gradient(self, params: Mapping, x: np.ndarray) -> np.ndarray:
        F = np.asarray(ops._val(self.factor(params)))
        y = np.asarray(x, dtype=np.float64) - self.target
        return 2.0 * (F.T @ (F @ y))


def build_nlc_nets(cfg: TrainConfig, system: ControlSystem):
    V = MLPLyapunov(cfg.icnn_arch, system.target)
    u = ControllerNet(cfg.control_arch, system.target, mode="offset",
                      activation="tanh")
    return V, u


def build_quad_nets(cfg: TrainConfig, system: ControlSystem):
    V = QuadLyapunovNet(cfg.icnn_arch, system.target)
    u = ControllerNet(cfg.control_arch, system.target, mode="offset",
                      activation="tanh")
    return V, u


def _diag(V, u, params, probe, gun, hvt):
    if probe is None:
        return
    d = training_diagnostics(V, u, params, probe)
    gun.append(d["grad_u_norm"])
    hvt.append(d["hessV_trace"])


def train_nlc(cfg: TrainConfig, system: Optional[ControlSystem] = None,
              anchor: str = "square") -> TrainReport:
    """Full-batch training of the unconstrained pair.

    The data term hinges the certificate derivative and the certificate value
    separately; the anchor pins the certificate at the target, squared by
    default, hinged when that trains better (the chaotic benchmark).
    """
    cfg.validate()
    if anchor not in ("square", "hinge"):
        raise ContractViolation(f"unknown anchor '{anchor}'")
    t_wall = time.perf_counter()
    system = system or get_system(cfg.system)
    rng = np.random.default_rng(cfg.seed)
    V, u = build_nlc_nets(cfg, system)
    params = V.init_params(rng)
    params.update(u.init_params(rng))
    X = system.sample_domain(rng, cfg.n_samples)
    probe = system.sample_domain(rng, cfg.diag_probes) if cfg.diag_probes > 0 else None
    opt = Adam(params, cfg.learning_rate)
    curves: dict = {"loss_data": [], "loss_anchor": [], "loss_total": []}
    gun: list = []
    hvt: list = []
    for _ in range(cfg.m_warm + cfg.m_main):
        tape = Tape()
        leaves = tape.leaves(params)
        U = u.value(leaves, X)
        F = system.vector_field(X, U)
        vals, lie = lie_derivative(lambda Y: V.value(leaves, Y), X, F)
        l_data = ops.tmean(ops.add(ops.maximum(lie, 0.0),
                                   ops.maximum(vals, 0.0)))
        v0 = V.value(leaves, system.target)
        l_anchor = ops.mul(v0, v0) if anchor == "square" else ops.maximum(v0, 0.0)
        total = ops.add(l_data, l_anchor)
        opt.step(ops.grad(total, leaves))
        curves["loss_data"].append(float(ops._val(l_data)))
        curves["loss_anchor"].append(float(ops._val(l_anchor)))
        curves["loss_total"].append(float(ops._val(total)))
        _diag(V, u, params, probe, gun, hvt)
    return TrainReport(curves=curves, trigger_counts=[], grad_u_norm=gun,
                       hessV_trace=hvt,
                       wall_seconds=time.perf_counter() - t_wall,
                       checkpoint=params.clone())


def train_quad_nlc(cfg: TrainConfig,
                   system: Optional[ControlSystem] = None) -> TrainReport:
    """Full-batch training with the factored quadratic certificate.

    One joint hinge on derivative plus value; the certificate vanishes at
    the target by construction, so no anchor term is needed.
    """
    cfg.validate()
    t_wall = time.perf_counter()
    system = system or get_system(cfg.system)
    rng = np.random.default_rng(cfg.seed)
    V, u = build_quad_nets(cfg, system)
    params = V.init_params(rng)
    params.update(u.init_params(rng))
    X = system.sample_domain(rng, cfg.n_samples)
    probe = system.sample_domain(rng, cfg.diag_probes) if cfg.diag_probes > 0 else None
    opt = Adam(params, cfg.learning_rate)
    curves: dict = {"loss_data": [], "loss_total": []}
    gun: list = []
    hvt: list = []
    for _ in range(cfg.m_warm + cfg.m_main):
        tape = Tape()
        leaves = tape.leaves(params)
        U = u.value(leaves, X)
        F = system.vector_field(X, U)
        vals, lie = lie_derivative(lambda Y: V.value(leaves, Y), X, F)
        l_data = ops.tmean(ops.maximum(ops.add(lie, vals), 0.0))
        opt.step(ops.grad(l_data, leaves))
        curves["loss_data"].append(float(ops._val(l_data)))
        curves["loss_total"].append(float(ops._val(l_data)))
        _diag(V, u, params, probe, gun, hvt)
    return TrainReport(curves=curves, trigger_counts=[], grad_u_norm=gun,
                       hessV_trace=hvt,
                       wall_seconds=time.perf_counter() - t_wall,
                       checkpoint=params.clone())
