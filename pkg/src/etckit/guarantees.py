"""Decay-restoring projection and closed-form inter-event-time floors.

The projection repairs a controller pointwise: wherever the closed loop
violates dV/dt <= -V, the control is shifted along -grad V by exactly the
amount that restores the inequality. The correction numerator is the hinge
(L_f V + V)^+. Note the sign: subtracting V in the hinge would repair
nothing (the repaired loop would still satisfy only dV/dt <= V), so the
+V form is the one that makes the post-condition provable, and it is what
this module implements.

The time floors tau_h and tau_h_tilde are closed-form lower bounds on the
gap between successive control updates, evaluated from Lipschitz
constants. estimate_lipschitz returns sampled estimates, which are lower
bounds of the true constants; since the floors shrink as the constants
grow, floors computed from sampled estimates are optimistic (upper
estimates of the true floor) and empirical comparisons against them are
advisory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .systems import ControlSystem
from .tensor import ContractViolation

GUARD_EPS = 1e-12


class UnsupportedActuatorError(ContractViolation):
    """Raised for non-identity actuators without the affine extension."""


# ------------------------------------------------------------- projection


def _identity_actuator(system: ControlSystem) -> bool:
    if system.control_dim != system.dim:
        return False
    eye = np.eye(system.dim)
    probes = (system.target, system.domain_lo, system.domain_hi,
              0.5 * (system.domain_lo + system.domain_hi))
    for x in probes:
        g = np.asarray(system.actuator_matrix(np.asarray(x, dtype=np.float64)))
        if g.shape != eye.shape or not np.array_equal(g, eye):
            return False
    return True


@dataclass
class ProjectedController:
    """Callable controller wrapper enforcing dV/dt <= -V pointwise.

    ``base`` is any state -> control callable; ``V_value`` and ``V_grad``
    evaluate the certificate and its gradient. With ``affine=True`` the
    correction acts through the actuator matrix g(x); soundness is then
    only guaranteed where g(x)^T grad V is nonzero.
    """

    base: Callable[[np.ndarray], np.ndarray]
    V_value: Callable[[np.ndarray], float]
    V_grad: Callable[[np.ndarray], np.ndarray]
    system: ControlSystem
    guard_eps: float = GUARD_EPS
    affine: bool = field(default=False)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u0 = np.asarray(self.base(x), dtype=np.float64)
        gv = np.asarray(self.V_grad(x), dtype=np.float64)
        f = np.asarray(self.system.vector_field(x, u0), dtype=np.float64)
        hinge = float(gv @ f) + float(self.V_value(x))
        if hinge <= 0.0:
            return u0
        if self.affine:
            bvec = np.asarray(self.system.actuator_matrix(x),
                              dtype=np.float64).T @ gv
        else:
            bvec = gv
        den = max(float(bvec @ bvec), self.guard_eps)
        return u0 - (hinge / den) * bvec


def project_controller(u_eval: Callable, V_value: Callable, V_grad: Callable,
                       system: ControlSystem, guard_eps: float = GUARD_EPS,
                       allow_affine_extension: bool = False) -> ProjectedController:
    """Wrap a controller so the closed loop satisfies dV/dt <= -V.

    The exact construction is proved for fully actuated systems (actuator
    matrix is the identity). For general affine actuators pass
    ``allow_affine_extension=True`` to apply the correction through
    g(x)^T grad V instead; otherwise a non-identity actuator raises.
    """
    identity = _identity_actuator(system)
    if not identity and not allow_affine_extension:
        raise UnsupportedActuatorError(
            f"{system.name}: actuator is not the identity; the projection is "
            "only exact for fully actuated systems. Pass "
            "allow_affine_extension=True to project through the actuator "
            "matrix (sound only where g(x)^T grad V is nonzero)."
        )
    return ProjectedController(u_eval, V_value, V_grad, system,
                               guard_eps=guard_eps, affine=not identity)


# ------------------------------------------------------------ time floors


@dataclass
class BoundInputs:
    """Lipschitz data for the inter-event-time floors.

    ``P`` feeds the direct floor; ``c`` (together with ``l_alpha_inv`` and
    ``sigma``) feeds the derived one. They describe alternative reductions
    of the same comparison argument, so a caller normally sets one or the
    other.
    """

    l_f: float
    l_u: float
    l_alpha_inv: Optional[float] = None
    P: Optional[float] = None
    c: Optional[float] = None
    sigma: Optional[float] = None


def _require_positive(**kv) -> None:
    for name, v in kv.items():
        if v is None or not np.isfinite(v) or v <= 0:
            raise ContractViolation(f"{name} must be positive, got {v!r}")


def _tau(l_f: float, l_u: float, P: float) -> float:
    s = l_u / (1.0 + l_u)
    return float(np.log((P + 1.0) / (P + s)) / l_f)


def min_interevent_bound(inputs: BoundInputs) -> float:
    """Floor on the inter-event time: (1/l_f) log((P+1)/(P + l_u/(1+l_u))).

    Strictly positive for all positive inputs and strictly decreasing in
    both P and l_u.
    """
    _require_positive(l_f=inputs.l_f, l_u=inputs.l_u, P=inputs.P)
    return _tau(inputs.l_f, inputs.l_u, inputs.P)


def min_interevent_bound_tilde(inputs: BoundInputs) -> float:
    """Floor for the class-K event, P replaced by c * (l_alpha_inv/sigma) * l_u."""
    _require_positive(l_f=inputs.l_f, l_u=inputs.l_u, c=inputs.c,
                      l_alpha_inv=inputs.l_alpha_inv, sigma=inputs.sigma)
    if not inputs.sigma <= 1.0:
        raise ContractViolation(f"sigma must lie in (0, 1], got {inputs.sigma!r}")
    P_eff = inputs.c * (inputs.l_alpha_inv / inputs.sigma) * inputs.l_u
    return _tau(inputs.l_f, inputs.l_u, P_eff)


# --------------------------------------------------- empirical estimation


def estimate_lipschitz(fn: Callable[[np.ndarray], np.ndarray], domain_box,
                       n_pairs: int = 1000, seed: int = 0,
                       probe_step: float = 1e-4) -> float:
    """Sampled lower estimate of the Lipschitz constant of fn on a box.

    Maximum of pairwise difference quotients over n_pairs uniform pairs,
    sharpened by per-coordinate central difference quotients (+-probe_step)
    at every pair endpoint. Always a LOWER estimate of the true constant.
    """
    if n_pairs < 1:
        raise ContractViolation("n_pairs must be >= 1")
    lo = np.asarray(domain_box[0], dtype=np.float64)
    hi = np.asarray(domain_box[1], dtype=np.float64)
    lo, hi = np.broadcast_arrays(lo, hi)
    d = lo.size
    rng = np.random.default_rng(seed)
    A = rng.uniform(lo, hi, size=(n_pairs, d))
    B = rng.uniform(lo, hi, size=(n_pairs, d))

    def out(x):
        return np.atleast_1d(np.asarray(fn(x), dtype=np.float64))

    best = 0.0
    for a, b in zip(A, B):
        gap = float(np.linalg.norm(a - b))
        if gap > 0.0:
            best = max(best, float(np.linalg.norm(out(a) - out(b))) / gap)
    # local probes, nudged inward so x +- step stays inside the box
    centers = np.clip(np.concatenate([A, B]), lo + probe_step, hi - probe_step)
    for x in centers:
        for i in range(d):
            e = np.zeros(d)
            e[i] = probe_step
            rise = float(np.linalg.norm(out(x + e) - out(x - e)))
            best = max(best, rise / (2.0 * probe_step))
    return best


def optimality_gap(u_eval: Callable, V_value: Callable, V_grad: Callable,
                   system: ControlSystem, n_samples: int = 1000,
                   n_pairs: int = 200, seed: int = 0,
                   guard_eps: float = GUARD_EPS,
                   allow_affine_extension: bool = False) -> dict:
    """Lipschitz size of the projected controller plus a feasibility flag.

    ``is_feasible`` reports whether the unprojected controller already
    satisfies L_f V + V <= 1e-9 at every sampled point (projection is then
    the identity there); ``l_proj`` is the sampled Lipschitz estimate of
    the projected controller, the quantity an optimal event-sparse
    controller makes small.
    """
    rng = np.random.default_rng(seed)
    pts = system.sample_domain(rng, n_samples)
    feasible = True
    for x in pts:
        u0 = np.asarray(u_eval(x), dtype=np.float64)
        gv = np.asarray(V_grad(x), dtype=np.float64)
        f = np.asarray(system.vector_field(x, u0), dtype=np.float64)
        if float(gv @ f) + float(V_value(x)) > 1e-9:
            feasible = False
            break
    proj = project_controller(u_eval, V_value, V_grad, system,
                              guard_eps=guard_eps,
                              allow_affine_extension=allow_affine_extension)
    l_proj = estimate_lipschitz(proj, (system.domain_lo, system.domain_hi),
                                n_pairs=n_pairs, seed=seed + 1)
    return {"l_proj": float(l_proj), "is_feasible": bool(feasible)}


# ----------------------------------------------------------------- report


def bound_report(inputs: BoundInputs,
                 empirical_min_inter_event: Optional[float] = None) -> dict:
    """Assemble the floor-comparison report.

    tau_h uses P when given, otherwise the sigma-free reduction
    c * l_alpha_inv * l_u; tau_h_tilde always applies the sigma scaling.
    """
    if inputs.P is not None:
        tau_h = min_interevent_bound(inputs)
    else:
        _require_positive(c=inputs.c, l_alpha_inv=inputs.l_alpha_inv)
        direct = BoundInputs(l_f=inputs.l_f, l_u=inputs.l_u,
                             P=inputs.c * inputs.l_alpha_inv * inputs.l_u)
        tau_h = min_interevent_bound(direct)
    tau_tilde = min_interevent_bound_tilde(inputs)
    return {
        "l_f": float(inputs.l_f),
        "l_u": float(inputs.l_u),
        "l_alpha_inv": float(inputs.l_alpha_inv),
        "c": float(inputs.c),
        "sigma": float(inputs.sigma),
        "tau_h": float(tau_h),
        "tau_h_tilde": float(tau_tilde),
        "empirical_min_inter_event": (None if empirical_min_inter_event is None
                                      else float(empirical_min_inter_event)),
    }
