"""Certificate networks: convex Lyapunov candidates, controllers, class-K functions.

All three networks are functional: parameters live in a flat name -> array
mapping (:class:`~etckit.tensor.ParameterSet` numerically, or the matching
dict of taped leaves during training), and every forward routes through the
generic ops in :mod:`etckit.tensor` so the same code serves plain evaluation,
reverse-mode training, and forward-mode directional derivatives.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as ops
from .tensor import ContractViolation, Dual, ParameterSet, Tensor

__all__ = [
    "LyapunovNet",
    "ControllerNet",
    "ClassKNet",
    "integrate_classk",
    "lie_derivative",
    "project_nonneg",
]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)


def _is_batch(X) -> bool:
    v = X.primal if isinstance(X, Dual) else X
    return ops._val(v).ndim == 2


def lie_derivative(fn: Callable, X, F):
    """Evaluate fn and its directional derivative along F in one forward pass.

    ``fn`` maps a batch (N, d) to per-sample scalars (N,). Seeding the input
    with the vector field as tangent gives grad(fn) . F per row without ever
    materializing the input gradient. Returns ``(values, lie_values)``; both
    stay taped when ``fn`` reads taped parameters or F is taped.
    """
    out = fn(Dual(X, F))
    if not isinstance(out, Dual):
        raise ContractViolation("function did not propagate dual numbers")
    t = out.tangent
    if t is None:
        t = np.zeros_like(ops._val(out.primal))
    return out.primal, t


class LyapunovNet:
    """Input-convex candidate V(x) = smrelu(p(x - x*) - p(0)) + eps*||x - x*||^2.

    ``p`` is an input-convex network: nonnegative weights on the hidden-to-
    hidden path, skip connections from the input into every layer, and a
    convex nondecreasing activation (the smoothed ReLU) everywhere. The outer
    smoothed ReLU and the quadratic term make V zero exactly at the target,
    positive elsewhere, with V >= eps*||x - x*||^2.
    """

    def __init__(self, dims: Sequence[int], target, eps: float = 1e-3,
                 prefix: str = "V."):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or dims[-1] != 1:
            raise ContractViolation(f"LyapunovNet needs dims (d, ..., 1), got {dims}")
        self.dims = dims
        self.target = np.asarray(target, dtype=np.float64)
        if self.target.shape != (dims[0],):
            raise ContractViolation("target dimension does not match input dimension")
        self.eps = float(eps)
        self.prefix = prefix

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        d = self.dims[0]
        out = ParameterSet()
        h_prev = self.dims[1]
        out[self.prefix + "W0"] = rng.normal(size=(h_prev, d)) / np.sqrt(d)
        out[self.prefix + "b0"] = np.zeros(h_prev)
        for i, h in enumerate(self.dims[2:], start=1):
            out[self.prefix + f"U{i}"] = np.abs(rng.normal(size=(h, h_prev))) / np.sqrt(h_prev)
            out[self.prefix + f"W{i}"] = rng.normal(size=(h, d)) / np.sqrt(d)
            out[self.prefix + f"b{i}"] = np.zeros(h)
            h_prev = h
        return out

    def _potential(self, params: Mapping, Y):
        p = self.prefix
        W0 = params[p + "W0"]
        z = ops.smooth_relu(ops.add(ops.matmul(Y, ops.transpose(W0)), params[p + "b0"]))
        for i in range(1, len(self.dims) - 1):
            U = params[p + f"U{i}"]
            W = params[p + f"W{i}"]
            b = params[p + f"b{i}"]
            pre = ops.add(ops.add(ops.matmul(z, ops.transpose(U)),
                                  ops.matmul(Y, ops.transpose(W))), b)
            z = ops.smooth_relu(pre)
        return z  # (..., 1)

    def value(self, params: Mapping, X):
        """V over a batch (N, d) -> (N,), or a single state (d,) -> scalar."""
        batch = _is_batch(X)
        Y = ops.sub(X, self.target)
        pot = self._potential(params, Y)
        p0 = ops.getitem(self._potential(params, np.zeros(self.dims[0])), 0)
        if batch:
            n = ops._val(_primal(pot)).shape[0]
            p_flat = ops.reshape(pot, (n,))
            quad = ops.tsum(ops.mul(Y, Y), axis=1)
        else:
            p_flat = ops.getitem(pot, 0)
            quad = ops.dot(Y, Y)
        return ops.add(ops.smooth_relu(ops.sub(p_flat, p0)),
                       ops.mul(self.eps, quad))

    def gradient(self, params: Mapping, x: np.ndarray) -> np.ndarray:
        """Numeric input gradient of V at a single state."""
        return ops.input_gradient_reverse(lambda xx: self.value(params, xx), x)


def _primal(x):
    return x.primal if isinstance(x, Dual) else x


def project_nonneg(params: ParameterSet, prefix: str = "V.") -> None:
    """Clamp the hidden-to-hidden matrices of a convex net to be nonnegative."""
    for name in params:
        if name.startswith(prefix) and name[len(prefix):].startswith("U"):
            np.maximum(params[name], 0.0, out=params[name])


class ControllerNet:
    """State-feedback network u(x) built from a plain MLP core NN(y), y = x - x*.

    mode "gated":  u(x) = y * NN(y) elementwise (requires output dim == state
    dim); mode "offset": u(x) = NN(y) - NN(0). Both make u(x*) = 0 so the
    target stays an equilibrium of the closed loop. The final layer has no
    bias and no activation; hidden activations default to ReLU.
    """

    def __init__(self, dims: Sequence[int], target, mode: str = "auto",
                 activation: str = "relu", prefix: str = "u."):
        dims = [int(d) for d in dims]
        if len(dims) < 2:
            raise ContractViolation("ControllerNet needs at least (d, m)")
        self.dims = dims
        self.target = np.asarray(target, dtype=np.float64)
        if mode == "auto":
            mode = "gated" if dims[-1] == dims[0] else "offset"
        if mode == "gated" and dims[-1] != dims[0]:
            raise ContractViolation("gated mode needs output dim == state dim")
        if mode not in ("gated", "offset"):
            raise ContractViolation(f"unknown controller mode '{mode}'")
        self.mode = mode
        if activation not in ("relu", "tanh"):
            raise ContractViolation(f"unsupported activation '{activation}'")
        self.activation = activation
        self.prefix = prefix

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        # modest scale: initial spectral norms must stay small enough that the
        # Lipschitz penalty cannot outweigh the stabilization hinge early on
        out = ParameterSet()
        for i, (n_in, n_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            out[self.prefix + f"W{i}"] = 0.5 * rng.normal(size=(n_out, n_in)) / np.sqrt(n_in)
            if i < len(self.dims) - 2:
                out[self.prefix + f"b{i}"] = np.zeros(n_out)
        return out

    def weight_names(self) -> list[str]:
        return [self.prefix + f"W{i}" for i in range(len(self.dims) - 1)]

    def _core(self, params: Mapping, Y):
        act = ops.relu if self.activation == "relu" else ops.tanh
        z = Y
        last = len(self.dims) - 2
        for i in range(last + 1):
            W = params[self.prefix + f"W{i}"]
            z = ops.matmul(z, ops.transpose(W))
            if i < last:
                z = act(ops.add(z, params[self.prefix + f"b{i}"]))
        return z

    def value(self, params: Mapping, X):
        """u over a batch (N, d) -> (N, m), or a single state (d,) -> (m,)."""
        Y = ops.sub(X, self.target)
        core = self._core(params, Y)
        if self.mode == "gated":
            return ops.mul(Y, core)
        c0 = self._core(params, np.zeros(self.dims[0]))
        return ops.sub(core, c0)


class ClassKNet:
    """Strictly positive integrand q(s) and its integral alpha(r) = int_0^r q.

    Hidden layers are ReLU; the output layer is ELU shifted up by one, so q
    stays strictly positive and alpha is strictly increasing with
    alpha(0) = 0. The integral is a 32-node Gauss-Legendre rule, exact for the
    polynomial degrees that show up in tests and accurate far beyond what the
    rest of the pipeline needs.
    """

    def __init__(self, dims: Sequence[int] = (1, 20, 1), prefix: str = "alpha."):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or dims[0] != 1 or dims[-1] != 1:
            raise ContractViolation(f"ClassKNet needs dims (1, ..., 1), got {dims}")
        self.dims = dims
        self.prefix = prefix

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        out = ParameterSet()
        for i, (n_in, n_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            out[self.prefix + f"W{i}"] = rng.normal(size=(n_out, n_in)) / np.sqrt(n_in)
            out[self.prefix + f"b{i}"] = np.zeros(n_out)
        return out

    def q_values(self, params: Mapping, s):
        """q over nonnegative scalars s (M,) -> (M,)."""
        sv = ops._val(_primal(s))
        if np.any(sv < 0):
            raise ContractViolation("class-K integrand is only defined for s >= 0")
        z = ops.reshape(s, (sv.shape[0], 1))
        last = len(self.dims) - 2
        for i in range(last + 1):
            W = params[self.prefix + f"W{i}"]
            b = params[self.prefix + f"b{i}"]
            z = ops.add(ops.matmul(z, ops.transpose(W)), b)
            z = ops.elu(z) if i == last else ops.relu(z)
        return ops.add(ops.reshape(z, (sv.shape[0],)), 1.0)

    def alpha(self, params: Mapping, r):
        """alpha over numeric radii r (N,) -> (N,), or a scalar radius -> scalar."""
        if isinstance(r, (Tensor, Dual)):
            # keeping r numeric means no gradient can be silently dropped
            raise ContractViolation("alpha expects numeric radii")
        scalar = np.ndim(r) == 0
        rv = np.atleast_1d(np.asarray(r, dtype=np.float64))
        if np.any(rv < 0):
            raise ContractViolation("class-K function argument must be >= 0")
        out = integrate_classk(lambda s: self.q_values(params, s), rv)
        if scalar:
            return ops.getitem(out, 0) if isinstance(out, Tensor) else out[0]
        return out


def integrate_classk(q_fn: Callable, r: np.ndarray):
    """Integrate q from 0 to each radius in r by 32-node Gauss-Legendre.

    q_fn maps a flat batch of sample points (N*K,) to values (N*K,); the
    result is (N,), taped whenever q_fn produces taped values.
    """
    r = np.asarray(r, dtype=np.float64)
    n = r.shape[0]
    half = r / 2.0
    # sample points: s[i, k] = (r_i / 2) * (xi_k + 1)
    S = np.outer(half, _GL_NODES + 1.0)
    q = q_fn(S.reshape(n * len(_GL_NODES)))
    Q = ops.reshape(q, (n, len(_GL_NODES)))
    sums = ops.matmul(Q, _GL_WEIGHTS)
    return ops.mul(half, sums)
