"""Dense float64 tensors on a reverse-mode tape, plus a paired forward (dual) mode.

The module provides one generic set of array operations that dispatches on the
operand types:

* plain ``numpy`` arrays / scalars  -> ordinary numpy computation,
* :class:`Tensor` (a value recorded on a :class:`Tape`) -> the op is recorded
  and can be differentiated in reverse with :func:`grad`,
* :class:`Dual` (a primal/tangent pair) -> forward-mode JVP, where the primal
  and tangent themselves may be arrays or Tensors.

Nesting a Dual over Tensors is how input gradients stay differentiable with
respect to network parameters: forward-mode rules execute taped operations, so
the reverse pass sees the whole directional-derivative computation
(forward-over-reverse).

Everything is float64. Shapes are restricted to what the networks and solvers
need: scalars, vectors, matrices, and matrix products among them; there is no
general broadcasting beyond row-vector bias addition and scalar scaling.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "Dual",
    "ParameterSet",
    "GradientMap",
    "ContractViolation",
    "NumericError",
    "grad",
    "input_gradient",
    "input_gradient_reverse",
    "spectral_norm",
    "save_checkpoint",
    "load_checkpoint",
]

# Knee width of the smoothed ReLU used by the convex potential networks.
SMOOTH_RELU_KNEE = 0.1

# Forward values are checked for non-finite entries on every recorded op.
CHECK_FINITE = True


class ContractViolation(ValueError):
    """An operation was called outside its contract (shape, sign, domain)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a forward value or a backward adjoint."""


def _as_value(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class ParameterSet(dict):
    """Flat named collection of trainable arrays: name -> float64 ndarray."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        for k, v in list(self.items()):
            self[k] = _as_value(v)

    def clone(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.items()})


class GradientMap(dict):
    """name -> gradient array, same shapes as the parameters it came from."""


class _Node:
    __slots__ = ("value", "parents", "vjps", "forward", "name")

    def __init__(self, value, parents, vjps, forward, name):
        self.value = value
        self.parents = parents  # tuple of tape indices (tensor deps only)
        self.vjps = vjps        # tuple of callables g -> contribution, same order
        self.forward = forward  # callable(values list) -> recomputed value
        self.name = name


class Tape:
    """Append-only record of primitive operations, in topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, value, name: str = "leaf") -> "Tensor":
        v = _as_value(value)
        node = _Node(v, (), (), lambda vals, _v=v: _v, name)
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def leaves(self, params: Mapping[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {name: self.leaf(value, name) for name, value in params.items()}

    def record(self, value, deps, name: str, forward) -> "Tensor":
        """deps: iterable of (obj, vjp or None); only Tensor deps join the graph."""
        v = _as_value(value)
        if CHECK_FINITE and not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite forward value in op '{name}'")
        parents, vjps = [], []
        for obj, vjp in deps:
            if isinstance(obj, Tensor) and vjp is not None:
                parents.append(obj.idx)
                vjps.append(vjp)
        node = _Node(v, tuple(parents), tuple(vjps), forward, name)
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node value from the leaves; bit-exact by construction."""
        vals: list[np.ndarray] = []
        for node in self.nodes:
            vals.append(node.forward(vals))
        return vals


class Tensor:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # keep numpy from consuming us in mixed expressions
    __array_priority__ = 1000

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(idx={self.idx}, value={self.value!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, n):
        return power(self, n)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


class Dual:
    """Primal/tangent pair; tangent None means an exactly-zero tangent."""

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None
    __array_priority__ = 1001

    def __init__(self, primal, tangent=None):
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"Dual({self.primal!r}, tangent={self.tangent!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, n):
        return power(self, n)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


def _prio(x) -> int:
    if isinstance(x, Dual):
        return 2
    if isinstance(x, Tensor):
        return 1
    return 0


def _split(x):
    """(primal, tangent-or-None) view of any operand."""
    if isinstance(x, Dual):
        return x.primal, x.tangent
    return x, None


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else _as_value(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise ContractViolation("no taped operand found")


def _ref(x):
    """Replay-time accessor: by index for Tensors, by captured value otherwise."""
    if isinstance(x, Tensor):
        i = x.idx
        return lambda vals: vals[i]
    v = _as_value(x)
    return lambda vals: v


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce an adjoint back to the shape of the operand it belongs to."""
    g = _as_value(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    if g.shape != tuple(shape):
        g = g.reshape(shape)
    return g


def _dt_add(a, b):
    """Tangent combination treating None as zero."""
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


# ---------------------------------------------------------------------------
# binary arithmetic


def add(a, b):
    p = max(_prio(a), _prio(b))
    if p == 2:
        ap, at = _split(a)
        bp, bt = _split(b)
        return Dual(add(ap, bp), _dt_add(at, bt))
    if p == 1:
        va, vb = _val(a), _val(b)
        ra, rb = _ref(a), _ref(b)
        return _tape_of(a, b).record(
            va + vb,
            [(a, lambda g: _unbroadcast(g, va.shape)),
             (b, lambda g: _unbroadcast(g, vb.shape))],
            "add",
            lambda vals: ra(vals) + rb(vals),
        )
    return _as_value(a) + _as_value(b)


def sub(a, b):
    p = max(_prio(a), _prio(b))
    if p == 2:
        ap, at = _split(a)
        bp, bt = _split(b)
        nt = None if bt is None else neg(bt)
        return Dual(sub(ap, bp), _dt_add(at, nt))
    if p == 1:
        va, vb = _val(a), _val(b)
        ra, rb = _ref(a), _ref(b)
        return _tape_of(a, b).record(
            va - vb,
            [(a, lambda g: _unbroadcast(g, va.shape)),
             (b, lambda g: _unbroadcast(-g, vb.shape))],
            "sub",
            lambda vals: ra(vals) - rb(vals),
        )
    return _as_value(a) - _as_value(b)


def mul(a, b):
    p = max(_prio(a), _prio(b))
    if p == 2:
        ap, at = _split(a)
        bp, bt = _split(b)
        t1 = None if bt is None else mul(ap, bt)
        t2 = None if at is None else mul(at, bp)
        return Dual(mul(ap, bp), _dt_add(t1, t2))
    if p == 1:
        va, vb = _val(a), _val(b)
        ra, rb = _ref(a), _ref(b)
        return _tape_of(a, b).record(
            va * vb,
            [(a, lambda g: _unbroadcast(g * vb, va.shape)),
             (b, lambda g: _unbroadcast(g * va, vb.shape))],
            "mul",
            lambda vals: ra(vals) * rb(vals),
        )
    return _as_value(a) * _as_value(b)


def div(a, b):
    p = max(_prio(a), _prio(b))
    if p == 2:
        ap, at = _split(a)
        bp, bt = _split(b)
        t1 = None if at is None else div(at, bp)
        t2 = None if bt is None else neg(div(mul(ap, bt), mul(bp, bp)))
        return Dual(div(ap, bp), _dt_add(t1, t2))
    if p == 1:
        va, vb = _val(a), _val(b)
        ra, rb = _ref(a), _ref(b)
        return _tape_of(a, b).record(
            va / vb,
            [(a, lambda g: _unbroadcast(g / vb, va.shape)),
             (b, lambda g: _unbroadcast(-g * va / (vb * vb), vb.shape))],
            "div",
            lambda vals: ra(vals) / rb(vals),
        )
    return _as_value(a) / _as_value(b)


def neg(a):
    p = _prio(a)
    if p == 2:
        ap, at = _split(a)
        return Dual(neg(ap), None if at is None else neg(at))
    if p == 1:
        ra = _ref(a)
        return a.tape.record(
            -a.value, [(a, lambda g: -g)], "neg", lambda vals: -ra(vals)
        )
    return -_as_value(a)


def power(a, n):
    """Elementwise a**n for a constant scalar exponent n."""
    n = float(n)
    p = _prio(a)
    if p == 2:
        ap, at = _split(a)
        t = None if at is None else mul(mul(n, power(ap, n - 1.0)), at)
        return Dual(power(ap, n), t)
    if p == 1:
        va = a.value
        ra = _ref(a)
        return a.tape.record(
            va ** n,
            [(a, lambda g: g * n * va ** (n - 1.0))],
            "power",
            lambda vals: ra(vals) ** n,
        )
    return _as_value(a) ** n


def _matmul_vjps(va, vb):
    if va.ndim == 2 and vb.ndim == 2:
        return (lambda g: g @ vb.T), (lambda g: va.T @ g)
    if va.ndim == 2 and vb.ndim == 1:
        return (lambda g: np.outer(g, vb)), (lambda g: va.T @ g)
    if va.ndim == 1 and vb.ndim == 2:
        return (lambda g: g @ vb.T), (lambda g: np.outer(va, g))
    raise ContractViolation(
        f"matmul supports 2Dx2D, 2Dx1D, 1Dx2D; got {va.shape} @ {vb.shape}"
    )


def matmul(a, b):
    p = max(_prio(a), _prio(b))
    if p == 2:
        ap, at = _split(a)
        bp, bt = _split(b)
        t1 = None if bt is None else matmul(ap, bt)
        t2 = None if at is None else matmul(at, bp)
        return Dual(matmul(ap, bp), _dt_add(t1, t2))
    if p == 1:
        va, vb = _val(a), _val(b)
        da, db = _matmul_vjps(va, vb)
        ra, rb = _ref(a), _ref(b)
        return _tape_of(a, b).record(
            va @ vb,
            [(a, da), (b, db)],
            "matmul",
            lambda vals: ra(vals) @ rb(vals),
        )
    return _as_value(a) @ _as_value(b)


def dot(a, b):
    p = max(_prio(a), _prio(b))
    if p == 2:
        ap, at = _split(a)
        bp, bt = _split(b)
        t1 = None if bt is None else dot(ap, bt)
        t2 = None if at is None else dot(at, bp)
        return Dual(dot(ap, bp), _dt_add(t1, t2))
    if p == 1:
        va, vb = _val(a), _val(b)
        if va.ndim != 1 or vb.ndim != 1:
            raise ContractViolation("dot expects two vectors")
        ra, rb = _ref(a), _ref(b)
        return _tape_of(a, b).record(
            va @ vb,
            [(a, lambda g: g * vb), (b, lambda g: g * va)],
            "dot",
            lambda vals: ra(vals) @ rb(vals),
        )
    return _as_value(a) @ _as_value(b)


def maximum(a, c):
    """Elementwise max(a, c) with a constant scalar floor c."""
    c = float(c)
    if isinstance(a, Dual):
        raise ContractViolation("maximum is not defined for dual operands")
    if isinstance(a, Tensor):
        va = a.value
        mask = (va > c).astype(np.float64)
        ra = _ref(a)
        return a.tape.record(
            np.maximum(va, c),
            [(a, lambda g: g * mask)],
            "maximum",
            lambda vals: np.maximum(ra(vals), c),
        )
    return np.maximum(_as_value(a), c)


# ---------------------------------------------------------------------------
# shape ops


def transpose(a):
    p = _prio(a)
    if p == 2:
        ap, at = _split(a)
        return Dual(transpose(ap), None if at is None else transpose(at))
    if p == 1:
        ra = _ref(a)
        return a.tape.record(
            a.value.T, [(a, lambda g: _as_value(g).T)], "transpose",
            lambda vals: ra(vals).T,
        )
    return _as_value(a).T


def reshape(a, shape):
    shape = tuple(shape)
    p = _prio(a)
    if p == 2:
        ap, at = _split(a)
        return Dual(reshape(ap, shape), None if at is None else reshape(at, shape))
    if p == 1:
        orig = a.value.shape
        ra = _ref(a)
        return a.tape.record(
            a.value.reshape(shape),
            [(a, lambda g: _as_value(g).reshape(orig))],
            "reshape",
            lambda vals: ra(vals).reshape(shape),
        )
    return _as_value(a).reshape(shape)


def getitem(a, key):
    p = _prio(a)
    if p == 2:
        ap, at = _split(a)
        return Dual(getitem(ap, key), None if at is None else getitem(at, key))
    if p == 1:
        va = a.value

        def vjp(g):
            out = np.zeros_like(va)
            out[key] = g
            return out

        ra = _ref(a)
        return a.tape.record(
            va[key], [(a, vjp)], "getitem", lambda vals: ra(vals)[key]
        )
    return _as_value(a)[key]


def stack_cols(cols: Sequence):
    """Stack same-length vectors (or per-row scalars) into an (N, k) matrix."""
    p = max(_prio(c) for c in cols)
    if p == 2:
        prims, tans = zip(*(_split(c) for c in cols))
        if all(t is None for t in tans):
            tangent = None
        else:
            zeros = [np.zeros_like(_val(pi)) for pi in prims]
            tangent = stack_cols([t if t is not None else z
                                  for t, z in zip(tans, zeros)])
        return Dual(stack_cols(list(prims)), tangent)
    if p == 1:
        vals = [_val(c) for c in cols]
        refs = [_ref(c) for c in cols]
        deps = [(c, (lambda g, j=j: _as_value(g)[:, j])) for j, c in enumerate(cols)]
        return _tape_of(*cols).record(
            np.stack(vals, axis=1),
            deps,
            "stack_cols",
            lambda vals_: np.stack([r(vals_) for r in refs], axis=1),
        )
    return np.stack([_as_value(c) for c in cols], axis=1)


def stack(items: Sequence):
    """Stack scalars into a vector."""
    p = max(_prio(c) for c in items)
    if p == 2:
        prims, tans = zip(*(_split(c) for c in items))
        if all(t is None for t in tans):
            tangent = None
        else:
            tangent = stack([t if t is not None else 0.0 for t in tans])
        return Dual(stack(list(prims)), tangent)
    if p == 1:
        refs = [_ref(c) for c in items]
        deps = [(c, (lambda g, j=j: _as_value(g)[j])) for j, c in enumerate(items)]
        return _tape_of(*items).record(
            np.stack([_val(c) for c in items]),
            deps,
            "stack",
            lambda vals_: np.stack([r(vals_) for r in refs]),
        )
    return np.stack([_as_value(c) for c in items])


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None):
    p = _prio(a)
    if p == 2:
        ap, at = _split(a)
        return Dual(tsum(ap, axis), None if at is None else tsum(at, axis))
    if p == 1:
        va = a.value
        shape = va.shape
        if axis is None:
            vjp = lambda g: np.broadcast_to(_as_value(g), shape).astype(np.float64)
        else:
            vjp = lambda g: np.broadcast_to(
                np.expand_dims(_as_value(g), axis), shape
            ).astype(np.float64)
        ra = _ref(a)
        return a.tape.record(
            va.sum(axis=axis), [(a, vjp)], "sum",
            lambda vals: ra(vals).sum(axis=axis),
        )
    return _as_value(a).sum(axis=axis)


def tmean(a):
    p = _prio(a)
    if p == 2:
        ap, at = _split(a)
        return Dual(tmean(ap), None if at is None else tmean(at))
    if p == 1:
        va = a.value
        n = va.size
        ra = _ref(a)
        return a.tape.record(
            va.mean(),
            [(a, lambda g: np.broadcast_to(_as_value(g) / n, va.shape).astype(np.float64))],
            "mean",
            lambda vals: ra(vals).mean(),
        )
    return _as_value(a).mean()


# ---------------------------------------------------------------------------
# elementwise nonlinearities
#
# Each op is registered with its numpy forward and the NAME of the op that is
# its derivative. Backward closures evaluate the derivative numerically; the
# derivative op name is only needed when a Dual passes through (the tangent
# rule records derivative(primal) as a taped value so reverse mode can keep
# differentiating it).


def _np_relu(z):
    return np.maximum(z, 0.0)


def _np_step(z):
    return (z > 0).astype(np.float64)


def _np_softplus(z):
    return np.logaddexp(0.0, z)


def _np_sigmoid(z):
    z = _as_value(z)
    t = np.exp(-np.abs(z))  # never overflows
    return np.where(z >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def _np_sigmoid_grad(z):
    s = _np_sigmoid(z)
    return s * (1.0 - s)


def _np_tanh_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _np_tanh_curv(z):
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


def _np_exp(z):
    return np.exp(z)


def _np_log_grad(z):
    return 1.0 / z


def _np_sqrt_grad(z):
    return 0.5 / np.sqrt(z)


def _np_elu(z):
    z = _as_value(z)
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _np_elu_grad(z):
    z = _as_value(z)
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def _np_smrelu(z):
    d = SMOOTH_RELU_KNEE
    z = _as_value(z)
    return np.where(z <= 0, 0.0, np.where(z >= d, z - d / 2.0, z * z / (2.0 * d)))


def _np_smrelu_grad(z):
    d = SMOOTH_RELU_KNEE
    return np.clip(_as_value(z) / d, 0.0, 1.0)


def _np_smrelu_curv(z):
    d = SMOOTH_RELU_KNEE
    z = _as_value(z)
    return np.where((z > 0) & (z < d), 1.0 / d, 0.0)


def _np_zero(z):
    return np.zeros_like(_as_value(z))


# name -> (numpy forward, derivative op name). A derivative of "zero" means the
# op is piecewise constant; "missing" means no rule is implemented, and using
# one there raises instead of silently returning zeros.
_UNARY: dict[str, tuple[Callable, str]] = {
    "relu": (_np_relu, "step"),
    "step": (_np_step, "zero"),
    "softplus": (_np_softplus, "sigmoid"),
    "sigmoid": (_np_sigmoid, "sigmoid_grad"),
    "sigmoid_grad": (_np_sigmoid_grad, "missing"),
    "tanh": (np.tanh, "tanh_grad"),
    "tanh_grad": (_np_tanh_grad, "tanh_curv"),
    "tanh_curv": (_np_tanh_curv, "missing"),
    "exp": (_np_exp, "exp"),
    "log": (np.log, "log_grad"),
    "log_grad": (_np_log_grad, "missing"),
    "sqrt": (np.sqrt, "sqrt_grad"),
    "sqrt_grad": (_np_sqrt_grad, "missing"),
    "elu": (_np_elu, "elu_grad"),
    "elu_grad": (_np_elu_grad, "missing"),
    "smrelu": (_np_smrelu, "smrelu_grad"),
    "smrelu_grad": (_np_smrelu_grad, "smrelu_curv"),
    "smrelu_curv": (_np_smrelu_curv, "zero"),
}


def _unary(name: str, a):
    fwd, dname = _UNARY[name]
    p = _prio(a)
    if p == 2:
        ap, at = _split(a)
        prim = _unary(name, ap)
        if at is None or dname == "zero":
            return Dual(prim, None)
        if dname == "missing":
            raise NotImplementedError(f"no derivative rule for op '{name}'")
        return Dual(prim, mul(_unary(dname, ap), at))
    if p == 1:
        va = a.value
        if dname == "zero":
            deps = [(a, None)]
        elif dname == "missing":
            def _raise(g, _name=name):
                raise NotImplementedError(f"no derivative rule for op '{_name}'")
            deps = [(a, _raise)]
        else:
            dfn = _UNARY[dname][0]
            deps = [(a, lambda g: g * dfn(va))]
        ra = _ref(a)
        return a.tape.record(
            fwd(va), deps, name, lambda vals: fwd(ra(vals))
        )
    return fwd(_as_value(a))


def relu(a):
    return _unary("relu", a)


def step(a):
    return _unary("step", a)


def softplus(a):
    return _unary("softplus", a)


def sigmoid(a):
    return _unary("sigmoid", a)


def tanh(a):
    return _unary("tanh", a)


def exp(a):
    return _unary("exp", a)


def log(a):
    return _unary("log", a)


def sqrt(a):
    return _unary("sqrt", a)


def elu(a):
    return _unary("elu", a)


def smooth_relu(a):
    return _unary("smrelu", a)


def smooth_relu_grad(a):
    return _unary("smrelu_grad", a)


# ---------------------------------------------------------------------------
# reverse pass


def grad(expr: Tensor, params: Mapping[str, Tensor]) -> GradientMap:
    """Reverse-mode gradient of a taped scalar with respect to named leaves.

    Every entry of ``params`` gets exactly one gradient array (zeros if the
    expression does not depend on it). Accumulation order is the reverse of
    recording order, so results are deterministic for identical inputs.
    """
    if not isinstance(expr, Tensor):
        raise ContractViolation("grad expects a taped expression")
    if expr.value.shape != ():
        raise ContractViolation(
            f"grad expects a scalar expression, got shape {expr.value.shape}"
        )
    tape = expr.tape
    keep = {leaf.idx for leaf in params.values() if isinstance(leaf, Tensor)}
    adj: list[np.ndarray | None] = [None] * (expr.idx + 1)
    adj[expr.idx] = np.ones(())
    for i in range(expr.idx, -1, -1):
        g = adj[i]
        if i not in keep:
            adj[i] = None  # free as we go
        if g is None:
            continue
        node = tape.nodes[i]
        if np.any(np.isnan(g)):
            raise NumericError(f"NaN adjoint at node {i} ('{node.name}')")
        for pidx, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            if adj[pidx] is None:
                adj[pidx] = _as_value(contrib).copy()
            else:
                adj[pidx] = adj[pidx] + contrib
    out = GradientMap()
    for name, leaf in params.items():
        if not isinstance(leaf, Tensor) or leaf.tape is not tape:
            raise ContractViolation(f"parameter '{name}' is not a leaf of this tape")
        g = adj[leaf.idx] if leaf.idx <= expr.idx else None
        out[name] = np.zeros_like(leaf.value) if g is None else _as_value(g)
    return out


def custom_grad_scalar(
    tape: Tape,
    value: float,
    gradmap: Mapping[str, np.ndarray],
    leaves: Mapping[str, Tensor],
    name: str = "custom",
) -> Tensor:
    """Record a scalar whose gradient w.r.t. the given leaves is supplied.

    Used to splice externally-computed sensitivities (event-time gradients)
    into a larger taped expression: the backward pass distributes the scalar's
    adjoint through ``gradmap`` onto the parameter leaves.
    """
    deps = []
    for pname, leaf in leaves.items():
        gp = gradmap.get(pname)
        if gp is None:
            continue
        gp = _as_value(gp)
        deps.append((leaf, lambda g, gp=gp: _as_value(g) * gp))
    v = float(value)
    return tape.record(v, deps, name, lambda vals: np.asarray(v))


# ---------------------------------------------------------------------------
# input gradients


def input_gradient(fn: Callable, x, taped_zero: Tape | None = None):
    """Gradient of a scalar-valued function of a vector, by forward mode.

    Runs one dual (JVP) pass per coordinate and stacks the results, so the
    output stays on the tape whenever ``fn`` touches taped values -- which is
    what makes parameter gradients of expressions containing this input
    gradient possible.
    """
    xv = _val(x) if not isinstance(x, Dual) else None
    if xv is None:
        raise ContractViolation("input_gradient does not accept dual inputs")
    if xv.ndim != 1:
        raise ContractViolation(f"input_gradient expects a vector, got {xv.shape}")
    d = xv.shape[0]
    comps = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        out = fn(Dual(x, e))
        if not isinstance(out, Dual):
            raise ContractViolation("function did not propagate dual numbers")
        t = out.tangent
        comps.append(0.0 if t is None else t)
    if any(isinstance(c, Tensor) for c in comps):
        return stack(comps)
    return np.array([float(_val(c)) for c in comps])


def input_gradient_reverse(fn: Callable, x: np.ndarray) -> np.ndarray:
    """Numeric gradient of a scalar function via one reverse pass on a scratch tape.

    ``fn`` must route through the generic ops; parameters it captures stay
    constant. Preferred over :func:`input_gradient` when only the value is
    needed and the dimension is large.
    """
    scratch = Tape()
    leaf = scratch.leaf(_as_value(x), "x")
    out = fn(leaf)
    if not isinstance(out, Tensor):
        raise ContractViolation("function did not touch the scratch tape")
    return grad(out, {"x": leaf})["x"]


# ---------------------------------------------------------------------------
# spectral norm


def spectral_norm(W, iters: int = 25):
    """Power-iteration estimate of the largest singular value of a matrix.

    The singular vectors are treated as constants in backward, giving the
    standard rank-one gradient u v^T for the estimate.
    """
    if iters < 1:
        raise ContractViolation("spectral_norm needs iters >= 1")
    if isinstance(W, Dual):
        raise ContractViolation("spectral_norm is not defined for dual operands")
    vW = _val(W)
    if vW.ndim != 2:
        raise ContractViolation(f"spectral_norm expects a matrix, got {vW.shape}")
    m, n = vW.shape
    tiny = 1e-30
    u = np.ones(m) / np.sqrt(m)
    v = np.zeros(n)
    degenerate = False
    for _ in range(iters):
        v = vW.T @ u
        nv = np.linalg.norm(v)
        if nv < tiny:
            degenerate = True
            break
        v = v / nv
        u = vW @ v
        nu = np.linalg.norm(u)
        if nu < tiny:
            degenerate = True
            break
        u = u / nu
    sigma = 0.0 if degenerate else float(u @ vW @ v)
    if isinstance(W, Tensor):
        if degenerate:
            return W.tape.record(0.0, [(W, None)], "spectral_norm",
                                 lambda vals: np.asarray(0.0))
        uv = np.outer(u, v)
        rw = _ref(W)
        return W.tape.record(
            sigma,
            [(W, lambda g: _as_value(g) * uv)],
            "spectral_norm",
            lambda vals, u=u, v=v: np.asarray(u @ rw(vals) @ v),
        )
    return sigma


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    payload = {
        name: {"shape": list(np.shape(value)),
               "data": _as_value(value).ravel().tolist()}
        for name, value in params.items()
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)


def load_checkpoint(path, expect: Mapping[str, np.ndarray] | None = None) -> ParameterSet:
    with open(path) as f:
        payload = json.load(f)
    out = ParameterSet()
    for name, entry in payload.items():
        shape = tuple(int(s) for s in entry["shape"])
        data = _as_value(entry["data"])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ContractViolation(f"checkpoint entry '{name}' has inconsistent shape")
        out[name] = data.reshape(shape)
    if expect is not None:
        missing = set(expect) - set(out)
        extra = set(out) - set(expect)
        if missing or extra:
            raise ContractViolation(
                f"checkpoint keys mismatch (missing={sorted(missing)}, extra={sorted(extra)})"
            )
        for name in expect:
            if out[name].shape != np.shape(expect[name]):
                raise ContractViolation(
                    f"checkpoint entry '{name}' shape {out[name].shape} != "
                    f"{np.shape(expect[name])}"
                )
    return out
