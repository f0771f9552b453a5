"""Benchmark control systems: gene regulation, Lorenz, and a cell-revival network.

Each system is control-affine, f(x, u) = f0(x) + g(x) u, and immutable after
construction. The drift and the control effect are written against the generic
ops in :mod:`etckit.tensor`, so trajectories can be re-integrated with taped
states when event-time sensitivities are needed; plain numpy inputs stay plain
numpy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import networkx as nx
import numpy as np

from . import tensor as ops
from .tensor import ContractViolation, NumericError

__all__ = [
    "ControlSystem",
    "GRNParams",
    "CellNetParams",
    "make_grn",
    "make_lorenz",
    "make_cell",
    "get_system",
    "save_adjacency_csv",
    "load_adjacency_csv",
]


def _col(X, j: int, batch: bool):
    return ops.getitem(X, (slice(None), j)) if batch else ops.getitem(X, j)


def _assemble(cols, batch: bool):
    return ops.stack_cols(cols) if batch else ops.stack(cols)


def _is_batch(X) -> bool:
    v = X.primal if isinstance(X, ops.Dual) else X
    return ops._val(v).ndim == 2


class ControlSystem:
    """A control-affine ODE with a target equilibrium and a sampling box."""

    def __init__(self, name: str, dim: int, control_dim: int, target, domain_lo,
                 domain_hi, horizon: float, default_step: float, start=None):
        self.name = name
        self.dim = int(dim)
        self.control_dim = int(control_dim)
        self.target = np.asarray(target, dtype=np.float64)
        self.domain_lo = np.broadcast_to(np.asarray(domain_lo, dtype=np.float64),
                                         (self.dim,)).copy()
        self.domain_hi = np.broadcast_to(np.asarray(domain_hi, dtype=np.float64),
                                         (self.dim,)).copy()
        self.horizon = float(horizon)
        self.default_step = float(default_step)
        self.start = None if start is None else np.asarray(start, dtype=np.float64)
        if np.any(self.target < self.domain_lo) or np.any(self.target > self.domain_hi):
            raise ContractViolation(f"{name}: target lies outside the domain box")
        res = np.linalg.norm(ops._val(self.drift(self.target)))
        if not res <= 1e-6:
            raise ContractViolation(
                f"{name}: target is not an equilibrium (residual {res:.2e})"
            )

    # subclasses implement drift / control_effect / actuator_matrix

    def drift(self, X):
        raise NotImplementedError

    def control_effect(self, X, U):
        raise NotImplementedError

    def actuator_matrix(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vector_field(self, X, U):
        """f(x, u) for a single state or a batch; taped inputs stay taped."""
        out = ops.add(self.drift(X), self.control_effect(X, U))
        if isinstance(out, np.ndarray) and not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(np.atleast_2d(out)))[0]
            raise NumericError(
                f"{self.name}: non-finite derivative in coordinate {bad[-1]}"
            )
        return out

    def sample_domain(self, seed_or_rng, count: int) -> np.ndarray:
        if count < 0:
            raise ContractViolation("sample count must be >= 0")
        rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
               else np.random.default_rng(seed_or_rng))
        return rng.uniform(self.domain_lo, self.domain_hi, size=(count, self.dim))


def _refine_fixed_point(f: Callable, x0: np.ndarray, tol: float = 1e-12,
                        iters: int = 60) -> np.ndarray:
    """Newton refinement of a root of f with a finite-difference Jacobian."""
    x = np.asarray(x0, dtype=np.float64).copy()
    n = x.size
    for _ in range(iters):
        r = np.asarray(f(x))
        if np.linalg.norm(r) <= tol:
            return x
        J = np.empty((n, n))
        h = 1e-7
        for j in range(n):
            hi, lo = x.copy(), x.copy()
            hi[j] += h
            lo[j] -= h
            J[:, j] = (np.asarray(f(hi)) - np.asarray(f(lo))) / (2 * h)
        x = x - np.linalg.solve(J, r)
    raise NumericError("fixed-point refinement did not converge")


# ---------------------------------------------------------------------------
# gene regulatory network


@dataclass(frozen=True)
class GRNParams:
    a1: float = 1.0
    a2: float = 1.0
    b1: float = 0.2
    b2: float = 0.2
    n: int = 2
    k: float = 1.1
    s: float = 0.5
    # bistable attractors of the uncontrolled field, original coordinates
    P1: np.ndarray = field(default_factory=lambda: np.array([0.62562059, 0.62562059]))
    P2: np.ndarray = field(default_factory=lambda: np.array([0.0582738, 0.85801853]))


def grn_original_field(p: GRNParams, x: np.ndarray) -> np.ndarray:
    """Uncontrolled GRN right-hand side in the original (unscaled) coordinates."""
    x1, x2 = float(x[0]), float(x[1])
    sn = p.s ** p.n
    act1 = x1 ** p.n / (sn + x1 ** p.n)
    act2 = x2 ** p.n / (sn + x2 ** p.n)
    rep1 = sn / (sn + x1 ** p.n)
    rep2 = sn / (sn + x2 ** p.n)
    return np.array([p.a1 * act1 + p.b1 * rep2 - p.k * x1,
                     p.a2 * act2 + p.b2 * rep1 - p.k * x2])


class GRNSystem(ControlSystem):
    """Two-gene bistable switch; the control modulates one activation strength.

    The working coordinates are the original ones multiplied by ``rescale``
    (default 10) so the two attractors sit far apart relative to solver noise.
    The scalar control acts through the activating Hill term of gene 1,
    evaluated on the working state.
    """

    def __init__(self, params: GRNParams | None = None, rescale: float = 10.0):
        p = params or GRNParams()
        self.params = p
        self.rescale = float(rescale)
        f = lambda x: grn_original_field(p, x)
        tgt = self.rescale * _refine_fixed_point(f, p.P1)
        start = self.rescale * _refine_fixed_point(f, p.P2)
        self._sn = p.s ** p.n
        super().__init__(
            name="grn", dim=2, control_dim=1, target=tgt,
            domain_lo=-self.rescale, domain_hi=self.rescale,
            horizon=20.0, default_step=0.01, start=start,
        )

    def _hill_act(self, z):
        zn = ops.power(z, self.params.n)
        return ops.div(zn, ops.add(self._sn, zn))

    def _hill_rep(self, z):
        zn = ops.power(z, self.params.n)
        return ops.div(self._sn, ops.add(self._sn, zn))

    def drift(self, X):
        p = self.params
        r = self.rescale
        batch = _is_batch(X)
        x1 = _col(X, 0, batch)
        x2 = _col(X, 1, batch)
        z1 = ops.div(x1, r)
        z2 = ops.div(x2, r)
        d1 = ops.sub(
            ops.mul(r, ops.add(ops.mul(p.a1, self._hill_act(z1)),
                               ops.mul(p.b1, self._hill_rep(z2)))),
            ops.mul(p.k, x1),
        )
        d2 = ops.sub(
            ops.mul(r, ops.add(ops.mul(p.a2, self._hill_act(z2)),
                               ops.mul(p.b2, self._hill_rep(z1)))),
            ops.mul(p.k, x2),
        )
        return _assemble([d1, d2], batch)

    def control_effect(self, X, U):
        batch = _is_batch(X)
        x1 = _col(X, 0, batch)
        u = _col(U, 0, batch)
        eff = ops.mul(self._hill_act(x1), u)
        zero = np.zeros(ops._val(ops._split(eff)[0]).shape)
        return _assemble([eff, zero], batch)

    def actuator_matrix(self, x: np.ndarray) -> np.ndarray:
        x1 = float(x[0])
        hill = x1 ** self.params.n / (self._sn + x1 ** self.params.n)
        return np.array([[hill], [0.0]])


def make_grn(rescale: float = 10.0, params: GRNParams | None = None) -> GRNSystem:
    return GRNSystem(params=params, rescale=rescale)


# ---------------------------------------------------------------------------
# Lorenz


class LorenzSystem(ControlSystem):
    """Chaotic Lorenz flow, fully actuated: one control per coordinate."""

    def __init__(self, sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0,
                 box: float = 10.0):
        self.sigma = float(sigma)
        self.rho = float(rho)
        self.beta = float(beta)
        if not box > 0:
            raise ContractViolation("sampling box half-width must be positive")
        super().__init__(
            name="lorenz", dim=3, control_dim=3, target=np.zeros(3),
            domain_lo=-float(box), domain_hi=float(box), horizon=2.0,
            default_step=0.001,
        )

    def drift(self, X):
        batch = _is_batch(X)
        x = _col(X, 0, batch)
        y = _col(X, 1, batch)
        z = _col(X, 2, batch)
        d1 = ops.mul(self.sigma, ops.sub(y, x))
        d2 = ops.sub(ops.mul(x, ops.sub(self.rho, z)), y)
        d3 = ops.sub(ops.mul(x, y), ops.mul(self.beta, z))
        return _assemble([d1, d2, d3], batch)

    def control_effect(self, X, U):
        return U

    def actuator_matrix(self, x: np.ndarray) -> np.ndarray:
        return np.eye(3)


def make_lorenz(box: float = 10.0) -> LorenzSystem:
    return LorenzSystem(box=box)


# ---------------------------------------------------------------------------
# subcellular Michaelis-Menten network


@dataclass(frozen=True)
class CellNetParams:
    n_nodes: int
    B: float
    A: np.ndarray
    inactive: np.ndarray
    active: np.ndarray


def save_adjacency_csv(A: np.ndarray, path) -> None:
    """Write every nonzero entry as a 0-indexed 'i,j,weight' row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "weight"])
        for i, j in zip(*np.nonzero(A)):
            w.writerow([int(i), int(j), repr(float(A[i, j]))])


def load_adjacency_csv(path, n_nodes: int) -> np.ndarray:
    A = np.zeros((n_nodes, n_nodes))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["i", "j", "weight"]:
            raise ContractViolation(f"unexpected adjacency header {header}")
        for row in reader:
            if not row:
                continue
            i, j, wt = int(row[0]), int(row[1]), float(row[2])
            if not (0 <= i < n_nodes and 0 <= j < n_nodes):
                raise ContractViolation(f"edge ({i},{j}) outside 0..{n_nodes - 1}")
            if wt < 0:
                raise ContractViolation("adjacency weights must be >= 0")
            A[i, j] = wt
    return A


def _mm_saturation(x: np.ndarray) -> np.ndarray:
    return x * x / (1.0 + x * x)


def _cell_equilibrium(A: np.ndarray, B: float, x0: np.ndarray,
                      tol: float = 1e-10, damping: float = 0.5,
                      iters: int = 10_000) -> np.ndarray:
    x = np.asarray(x0, dtype=np.float64).copy()
    for _ in range(iters):
        proposal = (A @ _mm_saturation(x)) / B
        residual = np.linalg.norm(-B * x + A @ _mm_saturation(x))
        if residual <= tol:
            return x
        x = (1.0 - damping) * x + damping * proposal
    raise NumericError("cell equilibrium iteration did not converge")


class CellSystem(ControlSystem):
    """100-node gene-expression network with saturating interactions.

    Controls perturb the self-coupling of each node, entering through the same
    Michaelis-Menten saturation as the network terms. The target is the active
    (revived) phase; the inactive phase at the origin is the default start.
    """

    def __init__(self, n_nodes: int = 100, degree: int = 6, B: float = 1.0,
                 A: np.ndarray | None = None, graph_seed: int = 0):
        if A is None:
            g = nx.random_regular_graph(degree, n_nodes, seed=graph_seed)
            A = nx.to_numpy_array(g, nodelist=range(n_nodes), dtype=np.float64)
        A = np.asarray(A, dtype=np.float64)
        if A.shape != (n_nodes, n_nodes):
            raise ContractViolation(f"adjacency must be {n_nodes}x{n_nodes}")
        if np.any(A < 0):
            raise ContractViolation("adjacency weights must be >= 0")
        inactive = np.zeros(n_nodes)
        active = _cell_equilibrium(A, B, 5.0 * np.ones(n_nodes))
        self.params = CellNetParams(n_nodes=n_nodes, B=float(B), A=A,
                                    inactive=inactive, active=active)
        super().__init__(
            name="cell", dim=n_nodes, control_dim=n_nodes, target=active,
            domain_lo=-10.0, domain_hi=10.0, horizon=30.0, default_step=0.01,
            start=inactive,
        )

    def _saturation(self, X):
        sq = ops.mul(X, X)
        return ops.div(sq, ops.add(1.0, sq))

    def drift(self, X):
        h = self._saturation(X)
        return ops.sub(ops.matmul(h, self.params.A.T),
                       ops.mul(self.params.B, X))

    def control_effect(self, X, U):
        return ops.mul(U, self._saturation(X))

    def actuator_matrix(self, x: np.ndarray) -> np.ndarray:
        return np.diag(_mm_saturation(np.asarray(x, dtype=np.float64)))


def make_cell(**kwargs) -> CellSystem:
    return CellSystem(**kwargs)


def get_system(name: str, **overrides) -> ControlSystem:
    factories = {"grn": make_grn, "lorenz": make_lorenz, "cell": make_cell}
    try:
        factory = factories[name]
    except KeyError:
        raise ContractViolation(
            f"unknown system '{name}' (expected one of {sorted(factories)})"
        ) from None
    return factory(**overrides)
