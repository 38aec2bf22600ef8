"""Discrete optimal transport: costs, supervision masks, exact and entropic solvers."""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, xlogy

from .gyrovector import BallParams, PointCloud, pairwise_distance

__all__ = [
    "CostKind",
    "HYPERBOLIC_KINDS",
    "Coupling",
    "SinkhornConfig",
    "SentinelCost",
    "cost_from_distance",
    "cost_derivative",
    "build_cost_matrix",
    "apply_supervision",
    "supervision_sentinel",
    "exact_ot",
    "sinkhorn",
    "entropic_value",
    "entropy",
    "sinkhorn_divergence",
    "write_coupling_csv",
    "read_coupling_csv",
    "write_coupling_triplets",
    "read_coupling_triplets",
]


class CostKind(str, enum.Enum):
    SQ_EUCLIDEAN = "sq_euclidean"
    SQ_HYPERBOLIC = "sq_hyperbolic"
    NEG_COSH = "neg_cosh"
    NEG_LOG_ONE_PLUS_COSH = "neg_log_one_plus_cosh"
    LOG_COSH = "log_cosh"
    NEG_LOG_COSH = "neg_log_cosh"


HYPERBOLIC_KINDS = frozenset(CostKind) - {CostKind.SQ_EUCLIDEAN}


def _log_cosh(d):
    d = np.abs(d)
    return d + np.log1p(np.exp(-2.0 * d)) - math.log(2.0)


def cost_from_distance(d, kind):
    """Apply the scalar profile ``l`` of ``kind`` to hyperbolic distances."""
    kind = CostKind(kind)
    d = np.asarray(d, dtype=float)
    if kind is CostKind.SQ_HYPERBOLIC:
        return d**2
    if kind is CostKind.NEG_COSH:
        return -np.cosh(d)
    if kind is CostKind.NEG_LOG_ONE_PLUS_COSH:
        # log(1 + cosh d) = log(2 cosh^2(d/2))
        return -(math.log(2.0) + 2.0 * _log_cosh(d / 2.0))
    if kind is CostKind.LOG_COSH:
        return _log_cosh(d)
    if kind is CostKind.NEG_LOG_COSH:
        return -_log_cosh(d)
    raise ValueError(f"{kind.value} is not a function of the hyperbolic distance")


def cost_derivative(d, kind):
    """Derivative ``l'(d)`` of the profile of ``kind``."""
    kind = CostKind(kind)
    d = np.asarray(d, dtype=float)
    if kind is CostKind.SQ_HYPERBOLIC:
        return 2.0 * d
    if kind is CostKind.NEG_COSH:
        return -np.sinh(d)
    if kind is CostKind.NEG_LOG_ONE_PLUS_COSH:
        return -np.tanh(d / 2.0)
    if kind is CostKind.LOG_COSH:
        return np.tanh(d)
    if kind is CostKind.NEG_LOG_COSH:
        return -np.tanh(d)
    raise ValueError(f"{kind.value} is not a function of the hyperbolic distance")


@dataclass
class Coupling:
    """Transport plan with the marginals it was solved for."""

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    n_iter: int = 0
    converged: bool = True
    row_potential: np.ndarray | None = None

    @property
    def shape(self):
        return self.plan.shape

    def marginal_error(self) -> float:
        """Largest relative L1 violation of the two marginal constraints."""
        r = np.abs(self.plan.sum(1) - self.row_marginal).sum() / self.row_marginal.sum()
        c = np.abs(self.plan.sum(0) - self.col_marginal).sum() / self.col_marginal.sum()
        return float(max(r, c))

    def cost(self, C) -> float:
        return float(np.sum(self.plan * _values(C)))


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic solver settings.

    ``method="newton"`` (default) runs epsilon-scaling with Newton steps on the
    semi-dual, all in the log domain; ``method="sweeps"`` runs the classical
    alternating Sinkhorn updates, in the log domain or, with
    ``log_domain=False``, as plain matrix scaling.  Every method solves the same
    entropic problem; only the route and iteration count differ.
    """

    epsilon: float = 0.01
    max_iters: int = 100
    rel_tol: float = 1e-7
    log_domain: bool = True
    method: str = "newton"

    def __post_init__(self):
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.method not in ("newton", "sweeps"):
            raise ValueError(f"unknown Sinkhorn method {self.method!r}")


class SentinelCost(np.ndarray):
    """Cost matrix that remembers the sentinel standing in for infinite cost."""

    def __new__(cls, values, sentinel=None, kind=None):
        obj = np.asarray(values, dtype=float).view(cls)
        obj.sentinel = sentinel
        obj.kind = kind
        return obj

    def __array_finalize__(self, obj):
        self.sentinel = getattr(obj, "sentinel", None)
        self.kind = getattr(obj, "kind", None)


def _values(C):
    return np.asarray(C, dtype=float)


def build_cost_matrix(source, target, kind=CostKind.SQ_HYPERBOLIC):
    """Cost matrix between two point clouds (or raw point matrices).

    Hyperbolic kinds need both clouds on the same ball; ``sq_euclidean``
    accepts any vectors.
    """
    kind = CostKind(kind)
    X, ball_x = _points_and_ball(source)
    Y, ball_y = _points_and_ball(target)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if kind is CostKind.SQ_EUCLIDEAN:
        diff = X[:, None, :] - Y[None, :, :]
        values = np.sum(diff * diff, axis=-1)
    else:
        if ball_x is not None and ball_y is not None and ball_x.s != ball_y.s:
            raise ValueError(f"ball mismatch: s={ball_x.s} vs s={ball_y.s}")
        ball = ball_x or ball_y or BallParams()
        values = cost_from_distance(pairwise_distance(X, Y, ball), kind)
    return SentinelCost(values, kind=kind)


def _points_and_ball(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points, cloud.ball
    return np.atleast_2d(np.asarray(cloud, dtype=float)), None


def supervision_sentinel(C) -> float:
    finite = _values(C)[np.isfinite(C)]
    top = float(np.max(np.abs(finite))) if finite.size else 0.0
    return 1e6 * (top + 1.0)


def apply_supervision(C, matched_pairs):
    """Encode known matches: ``C[i, j] = 0`` for each pair, sentinel elsewhere
    in the matched rows and columns.
    """
    pairs = list(matched_pairs)
    values = np.array(_values(C), copy=True)
    kind = getattr(C, "kind", None)
    if not pairs:
        return SentinelCost(values, getattr(C, "sentinel", None), kind)
    n, m = values.shape
    rows = np.array([p[0] for p in pairs], dtype=int)
    cols = np.array([p[1] for p in pairs], dtype=int)
    if np.any(rows < 0) or np.any(rows >= n) or np.any(cols < 0) or np.any(cols >= m):
        raise IndexError(f"matched pair index out of range for a {n}x{m} cost matrix")
    prev = getattr(C, "sentinel", None)
    # an earlier mask must not inflate the scale of the new sentinel
    base = values if prev is None else values[values != prev]
    sentinel = supervision_sentinel(base)
    if prev is not None:
        values[values == prev] = sentinel
    values[rows, :] = sentinel
    values[:, cols] = sentinel
    values[rows, cols] = 0.0
    return SentinelCost(values, sentinel, kind)


# ---------------------------------------------------------------------------
# exact solvers
# ---------------------------------------------------------------------------


def exact_ot(a, b, C) -> Coupling:
    """Globally optimal coupling for small instances.

    Uniform square problems with ``n <= 8`` are solved by enumerating all
    permutations (the optimum of the assignment polytope sits at a
    permutation matrix).  Other instances with ``n_s * n_t <= 64`` go through
    a transportation simplex that walks the vertices of the polytope.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    C = _values(C)
    n, m = C.shape
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError("marginals do not match the cost matrix")
    uniform = n == m and np.allclose(a, 1.0 / n, rtol=0, atol=1e-15) and np.allclose(
        b, 1.0 / m, rtol=0, atol=1e-15
    )
    if uniform and n <= 8:
        perm = _best_permutation(C)
        plan = np.zeros((n, m))
        plan[np.arange(n), perm] = 1.0 / n
        return Coupling(plan, a, b)
    if n * m > 64:
        raise ValueError(f"instance too large for the exact solver: {n}x{m}")
    return Coupling(_transport_simplex(a, b, C), a, b)


def _best_permutation(C):
    n = C.shape[0]
    perms = np.array(list(itertools.permutations(range(n))), dtype=int)
    costs = C[np.arange(n)[None, :], perms].sum(axis=1)
    return perms[int(np.argmin(costs))]


def _transport_simplex(a, b, C, max_pivots=10_000):
    """Transportation simplex (MODI) with a perturbed north-west start.

    A tiny perturbation of the supplies keeps every basis nondegenerate; the
    perturbation is removed by re-solving the flows on the final basis.
    """
    n, m = C.shape
    k = n + m - 1
    delta = 1e-9 * min(a.min(), b.min(), 1.0) / (n + 1)
    ap = a + delta
    bp = b.copy()
    bp[-1] += n * delta
    basis = _northwest_basis(ap, bp)
    for _ in range(max_pivots):
        u, v = _potentials(basis, C, n, m)
        reduced = C - u[:, None] - v[None, :]
        i, j = np.unravel_index(int(np.argmin(reduced)), reduced.shape)
        if reduced[i, j] >= -1e-12:
            break
        cycle = _find_cycle(basis, (i, j), n, m)
        flows = _flows(basis, ap, bp, n, m)
        minus = cycle[1::2]
        theta_cell = min(minus, key=lambda cell: (flows[cell], cell))
        basis = [cell for cell in basis if cell != theta_cell] + [(i, j)]
    else:
        raise RuntimeError("transportation simplex did not terminate")
    assert len(basis) == k
    flows = _flows(basis, a, b, n, m)
    plan = np.zeros((n, m))
    for cell, f in flows.items():
        plan[cell] = max(f, 0.0)
    return plan


def _northwest_basis(a, b):
    a = a.copy()
    b = b.copy()
    n, m = len(a), len(b)
    i = j = 0
    basis = []
    while i < n and j < m:
        basis.append((i, j))
        f = min(a[i], b[j])
        a[i] -= f
        b[j] -= f
        if i == n - 1:
            j += 1
        elif j == m - 1:
            i += 1
        elif a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return basis


def _tree_adjacency(basis, n):
    adj = {}
    for i, j in basis:
        adj.setdefault(("r", i), []).append(("c", j))
        adj.setdefault(("c", j), []).append(("r", i))
    return adj


def _potentials(basis, C, n, m):
    adj = _tree_adjacency(basis, n)
    u = np.full(n, np.nan)
    v = np.full(m, np.nan)
    u[0] = 0.0
    stack = [("r", 0)]
    while stack:
        node = stack.pop()
        for nb in adj.get(node, []):
            if node[0] == "r" and np.isnan(v[nb[1]]):
                v[nb[1]] = C[node[1], nb[1]] - u[node[1]]
                stack.append(nb)
            elif node[0] == "c" and np.isnan(u[nb[1]]):
                u[nb[1]] = C[nb[1], node[1]] - v[node[1]]
                stack.append(nb)
    return u, v


def _find_cycle(basis, entering, n, m):
    """Cells of the unique cycle closed by ``entering``, starting with it."""
    adj = _tree_adjacency(basis, n)
    i, j = entering
    start, goal = ("c", j), ("r", i)
    parent = {start: None}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nb in adj.get(node, []):
            if nb not in parent:
                parent[nb] = node
                stack.append(nb)
    path = []
    node = goal
    while node is not None:
        path.append(node)
        node = parent[node]
    # path runs row i -> ... -> column j; consecutive nodes share a basic cell
    cells = [entering]
    for p, q in zip(path[:-1], path[1:]):
        cells.append((p[1], q[1]) if p[0] == "r" else (q[1], p[1]))
    return cells


def _flows(basis, a, b, n, m):
    """Solve the basic flows of a spanning-tree basis by leaf elimination."""
    supply = a.astype(float).copy()
    demand = b.astype(float).copy()
    remaining = set(basis)
    flows = {}
    row_deg = np.zeros(n, dtype=int)
    col_deg = np.zeros(m, dtype=int)
    for i, j in remaining:
        row_deg[i] += 1
        col_deg[j] += 1
    while remaining:
        progressed = False
        for cell in sorted(remaining):
            i, j = cell
            if row_deg[i] == 1:
                f = supply[i]
            elif col_deg[j] == 1:
                f = demand[j]
            else:
                continue
            flows[cell] = f
            supply[i] -= f
            demand[j] -= f
            row_deg[i] -= 1
            col_deg[j] -= 1
            remaining.discard(cell)
            progressed = True
            break
        if not progressed:
            raise RuntimeError("basis is not a spanning tree")
    return flows


# ---------------------------------------------------------------------------
# entropic solvers
# ---------------------------------------------------------------------------


def entropy(M) -> float:
    """Discrete entropy ``-sum M (log M - 1)`` with ``0 log 0 = 0``."""
    M = np.asarray(M, dtype=float)
    return float(-np.sum(xlogy(M, M) - M))


def entropic_value(M, C, epsilon) -> float:
    """Regularized transport objective ``<M, C> - epsilon H(M)``."""
    return float(np.sum(np.asarray(M) * _values(C)) - epsilon * entropy(M))


def _check_cost(C):
    values = _values(C)
    if not np.all(np.isfinite(values)):
        raise ValueError("cost matrix has non-finite entries; use apply_supervision for masking")
    return values


def sinkhorn(a, b, C, cfg: SinkhornConfig | None = None, warm_start=None) -> Coupling:
    """Entropic OT ``min <M, C> - epsilon H(M)`` over couplings of ``a`` and ``b``.

    Stops once the larger relative L1 marginal violation drops below
    ``cfg.rel_tol`` or after ``cfg.max_iters`` iterations (Newton steps or
    sweeps, depending on ``cfg.method``).  ``warm_start`` is a row potential
    from an earlier solve of a nearby problem (Newton method only); when it
    fails to converge within the budget the solver restarts cold.
    """
    cfg = cfg or SinkhornConfig()
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    sentinel = getattr(C, "sentinel", None)
    C = _check_cost(C)
    if C.shape != (a.shape[0], b.shape[0]):
        raise ValueError("marginals do not match the cost matrix")
    if not cfg.log_domain:
        return _sinkhorn_scaling(a, b, C, cfg)
    if cfg.method == "sweeps":
        return _sinkhorn_log(a, b, C, cfg)
    if warm_start is not None:
        with np.errstate(divide="ignore"):
            log_b = np.log(b)
        f, P, steps = _newton_stage(
            np.asarray(warm_start, dtype=float), a, b, log_b, C, cfg.epsilon,
            min(cfg.max_iters, WARM_BUDGET), cfg.rel_tol,
        )
        if _marginal_violation(P, a, b) <= cfg.rel_tol:
            return Coupling(P, a, b, n_iter=max(steps, 1), converged=True, row_potential=f)
    return _sinkhorn_newton(a, b, C, cfg, sentinel)


def _marginal_violation(P, a, b):
    r = np.abs(P.sum(1) - a).sum() / a.sum()
    c = np.abs(P.sum(0) - b).sum() / b.sum()
    return max(r, c)


def _sinkhorn_log(a, b, C, cfg):
    eps = cfg.epsilon
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    K = -C / eps
    n_iter = 0
    converged = False
    for n_iter in range(1, cfg.max_iters + 1):
        f = eps * (log_a - logsumexp(K + g[None, :] / eps, axis=1))
        g = eps * (log_b - logsumexp(K + f[:, None] / eps, axis=0))
        log_P = K + f[:, None] / eps + g[None, :] / eps
        P = np.exp(log_P)
        if _marginal_violation(P, a, b) <= cfg.rel_tol:
            converged = True
            break
    P = np.exp(K + f[:, None] / eps + g[None, :] / eps)
    return Coupling(P, a, b, n_iter=n_iter, converged=converged)


# Newton line-search halvings before a stage is declared stalled, and the
# step budget a warm start gets before the solver falls back to a cold start
MAX_HALVINGS = 30
WARM_BUDGET = 15


def _semi_dual(f, C, eps, log_b):
    """Exact column potential for ``f`` and the resulting plan."""
    K = -C / eps
    g = eps * (log_b - logsumexp(K + f[:, None] / eps, axis=0))
    P = np.exp(K + (f[:, None] + g[None, :]) / eps)
    return g, P


def _newton_stage(f, a, b, log_b, C, eps, budget, tol):
    """Maximise the semi-dual at one epsilon; returns ``(f, P, steps)``.

    The column marginal is exact by construction, so only the row residual
    enters the Newton system.  Its matrix is a weighted graph Laplacian that is
    singular along constants, hence the least-squares solve.
    """
    g, P = _semi_dual(f, C, eps, log_b)
    for step in range(budget + 1):
        r = P.sum(1)
        resid = a - r
        if np.abs(resid).sum() <= tol * a.sum() or step == budget:
            return f, P, step
        H = np.diag(r) - (P / b[None, :]) @ P.T
        d = np.linalg.lstsq(H, eps * resid, rcond=None)[0]
        slope = resid @ d
        base = f @ a + g @ b
        t = 1.0
        for _ in range(MAX_HALVINGS):
            f_new = f + t * d
            g_new, P_new = _semi_dual(f_new, C, eps, log_b)
            if f_new @ a + g_new @ b >= base + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no ascent along the Newton direction: the stage has stalled
            return f, P, step + 1
        f, g, P = f_new, g_new, P_new
    return f, P, budget


def _sinkhorn_newton(a, b, C, cfg, sentinel=None, shrink=0.5, stage_tol=1e-3):
    """Epsilon-scaling from the cost spread down to ``cfg.epsilon``, warm-started."""
    eps = cfg.epsilon
    with np.errstate(divide="ignore"):
        log_b = np.log(b)
    live = C if sentinel is None else C[C < sentinel]
    spread = float(live.max() - live.min()) if live.size else 0.0
    level = max(spread, eps)
    f = np.zeros_like(a)
    used = 0
    while True:
        level = max(level * shrink, eps)
        final = level == eps
        tol = cfg.rel_tol if final else stage_tol
        f, P, steps = _newton_stage(f, a, b, log_b, C, level, cfg.max_iters - used, tol)
        used += steps
        if final or used >= cfg.max_iters:
            break
    if not final:
        # budget ran out while annealing; report the plan at the target epsilon
        _, P = _semi_dual(f, C, eps, log_b)
    converged = final and _marginal_violation(P, a, b) <= cfg.rel_tol
    return Coupling(P, a, b, n_iter=max(used, 1), converged=converged, row_potential=f)


def _sinkhorn_scaling(a, b, C, cfg):
    K = np.exp(-C / cfg.epsilon)
    u = np.ones_like(a)
    v = np.ones_like(b)
    n_iter = 0
    converged = False
    with np.errstate(divide="ignore", invalid="ignore"):
        for n_iter in range(1, cfg.max_iters + 1):
            u = a / (K @ v)
            v = b / (K.T @ u)
            P = u[:, None] * K * v[None, :]
            if not np.all(np.isfinite(P)):
                raise FloatingPointError(
                    "scaling Sinkhorn under/overflowed; use log_domain=True"
                )
            if _marginal_violation(P, a, b) <= cfg.rel_tol:
                converged = True
                break
    return Coupling(u[:, None] * K * v[None, :], a, b, n_iter=n_iter, converged=converged)


def sinkhorn_divergence(src, tgt, kind=CostKind.SQ_HYPERBOLIC, cfg: SinkhornConfig | None = None):
    """Debiased entropic loss ``W(a, b) - (W(a, a) + W(b, b)) / 2``."""
    cfg = cfg or SinkhornConfig()
    return _sd_terms(src, tgt, kind, cfg)[0]


def _sd_terms(src, tgt, kind, cfg):
    a = src.weights if isinstance(src, PointCloud) else _uniform(src)
    b = tgt.weights if isinstance(tgt, PointCloud) else _uniform(tgt)
    out = []
    for x, y, wx, wy in ((src, tgt, a, b), (src, src, a, a), (tgt, tgt, b, b)):
        C = build_cost_matrix(x, y, kind)
        P = sinkhorn(wx, wy, C, cfg)
        out.append((entropic_value(P.plan, C, cfg.epsilon), P, C))
    value = out[0][0] - 0.5 * (out[1][0] + out[2][0])
    return value, out


def _uniform(points):
    n = np.atleast_2d(points).shape[0]
    return np.full(n, 1.0 / n)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_coupling_csv(path, M):
    """Dense CSV: header ``n_s,n_t`` then one row-major line per source point."""
    plan = M.plan if isinstance(M, Coupling) else np.asarray(M)
    n, m = plan.shape
    with open(path, "w", newline="\n") as fh:
        fh.write(f"{n},{m}\n")
        for row in plan:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_coupling_csv(path) -> np.ndarray:
    with open(path) as fh:
        n, m = (int(t) for t in fh.readline().strip().split(","))
        rows = [[float(t) for t in line.strip().split(",")] for line in fh if line.strip()]
    plan = np.array(rows, dtype=float).reshape(n, m)
    return plan


def write_coupling_triplets(path, M, threshold=0.0):
    """Sparse ``i j value`` lines (zero-based) for entries above ``threshold``."""
    plan = M.plan if isinstance(M, Coupling) else np.asarray(M)
    n, m = plan.shape
    with open(path, "w", newline="\n") as fh:
        for i, j in zip(*np.nonzero(plan > threshold)):
            fh.write(f"{i} {j} {plan[i, j]:.17g}\n")


def read_coupling_triplets(path, shape) -> np.ndarray:
    plan = np.zeros(shape)
    with open(path) as fh:
        for line in fh:
            if line.strip():
                i, j, v = line.split()
                plan[int(i), int(j)] = float(v)
    return plan
