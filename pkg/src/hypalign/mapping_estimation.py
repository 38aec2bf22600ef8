"""Learnable transport maps on the ball and the algorithms that train them.

The map is a stack of hyperbolic linear layers ``h -> b (+) W (x) h`` with an
optional Möbius-wrapped nonlinearity ``Exp_0 . sigma . Log_0`` between layers.
Gradients are hand-written reverse passes (see ``_vjp``); ball-valued biases
move along the exponential map while matrices take plain steps.

With ``euclidean=True`` the same code runs the vector-space counterpart
(``h -> W h + b``, Euclidean distances and barycenters), which serves as the
baseline.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._vjp import (
    distance_grads,
    exp0_vjp,
    log0_vjp,
    matrix_mul_vjp,
    mobius_add_vjp,
    scalar_mul_vjp,
)
from .barycenter import (
    euclid_barycenter_map,
    gyrobarycenter_map,
    gyrobarycenter_parts,
)
from .gyrovector import (
    BallParams,
    PointCloud,
    conformal_factor,
    distance,
    exp0,
    exp_map,
    log0,
    mobius_add,
    mobius_matrix_mul,
    mobius_scalar_mul,
    pairwise_distance,
    project,
)
from .ot_solvers import (
    Coupling,
    CostKind,
    SentinelCost,
    SinkhornConfig,
    apply_supervision,
    build_cost_matrix,
    cost_derivative,
    entropic_value,
    entropy,
    sinkhorn,
    supervision_sentinel,
)

__all__ = [
    "Nonlinearity",
    "InitStrategy",
    "HypLinearLayer",
    "HnnModel",
    "OptimConfig",
    "MeConfig",
    "TrainState",
    "LineSearchError",
    "build_model",
    "hyp_linear_forward",
    "hnn_forward",
    "riemannian_grad",
    "riemannian_step",
    "data_loss",
    "map_regularizer",
    "fit_to_targets",
    "procrustes_rotation",
    "init_map",
    "ot_direct_fit",
    "ot_direct_loss",
    "barycenter_loss_grad_M",
    "barycenter_loss_grad_M_fd",
    "hyp_me_fit",
    "write_model",
    "read_model",
    "write_loss_trace",
]


class Nonlinearity(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    NONE = "none"


class InitStrategy(str, enum.Enum):
    RANDOM = "random"
    PERMUTATION = "permutation"
    IDENTITY = "identity"
    PROCRUSTES = "procrustes"
    GYROBARYCENTER = "gyrobarycenter"


class LineSearchError(RuntimeError):
    """Armijo backtracking found no acceptable step."""


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class HypLinearLayer:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.b.shape[0] != self.W.shape[0]:
            raise ValueError(f"bias of length {self.b.shape[0]} for a {self.W.shape} matrix")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("layer weights are not finite")

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]


@dataclass
class HnnModel:
    """Layers applied in order; ``use_bias=False`` pins every bias at 0."""

    layers: list
    nonlinearity: Nonlinearity = Nonlinearity.NONE
    ball: BallParams = field(default_factory=BallParams)
    euclidean: bool = False
    use_bias: bool = True

    def __post_init__(self):
        self.nonlinearity = Nonlinearity(self.nonlinearity)
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for k in range(1, len(self.layers)):
            if self.layers[k].d_in != self.layers[k - 1].d_out:
                raise ValueError(
                    f"layer {k} expects dim {self.layers[k].d_in}, "
                    f"previous layer outputs {self.layers[k - 1].d_out}"
                )
        if not self.euclidean:
            for k, layer in enumerate(self.layers):
                if not self.ball.contains(layer.b):
                    raise ValueError(f"bias of layer {k} lies outside the ball")

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def copy(self) -> "HnnModel":
        layers = [HypLinearLayer(l.W.copy(), l.b.copy()) for l in self.layers]
        return replace(self, layers=layers)

    def __call__(self, x):
        return hnn_forward(self, x)


def build_model(
    dims,
    nonlinearity="none",
    ball: BallParams | None = None,
    seed=None,
    euclidean: bool = False,
    use_bias: bool = True,
) -> HnnModel:
    """Glorot-uniform weights and zero biases for layer widths ``dims``."""
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("dims needs an input and an output width")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (d_in + d_out))
        layers.append(HypLinearLayer(rng.uniform(-bound, bound, (d_out, d_in)), np.zeros(d_out)))
    return HnnModel(layers, Nonlinearity(nonlinearity), ball or BallParams(), euclidean, use_bias)


def _points(X):
    return X.points if isinstance(X, PointCloud) else np.atleast_2d(np.asarray(X, dtype=float))


def hyp_linear_forward(layer: HypLinearLayer, x, ball: BallParams | None = None):
    """``b (+) (W (x) x)``."""
    ball = ball or BallParams()
    return mobius_add(layer.b, mobius_matrix_mul(layer.W, x, ball), ball)


def _sigma(h, kind):
    if kind is Nonlinearity.RELU:
        return np.maximum(h, 0.0)
    if kind is Nonlinearity.TANH:
        return np.tanh(h)
    return h


def _sigma_vjp(h, g, kind):
    if kind is Nonlinearity.RELU:
        return g * (h > 0)
    if kind is Nonlinearity.TANH:
        return g * (1.0 - np.tanh(h) ** 2)
    return g


def _forward_cached(model: HnnModel, X):
    """Forward pass keeping what the reverse pass needs."""
    ball = model.ball
    h = X
    cache = []
    for k, layer in enumerate(model.layers):
        if k > 0 and model.nonlinearity is not Nonlinearity.NONE:
            before = h
            if model.euclidean:
                pre = h
                h = _sigma(pre, model.nonlinearity)
            else:
                pre = log0(h, ball)
                h = exp0(_sigma(pre, model.nonlinearity), ball)
            act = (pre, before)
        else:
            act = None
        if model.euclidean:
            u = h @ layer.W.T
            out = u + layer.b if model.use_bias else u
        else:
            u = mobius_matrix_mul(layer.W, h, ball)
            out = mobius_add(layer.b, u, ball) if model.use_bias else u
        cache.append((h, u, act))
        h = out
    return h, cache


def hnn_forward(model: HnnModel, x):
    """Apply every layer, wrapping the nonlinearity between consecutive layers."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.d_in:
        raise ValueError(f"model expects dim {model.d_in}, got {X.shape[1]}")
    out, _ = _forward_cached(model, X)
    return out[0] if single else out


def _backward(model: HnnModel, cache, g_out):
    """Euclidean gradients ``[(gW, gb), ...]`` of ``<g_out, model(X)>``."""
    ball = model.ball
    grads = [None] * len(model.layers)
    g = g_out
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        h, u, act = cache[k]
        if model.use_bias:
            if model.euclidean:
                gb, gu = g.sum(0), g
            else:
                gb_rows, gu = mobius_add_vjp(np.broadcast_to(layer.b, u.shape), u, g, ball)
                gb = gb_rows.sum(0)
        else:
            gb, gu = np.zeros_like(layer.b), g
        if model.euclidean:
            gW, gh = gu.T @ h, gu @ layer.W
        else:
            gW, gh = matrix_mul_vjp(layer.W, h, gu, ball)
        grads[k] = (gW, gb)
        if act is not None:
            pre, before = act
            if model.euclidean:
                gh = _sigma_vjp(pre, gh, model.nonlinearity)
            else:
                gh = exp0_vjp(_sigma(pre, model.nonlinearity), gh, ball)
                gh = log0_vjp(before, _sigma_vjp(pre, gh, model.nonlinearity), ball)
        g = gh
    return grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _dist_rows(U, Y, model: HnnModel):
    if model.euclidean:
        return np.linalg.norm(U - Y, axis=-1)
    return distance(U, Y, model.ball)


def _dist_rows_grad(U, Y, model: HnnModel):
    """Gradients of the row distances with respect to ``U`` and ``Y``."""
    if model.euclidean:
        diff = U - Y
        r = np.linalg.norm(diff, axis=-1, keepdims=True)
        unit = np.where(r > 0, diff / np.maximum(r, 1e-300), 0.0)
        return unit, -unit
    return distance_grads(U, Y, model.ball)


def _anchors(model: HnnModel, K):
    if K is None:
        return [np.eye(l.d_out, l.d_in) for l in model.layers]
    if isinstance(K, (list, tuple)):
        if len(K) != len(model.layers):
            raise ValueError("one anchor matrix per layer is required")
        return [np.asarray(k, dtype=float) for k in K]
    K = np.asarray(K, dtype=float)
    return [K if K.shape == l.W.shape else np.eye(l.d_out, l.d_in) for l in model.layers]


def map_regularizer(model: HnnModel, K=None) -> float:
    """``sum_l ||W_l - K_l||_F^2`` (anchors default to rectangular identities)."""
    return float(sum(np.sum((l.W - k) ** 2) for l, k in zip(model.layers, _anchors(model, K))))


def data_loss(model: HnnModel, X, Y) -> float:
    """Mean distance between mapped sources and their targets."""
    out, _ = _forward_cached(model, _points(X))
    return float(np.mean(_dist_rows(out, _points(Y), model)))


def _objective(model, X, Y, omega, K):
    out, _ = _forward_cached(model, X)
    val = float(np.mean(_dist_rows(out, Y, model)))
    if omega:
        val += omega * map_regularizer(model, K)
    return val


def _objective_grad(model, X, Y, omega, K):
    out, cache = _forward_cached(model, X)
    val = float(np.mean(_dist_rows(out, Y, model)))
    gU, _ = _dist_rows_grad(out, Y, model)
    grads = _backward(model, cache, gU / X.shape[0])
    if omega:
        val += omega * map_regularizer(model, K)
        grads = [
            (gW + 2.0 * omega * (l.W - k), gb)
            for (gW, gb), l, k in zip(grads, model.layers, _anchors(model, K))
        ]
    return val, grads


# ---------------------------------------------------------------------------
# Riemannian optimisation
# ---------------------------------------------------------------------------


def riemannian_grad(euclid_grad, x, ball: BallParams | None = None):
    """Scale an ambient gradient at ``x`` by the inverse metric ``lambda_x^-2``."""
    lam = conformal_factor(x, ball)
    g = np.asarray(euclid_grad, dtype=float)
    return g / (np.asarray(lam)[..., None] ** 2)


@dataclass(frozen=True)
class OptimConfig:
    """Full-batch training settings.

    Steps are accepted only when they do not increase the objective; the step
    size grows by ``grow`` after an accepted step and shrinks by ``shrink``
    after a rejected one.
    """

    optimizer: str = "rgd"
    lr: float = 0.05
    max_steps: int = 300
    tol: float = 1e-9
    grow: float = 1.2
    shrink: float = 0.5
    min_lr: float = 1e-12
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("rgd", "radam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def riemannian_step(model: HnnModel, grads, optimizer="rgd", lr=0.01, state=None, cfg=None) -> HnnModel:
    """One step on every parameter; returns a new model.

    Biases are ball points: their gradient is converted with ``lambda^-2`` and
    applied through ``Exp_b``.  Matrices take a plain step.  ``radam`` keeps
    first and second moments (ambient coordinates) in ``state``.
    """
    cfg = cfg or OptimConfig(optimizer=optimizer)
    ball = model.ball
    new = model.copy()
    if optimizer == "radam":
        if state is None:
            raise ValueError("radam needs a state dict")
        t = state.get("t", 0) + 1
        state["t"] = t
    for k, ((gW, gb), layer) in enumerate(zip(grads, new.layers)):
        rb = gb if model.euclidean else riemannian_grad(gb, layer.b, ball)
        if optimizer == "radam":
            dirs = []
            for name, gr in (("W", gW), ("b", rb)):
                m = state.get((k, name, "m"), np.zeros_like(gr))
                v = state.get((k, name, "v"), np.zeros_like(gr))
                m = cfg.beta1 * m + (1 - cfg.beta1) * gr
                v = cfg.beta2 * v + (1 - cfg.beta2) * gr * gr
                state[(k, name, "m")], state[(k, name, "v")] = m, v
                m_hat = m / (1 - cfg.beta1**t)
                v_hat = v / (1 - cfg.beta2**t)
                dirs.append(m_hat / (np.sqrt(v_hat) + cfg.adam_eps))
            dW, db = dirs
        else:
            dW, db = gW, rb
        layer.W = layer.W - lr * dW
        if not model.use_bias:
            continue
        if model.euclidean:
            layer.b = layer.b - lr * db
        else:
            layer.b = project(exp_map(layer.b, -lr * db, ball), ball)
    return new


def _copy_state(state):
    return {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in state.items()}


def _descend(model, value_grad, value, cfg: OptimConfig, trace=None):
    """Descent-only optimisation loop shared by every trainer."""
    loss, grads = value_grad(model)
    if trace is not None:
        trace.append(loss)
    lr = cfg.lr
    state = {}
    for _ in range(cfg.max_steps):
        if all(not np.any(gW) and not np.any(gb) for gW, gb in grads):
            break
        trial_state = _copy_state(state)
        cand = riemannian_step(model, grads, cfg.optimizer, lr, trial_state, cfg)
        cand_loss = value(cand)
        if np.isfinite(cand_loss) and cand_loss <= loss:
            improvement = loss - cand_loss
            model, state = cand, trial_state
            loss, grads = value_grad(model)
            if trace is not None:
                trace.append(loss)
            lr *= cfg.grow
            if improvement <= cfg.tol * max(abs(loss), 1e-300):
                break
        else:
            lr *= cfg.shrink
            if lr < cfg.min_lr:
                break
    return model, loss


def fit_to_targets(
    model: HnnModel,
    X_src,
    Y,
    omega: float = 0.0,
    K=None,
    cfg: OptimConfig | None = None,
    return_trace: bool = False,
):
    """Fit ``model`` so that ``model(x_i)`` approaches ``y_i``.

    Minimises ``mean_i d(model(x_i), y_i) + omega * sum_l ||W_l - K_l||_F^2``
    by descent-only Riemannian steps, so the loss never increases.
    """
    cfg = cfg or OptimConfig()
    X = _points(X_src)
    Y = _points(Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"{X.shape[0]} sources but {Y.shape[0]} targets")
    if omega < 0:
        raise ValueError("omega must be nonnegative")
    trace = []
    start = _objective(model, X, Y, omega, K)
    if not np.isfinite(start):
        raise FloatingPointError("initial loss is not finite")
    model, _ = _descend(
        model,
        lambda m: _objective_grad(m, X, Y, omega, K),
        lambda m: _objective(m, X, Y, omega, K),
        cfg,
        trace,
    )
    return (model, trace) if return_trace else model


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def procrustes_rotation(X_src, X_tgt) -> np.ndarray:
    """Orthogonal ``P`` minimising ``||X_tgt - X_src P^T||_F`` (rows are points)."""
    A = _points(X_tgt).T @ _points(X_src)
    U, _, Vt = np.linalg.svd(A)
    return U @ Vt


def _pairs_or_rows(src, tgt, pairs, strategy):
    if pairs is not None:
        pairs = np.asarray(list(pairs), dtype=int).reshape(-1, 2)
        return pairs[:, 0], pairs[:, 1]
    n_s, n_t = len(_points(src)), len(_points(tgt))
    if n_s != n_t:
        raise ValueError(f"{strategy} initialisation needs equal cloud sizes, got {n_s} and {n_t}")
    idx = np.arange(n_s)
    return idx, idx


def init_map(
    strategy,
    src,
    tgt,
    seed=None,
    dims=None,
    nonlinearity="none",
    cost=CostKind.SQ_HYPERBOLIC,
    sinkhorn_cfg: SinkhornConfig | None = None,
    optim: OptimConfig | None = None,
    pairs=None,
    euclidean: bool = False,
) -> HnnModel:
    """Build a model and pre-train it on the strategy's target set.

    ``random`` keeps the Glorot draw; ``permutation`` fits a random shuffle of
    the targets; ``identity`` fits the sources themselves; ``procrustes`` fits
    the best rotation of the sources (on ``pairs`` when given, else rows in
    order); ``gyrobarycenter`` fits the barycentric images of an entropic
    coupling (Euclidean barycenter for Euclidean models).
    """
    strategy = InitStrategy(strategy)
    X = _points(src)
    Yt = _points(tgt)
    ball = src.ball if isinstance(src, PointCloud) else BallParams()
    dims = list(dims) if dims is not None else [X.shape[1], Yt.shape[1]]
    model = build_model(dims, nonlinearity, ball, seed, euclidean)
    if strategy is InitStrategy.RANDOM:
        return model
    if strategy is InitStrategy.PERMUTATION:
        rows, cols = _pairs_or_rows(src, tgt, None, strategy.value)
        targets = Yt[np.random.default_rng(seed).permutation(len(cols))]
        Xs = X
    elif strategy is InitStrategy.IDENTITY:
        if X.shape[1] != model.d_out:
            raise ValueError("identity initialisation needs equal input and output dims")
        Xs, targets = X, X
    elif strategy is InitStrategy.PROCRUSTES:
        rows, cols = _pairs_or_rows(src, tgt, pairs, strategy.value)
        P = procrustes_rotation(X[rows], Yt[cols])
        Xs = X
        targets = X @ P.T if euclidean else mobius_matrix_mul(P, X, ball)
    else:
        C = build_cost_matrix(src, tgt, CostKind.SQ_EUCLIDEAN if euclidean else cost)
        if pairs is not None:
            C = apply_supervision(C, pairs)
        M = sinkhorn(_weights(src), _weights(tgt), C, sinkhorn_cfg)
        targets = _barycenters(M.plan, Yt, ball, euclidean)
        Xs = X
    return fit_to_targets(model, Xs, targets, cfg=optim)


def _weights(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.weights
    n = _points(cloud).shape[0]
    return np.full(n, 1.0 / n)


def _barycenters(plan, Y, ball, euclidean):
    if euclidean:
        return euclid_barycenter_map(plan, Y).projected
    return gyrobarycenter_map(plan, Y, ball).projected


# ---------------------------------------------------------------------------
# OT-direct
# ---------------------------------------------------------------------------


def _plan_term_grad(U, V, P, kind, ball, euclidean, wrt_both):
    """Gradient w.r.t. ``U`` of ``sum_ij P_ij l(d(u_i, v_j))`` with ``P`` fixed.

    ``wrt_both`` adds the contribution of ``V`` when ``V`` is ``U`` itself.
    """
    n, m = P.shape
    Ui = np.repeat(U, m, axis=0)
    Vj = np.tile(V, (n, 1))
    if euclidean:
        diff = Ui - Vj
        w = (2.0 * P).reshape(-1, 1)
        du, dv = w * diff, -w * diff
    else:
        d = pairwise_distance(U, V, ball).reshape(-1, 1)
        du, dv = distance_grads(Ui, Vj, ball)
        w = (P.reshape(-1) * cost_derivative(d[:, 0], kind)).reshape(-1, 1)
        du, dv = w * du, w * dv
    G = du.reshape(n, m, -1).sum(1)
    if wrt_both:
        G = G + dv.reshape(n, m, -1).sum(0)
    return G


def ot_direct_loss(model: HnnModel, src, tgt, loss="w_eps", kind=CostKind.SQ_HYPERBOLIC, cfg=None, pairs=None):
    """Entropic OT loss between the transported source and the target cloud."""
    return _ot_direct_value_grad(model, _points(src), tgt, loss, kind, cfg, pairs, False)[0]


def _ot_cost(U, Y, kind, ball, euclidean, pairs):
    kind = CostKind.SQ_EUCLIDEAN if euclidean else kind
    C = build_cost_matrix(PointCloud(U, ball=ball) if not euclidean else U,
                          PointCloud(Y, ball=ball) if not euclidean else Y, kind)
    if pairs is not None:
        C = apply_supervision(C, pairs)
    return C


def _ot_direct_value_grad(model, X, tgt, loss, kind, cfg, pairs, with_grad, warm=None):
    cfg = cfg or SinkhornConfig()
    Y = _points(tgt)
    a = np.full(X.shape[0], 1.0 / X.shape[0])
    b = _weights(tgt)
    out, cache = _forward_cached(model, X)
    C = _ot_cost(out, Y, kind, model.ball, model.euclidean, pairs)
    M = sinkhorn(a, b, C, cfg, warm_start=None if warm is None else warm.get("xy"))
    value = entropic_value(M.plan, C, cfg.epsilon)
    if warm is not None:
        warm["xy"] = M.row_potential
    kind_eff = CostKind.SQ_EUCLIDEAN if model.euclidean else CostKind(kind)
    live = M.plan if pairs is None else np.where(np.asarray(C) == getattr(C, "sentinel", None), 0.0, M.plan)
    G = _plan_term_grad(out, Y, live, kind_eff, model.ball, model.euclidean, False) if with_grad else None
    if loss == "sinkhorn_div":
        Cuu = _ot_cost(out, out, kind, model.ball, model.euclidean, None)
        Muu = sinkhorn(a, a, Cuu, cfg, warm_start=None if warm is None else warm.get("xx"))
        if warm is not None:
            warm["xx"] = Muu.row_potential
        # the target self-term does not depend on the map; solve it once per fit
        yy = None if warm is None else warm.get("yy")
        if yy is None:
            Cyy = _ot_cost(Y, Y, kind, model.ball, model.euclidean, None)
            yy = entropic_value(sinkhorn(b, b, Cyy, cfg).plan, Cyy, cfg.epsilon)
            if warm is not None:
                warm["yy"] = yy
        value -= 0.5 * (entropic_value(Muu.plan, Cuu, cfg.epsilon) + yy)
        if with_grad:
            G = G - 0.5 * _plan_term_grad(out, out, Muu.plan, kind_eff, model.ball, model.euclidean, True)
    elif loss != "w_eps":
        raise ValueError(f"unknown OT loss {loss!r}")
    if not np.isfinite(value):
        raise FloatingPointError("OT loss is not finite")
    if not with_grad:
        return value, None
    return value, _backward(model, cache, G)


def ot_direct_fit(
    model: HnnModel | None,
    src,
    tgt,
    loss="w_eps",
    init="gyrobarycenter",
    kind=CostKind.SQ_HYPERBOLIC,
    sinkhorn_cfg: SinkhornConfig | None = None,
    optim: OptimConfig | None = None,
    seed=None,
    pairs=None,
    euclidean: bool = False,
    return_trace: bool = False,
):
    """Train the map on the OT loss between the transported source and the target.

    ``model=None`` builds one with ``init``.  The Sinkhorn plan is held fixed
    when differentiating (envelope gradient).
    """
    sinkhorn_cfg = sinkhorn_cfg or SinkhornConfig()
    optim = optim or OptimConfig(max_steps=100)
    if model is None:
        model = init_map(init, src, tgt, seed, cost=kind, sinkhorn_cfg=sinkhorn_cfg,
                         optim=optim, pairs=pairs, euclidean=euclidean)
    X = _points(src)
    warm = {}
    trace = []
    model, _ = _descend(
        model,
        lambda m: _ot_direct_value_grad(m, X, tgt, loss, kind, sinkhorn_cfg, pairs, True, warm),
        lambda m: _ot_direct_value_grad(m, X, tgt, loss, kind, sinkhorn_cfg, pairs, False, warm)[0],
        optim,
        trace,
    )
    return (model, trace) if return_trace else model


# ---------------------------------------------------------------------------
# Hyp-ME: block coordinate descent on (coupling, map)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeConfig:
    """Weights and budgets of the joint coupling / map objective.

    ``eta = inf`` drops the fitting term from the coupling update, which then
    is a plain entropic OT solve.
    """

    eta: float = 1.0
    omega: float = 0.0
    epsilon: float = 0.01
    K: np.ndarray | None = None
    max_outer: int = 20
    tol: float = 1e-7
    cost: CostKind = CostKind.SQ_HYPERBOLIC
    sinkhorn_iters: int = 300
    sinkhorn_tol: float = 1e-9
    inner: OptimConfig = field(default_factory=lambda: OptimConfig(max_steps=30))
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    fd_gradient: bool = False

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive (use inf to drop the fitting term)")
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ValueError("epsilon must be positive and finite")


@dataclass
class TrainState:
    coupling: Coupling
    model: HnnModel
    trace: list = field(default_factory=list)
    marginal_errors: list = field(default_factory=list)


def barycenter_loss_grad_M(plan, U, Y, model: HnnModel):
    """Gradient in ``M`` of ``mean_i d(U_i, B_M(Y)_i)``; also returns ``B_M(Y)``.

    ``B`` is the gyrobarycenter map (Euclidean barycenter for Euclidean models).
    """
    n = plan.shape[0]
    if model.euclidean:
        mass = plan.sum(1)
        B = (plan @ Y) / mass[:, None]
        _, gB = _dist_rows_grad(U, B, model)
        gB = gB / n
        return (gB @ Y.T - np.sum(gB * B, axis=1, keepdims=True)) / mass[:, None], B
    ball = model.ball
    z, denom, gamma_sq = gyrobarycenter_parts(plan, Y, ball)
    B = mobius_scalar_mul(0.5, z, ball)
    _, gB = distance_grads(U, B, ball)
    gz = scalar_mul_vjp(0.5, z, gB / n, ball)
    GX = gamma_sq[:, None] * Y
    g = gamma_sq - 0.5
    gM = (gz @ GX.T - np.sum(gz * z, axis=1, keepdims=True) * g[None, :]) / denom[:, None]
    return gM, B


def barycenter_loss_grad_M_fd(plan, U, Y, model: HnnModel, h=1e-7):
    """Central finite differences of the same loss; for checks and tiny problems."""
    def f(P):
        B = _barycenters(P, Y, model.ball, model.euclidean)
        return float(np.mean(_dist_rows(U, B, model)))

    out = np.zeros_like(plan)
    for idx in np.ndindex(plan.shape):
        step = h * max(1.0, abs(plan[idx]))
        Pp = plan.copy()
        Pm = plan.copy()
        Pp[idx] += step
        Pm[idx] -= step
        out[idx] = (f(Pp) - f(Pm)) / (2 * step)
    return out


def _neg_entropy_grad(M):
    with np.errstate(divide="ignore"):
        return np.where(M > 0, np.log(np.where(M > 0, M, 1.0)), 0.0)


def _me_total(model, X, Y, M, C, cfg: MeConfig, U=None):
    """Joint objective: map fit to the barycenters + map regulariser + OT term."""
    if U is None:
        U = hnn_forward(model, X)
    B = _barycenters(M, Y, model.ball, model.euclidean)
    fit = float(np.mean(_dist_rows(U, B, model)))
    ot = float(np.sum(M * C)) - cfg.epsilon * entropy(M)
    weight = 1.0 if math.isinf(cfg.eta) else cfg.eta
    return fit + cfg.omega * map_regularizer(model, cfg.K) + weight * ot


def _marginal_error(M, a, b):
    return float(max(np.abs(M.sum(1) - a).max(), np.abs(M.sum(0) - b).max()))


def _oracle_cost(F, sentinel_mask):
    """Replace masked entries of the oracle cost by a fresh sentinel."""
    if not np.any(sentinel_mask):
        return F
    F = np.array(F, copy=True)
    sentinel = supervision_sentinel(F[~sentinel_mask])
    F[sentinel_mask] = sentinel
    return SentinelCost(F, sentinel)


def hyp_me_fit(src, tgt, model: HnnModel, cfg: MeConfig | None = None, pairs=None):
    """Alternate a conditional-gradient step on the coupling and a map refit.

    Returns ``(coupling, model, TrainState)``; ``TrainState.trace`` lists
    ``(outer_iter, total_loss)`` starting with the initial state at 0 and
    ``TrainState.marginal_errors`` the largest marginal violation of each
    iterate coupling.
    """
    cfg = cfg or MeConfig()
    X = _points(src)
    Y = _points(tgt)
    a = _weights(src)
    b = _weights(tgt)
    kind = CostKind.SQ_EUCLIDEAN if model.euclidean else cfg.cost
    C = build_cost_matrix(src if not model.euclidean else X, tgt if not model.euclidean else Y, kind)
    if pairs is not None:
        C = apply_supervision(C, pairs)
    mask = np.asarray(C) == getattr(C, "sentinel", np.nan)
    Cv = np.asarray(C, dtype=float)
    sk_cfg = SinkhornConfig(cfg.epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    coupling = sinkhorn(a, b, C, sk_cfg)
    M = coupling.plan
    drop_fit = math.isinf(cfg.eta)

    state = TrainState(coupling, model)
    total = _me_total(model, X, Y, M, Cv, cfg)
    state.trace.append((0, total))
    state.marginal_errors.append(_marginal_error(M, a, b))
    oracle_cfg = None if drop_fit else SinkhornConfig(cfg.eta * cfg.epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    for it in range(1, cfg.max_outer + 1):
        prev = total
        if not drop_fit:
            U = hnn_forward(model, X)
            if cfg.fd_gradient:
                gM = barycenter_loss_grad_M_fd(M, U, Y, model)
                B = _barycenters(M, Y, model.ball, model.euclidean)
            else:
                gM, B = barycenter_loss_grad_M(M, U, Y, model)
            scale = 1.0 if model.euclidean else conformal_factor(B, model.ball)[:, None] ** -2
            F = cfg.eta * Cv + scale * gM
            star = sinkhorn(a, b, _oracle_cost(F, mask), oracle_cfg).plan
            direction = star - M
            full_grad = gM + cfg.eta * (Cv + cfg.epsilon * _neg_entropy_grad(M))
            slope = float(np.sum(np.where(direction != 0, full_grad * direction, 0.0)))
            f0 = _me_total(model, X, Y, M, Cv, cfg, U)
            if slope < -1e-14 * max(1.0, abs(f0)):
                alpha = 1.0
                for _ in range(cfg.max_backtracks):
                    cand = M + alpha * direction
                    f_new = _me_total(model, X, Y, cand, Cv, cfg, U)
                    if f_new <= f0 + cfg.armijo_c * alpha * slope:
                        break
                    alpha *= cfg.backtrack
                else:
                    raise LineSearchError(
                        f"Armijo search failed at outer iteration {it}: slope {slope:.3g}, "
                        f"last step {alpha / cfg.backtrack:.3g}"
                    )
                M = cand
        targets = _barycenters(M, Y, model.ball, model.euclidean)
        model = fit_to_targets(model, X, targets, cfg.omega, cfg.K, cfg.inner)
        total = _me_total(model, X, Y, M, Cv, cfg)
        state.trace.append((it, total))
        state.marginal_errors.append(_marginal_error(M, a, b))
        if abs(prev - total) <= cfg.tol * max(abs(prev), 1e-300):
            break
    coupling = Coupling(M, a, b, n_iter=coupling.n_iter, converged=coupling.converged)
    state.coupling = coupling
    state.model = model
    return coupling, model, state


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def write_model(path, model: HnnModel):
    """Text format: ``L nonlinearity s euclidean use_bias``, then per layer a
    ``d_out d_in`` line, the row-major ``W`` line and the ``b`` line.
    """
    with open(path, "w", newline="\n") as fh:
        fh.write(
            f"{len(model.layers)} {model.nonlinearity.value} {model.ball.s:.17g} "
            f"{int(model.euclidean)} {int(model.use_bias)}\n"
        )
        for layer in model.layers:
            fh.write(f"{layer.d_out} {layer.d_in}\n")
            fh.write(" ".join(f"{v:.17g}" for v in layer.W.ravel()) + "\n")
            fh.write(" ".join(f"{v:.17g}" for v in layer.b) + "\n")


def read_model(path) -> HnnModel:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    L, nonlin, s, euclid, bias = lines[0]
    layers = []
    pos = 1
    for _ in range(int(L)):
        d_out, d_in = int(lines[pos][0]), int(lines[pos][1])
        W = np.array([float(t) for t in lines[pos + 1]]).reshape(d_out, d_in)
        b = np.array([float(t) for t in lines[pos + 2]])
        layers.append(HypLinearLayer(W, b))
        pos += 3
    return HnnModel(layers, Nonlinearity(nonlin), BallParams(float(s)), bool(int(euclid)), bool(int(bias)))


def write_loss_trace(path, trace):
    """CSV ``iter,loss``; ``trace`` holds ``(iter, loss)`` pairs or bare losses."""
    with open(path, "w", newline="\n") as fh:
        fh.write("iter,loss\n")
        for k, item in enumerate(trace):
            it, val = item if isinstance(item, tuple) else (k, item)
            fh.write(f"{it},{val:.17g}\n")
