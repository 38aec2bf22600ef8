"""Synthetic alignment tasks, Hits@k, and the supervised cross-validation loop."""

from __future__ import annotations

import enum
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .gyrovector import (
    BallParams,
    PointCloud,
    exp0,
    exp_map,
    pairwise_distance,
    parallel_transport0,
    project,
)
from .barycenter import gyromidpoint
from .mapping_estimation import (
    MeConfig,
    OptimConfig,
    hnn_forward,
    hyp_me_fit,
    init_map,
    ot_direct_fit,
)
from .ot_solvers import CostKind, SinkhornConfig, apply_supervision, build_cost_matrix, sinkhorn
from .transport_maps import (
    WLinearMap,
    WrappedGaussian,
    euclid_linear_apply,
    fit_euclid_linear,
    fit_w_linear,
    otda_fit,
    otda_transform,
    sample_wrapped_gaussian,
    w_linear_apply,
)

__all__ = [
    "Method",
    "AlignmentTask",
    "AlignmentReport",
    "EvalConfig",
    "hits_at_k",
    "make_synthetic_task",
    "fold_split",
    "transport_with",
    "run_protocol",
]


class Method(str, enum.Enum):
    IDENTITY = "identity"
    WLINEAR = "wlinear"
    OTDA = "otda"
    ME = "me"
    OT_DIRECT_W = "ot_direct_w"
    OT_DIRECT_SD = "ot_direct_sd"
    EUCLID_LINEAR = "euclid_linear"
    EUCLID_OTDA = "euclid_otda"
    EUCLID_ME = "euclid_me"


@dataclass
class AlignmentTask:
    src: PointCloud
    tgt: PointCloud
    matches: np.ndarray
    train_fraction: float = 0.10
    planted: WLinearMap | None = None

    def __post_init__(self):
        self.matches = np.asarray(self.matches, dtype=int).reshape(-1, 2)
        if len(self.matches) == 0:
            raise ValueError("a task needs at least one match")
        if np.any(self.matches < 0) or np.any(self.matches[:, 0] >= len(self.src)) or np.any(
            self.matches[:, 1] >= len(self.tgt)
        ):
            raise ValueError("match index out of range")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")

    def swapped(self) -> "AlignmentTask":
        """The same task read from target to source."""
        return AlignmentTask(self.tgt, self.src, self.matches[:, ::-1].copy(), self.train_fraction)


@dataclass
class AlignmentReport:
    method: str
    hits_src_tgt: float
    hits_tgt_src: float
    seconds: float
    k: int = 10
    folds: int = 1
    config: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"method={self.method}",
            f"k={self.k}",
            f"folds={self.folds}",
            f"hits_src_tgt={self.hits_src_tgt:.6f}",
            f"hits_tgt_src={self.hits_tgt_src:.6f}",
            f"seconds={self.seconds:.3f}",
        ]
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    def csv_rows(self) -> list[str]:
        """``method,direction,k,hits,seconds`` rows, one per direction."""
        return [
            f"{self.method},src_tgt,{self.k},{self.hits_src_tgt:.6f},{self.seconds:.3f}",
            f"{self.method},tgt_src,{self.k},{self.hits_tgt_src:.6f},{self.seconds:.3f}",
        ]


CSV_HEADER = "method,direction,k,hits,seconds"


def hits_at_k(transported, targets, matches, k: int = 10, ball: BallParams | None = None) -> float:
    """Percentage of matches ``(i, j)`` whose target ``j`` ranks in the top ``k``
    of all targets by distance from ``transported[i]``.

    Equal distances are ranked by target index; ``k`` is clamped to the number
    of targets.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if isinstance(targets, PointCloud):
        ball = ball or targets.ball
        targets = targets.points
    ball = ball or BallParams()
    matches = np.asarray(matches, dtype=int).reshape(-1, 2)
    if len(matches) == 0:
        raise ValueError("no matches to evaluate")
    T = np.asarray(targets, dtype=float)
    U = project(np.asarray(transported, dtype=float)[matches[:, 0]], ball)
    D = pairwise_distance(U, T, ball)
    j = matches[:, 1]
    dj = D[np.arange(len(j)), j][:, None]
    idx = np.arange(T.shape[0])[None, :]
    rank = np.sum((D < dj) | ((D == dj) & (idx < j[:, None])), axis=1)
    return float(100.0 * np.mean(rank < min(k, T.shape[0])))


def _random_spd(rng, d, lo, hi):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (Q * rng.uniform(lo, hi, d)) @ Q.T


def make_synthetic_task(
    d: int = 5,
    n: int = 200,
    noise_scale: float = 0.05,
    seed: int = 0,
    ball: BallParams | None = None,
    train_fraction: float = 0.10,
) -> AlignmentTask:
    """Source from a wrapped Gaussian mixture, target from a planted W-linear map.

    Each target is the image of its source under the planted map, moved by a
    wrapped-Gaussian perturbation of tangent scale ``noise_scale`` at that
    image.  Matches pair point ``i`` with point ``i``.
    """
    ball = ball or BallParams()
    if d < 1 or n < 2 * (d + 1):
        raise ValueError(f"need d >= 1 and n >= 2(d+1), got d={d}, n={n}")
    if noise_scale < 0:
        raise ValueError("noise_scale must be nonnegative")
    rng = np.random.default_rng(seed)
    n_comp = int(rng.integers(2, 5))
    sizes = np.full(n_comp, n // n_comp)
    sizes[: n % n_comp] += 1
    parts = []
    for c, size in enumerate(sizes):
        mu = exp0(rng.normal(scale=0.5 * ball.s / np.sqrt(d), size=d), ball)
        sigma = _random_spd(rng, d, 0.02, 0.08) * ball.s**2
        comp = WrappedGaussian(mu, sigma, ball)
        parts.append(sample_wrapped_gaussian(comp, int(size), int(rng.integers(2**31))).points)
    X = np.concatenate(parts)
    X = X[rng.permutation(n)]
    src = PointCloud(X, ball=ball)
    planted = WLinearMap(
        gyromidpoint(X, ball),
        exp0(rng.normal(scale=0.6 * ball.s / np.sqrt(d), size=d), ball),
        _random_spd(rng, d, 0.6, 1.5),
        ball,
    )
    Y = w_linear_apply(planted, X)
    if noise_scale > 0:
        z = rng.normal(scale=noise_scale * ball.s, size=Y.shape)
        Y = exp_map(Y, parallel_transport0(Y, z, ball), ball)
    tgt = PointCloud(project(Y, ball), ball=ball)
    matches = np.stack([np.arange(n), np.arange(n)], axis=1)
    return AlignmentTask(src, tgt, matches, train_fraction, planted)


def fold_split(n_matches: int, train_fraction: float, fold: int, seed: int):
    """Indices of the training and test matches of one fold.

    Matches are shuffled once per seed; fold ``f`` trains on the ``f``-th
    contiguous slice of size ``round(train_fraction * n)`` (wrapping around).
    """
    order = np.random.default_rng(seed).permutation(n_matches)
    size = max(1, int(round(train_fraction * n_matches)))
    pos = (fold * size + np.arange(size)) % n_matches
    mask = np.zeros(n_matches, dtype=bool)
    mask[order[pos]] = True
    return np.flatnonzero(mask), np.flatnonzero(~mask)


@dataclass(frozen=True)
class EvalConfig:
    """Settings shared by every method in the protocol."""

    k: int = 10
    epsilon: float = 0.01
    eta: float = 1.0
    omega: float = 0.0
    cost: CostKind = CostKind.SQ_HYPERBOLIC
    init: str = "gyrobarycenter"
    seed: int = 0
    sinkhorn_iters: int = 300
    me_outer: int = 5
    me_inner_steps: int = 30
    ot_direct_steps: int = 30
    fit_steps: int = 100

    def as_dict(self) -> dict:
        out = asdict(self)
        out["cost"] = CostKind(self.cost).value
        return out


def transport_with(method, task: AlignmentTask, train_pairs, cfg: EvalConfig, seed: int):
    """Map every source point with ``method`` trained on ``train_pairs``.

    Returns ``(transported, coupling_or_None)``.
    """
    method = Method(method)
    src, tgt = task.src, task.tgt
    ball = src.ball
    sk = SinkhornConfig(cfg.epsilon, cfg.sinkhorn_iters, 1e-7)
    euclid = method.value.startswith("euclid")
    if method is Method.IDENTITY:
        return src.points.copy(), None
    if method is Method.WLINEAR:
        return w_linear_apply(fit_w_linear(src, tgt), src.points), None
    if method is Method.EUCLID_LINEAR:
        return project(euclid_linear_apply(fit_euclid_linear(src, tgt), src.points), ball), None
    if method in (Method.OTDA, Method.EUCLID_OTDA):
        kind = CostKind.SQ_EUCLIDEAN if euclid else cfg.cost
        C = apply_supervision(build_cost_matrix(src, tgt, kind), train_pairs)
        M = sinkhorn(src.weights, tgt.weights, C, sk)
        m = otda_fit(M, src, tgt, euclidean=euclid)
        return project(otda_transform(m, src.points), ball), M
    fit_cfg = OptimConfig(max_steps=cfg.fit_steps)
    if method in (Method.ME, Method.EUCLID_ME):
        model = init_map(cfg.init, src, tgt, seed, cost=cfg.cost, sinkhorn_cfg=sk, optim=fit_cfg,
                         pairs=train_pairs, euclidean=euclid)
        me = MeConfig(
            eta=cfg.eta,
            omega=cfg.omega,
            epsilon=cfg.epsilon,
            max_outer=cfg.me_outer,
            cost=cfg.cost,
            sinkhorn_iters=cfg.sinkhorn_iters,
            sinkhorn_tol=1e-7,
            inner=OptimConfig(max_steps=cfg.me_inner_steps),
        )
        M, model, _ = hyp_me_fit(src, tgt, model, me, pairs=train_pairs)
        return project(hnn_forward(model, src.points), ball), M
    loss = "w_eps" if method is Method.OT_DIRECT_W else "sinkhorn_div"
    model = ot_direct_fit(
        None, src, tgt, loss=loss, init=cfg.init, kind=cfg.cost, sinkhorn_cfg=sk,
        optim=OptimConfig(max_steps=cfg.ot_direct_steps), seed=seed, pairs=train_pairs,
    )
    return hnn_forward(model, src.points), None


def run_protocol(task: AlignmentTask, method, folds: int = 10, cfg: EvalConfig | None = None) -> AlignmentReport:
    """Cross-validated Hits@k in both directions.

    Fold ``f`` (seeded ``cfg.seed + f``) trains on its slice of the matches and
    scores the remaining ones; scores are averaged over folds.
    """
    cfg = cfg or EvalConfig()
    method = Method(method)
    if folds < 1:
        raise ValueError("folds must be at least 1")
    start = time.perf_counter()
    scores = {"src_tgt": [], "tgt_src": []}
    for direction, t in (("src_tgt", task), ("tgt_src", task.swapped())):
        for f in range(folds):
            train, test = fold_split(len(t.matches), t.train_fraction, f, cfg.seed)
            out, _ = transport_with(method, t, t.matches[train], cfg, cfg.seed + f)
            scores[direction].append(hits_at_k(out, t.tgt, t.matches[test], cfg.k))
    return AlignmentReport(
        method.value,
        float(np.mean(scores["src_tgt"])),
        float(np.mean(scores["tgt_src"])),
        time.perf_counter() - start,
        cfg.k,
        folds,
        cfg.as_dict(),
    )
