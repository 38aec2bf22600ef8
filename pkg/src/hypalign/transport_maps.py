"""Closed-form and memorised transport maps between point clouds on a ball.

* wrapped Gaussians and their estimation from samples,
* the Gaussian (Bures) transport matrix and the W-linear map built from it,
* barycentric domain adaptation with nearest-neighbour interpolation.

Euclidean counterparts of the last two are kept next to them so baselines share
the exact same code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .barycenter import euclid_barycenter_map, gyrobarycenter_map, gyromidpoint
from .gyrovector import (
    BallParams,
    PointCloud,
    exp0,
    exp_map,
    log0,
    mobius_add,
    mobius_matrix_mul,
    pairwise_distance,
    parallel_transport0,
)

__all__ = [
    "WrappedGaussian",
    "WLinearMap",
    "OtdaMap",
    "EuclidLinearMap",
    "sample_wrapped_gaussian",
    "estimate_wrapped_gaussian",
    "bures_transport_matrix",
    "fit_w_linear",
    "w_linear_apply",
    "fit_euclid_linear",
    "euclid_linear_apply",
    "otda_fit",
    "otda_transform",
    "write_wrapped_gaussian",
    "read_wrapped_gaussian",
]

EIG_FLOOR = 1e-12
SYM_TOL = 1e-12


def _check_spd(sigma, name="sigma"):
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise ValueError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(sigma))))
    if np.max(np.abs(sigma - sigma.T)) > SYM_TOL * scale:
        raise ValueError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(sigma).min() <= 0:
        raise ValueError(f"{name} is not positive definite")
    return 0.5 * (sigma + sigma.T)


def _sym_sqrt(A, inverse=False):
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    if inverse:
        root = 1.0 / np.sqrt(np.maximum(w, EIG_FLOOR))
    else:
        root = np.sqrt(np.maximum(w, 0.0))
    return (V * root) @ V.T


@dataclass
class WrappedGaussian:
    """Gaussian in the tangent space at 0 pushed onto the ball and translated by ``mu``."""

    mu: np.ndarray
    sigma: np.ndarray
    ball: BallParams = field(default_factory=BallParams)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        self.sigma = _check_spd(self.sigma)
        if self.sigma.shape[0] != self.mu.shape[0]:
            raise ValueError("mu and sigma dimensions differ")
        if not self.ball.contains(self.mu):
            raise ValueError("mu must lie strictly inside the ball")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def _tangent_draws(g: WrappedGaussian, n: int, seed):
    if n < 1:
        raise ValueError(f"sample count must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, g.dim)) @ _sym_sqrt(g.sigma)


def sample_wrapped_gaussian(g: WrappedGaussian, n: int, seed=None, direct: bool = False) -> PointCloud:
    """Draw ``n`` points ``mu (+) Exp_0(z)`` with ``z ~ N(0, sigma)``.

    With ``direct=True`` the same points are produced as ``Exp_mu`` of ``z``
    transported from the origin to ``mu``.
    """
    z = _tangent_draws(g, n, seed)
    if direct:
        pts = exp_map(g.mu, parallel_transport0(g.mu, z, g.ball), g.ball)
    else:
        pts = mobius_add(g.mu, exp0(z, g.ball), g.ball)
    return PointCloud(pts, ball=g.ball)


def _cloud(X, ball=None):
    if isinstance(X, PointCloud):
        return X
    return PointCloud(np.asarray(X, dtype=float), ball=ball or BallParams())


def _tangent_covariance(V):
    n, d = V.shape
    cov = np.atleast_2d(np.cov(V, rowvar=False))
    w = np.linalg.eigvalsh(cov)
    if w.max() <= 0 or w.min() <= EIG_FLOOR * w.max():
        raise np.linalg.LinAlgError(
            f"sample covariance is singular (eigenvalues {w.min():.3g}..{w.max():.3g})"
        )
    return cov


def estimate_wrapped_gaussian(X, ball: BallParams | None = None) -> WrappedGaussian:
    """Gyromidpoint and tangent covariance of the cloud recentred at it."""
    X = _cloud(X, ball)
    n, d = X.points.shape
    if n < d + 1:
        raise ValueError(f"need at least d + 1 = {d + 1} points, got {n}")
    mu = gyromidpoint(X)
    V = log0(mobius_add(-mu, X.points, X.ball), X.ball)
    return WrappedGaussian(mu, _tangent_covariance(V), X.ball)


def bures_transport_matrix(sigma1, sigma2) -> np.ndarray:
    """SPD ``T`` with ``T sigma1 T = sigma2``.

    ``T = S1^{-1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2}``.
    """
    s1 = _check_spd(sigma1, "sigma1")
    s2 = _check_spd(sigma2, "sigma2")
    if s1.shape != s2.shape:
        raise ValueError("covariances have different sizes")
    r = _sym_sqrt(s1)
    ri = _sym_sqrt(s1, inverse=True)
    T = ri @ _sym_sqrt(r @ s2 @ r) @ ri
    return 0.5 * (T + T.T)


@dataclass
class WLinearMap:
    """``x -> mu_tgt (+) T (x) ((-mu_src) (+) x)``."""

    mu_src: np.ndarray
    mu_tgt: np.ndarray
    T: np.ndarray
    ball: BallParams = field(default_factory=BallParams)


def fit_w_linear(src, tgt, ball: BallParams | None = None) -> WLinearMap:
    """Transport between the wrapped Gaussians fitted to ``src`` and ``tgt``."""
    g1 = estimate_wrapped_gaussian(src, ball)
    g2 = estimate_wrapped_gaussian(tgt, ball)
    if g1.ball.s != g2.ball.s:
        raise ValueError(f"ball mismatch: s={g1.ball.s} vs s={g2.ball.s}")
    return WLinearMap(g1.mu, g2.mu, bures_transport_matrix(g1.sigma, g2.sigma), g1.ball)


def w_linear_apply(m: WLinearMap, x) -> np.ndarray:
    ball = m.ball
    inner = mobius_add(-m.mu_src, x, ball)
    return mobius_add(m.mu_tgt, mobius_matrix_mul(m.T, inner, ball), ball)


@dataclass
class EuclidLinearMap:
    """Affine Gaussian transport ``x -> mu_tgt + T (x - mu_src)``."""

    mu_src: np.ndarray
    mu_tgt: np.ndarray
    T: np.ndarray


def fit_euclid_linear(src, tgt) -> EuclidLinearMap:
    X = np.asarray(src.points if isinstance(src, PointCloud) else src, dtype=float)
    Y = np.asarray(tgt.points if isinstance(tgt, PointCloud) else tgt, dtype=float)
    s1 = _tangent_covariance(X - X.mean(0))
    s2 = _tangent_covariance(Y - Y.mean(0))
    return EuclidLinearMap(X.mean(0), Y.mean(0), bures_transport_matrix(s1, s2))


def euclid_linear_apply(m: EuclidLinearMap, x) -> np.ndarray:
    return m.mu_tgt + (np.asarray(x, dtype=float) - m.mu_src) @ m.T.T


@dataclass
class OtdaMap:
    """Training points with their barycentric images.

    ``euclidean=True`` swaps gyro-operations for vector ones (the Euclidean
    baseline).
    """

    train_src: PointCloud
    images: np.ndarray
    euclidean: bool = False


def otda_fit(M, src, tgt, euclidean: bool = False) -> OtdaMap:
    src = _cloud(src)
    tgt = _cloud(tgt, src.ball)
    if len(src) == 0:
        raise ValueError("OT-DA needs at least one training point")
    plan = np.asarray(getattr(M, "plan", M), dtype=float)
    if plan.shape != (len(src), len(tgt)):
        raise ValueError(f"coupling shape {plan.shape} does not match clouds ({len(src)}, {len(tgt)})")
    if euclidean:
        images = euclid_barycenter_map(plan, tgt.points).projected
    else:
        images = gyrobarycenter_map(plan, tgt).projected
    return OtdaMap(src, images, euclidean)


def otda_transform(m: OtdaMap, x) -> np.ndarray:
    """Translate each query by the displacement of its nearest training point.

    Ties go to the lowest training index.
    """
    X = m.train_src.points
    ball = m.train_src.ball
    q = np.asarray(x, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if m.euclidean:
        d2 = np.sum((q[:, None, :] - X[None, :, :]) ** 2, axis=-1)
        nn = np.argmin(d2, axis=1)
        out = m.images[nn] + (q - X[nn])
    else:
        nn = np.argmin(pairwise_distance(q, X, ball), axis=1)
        out = mobius_add(m.images[nn], mobius_add(-X[nn], q, ball), ball)
        # (-X) (+) X vanishes only up to rounding; pin training points to their image
        hit = np.all(q == X[nn], axis=1)
        out[hit] = m.images[nn[hit]]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# text serialisation
# ---------------------------------------------------------------------------


def write_wrapped_gaussian(path, g: WrappedGaussian):
    """``mu`` line followed by one ``sigma`` line per covariance row."""
    with open(path, "w", newline="\n") as fh:
        fh.write("mu " + " ".join(f"{v:.17g}" for v in g.mu) + "\n")
        for row in g.sigma:
            fh.write("sigma " + " ".join(f"{v:.17g}" for v in row) + "\n")


def read_wrapped_gaussian(path, ball: BallParams | None = None) -> WrappedGaussian:
    mu, rows = None, []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "mu":
                mu = [float(t) for t in parts[1:]]
            elif parts[0] == "sigma":
                rows.append([float(t) for t in parts[1:]])
            else:
                raise ValueError(f"unexpected line tag {parts[0]!r}")
    if mu is None or not rows:
        raise ValueError("file lacks a mu line or sigma rows")
    return WrappedGaussian(np.array(mu), np.array(rows), ball or BallParams())
