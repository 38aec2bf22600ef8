"""Möbius gyrovector operations on the Poincaré ball of radius ``s``.

All functions are vectorised over leading axes: a point is the last axis of an
array, so ``x`` of shape ``(n, d)`` is a batch of ``n`` points.  Results are
clamped back inside the ball after every operation.

The ball is ``{x : ||x|| < s}`` with conformal factor
``lambda_x = 2 / (1 - ||x||^2 / s^2)``, i.e. curvature ``-1/s^2``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GammaConvention",
    "BallParams",
    "PointCloud",
    "project",
    "mobius_neg",
    "mobius_add",
    "mobius_scalar_mul",
    "mobius_matrix_mul",
    "distance",
    "distance_sinh",
    "pairwise_distance",
    "exp_map",
    "log_map",
    "exp0",
    "log0",
    "parallel_transport0",
    "gyroline",
    "conformal_factor",
    "lorentz_gamma",
    "paper_gamma",
    "gamma_factor",
]

# atanh argument ceiling; atanh(1 - 1e-15) ~ 17.6
ATANH_CEIL = 1.0 - 1e-15
MIN_NORM = 1e-15


class GammaConvention(str, enum.Enum):
    """Which gamma factor weights the gyrobarycentric coordinates."""

    LORENTZ = "lorentz"
    PAPER = "paper"


@dataclass(frozen=True)
class BallParams:
    """Radius and numerical guard of one Poincaré ball."""

    s: float = 1.0
    boundary_margin: float = 1e-9
    gamma_convention: GammaConvention = GammaConvention.LORENTZ

    def __post_init__(self):
        if not (np.isfinite(self.s) and self.s > 0):
            raise ValueError(f"ball radius must be positive, got {self.s}")
        if not (0 < self.boundary_margin < 1e-3):
            raise ValueError(
                f"boundary_margin must lie in (0, 1e-3), got {self.boundary_margin}"
            )
        object.__setattr__(self, "gamma_convention", GammaConvention(self.gamma_convention))

    @property
    def max_norm(self) -> float:
        return self.s * (1.0 - self.boundary_margin)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(np.linalg.norm(x, axis=-1) < self.s))


DEFAULT_BALL = BallParams()


def _ball(ball):
    return DEFAULT_BALL if ball is None else ball


def _norm(x, keepdims=True):
    return np.linalg.norm(x, axis=-1, keepdims=keepdims)


def _atanh(z):
    return np.arctanh(np.clip(z, -ATANH_CEIL, ATANH_CEIL))


def project(x, ball: BallParams | None = None):
    """Clamp norms to ``s * (1 - boundary_margin)``."""
    ball = _ball(ball)
    x = np.asarray(x, dtype=float)
    n = _norm(x)
    maxn = ball.max_norm
    scale = np.where(n > maxn, maxn / np.maximum(n, MIN_NORM), 1.0)
    return x * scale


@dataclass
class PointCloud:
    """``n`` points on a ball with simplex weights (uniform by default)."""

    points: np.ndarray
    weights: np.ndarray | None = None
    ball: BallParams = field(default_factory=BallParams)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise ValueError(f"points must be an (n, d) matrix, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite entries")
        if np.any(_norm(pts, keepdims=False) >= self.ball.s):
            raise ValueError("every point must lie strictly inside the ball")
        n = pts.shape[0]
        if self.weights is None:
            w = np.full(n, 1.0 / n) if n else np.zeros(0)
        else:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            if w.shape[0] != n:
                raise ValueError("weights length must match the number of points")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be nonnegative and sum to 1")
        self.points = pts
        self.weights = w

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_points(cls, points, ball: BallParams | None = None, weights=None):
        """Build a cloud after clamping ``points`` inside ``ball``."""
        ball = _ball(ball)
        return cls(project(points, ball), weights, ball)


def mobius_neg(x):
    return -np.asarray(x, dtype=float)


def mobius_add(x, y, ball: BallParams | None = None, clamp: bool = True):
    """Möbius addition ``x (+) y`` (left gyrotranslation of ``y`` by ``x``)."""
    ball = _ball(ball)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    c = 1.0 / ball.s**2
    x2 = np.sum(x * x, axis=-1, keepdims=True)
    y2 = np.sum(y * y, axis=-1, keepdims=True)
    xy = np.sum(x * y, axis=-1, keepdims=True)
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    out = num / np.maximum(den, MIN_NORM)
    return project(out, ball) if clamp else out


def mobius_scalar_mul(r, x, ball: BallParams | None = None):
    """Möbius scalar product ``r (x) x``; ``r (x) 0 = 0``."""
    ball = _ball(ball)
    s = ball.s
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    if r.ndim and r.shape[-1:] != (1,):
        r = r[..., None]
    n = _norm(x)
    safe = np.maximum(n, MIN_NORM)
    out = s * np.tanh(r * _atanh(safe / s)) * x / safe
    out = np.where(n > 0, out, 0.0)
    return project(out, ball)


def mobius_matrix_mul(Q, x, ball: BallParams | None = None):
    """Möbius matrix-vector product ``Q (x) x`` for ``Q`` of shape ``(p, d)``.

    Returns ``0`` whenever ``Q x = 0`` (and for ``x = 0``).
    """
    ball = _ball(ball)
    s = ball.s
    Q = np.asarray(Q, dtype=float)
    x = np.asarray(x, dtype=float)
    if Q.ndim != 2 or Q.shape[1] != x.shape[-1]:
        raise ValueError(f"cannot apply matrix of shape {Q.shape} to points of dim {x.shape[-1]}")
    qx = x @ Q.T
    nx = _norm(x)
    nqx = _norm(qx)
    nx_safe = np.maximum(nx, MIN_NORM)
    nqx_safe = np.maximum(nqx, MIN_NORM)
    out = s * np.tanh(nqx_safe / nx_safe * _atanh(nx_safe / s)) * qx / nqx_safe
    out = np.where((nx > 0) & (nqx > 0), out, 0.0)
    return project(out, ball)


def distance(x, y, ball: BallParams | None = None):
    """Poincaré distance ``2 s atanh(||(-x) (+) y|| / s)``."""
    ball = _ball(ball)
    w = mobius_add(-np.asarray(x, dtype=float), y, ball, clamp=False)
    return 2.0 * ball.s * _atanh(_norm(w, keepdims=False) / ball.s)


def distance_sinh(x, y, ball: BallParams | None = None):
    """Same distance through ``2 s asinh(gamma_x gamma_y ||x - y|| / s)``."""
    ball = _ball(ball)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    gx = lorentz_gamma(x, ball)
    gy = lorentz_gamma(y, ball)
    return 2.0 * ball.s * np.arcsinh(gx * gy * _norm(x - y, keepdims=False) / ball.s)


def pairwise_distance(X, Y, ball: BallParams | None = None):
    """Distance matrix between the rows of ``X`` and the rows of ``Y``."""
    ball = _ball(ball)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[-1] != Y.shape[-1]:
        raise ValueError(f"dimension mismatch: {X.shape[-1]} vs {Y.shape[-1]}")
    gx = lorentz_gamma(X, ball)
    gy = lorentz_gamma(Y, ball)
    diff = np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1)
    return 2.0 * ball.s * np.arcsinh(gx[:, None] * gy[None, :] * diff / ball.s)


def conformal_factor(x, ball: BallParams | None = None):
    """``lambda_x = 2 / (1 - ||x||^2 / s^2)``."""
    ball = _ball(ball)
    x2 = np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)
    return 2.0 / np.maximum(1.0 - x2 / ball.s**2, MIN_NORM)


def lorentz_gamma(x, ball: BallParams | None = None):
    """``gamma_x = 1 / sqrt(1 - ||x||^2 / s^2)``; tends to 1 as ``s`` grows."""
    ball = _ball(ball)
    x2 = np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)
    return 1.0 / np.sqrt(np.maximum(1.0 - x2 / ball.s**2, MIN_NORM))


def paper_gamma(x, ball: BallParams | None = None):
    """Gamma factor whose large-radius limit is 2 (the conformal factor)."""
    return conformal_factor(x, ball)


def gamma_factor(x, ball: BallParams | None = None):
    """Gamma factor selected by ``ball.gamma_convention``."""
    ball = _ball(ball)
    if ball.gamma_convention is GammaConvention.PAPER:
        return paper_gamma(x, ball)
    return lorentz_gamma(x, ball)


def exp_map(x, v, ball: BallParams | None = None):
    """Exponential map at ``x``; ``Exp_x(0) = x``."""
    ball = _ball(ball)
    s = ball.s
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = _norm(v)
    safe = np.maximum(nv, MIN_NORM)
    lam = conformal_factor(x, ball)[..., None]
    step = s * np.tanh(lam * safe / (2.0 * s)) * v / safe
    step = np.where(nv > 0, step, 0.0)
    return mobius_add(x, step, ball)


def log_map(x, y, ball: BallParams | None = None):
    """Logarithmic map at ``x``; ``Log_x(x) = 0``."""
    ball = _ball(ball)
    s = ball.s
    x = np.asarray(x, dtype=float)
    w = mobius_add(-x, y, ball, clamp=False)
    nw = _norm(w)
    safe = np.maximum(nw, MIN_NORM)
    lam = conformal_factor(x, ball)[..., None]
    out = (2.0 * s / lam) * _atanh(safe / s) * w / safe
    same = np.all(x == np.asarray(y, dtype=float), axis=-1, keepdims=True)
    return np.where((nw > 0) & ~same, out, 0.0)


def exp0(v, ball: BallParams | None = None):
    """Exponential map at the origin, ``s tanh(||v|| / s) v / ||v||``."""
    ball = _ball(ball)
    v = np.asarray(v, dtype=float)
    nv = _norm(v)
    safe = np.maximum(nv, MIN_NORM)
    out = ball.s * np.tanh(safe / ball.s) * v / safe
    return project(np.where(nv > 0, out, 0.0), ball)


def log0(y, ball: BallParams | None = None):
    """Logarithmic map at the origin, ``s atanh(||y|| / s) y / ||y||``."""
    ball = _ball(ball)
    y = np.asarray(y, dtype=float)
    ny = _norm(y)
    safe = np.maximum(ny, MIN_NORM)
    out = ball.s * _atanh(safe / ball.s) * y / safe
    return np.where(ny > 0, out, 0.0)


def parallel_transport0(x, v, ball: BallParams | None = None):
    """Transport ``v`` from the tangent space at 0 to the one at ``x``.

    Along the geodesic from the origin the gyration is trivial, so transport is
    the conformal rescaling ``(lambda_0 / lambda_x) v``.
    """
    lam = conformal_factor(x, ball)[..., None]
    return (2.0 / lam) * np.asarray(v, dtype=float)


def gyroline(x, y, t, ball: BallParams | None = None):
    """Point at parameter ``t`` on the gyroline through ``x`` (t=0) and ``y`` (t=1)."""
    ball = _ball(ball)
    direction = mobius_add(-np.asarray(x, dtype=float), y, ball)
    return mobius_add(x, mobius_scalar_mul(t, direction, ball), ball)
