"""Barycentric projections of a coupling onto the target cloud."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gyrovector import (
    BallParams,
    GammaConvention,
    PointCloud,
    gamma_factor,
    mobius_scalar_mul,
)
from .ot_solvers import Coupling

__all__ = [
    "BarycenterResult",
    "DegenerateCouplingError",
    "euclid_barycenter_map",
    "gyrobarycenter_map",
    "gyrobarycenter_parts",
    "gyromidpoint",
]

MIN_ROW_MASS = 1e-15


class DegenerateCouplingError(ValueError):
    """A coupling row carries no mass, so its barycenter is undefined."""


@dataclass
class BarycenterResult:
    projected: np.ndarray
    convention: GammaConvention | None = None


def _plan(M):
    return np.asarray(M.plan if isinstance(M, Coupling) else M, dtype=float)


def _check_rows(denom):
    bad = np.flatnonzero(~(np.abs(denom) > MIN_ROW_MASS))
    if bad.size:
        raise DegenerateCouplingError(
            f"coupling row {int(bad[0])} has (weighted) mass {denom[bad[0]]:.3g}"
        )


def euclid_barycenter_map(M, X_t) -> BarycenterResult:
    """Weighted average of the targets, ``diag(M 1)^-1 M X_t``."""
    P = _plan(M)
    X = np.asarray(X_t.points if isinstance(X_t, PointCloud) else X_t, dtype=float)
    if P.shape[1] != X.shape[0]:
        raise ValueError(f"coupling has {P.shape[1]} columns but there are {X.shape[0]} targets")
    mass = P.sum(axis=1)
    _check_rows(mass)
    return BarycenterResult((P @ X) / mass[:, None])


def gyrobarycenter_parts(P, X, ball: BallParams):
    """Intermediate quantities of the gyrobarycenter mapping.

    Returns ``(z, denom, gamma_sq)`` where ``z = diag(P g)^-1 P G X`` is the
    point that the final ``(1/2) (x)`` halves and ``denom = P g``.
    """
    gamma_sq = gamma_factor(X, ball) ** 2
    g = gamma_sq - 0.5
    denom = P @ g
    _check_rows(denom)
    z = (P @ (gamma_sq[:, None] * X)) / denom[:, None]
    return z, denom, gamma_sq


def gyrobarycenter_map(M, X_t, ball: BallParams | None = None) -> BarycenterResult:
    """Row-wise gyrobarycenter of the targets weighted by the coupling.

    Computes ``(1/2) (x) [diag(M g)^-1 M G X_t]`` with ``G = diag(gamma^2)``
    and ``g = gamma^2 - 1/2``, where ``gamma`` follows
    ``ball.gamma_convention``.
    """
    if isinstance(X_t, PointCloud):
        ball = ball or X_t.ball
        X = X_t.points
    else:
        ball = ball or BallParams()
        X = np.asarray(X_t, dtype=float)
    P = _plan(M)
    if P.shape[1] != X.shape[0]:
        raise ValueError(f"coupling has {P.shape[1]} columns but there are {X.shape[0]} targets")
    z, _, _ = gyrobarycenter_parts(P, X, ball)
    return BarycenterResult(mobius_scalar_mul(0.5, z, ball), ball.gamma_convention)


def gyromidpoint(points, ball: BallParams | None = None, weights=None) -> np.ndarray:
    """Gyrobarycenter of a cloud with uniform (or given) weights."""
    if isinstance(points, PointCloud):
        ball = ball or points.ball
        if weights is None:
            weights = points.weights
        points = points.points
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("gyromidpoint of an empty cloud")
    w = np.full(X.shape[0], 1.0 / X.shape[0]) if weights is None else np.asarray(weights, float)
    return gyrobarycenter_map(w[None, :], X, ball or BallParams()).projected[0]
