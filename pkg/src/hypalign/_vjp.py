"""Reverse-mode derivatives (vector-Jacobian products) of the gyro-operations.

Each ``*_vjp`` takes the forward inputs and an upstream gradient ``g`` with the
shape of the forward output and returns gradients for the inputs.  Batched
inputs are rows; parameters shared across rows (matrices) get summed
gradients.  Clamping to the ball is treated as the identity.
"""

from __future__ import annotations

import numpy as np

from .gyrovector import MIN_NORM, BallParams, _atanh, lorentz_gamma


def _dot(a, b):
    return np.sum(a * b, axis=-1, keepdims=True)


def mobius_add_vjp(x, y, g, ball: BallParams):
    """Gradients of ``<g, x (+) y>`` with respect to ``x`` and ``y``."""
    c = 1.0 / ball.s**2
    x2, y2, xy = _dot(x, x), _dot(y, y), _dot(x, y)
    A = 1.0 + 2.0 * c * xy + c * y2
    B = 1.0 - c * x2
    D = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    out = (A * x + B * y) / D
    gx_, gy_, go = _dot(g, x), _dot(g, y), _dot(g, out)
    gx = (A * g + 2 * c * gx_ * y - 2 * c * gy_ * x - go * (2 * c * y + 2 * c * c * y2 * x)) / D
    gy = (B * g + gx_ * (2 * c * x + 2 * c * y) - go * (2 * c * x + 2 * c * c * x2 * y)) / D
    return gx, gy


def matrix_mul_vjp(W, x, g, ball: BallParams):
    """Gradients of ``<g, W (x) x>`` with respect to ``W`` (summed) and ``x``."""
    s = ball.s
    u = x @ W.T
    nx = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), MIN_NORM)
    nu = np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), MIN_NORM)
    a = _atanh(nx / s)
    t = nu / nx * a
    th = np.tanh(t)
    sech2 = 1.0 - th**2
    phi = s * th / nu
    alpha_nu = s * sech2 / nu * a / nx - s * th / nu**2
    alpha_nx = s * sech2 * (1.0 / (nx * s * (1.0 - (nx / s) ** 2)) - a / nx**2)
    gu_ = _dot(g, u)
    gu = phi * g + gu_ * alpha_nu * u / nu
    gx = gu @ W + gu_ * alpha_nx * x / nx
    # the map is linear to first order at x = 0
    tiny = nx <= MIN_NORM
    gu = np.where(tiny, g, gu)
    gx = np.where(tiny, g @ W, gx)
    return gu.T @ x, gx


def _radial_vjp(v, g, psi, dpsi, rho0):
    """VJP of ``v -> psi(||v||) v / ||v||``; ``rho0`` is the limit of psi(n)/n at 0."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.maximum(n, MIN_NORM)
    rho = psi(safe) / safe
    drho = (dpsi(safe) * safe - psi(safe)) / safe**2
    out = rho * g + _dot(g, v) * drho * v / safe
    return np.where(n > 0, out, rho0 * g)


def exp0_vjp(v, g, ball: BallParams):
    s = ball.s
    return _radial_vjp(
        v, g, lambda n: s * np.tanh(n / s), lambda n: 1.0 - np.tanh(n / s) ** 2, 1.0
    )


def log0_vjp(y, g, ball: BallParams):
    s = ball.s
    return _radial_vjp(
        y, g, lambda n: s * _atanh(n / s), lambda n: 1.0 / (1.0 - (n / s) ** 2), 1.0
    )


def scalar_mul_vjp(r, x, g, ball: BallParams):
    s = ball.s

    def psi(n):
        return s * np.tanh(r * _atanh(n / s))

    def dpsi(n):
        return r * (1.0 - np.tanh(r * _atanh(n / s)) ** 2) / (1.0 - (n / s) ** 2)

    return _radial_vjp(x, g, psi, dpsi, r)


def distance_grads(u, y, ball: BallParams):
    """Gradients of ``d(u_i, y_i)`` with respect to each argument, row-wise.

    Uses ``d = 2 s asinh(gamma_u gamma_y ||u - y|| / s)``; coincident points
    get a zero (sub)gradient.
    """
    s = ball.s
    diff = u - y
    r = np.linalg.norm(diff, axis=-1, keepdims=True)
    safe = np.maximum(r, MIN_NORM)
    gu = lorentz_gamma(u, ball)[..., None]
    gy = lorentz_gamma(y, ball)[..., None]
    A = gu * gy * r / s
    pre = 2.0 * gu * gy / np.sqrt(1.0 + A**2)
    unit = np.where(r > 0, diff / safe, 0.0)
    du = pre * (gu**2 * r * u / s**2 + unit)
    dy = pre * (gy**2 * r * y / s**2 - unit)
    return du, dy
