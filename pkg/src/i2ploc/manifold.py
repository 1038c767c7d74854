"""Poincaré-ball hyperbolic geometry with boundary-safe numerics.

Points live inside the radius-1/sqrt(c) ball for curvature parameter
c > 0. Every operation clamps its inputs and outputs back into the ball
(norm at most (1 - 1e-5)/sqrt(c)), and the arctanh argument of the
geodesic distance is capped below 1, so no input can produce infinities.
All functions work on Tensors over the trailing vector axis and
broadcast across leading axes, which the pairwise-distance losses rely
on.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .nncore import Tensor, where

BALL_EPS = 1e-5
ARCTANH_MARGIN = 1e-7
_NORM_FLOOR = 1e-30  # keeps sqrt differentiable at the origin


def _check_curvature(c: float) -> None:
    if not (c > 0):
        raise DataError(f"curvature parameter must be positive, got {c}")


def _sq_norm(x: Tensor) -> Tensor:
    return (x * x).sum(axis=-1, keepdims=True)


def project_to_ball(x: Tensor, c: float) -> Tensor:
    """Rescale any vector with c*|x|^2 >= 1 back inside the ball.

    Inside the ball the map is the identity, so gradients pass through
    untouched there; clamped vectors keep the gradient of the rescaling.
    """
    _check_curvature(c)
    max_norm = (1.0 - BALL_EPS) / np.sqrt(c)
    norm = (_sq_norm(x) + _NORM_FLOOR).sqrt()
    return where(norm.data > max_norm, x * (max_norm / norm), x)


def conformal_factor(q: Tensor, c: float) -> Tensor:
    """lambda_c(q) = 2 / (1 - c |q|^2), at least 2, finite after clamping."""
    q = project_to_ball(q, c)
    return 2.0 / (1.0 - _sq_norm(q) * c)


def mobius_add(q: Tensor, p: Tensor, c: float) -> Tensor:
    """Möbius addition q ⊕_c p, re-clamped into the ball."""
    _check_curvature(c)
    if q.shape[-1] != p.shape[-1]:
        raise DataError(f"dimension mismatch: {q.shape[-1]} vs {p.shape[-1]}")
    q = project_to_ball(q, c)
    p = project_to_ball(p, c)
    qp = (q * p).sum(axis=-1, keepdims=True)
    qq = _sq_norm(q)
    pp = _sq_norm(p)
    num = (1.0 + 2.0 * c * qp + c * pp) * q + (1.0 - c * qq) * p
    den = 1.0 + 2.0 * c * qp + (c * c) * qq * pp
    return project_to_ball(num / den, c)


def hyp_dist(q: Tensor, p: Tensor, c: float) -> Tensor:
    """Geodesic distance (2/sqrt(c)) * arctanh(sqrt(c) |(-q) ⊕_c p|).

    Returns one value per broadcast pair (the vector axis is reduced).
    """
    diff = mobius_add(-q, p, c)
    norm = (_sq_norm(diff) + _NORM_FLOOR).sqrt()
    arg = (norm * np.sqrt(c)).clip_max(1.0 - ARCTANH_MARGIN)
    out = arg.arctanh() * (2.0 / np.sqrt(c))
    return out.reshape(out.shape[:-1])


def exp_map(v: Tensor, c: float, base: Tensor | None = None) -> Tensor:
    """Exponential map of tangent vector v, at the origin by default.

    exp_0(v) = tanh(sqrt(c) |v|) * v / (sqrt(c) |v|); with an explicit
    base point u the tangent norm is scaled by the conformal factor of u
    and the result is Möbius-translated by u. A zero tangent returns the
    base point itself.
    """
    _check_curvature(c)
    sc = np.sqrt(c)
    norm = (_sq_norm(v) + _NORM_FLOOR).sqrt()
    if base is None:
        scaled = v * ((sc * norm).tanh() / (sc * norm))
        return project_to_ball(scaled, c)
    lam = conformal_factor(base, c)
    scaled = v * ((sc * norm * (lam * 0.5)).tanh() / (sc * norm))
    return mobius_add(base, scaled, c)
