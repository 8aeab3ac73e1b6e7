"""Contraction-metric tracking controller and its closed-loop monitors.

The control is obtained by integrating the differential gain ``K = L W^-1``
along the discrete geodesic joining the reference state to the plant state,
so that ``u(x = x*) = u*``. When the disturbance used by the controller
differs from the one attached to the reference point, the reference input is
re-solved for it (``u* + B_u^+ B_v (v* - v)``), which keeps the shifted
reference feasible whenever ``range(B_v)`` lies in ``range(B_u)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dynamics import ContractViolation, SystemModel
from .metric import MetricCertificate, gain_at
from .riemann import DEFAULT_SEGMENTS, GeodesicResult, geodesic

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReferencePoint:
    x_star: np.ndarray
    u_star: np.ndarray
    v_star: np.ndarray

    def __post_init__(self):
        for name in ("x_star", "u_star", "v_star"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))


@dataclass(frozen=True)
class CcmAction:
    u: np.ndarray
    u_unclamped: np.ndarray
    saturated: bool
    geodesic: GeodesicResult

    @property
    def distance(self) -> float:
        return self.geodesic.length


def disturbance_input_map(model: SystemModel) -> np.ndarray:
    """``B_u^+ B_v``: input that reproduces a disturbance's effect when ranges nest."""
    return np.linalg.pinv(model.input_matrix) @ model.dist_matrix


def input_deviation(model: SystemModel, v_a, v_b) -> np.ndarray:
    """``B_u^+ B_v (v_a - v_b)``."""
    diff = np.atleast_1d(np.asarray(v_a, dtype=float)) - np.atleast_1d(np.asarray(v_b, dtype=float))
    return disturbance_input_map(model) @ diff


def ccm_control(
    cert: MetricCertificate,
    model: SystemModel,
    x,
    ref: ReferencePoint,
    v_hat=None,
    segments: int = DEFAULT_SEGMENTS,
) -> CcmAction:
    """Geodesic-integrated tracking input, clamped to the input box.

    ``v_hat`` is the disturbance the controller believes acts at this step;
    ``None`` means it equals the reference disturbance.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.state_dim,):
        raise ContractViolation(f"state has shape {x.shape}, expected ({model.state_dim},)")
    geo = geodesic(cert, x, ref.x_star, segments)
    if not geo.converged:
        log.warning("geodesic did not converge; using best path after %d iterations", geo.iterations)
    # nodes run from x to x*, so the integral from x* to x flips the sign
    path = geo.path
    u = ref.u_star.copy()
    if geo.length > 0:
        k = gain_at(cert, path.midpoints)
        u = u - np.einsum("jik,jk->i", k, path.deltas)
    if v_hat is not None and model.dist_dim:
        u = u + input_deviation(model, ref.v_star, v_hat)
    clamped = model.input_box.clamp(u)
    saturated = bool(np.any(clamped != u))
    if saturated:
        log.debug("input saturated: %s clamped to %s", u, clamped)
    return CcmAction(u=clamped, u_unclamped=u, saturated=saturated, geodesic=geo)


def decay_monitor(cert: MetricCertificate, d_prev: float, d_curr: float, beta: float | None = None) -> float:
    """``d_curr - sqrt(1 - beta) d_prev``; non-positive when the distance contracts at rate beta."""
    b = cert.beta if beta is None else beta
    return float(d_curr - np.sqrt(1.0 - b) * d_prev)


def ball_bound_monitor(
    cert: MetricCertificate,
    d_prev: float,
    d_curr: float,
    u_tilde,
    input_matrix,
    beta: float | None = None,
) -> float:
    """Residual against the ball bound ``sqrt(1-beta) d_prev + sqrt(m_upper) ||B_u||_2 ||u_tilde||``."""
    g = np.linalg.norm(np.atleast_2d(input_matrix), 2)
    slack = np.sqrt(cert.m_upper) * g * np.linalg.norm(np.atleast_1d(u_tilde))
    return decay_monitor(cert, d_prev, d_curr, beta) - float(slack)
