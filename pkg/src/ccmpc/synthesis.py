"""Grid-based synthesis and verification of discrete-time control contraction metrics.

The certificate LMIs are affine in the polynomial coefficients of ``W`` and
``L``, so feasibility is posed as minimising a squared hinge on the smallest
eigenvalue of every sampled LMI. The eigenvalue gradient ``v^T (dF/dtheta) v``
is assembled analytically and fed to L-BFGS.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from itertools import product

import numpy as np
from scipy import linalg, optimize

from .dynamics import SystemModel
from .metric import MetricCertificate, metric_at, monomial_exponents, monomials

log = logging.getLogger(__name__)

MODES = ("contraction", "dissipative")
# successors are clamped to the state box inflated by this factor (same region geodesics may use)
SUCCESSOR_INFLATION = 1.1


class ConfigurationError(ValueError):
    pass


class NoCertificateFound(RuntimeError):
    def __init__(self, message: str, worst_point=None, worst_lambda: float = float("nan")):
        super().__init__(message)
        self.worst_point = worst_point
        self.worst_lambda = worst_lambda


@dataclass(frozen=True)
class SynthesisConfig:
    grid_points_per_dim: int = 8
    beta: float = 0.1
    eps_feas: float = 1e-6
    mode: str = "contraction"
    alpha_gain: float | None = None
    w_degree: int = 2
    l_degree: int = 2
    max_condition: float = 1e3
    # margin the optimiser aims for; defaults to 10% of the W floor
    target_margin: float | None = None
    # W(x) >= w_floor I is the scale normalisation; None picks a mode default
    w_floor: float | None = None
    successor_sampling: str = "vertices"
    max_iters: int = 3000
    tol: float = 1e-12
    refine_rounds: int = 6
    # cutting-plane rounds check this many times the synthesis grid density
    refine_factor: int = 4

    def __post_init__(self):
        if self.grid_points_per_dim < 2:
            raise ConfigurationError("grid_points_per_dim must be at least 2")
        if not self.eps_feas > 0:
            raise ConfigurationError("eps_feas must be positive")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.mode == "dissipative" and self.alpha_gain is None:
            raise ConfigurationError("dissipative mode needs alpha_gain")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigurationError("beta must lie in (0, 1]")
        if self.successor_sampling != "vertices":
            raise ConfigurationError("only 'vertices' successor sampling is supported")

    @property
    def floor(self) -> float:
        if self.w_floor is not None:
            return self.w_floor
        # the dissipative LMI needs W < (1-beta) I, so normalise from above there
        return 1.0 if self.mode == "contraction" else 1.0 / self.max_condition

    @property
    def ceiling(self) -> float:
        return self.floor * self.max_condition

    @property
    def target(self) -> float:
        return self.target_margin if self.target_margin is not None else 0.1 * self.floor


@dataclass(frozen=True)
class MarginReport:
    margin: float
    point: np.ndarray
    successor: np.ndarray
    n_pairs: int
    mode: str


# ---------------------------------------------------------------------------
# LMI assembly


def successor_points(model: SystemModel, x) -> np.ndarray:
    """Sampled successors ``f(x) + B_u u + B_v v`` for (u, v) over box vertices and zero.

    Returns shape ``(..., S, n)``, clamped to the state box inflated by
    :data:`SUCCESSOR_INFLATION`. Clamping to the bare box would make grid rows
    on the boundary artificially easy and leave the strip next to them unchecked.
    """
    x = np.asarray(x, dtype=float)
    us = np.unique(np.vstack([model.input_box.vertices(), np.zeros((1, model.input_dim))]), axis=0)
    vs = np.unique(np.vstack([model.dist_box.vertices(), np.zeros((1, model.dist_dim))]), axis=0)
    shifts = np.array(
        [model.input_matrix @ u + model.dist_matrix @ v for u, v in product(us, vs)]
    ).reshape(-1, model.state_dim)
    nxt = model.drift(x)[..., None, :] + shifts
    return model.state_box.inflate(SUCCESSOR_INFLATION).clamp(nxt)


def grid_pairs(model: SystemModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (x, x_next) pairs for every grid point and each sampled successor."""
    nxt = successor_points(model, points)
    s = nxt.shape[-2]
    return np.repeat(points, s, axis=0), nxt.reshape(-1, model.state_dim)


def _contraction_blocks(a, bu, w, wn, l, beta):
    y = a @ w + bu @ l
    top = np.concatenate([wn, y], axis=-1)
    bottom = np.concatenate([np.swapaxes(y, -1, -2), (1.0 - beta) * w], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def _l2gain_blocks(a, bu, bv, w, wn, l, beta, alpha):
    n, q = bv.shape
    batch = w.shape[:-2]
    y = a @ w + bu @ l
    bvb = np.broadcast_to(bv, batch + (n, q))
    zn_q = np.zeros(batch + (n, q))
    zq_n = np.zeros(batch + (q, n))
    znn = np.zeros(batch + (n, n))
    eye_q = np.broadcast_to(alpha**2 * np.eye(q), batch + (q, q))
    eye_n = np.broadcast_to(np.eye(n), batch + (n, n))
    yt = np.swapaxes(y, -1, -2)
    rows = [
        [wn, y, bvb, znn],
        [yt, (1.0 - beta) * w, zn_q, w],
        [np.swapaxes(bvb, -1, -2), zq_n, eye_q, zq_n],
        [znn, w, zn_q, eye_n],
    ]
    return np.concatenate([np.concatenate(r, axis=-1) for r in rows], axis=-2)


def build_contraction_lmi(model: SystemModel, cert: MetricCertificate, x, x_next) -> np.ndarray:
    """``[[W(x+), A W + B_u L], [(A W + B_u L)^T, (1-beta) W]]``; valid certificates make it PD."""
    return _contraction_blocks(
        model.jacobian(np.asarray(x, dtype=float)),
        model.input_matrix,
        cert.w(x),
        cert.w(x_next),
        cert.l(x),
        cert.beta,
    )


def build_l2gain_lmi(model: SystemModel, cert: MetricCertificate, x, x_next) -> np.ndarray:
    """Four-block dissipativity LMI bounding the gain from disturbance to state by ``alpha``."""
    if cert.alpha_gain is None:
        raise ConfigurationError("L2-gain LMI needs alpha_gain on the certificate")
    return _l2gain_blocks(
        model.jacobian(np.asarray(x, dtype=float)),
        model.input_matrix,
        model.dist_matrix,
        cert.w(x),
        cert.w(x_next),
        cert.l(x),
        cert.beta,
        cert.alpha_gain,
    )


def mode_lmi(model: SystemModel, cert: MetricCertificate, x, x_next) -> np.ndarray:
    if cert.mode == "dissipative":
        return build_l2gain_lmi(model, cert, x, x_next)
    return build_contraction_lmi(model, cert, x, x_next)


def schur_reduced(model: SystemModel, cert: MetricCertificate, x, x_next) -> np.ndarray:
    """``(1-beta) M - (A + B_u K)^T M(x+) (A + B_u K)``, the metric-form contraction condition."""
    m = metric_at(cert, x)
    mn = metric_at(cert, x_next)
    k = cert.l(x) @ m
    ac = model.jacobian(np.asarray(x, dtype=float)) + model.input_matrix @ k
    return (1.0 - cert.beta) * m - np.swapaxes(ac, -1, -2) @ mn @ ac


# ---------------------------------------------------------------------------
# feasibility solver


def _min_eig(mats: np.ndarray, rel_tol: float = 1e-9):
    """Smallest eigenvalue and the averaged outer product of its eigenvectors."""
    lam, vec = np.linalg.eigh(mats)
    lmin = lam[..., 0]
    tie = lam <= (lmin + rel_tol * (1.0 + np.abs(lmin)))[..., None]
    count = tie.sum(axis=-1)
    vw = vec * tie[..., None, :]
    outer = np.einsum("...ik,...jk->...ij", vw, vec) / count[..., None, None]
    return lmin, outer


class _Parameterisation:
    """Maps a flat vector to (W, L) coefficient arrays; W uses upper-triangular entries."""

    def __init__(self, n: int, m: int, w_degree: int, l_degree: int):
        self.n, self.m = n, m
        self.w_exps = monomial_exponents(n, w_degree)
        self.l_exps = monomial_exponents(n, l_degree)
        self.iu = np.triu_indices(n)
        self.n_w = len(self.w_exps) * len(self.iu[0])
        self.size = self.n_w + len(self.l_exps) * m * n

    def unpack(self, theta):
        n = self.n
        tri = theta[: self.n_w].reshape(len(self.w_exps), -1)
        w = np.zeros((len(self.w_exps), n, n))
        w[:, self.iu[0], self.iu[1]] = tri
        w = w + np.swapaxes(w, -1, -2) - w * np.eye(n)
        l = theta[self.n_w :].reshape(len(self.l_exps), self.m, n)
        return w, l

    def pack(self, w, l):
        return np.concatenate([w[:, self.iu[0], self.iu[1]].ravel(), np.asarray(l).ravel()])


def _affine_family(fn, par: _Parameterisation):
    """Write ``fn(theta)`` (affine in theta) as ``C + sum_j theta_j G_j``."""
    zero = np.zeros(par.size)
    c = fn(zero)
    g = np.empty((par.size,) + c.shape)
    for j in range(par.size):
        e = zero.copy()
        e[j] = 1.0
        g[j] = fn(e) - c
    return c, g


def _riccati_gain(model: SystemModel) -> np.ndarray:
    m, n = model.input_dim, model.state_dim
    if m == 0:
        return np.zeros((0, n))
    a0 = model.jacobian(model.state_box.center)
    b = model.input_matrix
    try:
        p = linalg.solve_discrete_are(a0, b, np.eye(n), np.eye(m))
    except (np.linalg.LinAlgError, ValueError):
        return np.zeros((m, n))
    return -np.linalg.solve(np.eye(m) + b.T @ p @ b, b.T @ p @ a0)


def _make_cert(model, config, par, theta, grid_n):
    w, l = par.unpack(theta)
    return MetricCertificate(
        mode=config.mode,
        beta=config.beta,
        state_dim=model.state_dim,
        input_dim=model.input_dim,
        dist_dim=model.dist_dim,
        w_degree=config.w_degree,
        l_degree=config.l_degree,
        w_coeffs=w,
        l_coeffs=l,
        state_box=model.state_box,
        alpha_gain=config.alpha_gain if config.mode == "dissipative" else None,
        synthesis_grid=grid_n,
    )


def _solve_penalty(model, config, par, xs, xn, points, theta0):
    """Minimise the squared-hinge penalty over the sampled LMIs and the W bounds."""
    base = _make_cert(model, config, par, theta0, 0)

    def lmi_of(theta):
        w, l = par.unpack(theta)
        c = MetricCertificate(
            mode=base.mode, beta=base.beta, state_dim=base.state_dim, input_dim=base.input_dim,
            dist_dim=base.dist_dim, w_degree=base.w_degree, l_degree=base.l_degree,
            w_coeffs=w, l_coeffs=l, state_box=base.state_box, alpha_gain=base.alpha_gain,
        )
        return mode_lmi(model, c, xs, xn)

    phi_w = monomials(points, par.w_exps)

    def w_of(theta):
        w, _ = par.unpack(theta)
        return np.einsum("pi,ijk->pjk", phi_w, w)

    c_lmi, g_lmi = _affine_family(lmi_of, par)
    _, g_w = _affine_family(w_of, par)
    eye = np.eye(model.state_dim)
    target, floor, ceil = config.target, config.floor, config.ceiling

    def objective(theta):
        lmis = c_lmi + np.tensordot(theta, g_lmi, axes=1)
        lam, vv = _min_eig(lmis)
        # hinges are measured in units of the target / floor so the stopping
        # rule behaves the same whatever scale W is normalised to
        h = np.maximum(0.0, target - lam) / target
        ws = np.tensordot(theta, g_w, axes=1)
        lam_lo, v_lo = _min_eig(ws - floor * eye)
        lam_hi, v_hi = _min_eig(ceil * eye - ws)
        h_lo = np.maximum(0.0, -lam_lo) / floor
        h_hi = np.maximum(0.0, -lam_hi) / floor
        val = h @ h + h_lo @ h_lo + h_hi @ h_hi
        grad = -2.0 / target * np.einsum("p,jpab,pab->j", h, g_lmi, vv)
        grad -= 2.0 / floor * np.einsum("p,jpab,pab->j", h_lo, g_w, v_lo)
        grad += 2.0 / floor * np.einsum("p,jpab,pab->j", h_hi, g_w, v_hi)
        return val, grad

    res = optimize.minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": config.max_iters, "ftol": config.tol, "gtol": 1e-14, "maxcor": 30},
    )
    log.debug("penalty solve: J=%.3e after %d iterations (%s)", res.fun, res.nit, res.message)
    return res.x


def synthesize(model: SystemModel, config: SynthesisConfig) -> MetricCertificate:
    """Search for a certificate valid on the synthesis grid and on a 2x denser verification grid.

    Raises :class:`NoCertificateFound` when the penalty cannot be driven to a
    feasible point; the exception carries the worst grid point.
    """
    if not (np.all(np.isfinite(model.state_box.lower)) and np.all(np.isfinite(model.state_box.upper))):
        raise ConfigurationError("synthesis needs a bounded state box")
    par = _Parameterisation(model.state_dim, model.input_dim, config.w_degree, config.l_degree)
    n = model.state_dim

    w0 = np.zeros((len(par.w_exps), n, n))
    w_init = 1.0 if config.mode == "contraction" else np.sqrt(config.floor * config.ceiling)
    w0[0] = w_init * np.eye(n)
    l0 = np.zeros((len(par.l_exps), model.input_dim, n))
    l0[0] = _riccati_gain(model) * w_init
    theta = par.pack(w0, l0)

    grid_n = config.grid_points_per_dim
    points = model.state_box.grid(grid_n)
    xs, xn = grid_pairs(model, points)
    verify_points = model.state_box.grid(2 * grid_n)
    refine_points = model.state_box.grid(config.refine_factor * grid_n)

    for round_ in range(config.refine_rounds + 1):
        theta = _solve_penalty(model, config, par, xs, xn, points, theta)
        cert = _make_cert(model, config, par, theta, grid_n)
        lam = np.linalg.eigvalsh(mode_lmi(model, cert, xs, xn))[:, 0]
        worst = int(np.argmin(lam))
        if lam[worst] < config.eps_feas:
            raise NoCertificateFound(
                f"no certificate: LMI min eigenvalue {lam[worst]:.3e} at x={xs[worst]}, "
                f"x+={xn[worst]} is below eps_feas={config.eps_feas:g}",
                worst_point=xs[worst],
                worst_lambda=float(lam[worst]),
            )
        report = verify_certificate(model, cert, verify_points)
        fine = verify_certificate(model, cert, refine_points)
        if report.margin >= config.eps_feas and fine.margin >= 0.5 * config.target:
            break
        if round_ == config.refine_rounds:
            if report.margin >= config.eps_feas:
                log.warning("refinement grid margin %.3e below half the target", fine.margin)
                break
            raise NoCertificateFound(
                f"verification margin {report.margin:.3e} at x={report.point} stays below eps_feas",
                worst_point=report.point,
                worst_lambda=report.margin,
            )
        vx, vn = grid_pairs(model, refine_points)
        vlam = np.linalg.eigvalsh(mode_lmi(model, cert, vx, vn))[:, 0]
        bad = vlam < config.target
        log.info("refinement round %d: adding %d verification pairs", round_ + 1, int(bad.sum()))
        xs = np.vstack([xs, vx[bad]])
        xn = np.vstack([xn, vn[bad]])

    bound_points = np.vstack([points, verify_points])
    w_lam = np.linalg.eigvalsh(cert.w(bound_points))
    if np.any(w_lam[:, 0] <= 0):
        raise NoCertificateFound("W(x) lost positive definiteness on the grid")
    return replace(
        cert,
        margin=float(report.margin),
        m_lower=float(1.0 / w_lam[:, -1].max()),
        m_upper=float(1.0 / w_lam[:, 0].min()),
    )


def verify_certificate(model: SystemModel, cert: MetricCertificate, grid=None) -> MarginReport:
    """Smallest mode-LMI eigenvalue over a grid of (x, x+) pairs.

    ``grid`` is either points per dimension or an explicit ``(G, n)`` array;
    the default is twice the synthesis grid density. A negative margin is a
    valid report.
    """
    if grid is None:
        grid = 2 * max(cert.synthesis_grid, 8)
    points = model.state_box.grid(int(grid)) if np.isscalar(grid) else np.asarray(grid, dtype=float)
    xs, xn = grid_pairs(model, points)
    lam = np.linalg.eigvalsh(mode_lmi(model, cert, xs, xn))[:, 0]
    i = int(np.argmin(lam))
    return MarginReport(float(lam[i]), xs[i], xn[i], len(lam), cert.mode)
