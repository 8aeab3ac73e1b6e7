"""Riemannian path length, energy and discrete geodesics under a certificate metric.

Paths are discretised with ``P`` segments and midpoint quadrature. Geodesics
minimise the discrete energy ``P * sum_j d_j^T M(mid_j) d_j`` with fixed
endpoints, starting from the straight line. Each iteration solves a
block-tridiagonal system built from the frozen metric (a Gauss-Newton style
preconditioner) and backtracks until the energy decreases, so the energy is
monotone over iterations. Only local optimality is guaranteed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metric import MAX_CONDITION, MetricCertificate, metric_at

INFLATION = 1.1
DEFAULT_SEGMENTS = 16


@dataclass(frozen=True)
class DiscretePath:
    nodes: np.ndarray

    @property
    def segments(self) -> int:
        return len(self.nodes) - 1

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.nodes, axis=0)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])


@dataclass(frozen=True)
class GeodesicResult:
    path: DiscretePath
    length: float
    energy: float
    converged: bool
    iterations: int
    energy_history: tuple = field(default=(), repr=False)


def straight_path(x, x_star, segments: int = DEFAULT_SEGMENTS) -> DiscretePath:
    s = np.linspace(0.0, 1.0, segments + 1)[:, None]
    x, x_star = np.asarray(x, dtype=float), np.asarray(x_star, dtype=float)
    nodes = x + s * (x_star - x)
    nodes[0], nodes[-1] = x, x_star
    return DiscretePath(nodes)


def path_length(cert: MetricCertificate, path: DiscretePath) -> float:
    """Midpoint-rule Riemannian length ``sum_j sqrt(d_j^T M(mid_j) d_j)``."""
    d = path.deltas
    if not np.any(d):
        return 0.0
    m = metric_at(cert, path.midpoints)
    return float(np.sqrt(np.maximum(np.einsum("ji,jik,jk->j", d, m, d), 0.0)).sum())


def path_energy(cert: MetricCertificate, path: DiscretePath) -> float:
    d = path.deltas
    if not np.any(d):
        return 0.0
    m = metric_at(cert, path.midpoints)
    return float(path.segments * np.einsum("ji,jik,jk->", d, m, d))


def geodesic_tangents(result: GeodesicResult) -> np.ndarray:
    """Discrete ``d gamma / ds`` per segment (``P * delta_j``), aligned with the segment midpoints."""
    return result.path.deltas * result.path.segments


# ---------------------------------------------------------------------------
# batched solver


def _metric_terms(cert: MetricCertificate, mids: np.ndarray):
    """M, dW/dx and a validity mask for midpoints of shape ``(B, P, n)``."""
    w = cert.w(mids)
    lam = np.linalg.eigvalsh(w)
    ok = (lam[..., 0] > 0) & (lam[..., -1] < MAX_CONDITION * lam[..., 0])
    ok_path = ok.all(axis=-1)
    w_safe = np.where(ok[..., None, None], w, np.eye(cert.state_dim))
    return np.linalg.inv(w_safe), ok_path


def _energy(cert, nodes):
    d = np.diff(nodes, axis=1)
    mids = 0.5 * (nodes[:, 1:] + nodes[:, :-1])
    m, ok = _metric_terms(cert, mids)
    e = nodes.shape[1] - 1
    val = e * np.einsum("bji,bjik,bjk->b", d, m, d)
    return np.where(ok, val, np.inf)


def _energy_grad_and_precond(cert, nodes):
    """Energy, gradient wrt interior nodes and the frozen-metric block-tridiagonal matrix."""
    b, p1, n = nodes.shape
    p = p1 - 1
    d = np.diff(nodes, axis=1)
    mids = 0.5 * (nodes[:, 1:] + nodes[:, :-1])
    m, ok = _metric_terms(cert, mids)
    u = np.einsum("bjik,bjk->bji", m, d)
    energy = p * np.einsum("bji,bji->b", d, u)
    dw = cert.w_gradient(mids)
    # d/dx_k of d^T M d = -u^T dW_k u
    q = -np.einsum("bji,bjkil,bjl->bjk", u, dw, u)
    seg_grad_left = p * (-2.0 * u + 0.5 * q)
    seg_grad_right = p * (2.0 * u + 0.5 * q)
    grad = seg_grad_right[:, :-1] + seg_grad_left[:, 1:]

    k = p - 1
    h = np.zeros((b, k, n, k, n))
    idx = np.arange(k)
    h[:, idx, :, idx, :] = np.moveaxis(2.0 * p * (m[:, :-1] + m[:, 1:]), 0, 1)
    if k > 1:
        off = np.moveaxis(-2.0 * p * m[:, 1:-1], 0, 1)
        h[:, idx[:-1], :, idx[1:], :] = off
        h[:, idx[1:], :, idx[:-1], :] = off
    return np.where(ok, energy, np.inf), grad.reshape(b, k * n), h.reshape(b, k * n, k * n)


def solve_geodesics(
    cert: MetricCertificate,
    starts,
    ends,
    segments: int = DEFAULT_SEGMENTS,
    tol: float = 1e-10,
    max_iter: int = 100,
    init: np.ndarray | None = None,
    record_history: bool = False,
):
    """Minimise the discrete energy for a batch of endpoint pairs.

    Returns ``(nodes, energy, converged, iterations, history)`` with nodes of
    shape ``(B, P+1, n)``. ``tol`` bounds the relative Newton decrement
    ``-g^T d / E`` at termination.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ends = np.atleast_2d(np.asarray(ends, dtype=float))
    b, n = starts.shape
    p = int(segments)
    if init is None:
        s = np.linspace(0.0, 1.0, p + 1)[None, :, None]
        # written as a displacement so that coincident endpoints give exactly constant nodes
        nodes = starts[:, None, :] + s * (ends - starts)[:, None, :]
        nodes[:, 0], nodes[:, -1] = starts, ends
    else:
        nodes = np.array(init, dtype=float).reshape(b, p + 1, n)
    lo_box = cert.state_box.inflate(INFLATION)
    lo, hi = lo_box.lower, lo_box.upper

    iters = np.zeros(b, dtype=int)
    converged = np.zeros(b, dtype=bool)
    stopped = np.zeros(b, dtype=bool)
    history: list[list[float]] = [[] for _ in range(b)]
    energy = _energy(cert, nodes)
    trivial = (energy == 0.0) | (p < 2)
    converged[trivial] = stopped[trivial] = True
    stopped[~np.isfinite(energy)] = True
    if record_history:
        for i in range(b):
            history[i].append(float(energy[i]))

    for _ in range(max_iter):
        active = np.flatnonzero(~stopped)
        if active.size == 0:
            break
        e0, g, h = _energy_grad_and_precond(cert, nodes[active])
        direction = -np.linalg.solve(h, g[..., None])[..., 0]
        decrement = -np.einsum("bi,bi->b", g, direction)
        # a Newton step below the rounding level of the node coordinates is as stationary as it gets
        scale = 1.0 + np.abs(nodes[active]).reshape(active.size, -1).max(axis=1)
        tiny_step = np.abs(direction).max(axis=1) <= 1e3 * np.finfo(float).eps * scale
        done = (decrement <= tol * e0) | tiny_step
        converged[active[done]] = stopped[active[done]] = True
        keep = ~done
        step_paths = active[keep]
        if step_paths.size == 0:
            continue
        direction = direction[keep].reshape(-1, p - 1, n)
        g_act = g[keep]
        base = nodes[step_paths]
        e_base = e0[keep]
        t = np.ones(step_paths.size)
        pending = np.ones(step_paths.size, dtype=bool)
        new_nodes = base.copy()
        for _ls in range(40):
            cand = base.copy()
            cand[:, 1:-1] = np.clip(base[:, 1:-1] + t[:, None, None] * direction, lo, hi)
            e_new = _energy(cert, cand)
            moved = (cand[:, 1:-1] - base[:, 1:-1]).reshape(step_paths.size, -1)
            armijo = e_new <= e_base + 1e-4 * np.einsum("bi,bi->b", g_act, moved)
            accept = pending & armijo & (e_new < e_base)
            new_nodes[accept] = cand[accept]
            pending &= ~accept
            if not pending.any():
                break
            t = np.where(pending, 0.5 * t, t)
        moved_paths = step_paths[~pending]
        nodes[moved_paths] = new_nodes[~pending]
        iters[moved_paths] += 1
        # a failed line search means no further progress: stationary only if the decrement is tiny
        stalled = step_paths[pending]
        stopped[stalled] = True
        step_len = np.abs(direction[pending]).max(axis=(1, 2), initial=0.0)
        converged[stalled] = (decrement[keep][pending] <= 1e-6 * e_base[pending]) | (
            step_len <= 1e-8 * scale[keep][pending]
        )
        if record_history and moved_paths.size:
            e_after = _energy(cert, nodes[moved_paths])
            for j, e in zip(moved_paths, e_after):
                history[j].append(float(e))
    energy = _energy(cert, nodes)
    return nodes, energy, converged, iters, history


def geodesic_batch(cert, starts, ends, segments: int = DEFAULT_SEGMENTS, tol: float = 1e-10):
    """Lengths, nodes and convergence flags of geodesics for a batch of endpoint pairs."""
    nodes, _, conv, _, _ = solve_geodesics(cert, starts, ends, segments, tol)
    d = np.diff(nodes, axis=1)
    mids = 0.5 * (nodes[:, 1:] + nodes[:, :-1])
    m = metric_at(cert, mids)
    lengths = np.sqrt(np.maximum(np.einsum("bji,bjik,bjk->bj", d, m, d), 0.0)).sum(axis=1)
    return lengths, nodes, conv


def geodesic(
    cert: MetricCertificate,
    x,
    x_star,
    segments: int = DEFAULT_SEGMENTS,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> GeodesicResult:
    """Discrete minimum-energy path from ``x`` (node 0) to ``x_star`` (node P)."""
    nodes, energy, conv, iters, hist = solve_geodesics(
        cert, x, x_star, segments, tol, max_iter, record_history=True
    )
    path = DiscretePath(nodes[0])
    return GeodesicResult(
        path=path,
        length=path_length(cert, path),
        energy=float(energy[0]),
        converged=bool(conv[0]),
        iterations=int(iters[0]),
        energy_history=tuple(hist[0]),
    )


def endpoint_length_gradient(cert: MetricCertificate, nodes: np.ndarray) -> np.ndarray:
    """Partial derivative of the path length wrt node 0, for paths of shape ``(B, P+1, n)``.

    At an energy-stationary path the interior nodes contribute only at second
    order, so this approximates the gradient of the geodesic distance wrt its
    first endpoint. Zero-length paths get a zero gradient.
    """
    d0 = nodes[:, 1] - nodes[:, 0]
    mid = 0.5 * (nodes[:, 1] + nodes[:, 0])
    m = metric_at(cert, mid)
    u = np.einsum("bik,bk->bi", m, d0)
    l0 = np.sqrt(np.maximum(np.einsum("bi,bi->b", d0, u), 0.0))
    dw = cert.w_gradient(mid)
    q = -np.einsum("bi,bkil,bl->bk", u, dw, u)
    grad = -u + 0.25 * q
    safe = np.where(l0 > 0, l0, 1.0)
    return np.where((l0 > 0)[:, None], grad / safe[:, None], 0.0)
