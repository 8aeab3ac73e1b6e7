"""Independent brute-force oracles used by several test modules."""

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from ccmpc.metric import metric_at

LATTICE_STEPS = ((1, 0), (0, 1), (1, 1), (1, -1))


class LatticeOracle:
    """Shortest paths on an 8-connected lattice over a 2-D box, edges weighted by the midpoint metric."""

    def __init__(self, cert, box, size=41):
        self.cert = cert
        self.size = size
        axes = [np.linspace(lo, hi, size) for lo, hi in zip(box.lower, box.upper)]
        gx, gy = np.meshgrid(*axes, indexing="ij")
        self.points = np.stack([gx.ravel(), gy.ravel()], axis=1)
        self.index = np.arange(size * size).reshape(size, size)
        rows, cols, weights = [], [], []
        for di, dj in LATTICE_STEPS:
            src = self.index[max(0, -di) : size - max(0, di), max(0, -dj) : size - max(0, dj)].ravel()
            dst = self.index[max(0, di) : size + min(0, di) or None, max(0, dj) : size + min(0, dj) or None].ravel()
            d = self.points[dst] - self.points[src]
            m = metric_at(cert, 0.5 * (self.points[src] + self.points[dst]))
            w = np.sqrt(np.einsum("bi,bij,bj->b", d, m, d))
            rows += [src, dst]
            cols += [dst, src]
            weights += [w, w]
        n = size * size
        self.graph = coo_matrix(
            (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()

    def _cell_links(self, x):
        """Lattice nodes at the corners of the cell holding ``x`` and the metric lengths to them."""
        lo = self.points[0]
        h = self.points[self.index[1, 1]] - lo
        ij = np.clip(np.floor((np.asarray(x) - lo) / h).astype(int), 0, self.size - 2)
        corners = [self.index[ij[0] + a, ij[1] + b] for a in (0, 1) for b in (0, 1)]
        d = self.points[corners] - x
        m = metric_at(self.cert, 0.5 * (self.points[corners] + x))
        return corners, np.sqrt(np.einsum("bi,bij,bj->b", d, m, d))

    def distance_between(self, x, y):
        """Shortest path between arbitrary points, each joined to the corners of its lattice cell."""
        cx, wx = self._cell_links(x)
        cy, wy = self._cell_links(y)
        from_x = dijkstra(self.graph, indices=cx)
        return float(np.min(wx[:, None] + from_x[:, cy] + wy[None, :]))

    def point(self, i, j):
        return self.points[self.index[i, j]]

    def distance(self, a, b):
        return float(dijkstra(self.graph, indices=self.index[a])[self.index[b]])


def aligned_pairs(size, count, seed):
    """Lattice endpoint pairs whose displacement is along an axis or a diagonal."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        di, dj = LATTICE_STEPS[len(out) % 4]
        k = int(rng.integers(4, size // 2))
        i0, j0 = (int(v) for v in rng.integers(0, size, 2))
        i1, j1 = i0 + di * k, j0 + dj * k
        if 0 <= i1 < size and 0 <= j1 < size:
            out.append(((i0, j0), (i1, j1)))
    return out


def scalar_grid_optimum(x0, eps_d, beta=0.1, a=1.1, points=201, state_limit=2.0):
    """Exhaustive search over a ``points x points`` input grid on [-1, 1]^2 for the scalar N=2 problem.

    The metric is constant (M = 1), so the Riemannian distance to the zero
    reference is ``|x|`` and the contraction constraints are scalar bounds.
    """
    g = np.linspace(-1.0, 1.0, points)
    u0, u1 = np.meshgrid(g, g, indexing="ij")
    x1 = a * x0 + u0
    x2 = a * x1 + u1
    d = max(abs(x0), eps_d)
    ok = (np.abs(x1) <= np.sqrt(1 - beta) * d) & (np.abs(x2) <= (1 - beta) * d)
    ok &= (np.abs(x1) <= state_limit) & (np.abs(x2) <= state_limit)
    cost = np.where(ok, u0**2 + u1**2, np.inf)
    k = np.unravel_index(np.argmin(cost), cost.shape)
    return float(cost[k]), np.array([u0[k], u1[k]])


def scalar_exact_optimum(x0, bound1, bound2, a=1.1):
    """Closed-form optimum of ``u0^2 + u1^2`` subject to ``|x1| <= bound1`` and ``|x2| <= bound2``.

    For fixed ``x1`` the best second input is the smallest move into
    ``[-bound2, bound2]``. What is left is a convex piecewise quadratic in
    ``y1 = |x1|``, ``(y1 - a y0)^2 + max(0, a y1 - bound2)^2``, minimised
    piece by piece and then clipped to ``y1 <= bound1``.
    """
    s = 1.0 if x0 >= 0 else -1.0
    y0 = abs(x0)
    y1 = (a * y0 + a * bound2) / (1 + a * a)
    if a * y1 < bound2:
        y1 = min(a * y0, bound2 / a)
    y1 = min(y1, bound1)
    u0 = y1 - a * y0
    u1 = -max(0.0, a * y1 - bound2)
    return u0 * u0 + u1 * u1, s * np.array([u0, u1])
