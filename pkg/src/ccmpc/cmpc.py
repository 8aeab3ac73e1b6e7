"""Contraction-constrained model predictive control.

The decision variable is the input sequence ``u_0 .. u_{N-1}``. Predictions use
the disturbance forecast, and every predicted state must shrink its
Riemannian distance to the reference at the certified rate:

    r_i = d(x_{i+1}, x*_{i+1}) - (1 - beta)^((i+1)/2) * max(d_0, eps_d) <= 0.

The default solver is SLSQP with the contraction and state-box constraints
passed explicitly; an augmented-Lagrangian outer loop around L-BFGS-B is kept
as an alternative. Either way the gradients are analytic: stage-cost and
state-box terms go through the prediction sensitivities, and distances
through the derivative of the optimised path length with respect to its
free endpoint.
The contraction-metric controller rolled out along the prediction is always
kept as a candidate, so the returned cost never exceeds the cost of that
rollout when the rollout is itself admissible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .ccm_controller import ReferencePoint, ccm_control
from .dynamics import ContractViolation, SystemModel, jacobian_a, step
from .metric import MetricCertificate, metric_at
from .riemann import DEFAULT_SEGMENTS, INFLATION, endpoint_length_gradient, geodesic, solve_geodesics

RESIDUAL_TOL = 1e-8
REFERENCE_TOL = 1e-9
# augmented-Lagrangian schedule: initial weight, growth factor, cap, outer iterations
PENALTY_START = 1e2
PENALTY_GROWTH = 10.0
PENALTY_MAX = 1e8
PENALTY_OUTER = 12
# constraints are targeted slightly inside the feasible set so that small
# residual violations of the solvers land on the admissible side
TIGHTENING = 1e-3

STATUS_OPTIMAL = "optimal"
STATUS_FALLBACK = "fallback_ccm"
STATUS_INFEASIBLE_BOXES = "infeasible_boxes"


# ---------------------------------------------------------------------------
# stage costs


@dataclass(frozen=True)
class StageCost:
    """``(x - x_ref)^T Q (x - x_ref) + u^T R u``."""

    kind: str
    q: np.ndarray
    r: np.ndarray

    def value(self, x, u, x_ref) -> np.ndarray:
        dx = x - x_ref
        return np.einsum("...i,ij,...j->...", dx, self.q, dx) + np.einsum("...i,ij,...j->...", u, self.r, u)

    def gradients(self, x, u, x_ref):
        return 2.0 * (x - x_ref) @ self.q, 2.0 * u @ self.r


def input_energy(n: int, m: int) -> StageCost:
    return StageCost("input_energy", np.zeros((n, n)), np.eye(m))


def input_tracking(n: int, m: int, rho: float = 1.0) -> StageCost:
    return StageCost("input_tracking", rho * np.eye(n), np.eye(m))


def weighted_quadratic(n: int, m: int, q, r) -> StageCost:
    q = np.asarray(q, dtype=float).reshape(n, n)
    r = np.asarray(r, dtype=float).reshape(m, m)
    if np.linalg.eigvalsh(0.5 * (q + q.T))[0] < 0 or np.linalg.eigvalsh(0.5 * (r + r.T))[0] < 0:
        raise ValueError("cost weights must be positive semidefinite")
    return StageCost("quadratic", 0.5 * (q + q.T), 0.5 * (r + r.T))


COSTS = {"input_energy": input_energy, "input_tracking": input_tracking, "quadratic": weighted_quadratic}


def make_cost(kind: str, n: int, m: int, **params) -> StageCost:
    try:
        factory = COSTS[kind]
    except KeyError:
        raise ValueError(f"unknown stage cost {kind!r}; choose from {sorted(COSTS)}") from None
    return factory(n, m, **params)


# ---------------------------------------------------------------------------
# problem and solution


@dataclass(frozen=True)
class MpcProblem:
    model: SystemModel
    cert: MetricCertificate
    horizon_n: int
    x0: np.ndarray
    reference: Sequence[ReferencePoint]
    forecast: np.ndarray
    cost: StageCost | None = None
    beta: float | None = None
    eps_d: float | None = None
    segments: int = DEFAULT_SEGMENTS
    warm_start: np.ndarray | None = None

    def __post_init__(self):
        n, m, q, big_n = self.model.state_dim, self.model.input_dim, self.model.dist_dim, self.horizon_n
        if big_n < 1:
            raise ContractViolation("horizon must be at least one step")
        if len(self.reference) != big_n + 1:
            raise ContractViolation(f"need {big_n + 1} reference points, got {len(self.reference)}")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(n))
        object.__setattr__(self, "forecast", np.asarray(self.forecast, dtype=float).reshape(big_n, q))
        if self.cost is None:
            object.__setattr__(self, "cost", input_energy(n, m))
        if self.beta is None:
            object.__setattr__(self, "beta", self.cert.beta)
        if self.eps_d is None:
            object.__setattr__(self, "eps_d", default_eps_d(self.cert))
        if self.warm_start is not None:
            object.__setattr__(self, "warm_start", np.asarray(self.warm_start, dtype=float).reshape(big_n, m))
        xr, ur, vr = self.x_ref, self.u_ref, self.v_ref
        nxt = step(self.model, xr[:-1], ur[:-1], vr[:-1])
        gap = np.abs(nxt - xr[1:]).max(initial=0.0)
        if gap > REFERENCE_TOL * (1.0 + np.abs(xr).max()):
            raise ContractViolation(f"reference trajectory is not feasible (one-step residual {gap:.3g})")

    @property
    def x_ref(self) -> np.ndarray:
        return np.array([r.x_star for r in self.reference])

    @property
    def u_ref(self) -> np.ndarray:
        return np.array([r.u_star for r in self.reference]).reshape(len(self.reference), self.model.input_dim)

    @property
    def v_ref(self) -> np.ndarray:
        return np.array([r.v_star for r in self.reference]).reshape(len(self.reference), self.model.dist_dim)


@dataclass(frozen=True)
class MpcSolution:
    u_seq: np.ndarray
    x_pred: np.ndarray
    r_residuals: np.ndarray
    cost: float
    status: str
    d0: float
    evaluations: int = 0
    penalty_history: tuple = field(default=(), repr=False)
    ccm_u_seq: np.ndarray | None = field(default=None, repr=False)

    @property
    def max_residual(self) -> float:
        return float(np.max(self.r_residuals))


def default_eps_d(cert: MetricCertificate) -> float:
    return 1e-4 * float(np.sqrt(cert.m_upper))


def shift_warm_start(u_seq) -> np.ndarray:
    """``(u_1, ..., u_{N-1}, u_{N-1})``."""
    u_seq = np.asarray(u_seq, dtype=float)
    return np.concatenate([u_seq[1:], u_seq[-1:]], axis=0)


# ---------------------------------------------------------------------------
# prediction and residuals


def predict(model: SystemModel, x0, u_seq, forecast) -> np.ndarray:
    """States ``x_0 .. x_N`` under the input sequence and forecast disturbances."""
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, model.input_dim)
    forecast = np.asarray(forecast, dtype=float)
    forecast = forecast.reshape(len(forecast) if forecast.ndim else 1, model.dist_dim)
    if len(forecast) < len(u_seq):
        raise ContractViolation("forecast is shorter than the input sequence")
    xs = [np.asarray(x0, dtype=float)]
    for u, v in zip(u_seq, forecast):
        xs.append(step(model, xs[-1], u, v))
    return np.array(xs)


def _sensitivities(model: SystemModel, x_pred: np.ndarray) -> np.ndarray:
    """``S[i, j] = d x_i / d u_j`` with shape ``(N+1, N, n, m)``."""
    big_n = len(x_pred) - 1
    n, m = model.state_dim, model.input_dim
    a = jacobian_a(model, x_pred[:-1])
    s = np.zeros((big_n + 1, big_n, n, m))
    for i in range(big_n):
        s[i + 1] = np.einsum("ij,tjk->tik", a[i], s[i])
        s[i + 1, i] = model.input_matrix
    return s


def contraction_bound(i: int, d0: float, beta: float, eps_d: float = 0.0) -> float:
    return float((1.0 - beta) ** ((i + 1) / 2.0) * max(d0, eps_d))


def contraction_residual(
    cert: MetricCertificate,
    x_pred,
    reference,
    i: int,
    d0: float,
    beta: float,
    eps_d: float = 0.0,
    segments: int = DEFAULT_SEGMENTS,
) -> float:
    """``r_i`` for prediction step ``i``; ``+inf`` when the geodesic solve fails."""
    ref = reference[i + 1]
    x_star = ref.x_star if isinstance(ref, ReferencePoint) else np.asarray(ref, dtype=float)
    try:
        geo = geodesic(cert, np.asarray(x_pred)[i + 1], x_star, segments)
    except ValueError:
        return float("inf")
    if not geo.converged or not np.isfinite(geo.length):
        return float("inf")
    return geo.length - contraction_bound(i, d0, beta, eps_d)


def _batch_residuals(problem: MpcProblem, x_pred: np.ndarray, d0: float) -> np.ndarray:
    """All ``r_i`` from straight-line-initialised geodesics, ``+inf`` on failure."""
    cert = problem.cert
    inside = np.all(
        (x_pred[1:] >= problem.model.state_box.inflate(INFLATION).lower)
        & (x_pred[1:] <= problem.model.state_box.inflate(INFLATION).upper),
        axis=1,
    )
    nodes, energy, conv, _, _ = solve_geodesics(cert, x_pred[1:], problem.x_ref[1:], problem.segments)
    lengths = _lengths(cert, nodes, energy)
    bounds = np.array([contraction_bound(i, d0, problem.beta, problem.eps_d) for i in range(problem.horizon_n)])
    r = lengths - bounds
    r[~(conv & inside & np.isfinite(lengths))] = np.inf
    return r


def _lengths(cert, nodes, energy) -> np.ndarray:
    out = np.full(len(nodes), np.inf)
    ok = np.isfinite(energy)
    if ok.any():
        d = np.diff(nodes[ok], axis=1)
        mids = 0.5 * (nodes[ok][:, 1:] + nodes[ok][:, :-1])
        m = metric_at(cert, mids)
        out[ok] = np.sqrt(np.maximum(np.einsum("bji,bjik,bjk->bj", d, m, d), 0.0)).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# solver


def ccm_rollout(problem: MpcProblem):
    """Inputs and predicted states of the contraction-metric controller along the forecast."""
    x = problem.x0
    us, xs = [], [x]
    saturated = False
    for i in range(problem.horizon_n):
        act = ccm_control(
            problem.cert, problem.model, x, problem.reference[i], problem.forecast[i], problem.segments
        )
        saturated |= act.saturated
        us.append(act.u)
        x = step(problem.model, x, act.u, problem.forecast[i])
        xs.append(x)
    return np.array(us).reshape(problem.horizon_n, problem.model.input_dim), np.array(xs), saturated


@dataclass
class _Evaluation:
    x: np.ndarray
    cost: float
    cost_grad: np.ndarray  # (N*m,)
    con: np.ndarray  # normalised contraction slack 1 - d_i / bound_i, (N,)
    con_jac: np.ndarray  # (N, N*m)
    box: np.ndarray  # normalised state-box slack, (2*N*n,)
    box_jac: np.ndarray  # (2*N*n, N*m)


class _Evaluator:
    """Cost, constraint values and analytic derivatives for one problem.

    Geodesics are warm-started from the previous call's paths with their
    free endpoints moved, which typically cuts the inner solve to one or two
    Newton steps. Results are cached for the last decision vector.
    """

    def __init__(self, problem: MpcProblem, d0: float, cost_scale: float):
        self.p = problem
        self.bounds = np.array(
            [contraction_bound(i, d0, problem.beta, problem.eps_d) for i in range(problem.horizon_n)]
        )
        self.scale = cost_scale
        self.nodes = None
        self.evaluations = 0
        self._key = None
        self._last = None
        box = problem.model.state_box
        self.lo, self.hi = box.lower, box.upper
        self.width = np.maximum(box.upper - box.lower, 1e-12)
        geo_box = box.inflate(INFLATION)
        self.geo_lo, self.geo_hi = geo_box.lower, geo_box.upper

    def _distances(self, ends_x: np.ndarray):
        p = self.p
        # outside the inflated box the metric is not certified; the state-box
        # constraint is what pulls such predictions back
        starts = np.clip(ends_x, self.geo_lo, self.geo_hi)
        init = None
        if self.nodes is not None:
            s = np.linspace(0.0, 1.0, p.segments + 1)[None, :, None]
            init = self.nodes + (1.0 - s) * (starts - self.nodes[:, 0])[:, None, :]
        nodes, energy, _, _, _ = solve_geodesics(p.cert, starts, p.x_ref[1:], p.segments, init=init)
        if not np.all(np.isfinite(energy)):
            nodes, energy, _, _, _ = solve_geodesics(p.cert, starts, p.x_ref[1:], p.segments)
        lengths = _lengths(p.cert, nodes, energy)
        if not np.all(np.isfinite(lengths)):
            self.nodes = None
            return lengths, np.zeros_like(starts)
        self.nodes = nodes
        inside = np.all((ends_x >= self.geo_lo) & (ends_x <= self.geo_hi), axis=1)
        return lengths, endpoint_length_gradient(p.cert, nodes) * inside[:, None]

    def __call__(self, z: np.ndarray) -> _Evaluation:
        key = z.tobytes()
        if key == self._key:
            return self._last
        self.evaluations += 1
        p = self.p
        big_n, m, n = p.horizon_n, p.model.input_dim, p.model.state_dim
        u = z.reshape(big_n, m)
        x = predict(p.model, p.x0, u, p.forecast)
        sens = _sensitivities(p.model, x)
        u_full = np.vstack([u, np.zeros((1, m))])
        gx, gu = p.cost.gradients(x, u_full, p.x_ref)
        cost = float(p.cost.value(x, u_full, p.x_ref).sum()) / self.scale
        cost_grad = (gu[:-1] + np.einsum("itjk,ij->tk", sens, gx)).ravel() / self.scale

        lengths, dlen = self._distances(x[1:])
        con = 1.0 - lengths / self.bounds
        con_jac = -np.einsum("itjk,ij->itk", sens[1:], dlen).reshape(big_n, big_n * m) / self.bounds[:, None]
        s_flat = np.moveaxis(sens[1:], 2, 1).reshape(big_n * n, big_n * m) / np.tile(self.width, big_n)[:, None]
        box = np.concatenate([((x[1:] - self.lo) / self.width).ravel(), ((self.hi - x[1:]) / self.width).ravel()])
        box_jac = np.vstack([s_flat, -s_flat])
        self._key, self._last = key, _Evaluation(x, cost, cost_grad, con, con_jac, box, box_jac)
        return self._last


def _input_bounds(problem: MpcProblem):
    ubox = problem.model.input_box
    lo = np.tile(ubox.lower, problem.horizon_n)
    hi = np.tile(ubox.upper, problem.horizon_n)
    return lo, hi


def _slsqp_solve(problem: MpcProblem, start, d0, cost_scale, max_iter):
    ev = _Evaluator(problem, d0, cost_scale)
    lo, hi = _input_bounds(problem)
    z0 = np.clip(np.asarray(start, dtype=float).ravel(), lo, hi)
    res = minimize(
        lambda z: ev(z).cost,
        z0,
        jac=lambda z: ev(z).cost_grad,
        method="SLSQP",
        bounds=list(zip(lo, hi)),
        constraints=[{
            "type": "ineq",
            "fun": lambda z: np.concatenate([ev(z).con - TIGHTENING, ev(z).box]),
            "jac": lambda z: np.vstack([ev(z).con_jac, ev(z).box_jac]),
        }],
        options={"maxiter": max_iter, "ftol": 1e-9},
    )
    z = np.clip(res.x, lo, hi)
    return z.reshape(problem.horizon_n, -1), (), ev.evaluations


def _penalty_solve(problem: MpcProblem, start, d0, cost_scale, max_iter):
    """Augmented-Lagrangian outer loop with L-BFGS-B inner solves (input bounds by projection).

    Each outer iterate is warm-started from the last accepted one and is
    accepted only if it does not increase the largest contraction violation,
    so the recorded violation history is monotone. Multipliers are updated
    after accepted iterates; the weight grows when the violation stalls.
    """
    ev = _Evaluator(problem, d0, cost_scale)
    lo, hi = _input_bounds(problem)
    bounds = list(zip(lo, hi))
    z = np.clip(np.asarray(start, dtype=float).ravel(), lo, hi)

    def slack(e):
        # g <= 0 is feasible
        return np.concatenate([TIGHTENING - e.con, -e.box]), np.vstack([-e.con_jac, -e.box_jac])

    def objective(z, lam, mu):
        e = ev(z)
        g, g_jac = slack(e)
        shifted = np.maximum(0.0, lam + mu * g)
        val = e.cost + (shifted @ shifted - lam @ lam) / (2.0 * mu)
        return val, e.cost_grad + shifted @ g_jac

    def violation(z):
        e = ev(z)
        return float(np.max(np.maximum(0.0, -e.con * ev.bounds), initial=0.0))

    lam = np.zeros(problem.horizon_n * (1 + 2 * problem.model.state_dim))
    mu = PENALTY_START
    history = []
    best = np.inf
    g_prev = np.inf
    for _ in range(PENALTY_OUTER):
        res = minimize(objective, z, args=(lam, mu), jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-10})
        cand = violation(res.x)
        g, _ = slack(ev(res.x))
        g_max = float(np.max(g, initial=0.0))
        if cand <= best:
            moved = float(np.max(np.abs(res.x - z)))
            z, best = res.x, cand
            lam = np.maximum(0.0, lam + mu * g)
            if g_max <= 0.0 and moved <= 1e-7:
                history.append(best)
                break
        history.append(best)
        if g_max > 0.25 * g_prev or cand > best:
            mu = min(mu * PENALTY_GROWTH, PENALTY_MAX)
        g_prev = max(g_max, 0.0)
    return z.reshape(problem.horizon_n, -1), tuple(history), ev.evaluations


SOLVERS = {"slsqp": _slsqp_solve, "penalty": _penalty_solve}


def _total_cost(problem: MpcProblem, u_seq, x_pred) -> float:
    m = problem.model.input_dim
    u_full = np.vstack([np.asarray(u_seq).reshape(-1, m), np.zeros((1, m))])
    return float(problem.cost.value(x_pred, u_full, problem.x_ref).sum())


def _admissible(problem: MpcProblem, u_seq, d0):
    x = predict(problem.model, problem.x0, u_seq, problem.forecast)
    box = problem.model.state_box
    in_box = bool(np.all(x[1:] >= box.lower) and np.all(x[1:] <= box.upper))
    r = _batch_residuals(problem, x, d0)
    return in_box and bool(np.all(r <= RESIDUAL_TOL)), x, r, in_box


def _restore(problem: MpcProblem, u_bad, u_good, d0, rounds: int = 20):
    """Bisect on the segment from an admissible sequence towards a cheaper inadmissible one."""
    lo, hi = 0.0, 1.0
    best = None
    for _ in range(rounds):
        t = 0.5 * (lo + hi)
        cand = u_good + t * (u_bad - u_good)
        ok, x, r, _ = _admissible(problem, cand, d0)
        if ok:
            lo, best = t, (cand, x, r)
        else:
            hi = t
    return best


def solve(problem: MpcProblem, method: str = "slsqp", max_iter: int = 50) -> MpcSolution:
    """Multi-start solve (warm start, contraction-controller rollout, zeros).

    Each start's result is checked with freshly initialised geodesics; an
    inadmissible result is pulled back towards the admissible rollout by
    bisection. The cheapest admissible candidate wins. With no admissible
    candidate the rollout itself is returned as ``fallback_ccm``, or
    ``infeasible_boxes`` if even the rollout leaves the state box.
    """
    try:
        solver = SOLVERS[method]
    except KeyError:
        raise ValueError(f"unknown MPC method {method!r}; choose from {sorted(SOLVERS)}") from None
    p = problem
    d0 = geodesic(p.cert, p.x0, p.x_ref[0], p.segments).length
    u_ccm, x_ccm, _ = ccm_rollout(p)
    ccm_ok, _, r_ccm, ccm_in_box = _admissible(p, u_ccm, d0)
    cost_ccm = _total_cost(p, u_ccm, x_ccm)
    cost_scale = max(cost_ccm, 1e-12)

    starts = [] if p.warm_start is None else [p.warm_start]
    for s in (u_ccm, np.zeros_like(u_ccm)):
        if not any(np.array_equal(s, t) for t in starts):
            starts.append(s)

    candidates = [(cost_ccm, u_ccm, x_ccm, r_ccm)] if ccm_ok else []
    evaluations, history = 0, ()
    for s in starts:
        u_opt, hist, nev = solver(p, s, d0, cost_scale, max_iter)
        evaluations += nev
        history = history or hist
        ok, x, r, _ = _admissible(p, u_opt, d0)
        if ok:
            candidates.append((_total_cost(p, u_opt, x), u_opt, x, r))
        elif ccm_ok:
            restored = _restore(p, u_opt, u_ccm, d0)
            if restored is not None:
                u_r, x_r, r_r = restored
                candidates.append((_total_cost(p, u_r, x_r), u_r, x_r, r_r))

    if candidates:
        cost, u, x, r = min(candidates, key=lambda c: c[0])
        status = STATUS_OPTIMAL
    else:
        u, x, r, cost = u_ccm, x_ccm, r_ccm, cost_ccm
        status = STATUS_FALLBACK if ccm_in_box else STATUS_INFEASIBLE_BOXES
    return MpcSolution(
        u_seq=u, x_pred=x, r_residuals=r, cost=cost, status=status, d0=d0,
        evaluations=evaluations, penalty_history=history, ccm_u_seq=u_ccm,
    )


def receding_step(problem: MpcProblem, **kwargs):
    """Solve and return ``(first input, solution)``."""
    sol = solve(problem, **kwargs)
    return sol.u_seq[0].copy(), sol
