"""Discrete-time control-affine models with an exogenous (disturbance) input.

All models have the form ``x+ = f(x) + B_u u + B_v v`` with constant input
matrices. ``drift`` and ``jacobian`` callables must broadcast over leading
axes: ``drift(x)`` maps ``(..., n) -> (..., n)`` and ``jacobian(x)`` maps
``(..., n) -> (..., n, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """Raised when arguments do not match the model's dimensions."""


@dataclass(frozen=True)
class Box:
    """Per-coordinate closed interval set ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ContractViolation("box bounds must be 1-d arrays of equal length")
        if np.any(lo > hi):
            raise ContractViolation(f"empty box: lower {lo} exceeds upper {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[float]]) -> "Box":
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def clamp(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def inflate(self, factor: float) -> "Box":
        half = 0.5 * (self.upper - self.lower) * factor
        return Box(self.center - half, self.center + half)

    def vertices(self) -> np.ndarray:
        """Corner points, shape ``(2**dim, dim)``; a single empty row for ``dim == 0``."""
        if self.dim == 0:
            return np.zeros((1, 0))
        return np.array(list(product(*zip(self.lower, self.upper))), dtype=float)

    def grid(self, points_per_dim: int) -> np.ndarray:
        axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def as_pairs(self) -> list[list[float]]:
        return [[float(lo), float(hi)] for lo, hi in zip(self.lower, self.upper)]


@dataclass(frozen=True)
class SystemModel:
    state_dim: int
    input_dim: int
    dist_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_matrix: np.ndarray
    dist_matrix: np.ndarray
    jacobian: Callable[[np.ndarray], np.ndarray]
    state_box: Box
    input_box: Box
    dist_box: Box
    name: str = "model"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n, m, q = self.state_dim, self.input_dim, self.dist_dim
        bu = np.asarray(self.input_matrix, dtype=float).reshape(n, m)
        bv = np.asarray(self.dist_matrix, dtype=float).reshape(n, q)
        object.__setattr__(self, "input_matrix", bu)
        object.__setattr__(self, "dist_matrix", bv)
        if (self.state_box.dim, self.input_box.dim, self.dist_box.dim) != (n, m, q):
            raise ContractViolation("box dimensions do not match the model dimensions")


@dataclass(frozen=True)
class DifferentialState:
    base_state: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.delta)):
            raise ContractViolation("tangent vector must be finite")


@dataclass(frozen=True)
class LotkaVolterraParams:
    alpha_lv: float = 1.0
    beta_lv: float = 0.001
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractViolation("sampling period tau must be positive")


def _vec(x, dim: int, what: str) -> np.ndarray:
    if dim == 0:
        arr = np.asarray([] if x is None else x, dtype=float)
        if arr.size:
            raise ContractViolation(f"{what} must be empty for a zero-dimensional space")
        return np.zeros(arr.shape[:-1] + (0,)) if arr.ndim > 1 else np.zeros(0)
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 and dim == 1:
        arr = arr.reshape(1)
    if arr.ndim == 0 or arr.shape[-1] != dim:
        raise ContractViolation(f"{what} has shape {arr.shape}, expected trailing dimension {dim}")
    return arr


def step(model: SystemModel, x, u, v) -> np.ndarray:
    """One step of ``x+ = f(x) + B_u u + B_v v``. No clamping to the boxes."""
    x = _vec(x, model.state_dim, "state")
    u = _vec(u, model.input_dim, "input")
    v = _vec(v, model.dist_dim, "disturbance")
    return model.drift(x) + u @ model.input_matrix.T + v @ model.dist_matrix.T


def jacobian_a(model: SystemModel, x) -> np.ndarray:
    return model.jacobian(_vec(x, model.state_dim, "state"))


def differential_step(model: SystemModel, x, dx, du, dv) -> np.ndarray:
    """Propagate tangent vectors: ``A(x) dx + B_u du + B_v dv``."""
    a = jacobian_a(model, x)
    dx = _vec(dx, model.state_dim, "state tangent")
    du = _vec(du, model.input_dim, "input tangent")
    dv = _vec(dv, model.dist_dim, "disturbance tangent")
    return (
        np.einsum("...ij,...j->...i", a, dx)
        + du @ model.input_matrix.T
        + dv @ model.dist_matrix.T
    )


def finite_difference_jacobian(drift: Callable, x, h: float = 1e-6) -> np.ndarray:
    """Central differences with per-coordinate step ``h * (1 + |x_i|)``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    jac = np.empty((n, n))
    for i in range(n):
        hi = h * (1.0 + abs(x[i]))
        e = np.zeros(n)
        e[i] = hi
        jac[:, i] = (drift(x + e) - drift(x - e)) / (2.0 * hi)
    return jac


# ---------------------------------------------------------------------------
# registry


def lotka_volterra(
    params: LotkaVolterraParams | None = None,
    state_box=((0.1, 2.0), (0.1, 2.0)),
    input_box=((-1.0, 1.0),),
    dist_box=((-0.5, 0.5),),
) -> SystemModel:
    """Euler-discretised predator/prey model; input and disturbance act on x1."""
    p = params or LotkaVolterraParams()
    ta, tb = p.tau * p.alpha_lv, p.tau * p.beta_lv

    def drift(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack(
            [
                (1 + ta + tb) * x1 - ta * x1 * x2,
                (1 - ta + tb) * x2 + ta * x1 * x2,
            ],
            axis=-1,
        )

    def jacobian(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack(
            [
                np.stack([1 + ta + tb - ta * x2, -ta * x1], axis=-1),
                np.stack([ta * x2, 1 - ta + tb + ta * x1], axis=-1),
            ],
            axis=-2,
        )

    return SystemModel(
        state_dim=2,
        input_dim=1,
        dist_dim=1,
        drift=drift,
        input_matrix=np.array([[1.0], [0.0]]),
        dist_matrix=np.array([[1.0], [0.0]]),
        jacobian=jacobian,
        state_box=Box.from_pairs(state_box),
        input_box=Box.from_pairs(input_box),
        dist_box=Box.from_pairs(dist_box),
        name="lotka_volterra",
        params={"alpha_lv": p.alpha_lv, "beta_lv": p.beta_lv, "tau": p.tau},
    )


def scalar_linear(
    a: float = 1.1,
    b: float | None = 1.0,
    bv: float | None = None,
    state_box=((-2.0, 2.0),),
    input_box=((-1.0, 1.0),),
    dist_box=None,
) -> SystemModel:
    """``x+ = a x + b u + bv v``; ``b=None`` drops the input, ``bv=None`` the disturbance."""
    m = 0 if b is None else 1
    q = 0 if bv is None else 1

    def drift(x):
        return a * x

    def jacobian(x):
        return np.broadcast_to(np.array([[a]]), x.shape[:-1] + (1, 1)).copy()

    if dist_box is None:
        dist_box = ((-0.5, 0.5),) if q else ()
    return SystemModel(
        state_dim=1,
        input_dim=m,
        dist_dim=q,
        drift=drift,
        input_matrix=np.full((1, m), b if m else 0.0),
        dist_matrix=np.full((1, q), bv if q else 0.0),
        jacobian=jacobian,
        state_box=Box.from_pairs(state_box),
        input_box=Box.from_pairs(input_box if m else ()),
        dist_box=Box.from_pairs(dist_box if q else ()),
        name="scalar_linear",
        params={"a": a, "b": b, "bv": bv},
    )


def polynomial_model(
    terms: Sequence[Sequence[tuple[float, Sequence[int]]]],
    input_matrix,
    dist_matrix,
    state_box,
    input_box,
    dist_box,
) -> SystemModel:
    """Drift given as a sum of monomials per state component.

    ``terms[i]`` is a list of ``(coefficient, exponents)`` pairs so that
    ``f_i(x) = sum_c c * prod_j x_j**exponents[j]``.
    """
    n = len(terms)
    coeffs, exps, rows = [], [], []
    for i, comp in enumerate(terms):
        for c, e in comp:
            e = tuple(int(k) for k in e)
            if len(e) != n or min(e, default=0) < 0:
                raise ContractViolation(f"bad exponent tuple {e} for a {n}-state model")
            coeffs.append(float(c))
            exps.append(e)
            rows.append(i)
    coeffs_a = np.array(coeffs)
    exps_a = np.array(exps, dtype=int).reshape(-1, n)
    rows_a = np.array(rows, dtype=int)

    def drift(x):
        mono = np.prod(x[..., None, :] ** exps_a, axis=-1)
        out = np.zeros(x.shape[:-1] + (n,))
        contrib = mono * coeffs_a
        for i in range(n):
            out[..., i] = contrib[..., rows_a == i].sum(axis=-1)
        return out

    def jacobian(x):
        out = np.zeros(x.shape[:-1] + (n, n))
        for j in range(n):
            d_exps = exps_a.copy()
            scale = d_exps[:, j].astype(float)
            d_exps[:, j] = np.maximum(d_exps[:, j] - 1, 0)
            mono = np.prod(x[..., None, :] ** d_exps, axis=-1) * scale * coeffs_a
            for i in range(n):
                out[..., i, j] = mono[..., rows_a == i].sum(axis=-1)
        return out

    bu = np.asarray(input_matrix, dtype=float).reshape(n, -1)
    bv = np.asarray(dist_matrix, dtype=float).reshape(n, -1)
    return SystemModel(
        state_dim=n,
        input_dim=bu.shape[1],
        dist_dim=bv.shape[1],
        drift=drift,
        input_matrix=bu,
        dist_matrix=bv,
        jacobian=jacobian,
        state_box=Box.from_pairs(state_box),
        input_box=Box.from_pairs(input_box),
        dist_box=Box.from_pairs(dist_box),
        name="polynomial",
        params={"terms": [[(c, list(e)) for c, e in comp] for comp in terms]},
    )
