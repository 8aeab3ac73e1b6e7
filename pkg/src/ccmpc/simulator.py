"""Closed-loop simulation against the true disturbance stream, with monitors and CSV traces.

Each step the true disturbance is drawn, the forecast buffer is advanced
(and, by default, its head replaced by the measurement), a control is
computed, and the plant is stepped with the true disturbance. The state is
then clamped to the state box, and any clamping is counted.

Monitors are recorded at step ``k`` from the distances at ``k - 1`` and
``k``. For the MPC controller the previous distance is floored at ``eps_d``
because its constraint only asks for contraction outside that tube. The
ball-bound input deviation is the gap between the input the controller would
have needed for the true disturbance and the one it computed from its own
estimate, ``B_u^+ B_v (v_true - v_used)``; it is zero when the head is measured.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import forecast as fc
from .ccm_controller import ReferencePoint, ball_bound_monitor, ccm_control, decay_monitor, input_deviation
from .cmpc import STATUS_INFEASIBLE_BOXES, MpcProblem, make_cost, receding_step, shift_warm_start, default_eps_d
from .dynamics import ContractViolation, SystemModel, step
from .metric import MetricCertificate, certificate_id
from .riemann import DEFAULT_SEGMENTS

log = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1
TRACE_COLUMNS = ("k", "x1", "x2", "x1s", "x2s", "u", "nu_true", "nu_hat", "d_geo", "decay_res", "ball_res", "status", "cost")
CONTROLLERS = ("ccm", "cmpc")


@dataclass(frozen=True)
class SimulationConfig:
    steps: int = 400
    controller: str = "cmpc"
    scenario: fc.DisturbanceScenario = field(default_factory=fc.DisturbanceScenario)
    initial_state: tuple = (1.2, 0.8)
    reference_initial: tuple = (0.99, 0.99)
    horizon_n: int = 5
    horizon_h: int | None = None
    cost: str = "input_energy"
    cost_params: dict = field(default_factory=dict)
    eps_d: float | None = None
    segments: int = DEFAULT_SEGMENTS
    measure_disturbance: bool = True
    mpc_method: str = "slsqp"
    forecast_table: dict | None = None
    trace_path: str | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.horizon_n < 1:
            raise ValueError("horizon_n must be at least 1")
        if self.horizon_h is not None and self.horizon_h < self.horizon_n:
            raise ValueError("forecast horizon H must be at least the MPC horizon N")

    @property
    def forecast_horizon(self) -> int:
        return self.horizon_n if self.horizon_h is None else self.horizon_h

    def fingerprint(self) -> str:
        data = asdict(self)
        data.pop("trace_path")
        blob = json.dumps(data, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class SimulationTrace:
    header: dict
    k: list = field(default_factory=list)
    x: list = field(default_factory=list)
    x_star: list = field(default_factory=list)
    u: list = field(default_factory=list)
    u_star: list = field(default_factory=list)
    nu_true: list = field(default_factory=list)
    nu_hat: list = field(default_factory=list)
    nu_used: list = field(default_factory=list)
    d_geo: list = field(default_factory=list)
    decay_res: list = field(default_factory=list)
    ball_res: list = field(default_factory=list)
    status: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    saturated: list = field(default_factory=list)
    clamped: int = 0
    halted: bool = False

    def __len__(self) -> int:
        return len(self.k)

    def array(self, name: str) -> np.ndarray:
        return np.array(getattr(self, name), dtype=float)

    @property
    def tracking_error(self) -> np.ndarray:
        """Per-step infinity-norm distance between plant and reference states."""
        return np.abs(self.array("x") - self.array("x_star")).max(axis=1)

    @property
    def forecast_error(self) -> np.ndarray:
        return self.array("nu_true") - self.array("nu_hat")

    def status_counts(self) -> dict:
        out: dict = {}
        for s in self.status:
            out[s] = out.get(s, 0) + 1
        return out


def generate_reference(model: SystemModel, x_star0, steps: int) -> list[ReferencePoint]:
    """Unforced orbit ``x*_{k+1} = f(x*_k)`` with ``u* = 0`` and ``v* = 0``; ``steps + 1`` points."""
    x = np.asarray(x_star0, dtype=float)
    zero_u, zero_v = np.zeros(model.input_dim), np.zeros(model.dist_dim)
    out = [ReferencePoint(x, zero_u, zero_v)]
    for _ in range(steps):
        x = step(model, x, zero_u, zero_v)
        out.append(ReferencePoint(x, zero_u, zero_v))
    return out


def empirical_l2_gain(state_error, dist_error, truncation: int | None = None) -> float | None:
    """``sum_k ||e_x,k|| / sum_k ||e_v,k||`` over ``k = 0..T``; ``None`` when the denominator is zero."""
    ex = np.asarray(state_error, dtype=float)
    ev = np.asarray(dist_error, dtype=float)
    ex = ex.reshape(len(ex), -1)
    ev = ev.reshape(len(ev), -1)
    if truncation is not None:
        ex, ev = ex[: truncation + 1], ev[: truncation + 1]
    den = float(np.linalg.norm(ev, axis=1).sum())
    if den == 0.0:
        return None
    return float(np.linalg.norm(ex, axis=1).sum()) / den


def trace_l2_gain(trace: SimulationTrace, truncation: int | None = None) -> float | None:
    return empirical_l2_gain(trace.array("x") - trace.array("x_star"), trace.forecast_error, truncation)


def _forecast_model(config: SimulationConfig):
    base = lambda k: fc.generate_forecast(config.scenario, k)  # noqa: E731
    if config.forecast_table:
        return fc.ReplayForecast({int(k): float(v) for k, v in config.forecast_table.items()}, base)
    return base


def run(config: SimulationConfig, model: SystemModel, cert: MetricCertificate) -> SimulationTrace:
    n, m, q = model.state_dim, model.input_dim, model.dist_dim
    x = np.asarray(config.initial_state, dtype=float)
    if x.shape != (n,) or not model.state_box.contains(x):
        raise ContractViolation(f"initial state {config.initial_state} is not in the state box")
    x_ref0 = np.asarray(config.reference_initial, dtype=float)
    if x_ref0.shape != (n,) or not model.state_box.contains(x_ref0):
        raise ContractViolation(f"reference initial state {config.reference_initial} is not in the state box")

    big_n, big_h = config.horizon_n, config.forecast_horizon
    reference = generate_reference(model, x_ref0, config.steps + big_h)
    cost = make_cost(config.cost, n, m, **config.cost_params)
    eps_d = default_eps_d(cert) if config.eps_d is None else config.eps_d
    predict_v = _forecast_model(config)
    trace = SimulationTrace(header={
        "schema_version": TRACE_SCHEMA_VERSION,
        "config_hash": config.fingerprint(),
        "seed": config.scenario.seed,
        "certificate": certificate_id(cert),
        "controller": config.controller,
        "model": model.name,
    })

    buffer = fc.initial_buffer(predict_v, big_h, q)
    warm = None
    d_prev = None
    u_tilde_prev = np.zeros(m)
    for k in range(config.steps):
        if k > 0:
            buffer = fc.advance(buffer, np.full(q, predict_v(k + big_h - 1)))
        nu_hat = buffer.values[0].copy()
        nu_true = np.full(q, fc.generate_true(config.scenario, k))
        if config.measure_disturbance:
            buffer = fc.replace_head(buffer, nu_true)
        nu_used = buffer.values[0].copy()
        ref = reference[k]

        if config.controller == "ccm":
            act = ccm_control(cert, model, x, ref, nu_used, config.segments)
            u, d_curr, status = act.u, act.distance, "ccm"
            saturated = act.saturated
        else:
            problem = MpcProblem(
                model=model, cert=cert, horizon_n=big_n, x0=x, reference=reference[k : k + big_n + 1],
                forecast=buffer.head(big_n), cost=cost, eps_d=eps_d, segments=config.segments, warm_start=warm,
            )
            u, sol = receding_step(problem, method=config.mpc_method)
            d_curr, status, saturated = sol.d0, sol.status, False
            warm = shift_warm_start(sol.u_seq)

        if d_prev is None:
            decay = ball = float("nan")
        else:
            floor = eps_d if config.controller == "cmpc" else 0.0
            d_eff = max(d_prev, floor)
            decay = decay_monitor(cert, d_eff, d_curr)
            ball = ball_bound_monitor(cert, d_eff, d_curr, u_tilde_prev, model.input_matrix)

        trace.k.append(k)
        trace.x.append(x.copy())
        trace.x_star.append(ref.x_star.copy())
        trace.u.append(np.asarray(u, dtype=float).copy())
        trace.u_star.append(ref.u_star.copy())
        trace.nu_true.append(nu_true)
        trace.nu_hat.append(nu_hat)
        trace.nu_used.append(nu_used)
        trace.d_geo.append(float(d_curr))
        trace.decay_res.append(decay)
        trace.ball_res.append(ball)
        trace.status.append(status)
        trace.cost.append(float(cost.value(x, np.asarray(u, dtype=float), ref.x_star)))
        trace.saturated.append(bool(saturated))

        if status == STATUS_INFEASIBLE_BOXES:
            log.error("step %d: no input keeps the prediction inside the state box; halting", k)
            trace.halted = True
            break

        x_next = step(model, x, u, nu_true)
        clamped = model.state_box.clamp(x_next)
        if np.any(clamped != x_next):
            trace.clamped += 1
            log.warning("step %d: state %s left the state box and was clamped", k, x_next)
        x = clamped
        u_tilde_prev = input_deviation(model, nu_true, nu_used) if q else np.zeros(m)
        d_prev = d_curr
    return trace


# ---------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    return format(float(v), ".17g")


def trace_to_csv(trace: SimulationTrace) -> str:
    """Render the trace with ``#`` header lines; only the first two state and first input/disturbance columns."""
    lines = [f"# ccmpc-trace schema_version {trace.header['schema_version']}"]
    for key in ("config_hash", "seed", "certificate", "controller", "model"):
        lines.append(f"# {key} {trace.header[key]}")
    lines.append(",".join(TRACE_COLUMNS))
    for i in range(len(trace)):
        x, xs = trace.x[i], trace.x_star[i]
        x1, x2 = x[0], x[1] if len(x) > 1 else float("nan")
        s1, s2 = xs[0], xs[1] if len(xs) > 1 else float("nan")
        u = trace.u[i][0] if len(trace.u[i]) else 0.0
        vt = trace.nu_true[i][0] if len(trace.nu_true[i]) else 0.0
        vh = trace.nu_hat[i][0] if len(trace.nu_hat[i]) else 0.0
        row = [str(trace.k[i])] + [_fmt(v) for v in (x1, x2, s1, s2, u, vt, vh, trace.d_geo[i],
                                                      trace.decay_res[i], trace.ball_res[i])]
        row += [trace.status[i], _fmt(trace.cost[i])]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_trace(trace: SimulationTrace, path) -> None:
    Path(path).write_text(trace_to_csv(trace), encoding="utf-8", newline="\n")
