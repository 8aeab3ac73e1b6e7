"""YAML tool configuration, validated with pydantic.

Unknown keys are rejected at every level. Relative paths are resolved
against the directory holding the config file. The only environment
override is ``CCMPC_OUTPUT_DIR``, which replaces ``io.output_dir``.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import dynamics
from .forecast import DisturbanceScenario, load_forecast_csv
from .simulator import SimulationConfig
from .synthesis import SynthesisConfig

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "CCMPC_OUTPUT_DIR"

Interval = tuple[float, float]


class ConfigError(ValueError):
    """The configuration file is missing, unreadable or does not validate."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    type: Literal["lotka_volterra", "scalar_linear", "polynomial"] = "lotka_volterra"
    params: dict = Field(default_factory=dict)
    state_box: Optional[list[Interval]] = None
    input_box: Optional[list[Interval]] = None
    dist_box: Optional[list[Interval]] = None

    @field_validator("state_box", "input_box", "dist_box")
    @classmethod
    def _nonempty(cls, boxes):
        for lo, hi in boxes or []:
            if lo > hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        return boxes

    def build(self) -> dynamics.SystemModel:
        boxes = {k: getattr(self, k) for k in ("state_box", "input_box", "dist_box") if getattr(self, k) is not None}
        p = dict(self.params)
        try:
            if self.type == "lotka_volterra":
                return dynamics.lotka_volterra(dynamics.LotkaVolterraParams(**p), **boxes)
            if self.type == "scalar_linear":
                return dynamics.scalar_linear(**p, **boxes)
            missing = {"terms", "input_matrix", "dist_matrix"} - set(p)
            if missing or set(boxes) != {"state_box", "input_box", "dist_box"}:
                raise ValueError("polynomial models need params terms/input_matrix/dist_matrix and all three boxes")
            return dynamics.polynomial_model(p["terms"], p["input_matrix"], p["dist_matrix"], **boxes)
        except TypeError as exc:
            raise ConfigError(f"model params: {exc}") from exc


class SynthesisSection(_Strict):
    mode: Literal["contraction", "dissipative"] = "contraction"
    beta: float = Field(0.1, gt=0.0, le=1.0)
    grid_points_per_dim: int = Field(8, ge=2)
    eps_feas: float = Field(1e-6, gt=0.0)
    alpha_gain: Optional[float] = Field(None, gt=0.0)
    w_degree: int = Field(2, ge=0)
    l_degree: int = Field(2, ge=0)
    max_condition: float = Field(1e3, gt=1.0)
    target_margin: Optional[float] = Field(None, gt=0.0)
    successor_sampling: Literal["vertices"] = "vertices"
    max_iters: int = Field(3000, ge=1)
    tol: float = Field(1e-12, gt=0.0)
    refine_rounds: int = Field(6, ge=0)
    refine_factor: int = Field(4, ge=2)

    @model_validator(mode="after")
    def _alpha_for_dissipative(self):
        if self.mode == "dissipative" and self.alpha_gain is None:
            raise ValueError("dissipative mode needs alpha_gain")
        return self

    def build(self) -> SynthesisConfig:
        return SynthesisConfig(**self.model_dump())


class MpcSection(_Strict):
    horizon: int = Field(5, ge=1)
    cost: Literal["input_energy", "input_tracking", "quadratic"] = "input_energy"
    cost_params: dict = Field(default_factory=dict)
    eps_d: Optional[float] = Field(None, gt=0.0)
    method: Literal["slsqp", "penalty"] = "slsqp"
    segments: int = Field(16, ge=1)


class ScenarioSection(_Strict):
    amplitude: float = 0.1
    frequency: float = 0.1
    noise_std: float = Field(0.1, ge=0.0)
    seed: int = Field(0, ge=0, lt=2**64)


class SimulationSection(_Strict):
    steps: int = Field(400, ge=1)
    controller: Literal["ccm", "cmpc"] = "cmpc"
    initial_state: list[float] = [1.2, 0.8]
    reference_initial: list[float] = [0.99, 0.99]
    forecast_horizon: Optional[int] = Field(None, ge=1)
    measure_disturbance: bool = True
    scenario: ScenarioSection = ScenarioSection()
    forecast_csv: Optional[str] = None


class IoSection(_Strict):
    output_dir: str = "."
    certificate: str = "certificate.txt"
    trace: str = "trace.csv"


class ToolConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    model: ModelSection = ModelSection()
    synthesis: SynthesisSection = SynthesisSection()
    mpc: MpcSection = MpcSection()
    simulation: SimulationSection = SimulationSection()
    io: IoSection = IoSection()

    @model_validator(mode="after")
    def _horizons(self):
        h = self.simulation.forecast_horizon
        if h is not None and h < self.mpc.horizon:
            raise ValueError(f"forecast horizon {h} is shorter than the MPC horizon {self.mpc.horizon}")
        return self


class LoadedConfig:
    """A validated config plus the directory its relative paths refer to."""

    def __init__(self, tool: ToolConfig, base_dir: Path):
        self.tool = tool
        self.base_dir = base_dir
        self._forecast_table = None
        if tool.simulation.forecast_csv is not None:
            path = self.resolve(tool.simulation.forecast_csv)
            if not path.is_file():
                raise ConfigError(f"forecast_csv {path} does not exist")
            self._forecast_table = load_forecast_csv(path)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        override = os.environ.get(OUTPUT_DIR_ENV)
        return Path(override) if override else self.resolve(self.tool.io.output_dir)

    @property
    def certificate_path(self) -> Path:
        return self.output_dir / self.tool.io.certificate

    @property
    def trace_path(self) -> Path:
        return self.output_dir / self.tool.io.trace

    def model(self) -> dynamics.SystemModel:
        return self.tool.model.build()

    def synthesis(self) -> SynthesisConfig:
        return self.tool.synthesis.build()

    def simulation(self, controller=None, seed=None, steps=None) -> SimulationConfig:
        sim, mpc = self.tool.simulation, self.tool.mpc
        scen = sim.scenario.model_dump()
        if seed is not None:
            scen["seed"] = seed
        return SimulationConfig(
            steps=sim.steps if steps is None else steps,
            controller=sim.controller if controller is None else controller,
            scenario=DisturbanceScenario(**scen),
            initial_state=tuple(sim.initial_state),
            reference_initial=tuple(sim.reference_initial),
            horizon_n=mpc.horizon,
            horizon_h=sim.forecast_horizon,
            cost=mpc.cost,
            cost_params=dict(mpc.cost_params),
            eps_d=mpc.eps_d,
            segments=mpc.segments,
            measure_disturbance=sim.measure_disturbance,
            mpc_method=mpc.method,
            forecast_table=self._forecast_table,
        )


def parse_config(text: str, base_dir: Path = Path(".")) -> LoadedConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    try:
        tool = ToolConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    return LoadedConfig(tool, base_dir)


def load_config(path) -> LoadedConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.resolve().parent)
