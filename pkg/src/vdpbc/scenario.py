"""Scenario files: flat `section.key = value` text validated by a pydantic schema.

    # single flexible joint
    name = table1_k31
    model.link_inertia = 0.031     # kg m^2
    model.stiffness = 31           # N m/rad
    controller.link_rate = 10
    integrator.dt = 1e-4

Blank lines and `#` comments are ignored. Keys are dotted paths into the
schema below; unknown keys and repeated keys are errors.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .control import ControllerConfig, SinusoidalTrajectory, on_reference_state
from .exceptions import DomainError
from .phmech import ConstantInertiaModel, FjrModel, GravityPotential
from .sim import IntegratorConfig

__all__ = ["ScenarioError", "Scenario", "parse_text", "load_scenario", "bundled_scenarios"]


class ScenarioError(DomainError):
    """Malformed or invalid scenario; the message names the offending field."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    link_inertia: float = Field(0.031, gt=0)
    rotor_inertia: float = Field(0.004, gt=0)
    link_friction: float = Field(0.2, ge=0)
    rotor_friction: float = Field(0.007, ge=0)
    nominal_load: float = Field(0.8, ge=0)
    stiffness: float = Field(31.0, gt=0)
    motor_input: float = Field(1.0, gt=0)


class ControllerSection(_Section):
    link_rate: float = 10.0
    motor_rate: float = 15.0
    link_metric: float = 20.0
    motor_metric: float = 60.0
    link_damping: float = 0.6
    motor_damping: float = 0.3
    derivatives: Literal["analytic", "finite_difference"] = "analytic"


class TrajectorySection(_Section):
    amplitude: float = float(np.pi / 4)
    frequency: float = 1.0
    phase: float = 0.0
    offset: float = 0.0


class IntegratorSection(_Section):
    dt: float = Field(1e-4, gt=0)
    t_end: float = Field(10.0, gt=0)
    scheme: Literal["rk4", "euler"] = "rk4"
    record_stride: int = Field(10, ge=1)


class InitialSection(_Section):
    on_reference: bool = False
    q_l: float = 0.0
    q_m: float = 0.0
    p_l: float = 0.0
    p_m: float = 0.0


class OutputSection(_Section):
    dir: str = "."
    csv: str | None = None
    summary: str | None = None


class Scenario(_Section):
    name: str = "scenario"
    seed: int = 0
    model: ModelSection = ModelSection()
    controller: ControllerSection = ControllerSection()
    trajectory: TrajectorySection = TrajectorySection()
    integrator: IntegratorSection = IntegratorSection()
    initial: InitialSection = InitialSection()
    output: OutputSection = OutputSection()

    def build_model(self) -> FjrModel:
        m = self.model
        link = ConstantInertiaModel([[m.link_inertia]], [[m.link_friction]], GravityPotential([m.nominal_load]))
        motor = ConstantInertiaModel([[m.rotor_inertia]], [[m.rotor_friction]])
        return FjrModel(link, motor, [[m.stiffness]], [[m.motor_input]])

    def build_controller(self) -> ControllerConfig:
        return ControllerConfig(**self.controller.model_dump())

    def build_trajectory(self) -> SinusoidalTrajectory:
        return SinusoidalTrajectory(**self.trajectory.model_dump())

    def build_integrator(self) -> IntegratorConfig:
        return IntegratorConfig(**self.integrator.model_dump())

    def initial_state(self, model=None, cfg=None, traj=None) -> np.ndarray:
        if self.initial.on_reference:
            return on_reference_state(model or self.build_model(), cfg or self.build_controller(), traj or self.build_trajectory())
        i = self.initial
        return np.array([i.q_l, i.q_m, i.p_l, i.p_m])

    def with_overrides(self, overrides: dict) -> "Scenario":
        """Copy with dotted-key overrides applied and revalidated."""
        data = self.model_dump()
        for key, value in overrides.items():
            _assign(data, key, value)
        return validate(data)


def _assign(tree: dict, key: str, value):
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ScenarioError(f"{key}: '{part}' is a value, not a section")
        node = nxt
    node[parts[-1]] = value


def parse_text(text: str) -> dict:
    """Nested dict of raw string values from scenario text."""
    tree: dict = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ScenarioError(f"line {lineno}: expected 'key = value'")
        if key in seen:
            raise ScenarioError(f"line {lineno}: {key} given twice")
        seen.add(key)
        _assign(tree, key, value)
    return tree


def validate(data: dict) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        where = ".".join(str(p) for p in err["loc"])
        raise ScenarioError(f"{where}: {err['msg']}") from None


def bundled_scenarios() -> list:
    return sorted(p.name[:-4] for p in resources.files("vdpbc.scenarios").iterdir() if p.name.endswith(".scn"))


def load_scenario(path) -> Scenario:
    """Load a scenario file, or a bundled scenario by name (e.g. 'table1_k31')."""
    p = Path(path)
    if p.exists():
        text = p.read_text()
    elif str(path) in bundled_scenarios():
        text = resources.files("vdpbc.scenarios").joinpath(f"{path}.scn").read_text()
    else:
        raise ScenarioError(f"scenario file not found: {path}")
    return validate(parse_text(text))
