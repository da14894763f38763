"""Scenario configuration: everything a reproducible run needs, in one
JSON-serializable object.  CLI flags override file values, which override
the dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .raster import RasterConfig
from .simworld import CameraModel, KinematicParams, WorldParams
from .spc import SpcConfig


@dataclass(frozen=True)
class EpisodeSpec:
    seed: int
    max_steps: int | None = None
    start_pose: tuple[float, float, float] | None = None  # (x, y, theta)

    def __post_init__(self):
        if self.start_pose is not None:
            object.__setattr__(self, "start_pose", tuple(float(v) for v in self.start_pose))


@dataclass(frozen=True)
class ScenarioSpec:
    profile: str = "straight"
    world: WorldParams = WorldParams()
    camera: CameraModel = CameraModel()
    raster: RasterConfig = RasterConfig()
    spc: SpcConfig = SpcConfig()
    kinematics: KinematicParams = KinematicParams()
    episodes: tuple[EpisodeSpec, ...] = (EpisodeSpec(seed=0),)
    max_steps: int = 400
    noise_flip_prob: float = 0.0
    start_lateral_jitter: float = 0.0  # meters, seeded per episode
    start_heading_jitter: float = 0.0  # radians, seeded per episode
    end_margin: float = 1.0
    out_dir: str | None = None  # default artifact directory, CLI --out wins

    def __post_init__(self):
        if self.profile not in ("straight", "curved"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if not self.episodes:
            raise ValueError("scenario needs at least one episode")
        object.__setattr__(self, "episodes", tuple(self.episodes))


_SECTIONS = {
    "world": WorldParams,
    "camera": CameraModel,
    "raster": RasterConfig,
    "spc": SpcConfig,
    "kinematics": KinematicParams,
}


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["episodes"] = [dataclasses.asdict(e) for e in spec.episodes]
    return d


def scenario_from_dict(data: dict) -> ScenarioSpec:
    if not isinstance(data, dict):
        raise ValueError("scenario must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"scenario section {key!r} must be an object")
            try:
                kwargs[key] = _SECTIONS[key](**value)
            except TypeError as exc:
                raise ValueError(f"scenario section {key!r}: {exc}") from None
        elif key == "episodes":
            try:
                kwargs[key] = tuple(EpisodeSpec(**e) for e in value)
            except TypeError as exc:
                raise ValueError(f"scenario episodes: {exc}") from None
        elif key in (
            "profile",
            "max_steps",
            "noise_flip_prob",
            "start_lateral_jitter",
            "start_heading_jitter",
            "end_margin",
            "out_dir",
        ):
            kwargs[key] = value
        else:
            raise ValueError(f"unknown scenario key {key!r}")
    return ScenarioSpec(**kwargs)


def load_scenario(path) -> ScenarioSpec:
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"scenario file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return scenario_from_dict(data)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def save_scenario(spec: ScenarioSpec, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(spec), indent=2, sort_keys=True) + "\n")
