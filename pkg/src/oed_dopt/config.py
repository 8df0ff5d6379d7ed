"""Experiment configuration: nested dataclasses, JSON round-trip, content hash.

Unknown keys are rejected; the resolved configuration (all defaults made
explicit) is what gets hashed and emitted next to every command's outputs, so
identical configs always map to identical artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class MeshConfig:
    nx: int = 10
    holes: list = field(default_factory=list)


@dataclass
class MassConfig:
    mode: str = "lumped"


@dataclass
class PdeConfig:
    kappa: float = 0.001
    T: float = 5.0
    n_steps: int = 50


@dataclass
class VelocityConfig:
    amplitude: float = 1.0


@dataclass
class PriorConfig:
    alpha: float = 2e-3
    beta: float = 0.1


@dataclass
class SensorsConfig:
    # either a regular grid of candidates (gx x gy points inset by margin)
    # or explicit coordinates
    grid: list = field(default_factory=lambda: [7, 5])
    margin: list = field(default_factory=lambda: [0.1, 0.1])
    coords: list | None = None


@dataclass
class ObsConfig:
    times: list = field(default_factory=lambda: [1.0, 2.0, 3.5])


@dataclass
class NoiseConfig:
    pct: float = 0.02
    # design-model noise scale as a multiple of the peak clean measurement;
    # defaults to pct.  Lets the OED noise model be set independently of the
    # synthetic-data noise (pct stays < 1, sigma_rel need not).
    sigma_rel: float | None = None


@dataclass
class TrueStateConfig:
    # sum of Gaussian bumps: amplitude * exp(-|x - center|^2 / (2 width^2))
    bumps: list = field(
        default_factory=lambda: [
            {"center": [0.35, 0.7], "width": 0.12, "amplitude": 1.0},
            {"center": [0.7, 0.3], "width": 0.1, "amplitude": 0.6},
        ]
    )


@dataclass
class SketchSection:
    k: int = 30
    p: int = 5
    q: int = 1
    seed: int | None = None  # None: derived from seeds.master


@dataclass
class OptConfig:
    method: str = "rand"  # eig | rand | frozen | dense
    penalty: str = "l1"  # l1 | cont
    gamma: float = 2.0
    cont_stages: int = 6
    tol: float = 1e-5
    max_iters: int = 200
    threshold: float = 0.03
    eig_k: int | None = None  # defaults to sketch.k
    frozen_k: int | None = None


@dataclass
class SeedsConfig:
    master: int = 20260810


_SECTIONS = {
    "mesh": MeshConfig,
    "mass": MassConfig,
    "pde": PdeConfig,
    "velocity": VelocityConfig,
    "prior": PriorConfig,
    "sensors": SensorsConfig,
    "obs": ObsConfig,
    "noise": NoiseConfig,
    "theta_true": TrueStateConfig,
    "sketch": SketchSection,
    "opt": OptConfig,
    "seeds": SeedsConfig,
}


@dataclass
class ExperimentConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    mass: MassConfig = field(default_factory=MassConfig)
    pde: PdeConfig = field(default_factory=PdeConfig)
    velocity: VelocityConfig = field(default_factory=VelocityConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    sensors: SensorsConfig = field(default_factory=SensorsConfig)
    obs: ObsConfig = field(default_factory=ObsConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    theta_true: TrueStateConfig = field(default_factory=TrueStateConfig)
    sketch: SketchSection = field(default_factory=SketchSection)
    opt: OptConfig = field(default_factory=OptConfig)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            payload = data.get(name, {})
            if not isinstance(payload, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(payload) - allowed
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            sections[name] = section_cls(**payload)
        return cls(**sections)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def canonical_json_section(self, name: str) -> str:
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section {name!r}")
        return json.dumps(
            dataclasses.asdict(getattr(self, name)), sort_keys=True, separators=(",", ":")
        )

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def resolved(self) -> dict:
        out = self.to_dict()
        out["content_hash"] = self.content_hash()
        return out

    def save_resolved(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.resolved(), f, indent=2, sort_keys=True)
            f.write("\n")

    # -- derived quantities --------------------------------------------------

    def derived_seeds(self) -> dict:
        """Per-purpose RNG seeds derived from the master seed."""
        state = np.random.SeedSequence(self.seeds.master).generate_state(4)
        seeds = {
            "noise": int(state[0]),
            "sketch": int(state[1]),
            "designs": int(state[2]),
            "eigs": int(state[3]),
        }
        if self.sketch.seed is not None:
            seeds["sketch"] = int(self.sketch.seed)
        return seeds

    def with_master_seed(self, master: int) -> "ExperimentConfig":
        cfg = ExperimentConfig.from_dict(self.to_dict())
        cfg.seeds.master = int(master)
        return cfg

    def sensor_coordinates(self) -> np.ndarray:
        s = self.sensors
        if s.coords is not None:
            coords = np.asarray(s.coords, dtype=float)
            if coords.ndim != 2 or coords.shape[1] != 2:
                raise ConfigError("sensors.coords must be a list of [x, y] pairs")
            return coords
        try:
            gx, gy = (int(v) for v in s.grid)
        except (TypeError, ValueError) as exc:
            raise ConfigError("sensors.grid must be [gx, gy]") from exc
        if gx < 1 or gy < 1:
            raise ConfigError("sensors.grid entries must be >= 1")
        mx, my = (float(v) for v in s.margin)
        if not (0 <= mx < 0.5 and 0 <= my < 0.5):
            raise ConfigError("sensors.margin entries must lie in [0, 0.5)")
        xs = np.linspace(mx, 1.0 - mx, gx)
        ys = np.linspace(my, 1.0 - my, gy)
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])
