"""Assemble the full operator stack from an experiment configuration."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .config import ExperimentConfig
from .fem import assemble, build_mesh, mass_factor, warn_if_advection_dominated
from .oed import DesignProblem, NoiseModel, config_hash_bytes
from .prior import PriorOperator, WhitenedForwardMap
from .transport import ForwardMap, VelocityField, make_observation_setup, synthesize_data


def gaussian_bumps(nodes: np.ndarray, bumps: list) -> np.ndarray:
    """Sum of isotropic Gaussian bumps evaluated at the mesh nodes."""
    field = np.zeros(nodes.shape[0])
    for bump in bumps:
        c = np.asarray(bump["center"], dtype=float)
        width = float(bump["width"])
        amp = float(bump["amplitude"])
        d2 = np.sum((nodes - c) ** 2, axis=1)
        field += amp * np.exp(-d2 / (2.0 * width**2))
    return field


@dataclass
class Problem:
    """Everything a command or test needs for one configuration."""

    config: ExperimentConfig
    mesh: object
    ops: object
    mass: object
    velocity: VelocityField
    obs: object
    forward: ForwardMap
    prior: PriorOperator
    G: WhitenedForwardMap
    theta_true: np.ndarray
    seeds: dict

    @cached_property
    def sigma(self) -> np.ndarray:
        """Per-sensor noise std for the design model.

        noise.sigma_rel (default: noise.pct) times the peak clean
        measurement, identical for all sensors.
        """
        y_clean = self.forward.apply(self.theta_true)
        peak = float(np.max(np.abs(y_clean)))
        rel = self.config.noise.sigma_rel
        if rel is None:
            rel = self.config.noise.pct
        if peak == 0.0 or rel <= 0.0:
            # keep the noise model valid even for noiseless synthetic studies
            return np.full(self.obs.n_s, max(peak, 1.0) * 1e-12)
        return np.full(self.obs.n_s, rel * peak)

    @cached_property
    def design(self) -> DesignProblem:
        return DesignProblem(self.G, NoiseModel(self.sigma), n_t=self.obs.n_t)

    def synthesize(self):
        """(y_obs, sigma) with the seeded noise generator."""
        return synthesize_data(
            self.forward, self.theta_true, self.config.noise.pct, self.seeds["noise"]
        )

    def z_config_hash(self) -> bytes:
        """Hash of the configuration subset that determines z."""
        cfg = self.config
        payload = "|".join(
            [
                cfg.canonical_json_section("mesh"),
                cfg.canonical_json_section("mass"),
                cfg.canonical_json_section("pde"),
                cfg.canonical_json_section("velocity"),
                cfg.canonical_json_section("prior"),
                cfg.canonical_json_section("sensors"),
                cfg.canonical_json_section("obs"),
                cfg.canonical_json_section("noise"),
                cfg.canonical_json_section("theta_true"),
            ]
        )
        return config_hash_bytes(payload)


def build_problem(config: ExperimentConfig) -> Problem:
    mesh = build_mesh(config.mesh.nx, config.mesh.holes)
    velocity = VelocityField(amplitude=config.velocity.amplitude, holes=mesh.holes)
    ops = assemble(mesh, velocity)
    warn_if_advection_dominated(abs(config.velocity.amplitude), mesh.h, config.pde.kappa)
    mass = mass_factor(ops.M, config.mass.mode)
    obs = make_observation_setup(
        mesh,
        config.sensor_coordinates(),
        config.obs.times,
        config.pde.T,
        config.pde.n_steps,
    )
    forward = ForwardMap(ops, mass, obs, config.pde.kappa)
    prior = PriorOperator(ops, mass, config.prior.alpha, config.prior.beta)
    G = WhitenedForwardMap(forward, prior)
    theta_true = gaussian_bumps(mesh.nodes, config.theta_true.bumps)
    return Problem(
        config=config,
        mesh=mesh,
        ops=ops,
        mass=mass,
        velocity=velocity,
        obs=obs,
        forward=forward,
        prior=prior,
        G=G,
        theta_true=theta_true,
        seeds=config.derived_seeds(),
    )
