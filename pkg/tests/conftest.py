"""Shared fixtures: small assembled problems and dense oracles.

The fixtures are session-scoped; they build the operator stacks once and the
tests treat them as immutable.  Noise levels are chosen per fixture so the
spectra exercise the regime each test group needs (see comments).
"""

import warnings

import numpy as np
import pytest

from oed_dopt.config import ExperimentConfig
from oed_dopt.oed import DesignProblem, NoiseModel
from oed_dopt.problem import build_problem

warnings.filterwarnings("ignore", message="sketch subspace is numerically rank deficient")


def make_config(**overrides):
    base = {
        "mesh": {"nx": 6},
        "pde": {"kappa": 0.03, "T": 2.0, "n_steps": 20},
        "sensors": {"grid": [3, 3], "margin": [0.25, 0.25]},
        "obs": {"times": [0.5, 1.0, 2.0]},
        "noise": {"pct": 0.1},
    }
    for key, sub in overrides.items():
        base.setdefault(key, {}).update(sub)
    return ExperimentConfig.from_dict(base)


@pytest.fixture(scope="session")
def tiny_problem():
    """nx=4, 4 sensors, 2 times: n=25, n_y=8.  For dense operator oracles."""
    cfg = make_config(
        mesh={"nx": 4},
        pde={"kappa": 0.05, "T": 1.0, "n_steps": 5},
        sensors={"grid": [2, 2], "margin": [0.25, 0.25]},
        obs={"times": [0.4, 1.0]},
    )
    return build_problem(cfg)


@pytest.fixture(scope="session")
def small_problem():
    """nx=6, 9 sensors, 3 times: n=49, n_y=27."""
    return build_problem(make_config())


@pytest.fixture(scope="session")
def small_design(small_problem):
    """Small problem with sigma pinned for moderate spectra (lam_1 ~ 1e3)."""
    p = small_problem
    peak = float(np.max(np.abs(p.forward.apply(p.theta_true))))
    return DesignProblem(p.G, NoiseModel(np.full(p.obs.n_s, 3.0 * peak)), n_t=p.obs.n_t)


@pytest.fixture(scope="session")
def desk_problem():
    """The optimization desk instance: nx=10, 35 sensors, 3 times (n=121)."""
    cfg = make_config(
        mesh={"nx": 10},
        pde={"kappa": 0.05, "T": 2.0, "n_steps": 20},
        sensors={"grid": [7, 5], "margin": [0.2, 0.3]},
        obs={"times": [0.5, 1.0, 2.0]},
    )
    return build_problem(cfg)


@pytest.fixture(scope="session")
def desk_design(desk_problem):
    """Desk instance with noise set so the relaxed l1 design is near-binary."""
    p = desk_problem
    peak = float(np.max(np.abs(p.forward.apply(p.theta_true))))
    return DesignProblem(p.G, NoiseModel(np.full(p.obs.n_s, 4.0 * peak)), n_t=p.obs.n_t)


@pytest.fixture(scope="session")
def sweep_design(desk_problem):
    """Desk mesh with slower spectral decay (kappa=0.01) for rank sweeps."""
    cfg = make_config(
        mesh={"nx": 10},
        pde={"kappa": 0.01, "T": 2.0, "n_steps": 20},
        sensors={"grid": [7, 5], "margin": [0.2, 0.3]},
        obs={"times": [0.5, 1.0, 2.0]},
    )
    p = build_problem(cfg)
    peak = float(np.max(np.abs(p.forward.apply(p.theta_true))))
    return DesignProblem(p.G, NoiseModel(np.full(p.obs.n_s, peak)), n_t=p.obs.n_t)


def dense_forward_matrix(problem):
    """Dense F by an independent dense implicit-Euler stepper (numpy only)."""
    ops, mass, obs = problem.ops, problem.mass, problem.obs
    kappa = problem.config.pde.kappa
    M = mass.M.toarray()
    A = M + obs.dt * (kappa * ops.K.toarray() + ops.N.toarray())
    n = ops.n
    F = np.zeros((obs.n_y, n))
    for i in range(n):
        u = np.zeros(n)
        u[i] = 1.0
        for m in range(1, obs.obs_steps[-1] + 1):
            u = np.linalg.solve(A, M @ u)
            hits = np.nonzero(obs.obs_steps == m)[0]
            if hits.size:
                b = hits[0]
                F[b * obs.n_s : (b + 1) * obs.n_s, i] = u[obs.sensor_nodes]
    return F


def dense_prior_sqrt(problem):
    """Dense L^{-1} M (covariance square root as an operator)."""
    L = (problem.prior.L).toarray()
    M = problem.mass.M.toarray()
    return np.linalg.solve(L, M)


def dense_G_matrix(problem):
    """Dense whitened map F L^{-1} R via numpy solves (independent route)."""
    F = dense_forward_matrix(problem)
    L = problem.prior.L.toarray()
    R = problem.mass.R.toarray()
    return F @ np.linalg.solve(L, R)


def random_psd(n, rng, decay=None):
    """Random PSD matrix, optionally with prescribed eigenvalue decay."""
    Q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    if decay is None:
        lam = rng.uniform(0.0, 1.0, size=n)
    else:
        lam = decay
    return (Q * lam) @ Q.T


def synthetic_design(n, n_s, n_t, spectrum, seed=0, sigma=1.0):
    """Design problem over a synthetic dense G with a prescribed spectrum.

    G = U diag(sqrt(spectrum)) V^T with random orthonormal factors, so the
    misfit Hessian at w = 1 (with unit sigma) has exactly ``spectrum`` as its
    eigenvalues.
    """
    from oed_dopt.oed import DesignProblem, MatrixWhitenedMap, NoiseModel

    n_y = n_s * n_t
    r = min(len(spectrum), n_y, n)
    rng = np.random.default_rng(seed)
    U = np.linalg.qr(rng.standard_normal((n_y, r)))[0]
    V = np.linalg.qr(rng.standard_normal((n, r)))[0]
    G = (U * np.sqrt(np.asarray(spectrum[:r], dtype=float))) @ V.T
    return DesignProblem(MatrixWhitenedMap(G), NoiseModel(np.full(n_s, sigma)), n_t=n_t)
