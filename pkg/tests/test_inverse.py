"""MAP estimation, posterior variance, and posterior sampling."""

import numpy as np
import pytest

from oed_dopt.errors import ConfigError, ConvergenceError
from oed_dopt.inverse import (
    half_power_update,
    map_estimate,
    posterior_pointwise_variance,
    prior_pointwise_variance,
    sample_posterior,
)
from oed_dopt.oed import DesignProblem, NoiseModel, weighted_diag
from oed_dopt.sketch import LowRankEig, exact_eigs


@pytest.fixture(scope="module")
def y_obs(small_design):
    rng = np.random.default_rng(0)
    return rng.standard_normal(small_design.G.n_y) * small_design.noise.sigma[0]


def test_map_zero_design_returns_prior_mean(small_design, y_obs):
    rep = map_estimate(small_design, np.zeros(small_design.n_s), y_obs)
    assert np.allclose(rep.theta_post, 0.0)
    assert rep.iterations == 0 and rep.converged


def test_map_matches_dense_solve(small_design, y_obs):
    ref = small_design.dense_reference()
    rng = np.random.default_rng(1)
    w = rng.uniform(0.3, 1.0, small_design.n_s)
    rep = map_estimate(small_design, w, y_obs, tol=1e-12)
    theta_ref = ref.theta_post(w, y_obs)
    assert np.linalg.norm(rep.theta_post - theta_ref) <= 1e-8 * np.linalg.norm(theta_ref)
    assert rep.rel_residual <= 1e-12


def test_map_noise_scaling_shrinks_posterior(small_problem):
    """Scaling all sigma_j up drives the MAP point toward the prior mean."""
    peak = float(np.max(np.abs(small_problem.forward.apply(small_problem.theta_true))))
    rng = np.random.default_rng(2)
    y = rng.standard_normal(small_problem.G.n_y)
    w = np.ones(9)
    norms = []
    for scale in [1.0, 10.0, 100.0, 1000.0]:
        d = DesignProblem(small_problem.G, NoiseModel(np.full(9, scale * peak)), n_t=3)
        ref = d.dense_reference()
        theta = ref.theta_post(w, y)
        norms.append(np.sqrt(theta @ (small_problem.mass.M @ theta)))
    assert np.all(np.diff(norms) < 0)


def test_map_iteration_cap_raises(small_design, y_obs):
    with pytest.raises(ConvergenceError):
        map_estimate(small_design, np.ones(small_design.n_s), y_obs, tol=1e-14, max_iter=2)


def test_map_validation(small_design):
    with pytest.raises(ConfigError):
        map_estimate(small_design, np.ones(small_design.n_s), np.zeros(3))
    with pytest.raises(ConfigError):
        map_estimate(small_design, np.ones(small_design.n_s), np.zeros(small_design.G.n_y), tol=-1.0)


def test_cg_energy_error_monotone(small_design, y_obs):
    """The operator-energy-norm error is nonincreasing across CG iterates."""
    ref = small_design.dense_reference()
    w = np.full(small_design.n_s, 0.7)
    rep = map_estimate(small_design, w, y_obs, tol=1e-10, record_iterates=True)
    A = np.eye(small_design.G.n) + ref.hessian(w)
    dw = weighted_diag(w, small_design.noise.sigma, small_design.n_t)
    b = ref.G_dense.T @ (dw * y_obs)
    x_star = np.linalg.solve(A, b)
    errors = [np.sqrt((x - x_star) @ (A @ (x - x_star))) for x in rep.iterates]
    assert all(e2 <= e1 + 1e-9 * errors[0] for e1, e2 in zip(errors, errors[1:]))


def test_prior_variance_matches_dense(small_problem):
    G = small_problem.G
    L = small_problem.prior.L.toarray()
    M = small_problem.mass.M.toarray()
    cov = np.linalg.solve(L, np.linalg.solve(L, M).T)
    assert np.allclose(prior_pointwise_variance(G), np.diag(cov), rtol=1e-9)


def test_posterior_variance_zero_design_is_prior(small_problem, small_design):
    lr = LowRankEig(U=np.zeros((small_design.G.n, 0)), lam=np.zeros(0))
    v = posterior_pointwise_variance(small_problem.G, lr)
    assert np.allclose(v, prior_pointwise_variance(small_problem.G))


def test_posterior_variance_matches_dense(small_problem, small_design):
    w = np.full(small_design.n_s, 0.8)
    lr = exact_eigs(small_design.misfit_op(w), small_design.rank_bound)
    v = posterior_pointwise_variance(small_problem.G, lr)
    # dense oracle: diag(L^{-1} R (I + H)^{-1} R^T L^{-1})
    ref = small_design.dense_reference()
    L = small_problem.prior.L.toarray()
    R = small_problem.mass.R.toarray()
    P = np.linalg.solve(L, R)
    C = P @ np.linalg.solve(np.eye(small_design.G.n) + ref.hessian(w), P.T)
    assert np.allclose(v, np.diag(C), rtol=1e-6, atol=1e-12)
    v_pr = prior_pointwise_variance(small_problem.G)
    assert np.all(v <= v_pr + 1e-12)


def test_half_power_identity(small_design):
    w = np.full(small_design.n_s, 0.6)
    lr = exact_eigs(small_design.misfit_op(w), 10)
    rng = np.random.default_rng(3)
    xi = rng.standard_normal(small_design.G.n)
    twice = half_power_update(lr, half_power_update(lr, xi))
    direct = xi - lr.U @ ((lr.lam / (1.0 + lr.lam)) * (lr.U.T @ xi))
    assert np.allclose(twice, direct, rtol=1e-10)


def test_sample_posterior_zero_design_reduces_to_prior(small_problem, small_design):
    lr = LowRankEig(U=np.zeros((small_design.G.n, 0)), lam=np.zeros(0))
    rng = np.random.default_rng(4)
    xi = rng.standard_normal(small_design.G.n)
    theta_post = np.zeros(small_design.G.n)
    s = sample_posterior(small_problem.G, lr, theta_post, xi)
    assert np.allclose(s, small_problem.prior.sample(xi), rtol=1e-12)


def test_sample_posterior_covariance_monte_carlo():
    """Empirical covariance of posterior draws matches the dense posterior."""
    from conftest import make_config
    from oed_dopt.problem import build_problem

    cfg = make_config(
        mesh={"nx": 3},
        pde={"kappa": 0.05, "T": 1.0, "n_steps": 5},
        sensors={"grid": [2, 2], "margin": [1 / 3, 1 / 3]},
        obs={"times": [0.4, 1.0]},
    )
    p = build_problem(cfg)
    peak = float(np.max(np.abs(p.forward.apply(p.theta_true))))
    d = DesignProblem(p.G, NoiseModel(np.full(4, 2.0 * peak)), n_t=2)
    n = p.G.n
    w = np.ones(4)
    lr = exact_eigs(d.misfit_op(w), d.rank_bound)
    ref = d.dense_reference()
    L = p.prior.L.toarray()
    R = p.mass.R.toarray()
    P = np.linalg.solve(L, R)
    C = P @ np.linalg.solve(np.eye(n) + ref.hessian(w), P.T)

    rng = np.random.default_rng(5)
    N = 50_000
    theta_post = np.zeros(n)
    samples = sample_posterior(p.G, lr, theta_post, rng.standard_normal((n, N)))
    emp = (samples @ samples.T) / N
    se = np.sqrt((np.outer(np.diag(C), np.diag(C)) + C**2) / N)
    assert np.all(np.abs(emp - C) <= 5.0 * se)


def test_synthesize_invert_round_trip():
    """Inverting synthetic data at w=1 recovers a smoothed true state; the
    reconstruction error shrinks as the data noise shrinks."""
    from conftest import make_config
    from oed_dopt.problem import build_problem

    errors = []
    # prior marginal scale matched to the unit-amplitude true state
    for pct in (0.3, 0.1, 0.02):
        cfg = make_config(noise={"pct": pct}, prior={"alpha": 0.1, "beta": 5.0})
        p = build_problem(cfg)
        y_obs, _ = p.synthesize()
        rep = map_estimate(p.design, np.ones(p.design.n_s), y_obs, tol=1e-10)
        diff = rep.theta_post - p.theta_true
        M = p.mass.M
        rel = np.sqrt(diff @ (M @ diff)) / np.sqrt(p.theta_true @ (M @ p.theta_true))
        errors.append(rel)
    assert errors[0] < 1.0
    assert errors[0] > errors[1] > errors[2]


def test_kl_chain_whitened_vs_dense_paths(small_design, y_obs):
    """KL with the CG MAP equals KL with the dense-path MAP."""
    w = np.full(small_design.n_s, 0.9)
    kl_cg = small_design.kl_estimate(w, y_obs, "dense", tol=1e-12)
    theta_dense = small_design.dense_reference().theta_post(w, y_obs)
    kl_direct = small_design.kl_estimate(w, y_obs, "dense", theta_post=theta_dense)
    assert kl_cg == pytest.approx(kl_direct, rel=1e-8)
