"""MAP estimation, posterior pointwise variance, and posterior sampling.

The MAP point solves the whitened normal equations

    (I + H(w)) x = G^T W y_obs,        theta_post = L^{-1} R x,

by plain conjugate gradients; the whitened system is I plus a PSD operator so
its condition number is 1 + lam_max and no further preconditioning is needed.
Posterior variance and samples use a low-rank eigen-approximation of H(w).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConvergenceError
from .oed import DesignProblem, check_design_weights, weighted_diag
from .sketch import LowRankEig


@dataclass
class MapSolveReport:
    theta_post: np.ndarray
    x_whitened: np.ndarray
    iterations: int
    rel_residual: float
    converged: bool
    iterates: list = field(default_factory=list)


def map_estimate(
    design: DesignProblem,
    w,
    y_obs: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 500,
    prior_mean: np.ndarray | None = None,
    record_iterates: bool = False,
) -> MapSolveReport:
    """MAP point by matrix-free CG on the whitened normal equations.

    Each iteration costs one forward and one adjoint PDE solve.  Raises
    :class:`ConvergenceError` if the relative residual has not reached
    ``tol`` within ``max_iter`` iterations.
    """
    if tol <= 0:
        raise ConfigError("tol must be positive")
    w = check_design_weights(w, design.n_s)
    y_obs = np.asarray(y_obs, dtype=float).ravel()
    if y_obs.shape[0] != design.G.n_y:
        raise ConfigError("y_obs has wrong length")
    op = design.misfit_op(w)
    dw = weighted_diag(w, design.noise.sigma, design.n_t)
    b = design.G.apply_transpose(dw * y_obs)

    n = design.G.n
    x = np.zeros(n)
    bnorm = float(np.linalg.norm(b))
    iterates = []
    if bnorm == 0.0:
        theta = design.G.field_from_whitened(x)
        if prior_mean is not None:
            theta = theta + prior_mean
        return MapSolveReport(theta, x, 0, 0.0, True, iterates)

    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Ap = p + op.matvec(p)
        alpha = rs / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if record_iterates:
            iterates.append(x.copy())
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol * bnorm:
            converged = True
            rs = rs_new
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    rel = float(np.sqrt(rs) / bnorm)
    if not converged:
        raise ConvergenceError(
            f"CG stalled at relative residual {rel:.3e} after {it} iterations",
            residuals=rel,
        )
    theta = design.G.field_from_whitened(x)
    if prior_mean is not None:
        theta = theta + prior_mean
    return MapSolveReport(theta, x, it, rel, converged, iterates)


def prior_pointwise_variance(G) -> np.ndarray:
    """Nodal prior variance diag(L^{-1} M L^{-1}) via per-node solves, blocked."""
    n = G.n
    prior = G.prior
    out = np.zeros(n)
    block = 256
    R = prior.mass.R.toarray() if hasattr(prior.mass.R, "toarray") else np.asarray(prior.mass.R)
    for start in range(0, n, block):
        cols = R[:, start : start + block]
        X = prior.solve_L(cols)
        out += np.sum(X * X, axis=1)
    return out


def posterior_pointwise_variance(G, lr: LowRankEig) -> np.ndarray:
    """Nodal posterior variance from a low-rank eigen-approximation of H(w).

    v_post = v_prior - sum_m [lam_m/(1+lam_m)] (L^{-1} R u_m)_i^2, floored
    at zero.
    """
    v_pr = prior_pointwise_variance(G)
    if lr.rank == 0:
        return v_pr
    W = G.field_from_whitened(lr.U)  # (n, r)
    D = lr.lam / (1.0 + lr.lam)
    corr = (W * W) @ D
    return np.clip(v_pr - corr, 0.0, None)


def half_power_update(lr: LowRankEig, xi: np.ndarray) -> np.ndarray:
    """(I + U diag(lam) U^T)^{-1/2} xi via the low-rank update formula."""
    xi = np.asarray(xi, dtype=float)
    coeff = 1.0 - 1.0 / np.sqrt(1.0 + lr.lam)
    inner = lr.U.T @ xi
    return xi - lr.U @ ((coeff * inner.T).T)


def sample_posterior(G, lr: LowRankEig, theta_post: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Posterior draw theta_post + L^{-1} R (I + U diag(lam) U^T)^{-1/2} xi.

    Accepts a matrix of stacked standard-normal columns.
    """
    t = half_power_update(lr, xi)
    fields = G.field_from_whitened(t)
    return (fields.T + np.asarray(theta_post, dtype=float)).T
