"""Gaussian prior machinery and the whitened forward map.

The prior precision square root is the Laplacian-like operator A = M^{-1} L
with L = alpha K + beta M, so the nodal prior covariance is L^{-1} M L^{-1}.
All spectral computations downstream run on the Euclidean-symmetric whitened
operator built from

    G = F L^{-1} R,      R R^T = M,

whose weighted Gram matrix G^T W G is the design-weighted misfit Hessian in
whitened coordinates.  Nothing here is ever materialized; L is factorized once
and applied via solves.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, NumericalError
from .fem import AssembledOperators, MassFactor
from .transport import ForwardMap


class PriorOperator:
    """Prior defined by L = alpha K + beta M with a reusable factorization.

    alpha >= 0 and beta > 0 keep L SPD.  The effective mass matrix comes from
    the mass factor (lumped replaces M everywhere when that mode is chosen).
    """

    def __init__(self, ops: AssembledOperators, mass: MassFactor, alpha: float, beta: float):
        if alpha < 0 or beta <= 0:
            raise ConfigError("prior needs alpha >= 0 and beta > 0")
        self.alpha = alpha
        self.beta = beta
        self.mass = mass
        self.M = mass.M
        self.L = (alpha * ops.K + beta * mass.M).tocsc()
        self.n = ops.n
        try:
            self._lu = spla.splu(self.L)
        except RuntimeError as exc:
            raise NumericalError(f"prior operator factorization failed: {exc}") from exc

    def solve_L(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))

    def solve_Lt(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float), trans="T")

    def apply_sqrt_cov(self, v: np.ndarray) -> np.ndarray:
        """Covariance square root as an operator: L^{-1} M v."""
        return self.solve_L(self.M @ v)

    def weighted_norm_sq(self, theta: np.ndarray) -> float:
        """Squared prior-precision norm theta^T L M^{-1} L theta = ||R^{-1} L theta||^2."""
        z = self.mass.solve_R(self.L @ np.asarray(theta, dtype=float))
        return float(z @ z)

    def sample(self, xi: np.ndarray, mean: np.ndarray | None = None) -> np.ndarray:
        """theta_pr + L^{-1} R xi; nodal covariance L^{-1} M L^{-1}.

        Accepts a matrix of stacked standard-normal columns.
        """
        theta = self.solve_L(self.mass.apply_R(np.asarray(xi, dtype=float)))
        if mean is not None:
            theta = (theta.T + mean).T
        return theta


class WhitenedForwardMap:
    """G = F L^{-1} R and its exact transpose, the estimators' sole primitive.

    apply costs one forward PDE solve (plus sparse solves); apply_transpose
    one adjoint PDE solve.  Both accept stacked columns.
    """

    def __init__(self, forward: ForwardMap, prior: PriorOperator):
        self.forward = forward
        self.prior = prior
        self.n = forward.n
        self.n_y = forward.n_y
        self.obs = forward.obs

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise ConfigError(f"expected leading dimension {self.n}, got {x.shape[0]}")
        return self.forward.apply(self.prior.solve_L(self.prior.mass.apply_R(x)))

    def apply_transpose(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.n_y:
            raise ConfigError(f"expected leading dimension {self.n_y}, got {y.shape[0]}")
        return self.prior.mass.apply_Rt(self.prior.solve_Lt(self.forward.apply_transpose(y)))

    def field_from_whitened(self, x: np.ndarray) -> np.ndarray:
        """Map a whitened-coordinate vector to a nodal field: L^{-1} R x."""
        return self.prior.solve_L(self.prior.mass.apply_R(np.asarray(x, dtype=float)))


def dense_whitened_map(G: WhitenedForwardMap, max_n: int = 600) -> np.ndarray:
    """Materialize G as an (n_y, n) array by unit probes (test/desk-scale only).

    Uses whichever side needs fewer solves: n_y transpose probes when
    n_y <= n, else n forward probes.  Guarded to n <= max_n.
    """
    n, n_y = G.n, G.n_y
    if n > max_n:
        raise ConfigError(f"dense materialization refused for n = {n} > {max_n}")
    if n_y <= n:
        return G.apply_transpose(np.eye(n_y)).T
    return G.apply(np.eye(n))
