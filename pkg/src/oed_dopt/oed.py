"""Design-weighted misfit Hessian and the three objective/gradient estimators.

For design weights w in [0,1]^{n_s} and per-sensor noise sigma_j, the weighted
misfit Hessian in whitened coordinates is

    H(w) = G^T W G,   W = diag over time blocks of w_j / sigma_j^2,

a symmetric PSD operator of rank at most min(n_y, n).  The D-optimal objective
is J(w) = log det(I + H(w)) with componentwise derivative

    dJ/dw_j = z_j - sum_i [lam_i/(1+lam_i)] <q_i, E_j q_i / sigma_j^2>,

where z_j = tr(dH/dw_j) are design-independent constants.  Three estimators
are provided: truncated spectral (top-k exact eigenpairs), randomized
(subspace-iteration sketch), and a frozen one-time SVD of G that needs zero
PDE solves per evaluation.  A dense reference implementation covers
desk-scale instances (n <= 600).
"""

from __future__ import annotations

import hashlib
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator

from .errors import ConfigError
from .sketch import (
    LowRankEig,
    SketchConfig,
    exact_eigs,
    low_rank_eig,
    sketched_logdet,
    subspace_iteration,
)

DENSE_GUARD = 600
_ZCACHE_MAGIC = b"OEDZ0001"


@dataclass(frozen=True)
class NoiseModel:
    """Per-sensor noise standard deviations (diagonal noise covariance)."""

    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        if self.sigma.ndim != 1 or np.any(self.sigma <= 0):
            raise ConfigError("noise standard deviations must be strictly positive")

    @property
    def n_s(self) -> int:
        return len(self.sigma)


@dataclass
class SensorDerivConstants:
    """z_j = tr(dH/dw_j) >= 0, independent of the design weights."""

    z: np.ndarray
    provenance: str = "exact"  # "exact" (true G) or "frozen" (SVD surrogate)


def check_design_weights(w, n_s: int) -> np.ndarray:
    w = np.asarray(w, dtype=float).ravel()
    if w.shape != (n_s,):
        raise ConfigError(f"design weights must have shape ({n_s},), got {w.shape}")
    if np.any(w < 0) or np.any(w > 1):
        raise ConfigError("design weights must lie in [0, 1]")
    return w


def weighted_diag(w: np.ndarray, sigma: np.ndarray, n_t: int) -> np.ndarray:
    """Diagonal of W = sum_j w_j E_j / sigma_j^2 in time-major stacking."""
    return np.tile(w / sigma**2, n_t)


def sensor_blocks(Y: np.ndarray, n_s: int, n_t: int) -> np.ndarray:
    """Reshape (n_y, ...) observation stacks to (n_t, n_s, ...)."""
    return Y.reshape(n_t, n_s, *Y.shape[1:])


class MatrixWhitenedMap:
    """Plain-matrix stand-in for the whitened forward map (tests, synthetics)."""

    def __init__(self, G: np.ndarray):
        self.G = np.asarray(G, dtype=float)
        self.n_y, self.n = self.G.shape

    def apply(self, x):
        return self.G @ x

    def apply_transpose(self, y):
        return self.G.T @ y


class MisfitHessianOp(LinearOperator):
    """x -> G^T (W (G x)), symmetric PSD, one forward + one adjoint solve per column."""

    def __init__(self, G, w: np.ndarray, noise: NoiseModel, n_t: int):
        self.G = G
        self.w = check_design_weights(w, noise.n_s)
        self.noise = noise
        self.diag_w = weighted_diag(self.w, noise.sigma, n_t)
        super().__init__(dtype=float, shape=(G.n, G.n))

    def _matvec(self, x):
        return self.G.apply_transpose(self.diag_w * self.G.apply(np.asarray(x).ravel()))

    def _matmat(self, X):
        return self.G.apply_transpose(self.diag_w[:, None] * self.G.apply(X))


def _zcache_write(path, config_hash: bytes, z: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(_ZCACHE_MAGIC)
        f.write(config_hash)
        f.write(struct.pack("<I", len(z)))
        f.write(np.asarray(z, dtype="<f8").tobytes())


def _zcache_read(path, config_hash: bytes):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(_ZCACHE_MAGIC) + 32 + 4 or raw[: len(_ZCACHE_MAGIC)] != _ZCACHE_MAGIC:
        return None
    stored = raw[len(_ZCACHE_MAGIC) : len(_ZCACHE_MAGIC) + 32]
    if stored != config_hash:
        return None
    off = len(_ZCACHE_MAGIC) + 32
    (n_s,) = struct.unpack_from("<I", raw, off)
    z = np.frombuffer(raw, dtype="<f8", count=n_s, offset=off + 4)
    return np.array(z)


def precompute_z(
    G,
    noise: NoiseModel,
    n_t: int,
    cache_path=None,
    config_hash: bytes | None = None,
) -> SensorDerivConstants:
    """Design-independent gradient constants, one adjoint solve per (sensor, time).

    z_j = sigma_j^{-2} sum_m ||G^T (v_m (x) e_j)||^2.  Costs n_s * n_t adjoint
    solves; optionally cached to disk keyed by a 32-byte configuration hash.
    """
    n_s = noise.n_s
    if cache_path is not None:
        if config_hash is None or len(config_hash) != 32:
            raise ConfigError("z cache needs a 32-byte configuration hash")
        if os.path.exists(cache_path):
            cached = _zcache_read(cache_path, config_hash)
            if cached is not None and len(cached) == n_s:
                return SensorDerivConstants(z=cached)
            warnings.warn("z cache does not match configuration; recomputing", stacklevel=2)

    n_y = n_s * n_t
    z = np.empty(n_s)
    for j in range(n_s):
        probes = np.zeros((n_y, n_t))
        for m in range(n_t):
            probes[m * n_s + j, m] = 1.0
        F = G.apply_transpose(probes)  # columns f_{jm}
        z[j] = np.sum(F * F) / noise.sigma[j] ** 2
    if cache_path is not None:
        _zcache_write(cache_path, config_hash, z)
    return SensorDerivConstants(z=z)


@dataclass
class FrozenSVD:
    """One-time thin SVD of the whitened forward map: G ~ U diag(s) V^T."""

    U: np.ndarray  # (n_y, k_f), orthonormal columns
    s: np.ndarray  # (k_f,), descending
    V: np.ndarray | None = None  # (n, k_f), optional right factor

    @property
    def k(self) -> int:
        return len(self.s)

    @classmethod
    def from_dense(cls, G_dense: np.ndarray, k_f: int) -> "FrozenSVD":
        """Exact rank-k_f truncation of a dense G (tests and desk scale)."""
        U, s, Vt = np.linalg.svd(np.asarray(G_dense, dtype=float), full_matrices=False)
        return cls(U=U[:, :k_f], s=s[:k_f], V=Vt[:k_f].T)

    @classmethod
    def from_randomized(cls, G, k_f: int, oversample: int = 10, power: int = 2, seed: int = 0) -> "FrozenSVD":
        """Randomized SVD of the matrix-free G; O(k_f) PDE solves total."""
        n, n_y = G.n, G.n_y
        l = min(k_f + oversample, min(n, n_y))
        if k_f > min(n, n_y):
            raise ConfigError(f"k_f = {k_f} exceeds min(n_y, n) = {min(n, n_y)}")
        rng = np.random.default_rng(seed)
        Y = G.apply(rng.standard_normal((n, l)))
        for _ in range(power):
            Q, _ = np.linalg.qr(Y)
            Z, _ = np.linalg.qr(G.apply_transpose(Q))
            Y = G.apply(Z)
        Q, _ = np.linalg.qr(Y)
        B = G.apply_transpose(Q)  # (n, l) = G^T Q
        W, s, Vt = np.linalg.svd(B.T, full_matrices=False)
        U = Q @ W
        return cls(U=U[:, :k_f], s=s[:k_f], V=Vt[:k_f].T)


class DesignProblem:
    """Objective, gradient and KL estimators for one sensor-placement problem.

    Wraps the whitened forward map G together with the noise model and the
    observation layout (n_s sensors times n_t observation times, time-major
    stacking).  All estimators share the precomputed constants z.
    """

    def __init__(self, G, noise: NoiseModel, n_t: int | None = None):
        self.G = G
        self.noise = noise
        if n_t is None:
            n_t = G.obs.n_t
        self.n_t = int(n_t)
        self.n_s = noise.n_s
        if self.n_s * self.n_t != G.n_y:
            raise ConfigError("n_s * n_t must equal the observation dimension")
        self._z: SensorDerivConstants | None = None
        self._dense: DenseReference | None = None

    # -- constants ---------------------------------------------------------

    @property
    def rank_bound(self) -> int:
        return min(self.G.n_y, self.G.n)

    def ensure_z(self, cache_path=None, config_hash=None) -> SensorDerivConstants:
        if self._z is None:
            self._z = precompute_z(self.G, self.noise, self.n_t, cache_path, config_hash)
        return self._z

    @property
    def z(self) -> np.ndarray:
        return self.ensure_z().z

    def misfit_op(self, w) -> MisfitHessianOp:
        return MisfitHessianOp(self.G, w, self.noise, self.n_t)

    # -- shared gradient assembly -------------------------------------------

    def _gradient_from_pairs(self, lam: np.ndarray, Qhat: np.ndarray) -> np.ndarray:
        """z_j - sum_i [lam_i/(1+lam_i)] <q_i, E_j q_i>/sigma_j^2 for all j."""
        D = lam / (1.0 + lam)
        S = (sensor_blocks(Qhat, self.n_s, self.n_t) ** 2).sum(axis=0)  # (n_s, r)
        return self.z - (S @ D) / self.noise.sigma**2

    # -- truncated spectral estimator ---------------------------------------

    def objective_grad_eig(self, w, k: int, seed: int = 0):
        """Objective and gradient from the top-k exact eigenpairs of H(w)."""
        w = check_design_weights(w, self.n_s)
        if k > self.rank_bound:
            raise ConfigError(f"k = {k} exceeds rank bound {self.rank_bound}")
        self.ensure_z()
        eig = exact_eigs(self.misfit_op(w), k, seed=seed)
        J = float(np.sum(np.log1p(eig.lam)))
        Qhat = self.G.apply(eig.U)  # k forward solves
        return J, self._gradient_from_pairs(eig.lam, Qhat)

    def objective_eig(self, w, k: int, seed: int = 0) -> float:
        w = check_design_weights(w, self.n_s)
        eig = exact_eigs(self.misfit_op(w), k, seed=seed)
        return float(np.sum(np.log1p(eig.lam)))

    # -- randomized estimator ------------------------------------------------

    def objective_grad_rand(self, w, cfg: SketchConfig):
        """Objective and gradient from the randomized sketch of H(w).

        Costs exactly l(q+2) forward and l(q+1) adjoint solves per call
        (l = k + p): the sketch spends l(q+1) of each and the gradient
        products G u_hat_i the remaining l forward solves.
        """
        w = check_design_weights(w, self.n_s)
        self.ensure_z()
        Q, T = subspace_iteration(self.misfit_op(w), cfg)
        J = sketched_logdet(T)
        eig = low_rank_eig(Q, T)
        Qhat = self.G.apply(eig.U)  # l forward solves
        return J, self._gradient_from_pairs(eig.lam, Qhat)

    def objective_rand(self, w, cfg: SketchConfig) -> float:
        w = check_design_weights(w, self.n_s)
        _, T = subspace_iteration(self.misfit_op(w), cfg)
        return sketched_logdet(T)

    def sketch_eig(self, w, cfg: SketchConfig) -> LowRankEig:
        """Low-rank eigenpairs of H(w) from the randomized sketch."""
        w = check_design_weights(w, self.n_s)
        Q, T = subspace_iteration(self.misfit_op(w), cfg)
        return low_rank_eig(Q, T)

    # -- frozen low-rank estimator -------------------------------------------

    def build_frozen(self, k_f: int, oversample: int = 10, power: int = 2, seed: int = 0) -> FrozenSVD:
        return FrozenSVD.from_randomized(self.G, k_f, oversample, power, seed)

    def objective_grad_frozen(self, w, frozen: FrozenSVD):
        """Objective and gradient from the frozen SVD; zero PDE solves.

        J_froz(w) = log det(I + S U^T W U S) with the noise scaling folded
        into W, and the gradient is the exact derivative of that k_f x k_f
        form.
        """
        w = check_design_weights(w, self.n_s)
        dw = weighted_diag(w, self.noise.sigma, self.n_t)
        A = frozen.U * frozen.s  # (n_y, k_f) = U diag(s)
        B = np.eye(frozen.k) + A.T @ (dw[:, None] * A)
        cf = sla.cho_factor(B)
        J = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        X = sla.cho_solve(cf, A.T)  # (k_f, n_y) = B^{-1} A^T
        diag_proj = np.einsum("yk,ky->y", A, X)  # a_r^T B^{-1} a_r per row r
        per_sensor = sensor_blocks(diag_proj, self.n_s, self.n_t).sum(axis=0)
        grad = per_sensor / self.noise.sigma**2
        return J, grad

    def objective_frozen(self, w, frozen: FrozenSVD) -> float:
        return self.objective_grad_frozen(w, frozen)[0]

    # -- KL divergence and information gain -----------------------------------

    def kl_estimate(
        self,
        w,
        y_obs: np.ndarray,
        method: str = "rand",
        k: int | None = None,
        cfg: SketchConfig | None = None,
        theta_post: np.ndarray | None = None,
        tol: float = 1e-8,
        seed: int = 0,
    ) -> float:
        """Posterior-to-prior KL divergence for the design w and data y_obs.

        D = 1/2 [ sum log(1+lam_i) - sum lam_i/(1+lam_i) + c(theta_post) ]
        with lam from top-k exact eigenvalues ("eig"), the sketch ("rand"),
        or the full dense spectrum ("dense").  The prior-precision norm of
        the MAP point is computed by the inverse module unless a
        ``theta_post`` is supplied.
        """
        w = check_design_weights(w, self.n_s)
        if method == "eig":
            if k is None:
                raise ConfigError("kl_estimate(method='eig') needs k")
            lam = exact_eigs(self.misfit_op(w), k, seed=seed).lam
        elif method == "rand":
            if cfg is None:
                raise ConfigError("kl_estimate(method='rand') needs a SketchConfig")
            _, T = subspace_iteration(self.misfit_op(w), cfg)
            lam = np.clip(np.linalg.eigvalsh(T), 0.0, None)
        elif method in ("dense", "exact_dense"):
            lam = self.dense_reference().spectrum(w)
        else:
            raise ConfigError(f"unknown KL method {method!r}")

        if theta_post is None:
            from .inverse import map_estimate

            theta_post = map_estimate(self, w, y_obs, tol=tol).theta_post
        c = self.G.prior.weighted_norm_sq(theta_post)
        return 0.5 * float(np.sum(np.log1p(lam)) - np.sum(lam / (1.0 + lam)) + c)

    def expected_info_gain(self, w, method: str = "rand", k: int | None = None, cfg: SketchConfig | None = None, frozen: FrozenSVD | None = None, seed: int = 0) -> float:
        """Half the D-optimal objective, by the chosen estimator."""
        w = check_design_weights(w, self.n_s)
        if method == "eig":
            if k is None:
                raise ConfigError("expected_info_gain(method='eig') needs k")
            return 0.5 * self.objective_eig(w, k, seed=seed)
        if method == "rand":
            if cfg is None:
                raise ConfigError("expected_info_gain(method='rand') needs a SketchConfig")
            return 0.5 * self.objective_rand(w, cfg)
        if method == "frozen":
            if frozen is None:
                raise ConfigError("expected_info_gain(method='frozen') needs a FrozenSVD")
            return 0.5 * self.objective_frozen(w, frozen)
        if method == "dense":
            return 0.5 * self.dense_reference().evaluate(w)[0]
        raise ConfigError(f"unknown method {method!r}")

    # -- dense reference -------------------------------------------------------

    def dense_reference(self, max_n: int = DENSE_GUARD) -> "DenseReference":
        if self._dense is None:
            self._dense = DenseReference(self, max_n=max_n)
        return self._dense

    # -- estimator objects for the optimizer ------------------------------------

    def estimator(self, method: str, **params) -> "Estimator":
        return make_estimator(self, method, **params)


class DenseReference:
    """Exact J, gradient and spectrum by materializing G (n <= 600 guard).

    G is materialized once with unit probes on the cheaper side; afterwards
    every evaluation is dense linear algebra with no PDE solves.
    """

    def __init__(self, design: DesignProblem, max_n: int = DENSE_GUARD):
        n = design.G.n
        if n > max_n:
            raise ConfigError(f"dense reference refused for n = {n} > {max_n}")
        self.design = design
        if design.G.n_y <= n:
            self.G_dense = design.G.apply_transpose(np.eye(design.G.n_y)).T
        else:
            self.G_dense = design.G.apply(np.eye(n))
        self.n = n
        self.n_y = design.G.n_y

    def hessian(self, w) -> np.ndarray:
        w = check_design_weights(w, self.design.n_s)
        dw = weighted_diag(w, self.design.noise.sigma, self.design.n_t)
        Gw = np.sqrt(dw)[:, None] * self.G_dense
        return Gw.T @ Gw

    def spectrum(self, w) -> np.ndarray:
        lam = np.linalg.eigvalsh(self.hessian(w))[::-1]
        return np.clip(lam, 0.0, None)

    def z_constants(self) -> np.ndarray:
        blocks = sensor_blocks(self.G_dense, self.design.n_s, self.design.n_t)
        return (blocks**2).sum(axis=(0, 2)) / self.design.noise.sigma**2

    def z_matrix(self, j: int) -> np.ndarray:
        """Dense dH/dw_j = G^T E_j G / sigma_j^2."""
        rows = sensor_blocks(self.G_dense, self.design.n_s, self.design.n_t)[:, j, :]
        return rows.T @ rows / self.design.noise.sigma[j] ** 2

    def z_norms(self) -> np.ndarray:
        """Spectral norms ||dH/dw_j||_2 (via the thin factor, exact)."""
        blocks = sensor_blocks(self.G_dense, self.design.n_s, self.design.n_t)
        out = np.empty(self.design.n_s)
        for j in range(self.design.n_s):
            s = np.linalg.svd(blocks[:, j, :], compute_uv=False)
            out[j] = s[0] ** 2 / self.design.noise.sigma[j] ** 2
        return out

    def evaluate(self, w):
        """(J, grad, spectrum) for one design, all exact."""
        w = check_design_weights(w, self.design.n_s)
        H = self.hessian(w)
        lam = np.clip(np.linalg.eigvalsh(H)[::-1], 0.0, None)
        J = float(np.sum(np.log1p(lam)))
        S = np.eye(self.n) + H
        X = np.linalg.solve(S, self.G_dense.T)  # (n, n_y)
        diag_proj = np.einsum("yn,ny->y", self.G_dense, X)
        per_sensor = sensor_blocks(diag_proj, self.design.n_s, self.design.n_t).sum(axis=0)
        grad = per_sensor / self.design.noise.sigma**2
        return J, grad, lam

    def theta_post(self, w, y_obs: np.ndarray) -> np.ndarray:
        """Dense MAP point through the whitened normal equations."""
        w = check_design_weights(w, self.design.n_s)
        dw = weighted_diag(w, self.design.noise.sigma, self.design.n_t)
        b = self.G_dense.T @ (dw * y_obs)
        x = np.linalg.solve(np.eye(self.n) + self.hessian(w), b)
        return self.design.G.field_from_whitened(x)


# -- estimator objects ---------------------------------------------------------


class Estimator:
    """Uniform (J, grad) evaluation interface for the optimizer."""

    name = "base"
    stochastic = False

    def __init__(self, design: DesignProblem):
        self.design = design
        self.n_s = design.n_s

    def evaluate(self, w):
        raise NotImplementedError


class EigEstimator(Estimator):
    name = "eig"

    def __init__(self, design, k: int, seed: int = 0):
        super().__init__(design)
        self.k = k
        self.seed = seed

    def evaluate(self, w):
        return self.design.objective_grad_eig(w, self.k, seed=self.seed)


class RandEstimator(Estimator):
    """Randomized estimator; the sketch seed is fixed across evaluations so
    the objective seen by the optimizer is a deterministic function."""

    name = "rand"
    stochastic = True

    def __init__(self, design, cfg: SketchConfig):
        super().__init__(design)
        self.cfg = cfg

    def evaluate(self, w):
        return self.design.objective_grad_rand(w, self.cfg)


class FrozenEstimator(Estimator):
    name = "frozen"

    def __init__(self, design, frozen: FrozenSVD):
        super().__init__(design)
        self.frozen = frozen

    def evaluate(self, w):
        return self.design.objective_grad_frozen(w, self.frozen)


class DenseEstimator(Estimator):
    name = "dense"

    def __init__(self, design, max_n: int = DENSE_GUARD):
        super().__init__(design)
        self.ref = design.dense_reference(max_n=max_n)

    def evaluate(self, w):
        J, grad, _ = self.ref.evaluate(w)
        return J, grad


def make_estimator(design: DesignProblem, method: str, **params) -> Estimator:
    if method == "eig":
        return EigEstimator(design, k=params["k"], seed=params.get("seed", 0))
    if method == "rand":
        cfg = params.get("cfg") or SketchConfig(
            k=params["k"], p=params.get("p", 5), q=params.get("q", 1), seed=params.get("seed", 0)
        )
        return RandEstimator(design, cfg)
    if method == "frozen":
        frozen = params.get("frozen")
        if frozen is None:
            frozen = design.build_frozen(
                params["k"], oversample=params.get("oversample", 10), seed=params.get("seed", 0)
            )
        return FrozenEstimator(design, frozen)
    if method == "dense":
        return DenseEstimator(design)
    raise ConfigError(f"unknown estimator method {method!r}")


def config_hash_bytes(payload: str) -> bytes:
    """32-byte digest used to key the z cache."""
    return hashlib.sha256(payload.encode()).digest()
