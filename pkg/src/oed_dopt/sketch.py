"""Randomized subspace iteration, exact eigensolvers, and error-bound oracles.

The sketch of a symmetric PSD operator H is T = Q^T H Q where Q spans
H^q Omega for a Gaussian test matrix Omega with l = k + p columns.  The
idealized iteration is hardened by re-orthonormalizing after every operator
application.  Eigen-reconstruction, a deterministic top-k eigensolver, and
the closed-form expected-error bounds used to validate the estimators all
live here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ConfigError, ConvergenceError

DENSE_GUARD = 600


@dataclass(frozen=True)
class SketchConfig:
    """Target rank k, oversampling p (l = k + p), power iterations q, seed."""

    k: int
    p: int = 5
    q: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.p < 0 or self.q < 1:
            raise ConfigError("need k >= 1, p >= 0, q >= 1")

    @property
    def l(self) -> int:
        return self.k + self.p


@dataclass
class LowRankEig:
    """Approximate dominant eigenpairs: U (n, l) orthonormal, lam descending >= 0."""

    U: np.ndarray
    lam: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.lam)


@dataclass
class SpectrumSplit:
    """Spectrum partitioned at the target rank: lam1 = top-k, lam2 = tail."""

    lam1: np.ndarray
    lam2: np.ndarray
    n: int

    @classmethod
    def from_spectrum(cls, lam, k: int) -> "SpectrumSplit":
        lam = np.sort(np.asarray(lam, dtype=float))[::-1]
        if np.any(lam < -1e-12 * max(1.0, abs(lam[0]))):
            raise ConfigError("spectrum split requires a PSD spectrum")
        lam = np.clip(lam, 0.0, None)
        return cls(lam1=lam[:k], lam2=lam[k:], n=len(lam))

    @property
    def k(self) -> int:
        return len(self.lam1)

    @property
    def gap_ratio(self) -> float:
        if len(self.lam2) == 0 or self.lam2[0] == 0.0:
            return 0.0
        return float(self.lam2[0] / self.lam1[-1])


def apply_operator(op, X: np.ndarray) -> np.ndarray:
    """Apply an ndarray or a scipy LinearOperator to stacked columns."""
    if isinstance(op, np.ndarray):
        return op @ X
    if X.ndim == 1:
        return op.matvec(X)
    return op.matmat(X)


def operator_dim(op) -> int:
    return op.shape[0]


def _orthonormalize(Y: np.ndarray) -> np.ndarray:
    Q, R = np.linalg.qr(Y)
    diag = np.abs(np.diag(R))
    scale = diag.max(initial=0.0)
    deficient = scale == 0.0 or np.any(diag <= Y.shape[0] * np.finfo(float).eps * scale)
    if deficient:
        # Householder QR still returns an orthonormal Q (arbitrary completion
        # of the deficient directions); those directions carry zero Ritz
        # values downstream.
        warnings.warn("sketch subspace is numerically rank deficient", stacklevel=3)
    return Q


def subspace_iteration(op, cfg: SketchConfig):
    """Randomized subspace iteration on a symmetric PSD operator.

    Draws a Gaussian n x l test matrix from the seeded generator, applies the
    operator q times with re-orthonormalization after every application, and
    returns (Q, T) with Q the final orthonormal basis and T = Q^T op Q
    symmetrized.
    """
    n = operator_dim(op)
    if cfg.l > n:
        raise ConfigError(f"sketch size l = {cfg.l} exceeds dimension n = {n}")
    rng = np.random.default_rng(cfg.seed)
    Y = rng.standard_normal((n, cfg.l))
    for _ in range(cfg.q):
        Y = apply_operator(op, Y)
        Y = _orthonormalize(Y)
    Q = Y
    T = Q.T @ apply_operator(op, Q)
    return Q, 0.5 * (T + T.T)


def low_rank_eig(Q: np.ndarray, T: np.ndarray) -> LowRankEig:
    """Eigen-reconstruction of the sketched operator: U_hat = Q U_T, descending."""
    lam, UT = np.linalg.eigh(0.5 * (T + T.T))
    order = np.argsort(lam)[::-1]
    lam = np.clip(lam[order], 0.0, None)
    return LowRankEig(U=Q @ UT[:, order], lam=lam)


def sketched_logdet(T: np.ndarray) -> float:
    """log det(I + T) through the symmetric eigendecomposition of T."""
    lam = np.linalg.eigvalsh(0.5 * (T + T.T))
    return float(np.sum(np.log1p(np.clip(lam, 0.0, None))))


def exact_eigs(op, k: int, rtol: float = 1e-8, seed: int = 0, maxiter: int | None = None) -> LowRankEig:
    """Top-k eigenpairs of a symmetric PSD operator.

    Uses implicitly restarted Lanczos (ARPACK) with a deterministic start
    vector; falls back to a dense eigensolve when k is too close to n (only
    allowed for n <= 600).  Each returned pair satisfies
    ||op u - lam u|| <= rtol * lam_max, verified explicitly; otherwise a
    :class:`ConvergenceError` carrying the residuals is raised.
    """
    n = operator_dim(op)
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got k = {k}, n = {n}")
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n)

    probe = apply_operator(op, v0 / np.linalg.norm(v0))
    if np.linalg.norm(probe) == 0.0:
        U = np.linalg.qr(rng.standard_normal((n, k)))[0]
        return LowRankEig(U=U, lam=np.zeros(k))

    if k > n - 2 or n <= 16:
        if n > DENSE_GUARD:
            raise ConfigError(f"dense eigensolve fallback refused for n = {n} > {DENSE_GUARD}")
        A = op if isinstance(op, np.ndarray) else apply_operator(op, np.eye(n))
        lam, U = np.linalg.eigh(0.5 * (A + A.T))
        order = np.argsort(lam)[::-1][:k]
        return LowRankEig(U=U[:, order], lam=np.clip(lam[order], 0.0, None))

    A = op if not isinstance(op, np.ndarray) else spla.aslinearoperator(op)
    try:
        lam, U = spla.eigsh(A, k=k, which="LM", v0=v0, maxiter=maxiter)
    except spla.ArpackNoConvergence as exc:
        got = len(exc.eigenvalues)
        raise ConvergenceError(
            f"eigensolver converged only {got}/{k} pairs within the iteration cap",
            residuals=exc.eigenvalues,
        ) from exc
    order = np.argsort(lam)[::-1]
    lam, U = np.clip(lam[order], 0.0, None), U[:, order]

    residuals = np.linalg.norm(apply_operator(op, U) - U * lam, axis=0)
    lam_max = lam[0] if lam[0] > 0 else 1.0
    if np.any(residuals > rtol * lam_max):
        raise ConvergenceError(
            f"eigenpair residuals exceed {rtol:g} * lam_max", residuals=residuals
        )
    return LowRankEig(U=U, lam=lam)


def cge_constant(k: int, p: int, n: int) -> float:
    """Gaussian-sketch constant entering the expected-error bounds.

    Defined for oversampling p >= 2 as

        C = e^2 (k+p) / (p+1)^2 * (2 pi (p+1))^(-2/(p+1))
            * (mu + sqrt(2))^2 * (p+1)/(p-1),    mu = sqrt(n-k) + sqrt(k+p).
    """
    if p < 2:
        raise ConfigError("the expectation bound requires oversampling p >= 2")
    if not 1 <= k <= n:
        raise ConfigError("need 1 <= k <= n")
    mu = np.sqrt(n - k) + np.sqrt(k + p)
    return float(
        (np.e**2 * (k + p))
        / (p + 1) ** 2
        * (1.0 / (2.0 * np.pi * (p + 1))) ** (2.0 / (p + 1))
        * (mu + np.sqrt(2.0)) ** 2
        * ((p + 1) / (p - 1))
    )


_RANDOMIZED_KINDS = {"kl_rand", "logdet_rand", "grad_rand_component", "grad_norm_rand"}

BOUND_KINDS = (
    "kl_eig",
    "kl_rand",
    "logdet_rand",
    "grad_rand_component",
    "grad_eig_component",
    "grad_norm_eig",
    "grad_norm_rand",
    "frozen",
)


def error_bounds(
    split: SpectrumSplit,
    cfg: SketchConfig | None,
    kind: str,
    z_norm: float | None = None,
    z_norms: np.ndarray | None = None,
) -> float:
    """Closed-form error bound of the requested kind for a spectrum split.

    Randomized kinds need the sketch configuration (for the Gaussian constant
    and the gap ratio power) and a gap ratio < 1.  Gradient kinds need the
    spectral norm(s) of the design-derivative matrices: ``z_norm`` for the
    componentwise bounds, ``z_norms`` (one per sensor) for the gradient-norm
    bounds.  For kind "frozen", ``split.lam2`` holds the squared discarded
    singular values of the noise-whitened forward map.
    """
    if kind not in BOUND_KINDS:
        raise ConfigError(f"unknown bound kind {kind!r}")
    lam2 = split.lam2
    tail_logdet = float(np.sum(np.log1p(lam2)))
    tail_trace = float(np.sum(lam2))
    tail_shrink = float(np.sum(lam2 / (1.0 + lam2)))

    if kind == "frozen":
        return tail_logdet
    if kind == "kl_eig":
        return 0.5 * (tail_logdet + tail_trace)
    if kind == "grad_eig_component":
        if z_norm is None:
            raise ConfigError("grad_eig_component needs z_norm")
        return float(z_norm) * tail_shrink
    if kind == "grad_norm_eig":
        if z_norms is None:
            raise ConfigError("grad_norm_eig needs z_norms")
        return float(np.sqrt(np.sum(np.square(z_norms)))) * tail_shrink

    # randomized kinds
    if cfg is None:
        raise ConfigError(f"{kind} needs a SketchConfig")
    gamma = split.gap_ratio
    if gamma >= 1.0:
        raise ConfigError(f"randomized bound requires gap ratio < 1, got {gamma}")
    c = gamma ** (2 * cfg.q - 1) * cge_constant(cfg.k, cfg.p, split.n)
    if kind == "logdet_rand":
        return tail_logdet + float(np.sum(np.log1p(c * lam2)))
    if kind == "kl_rand":
        return 0.5 * ((1.0 + c) * tail_trace + tail_logdet + float(np.sum(np.log1p(c * lam2))))
    if kind == "grad_rand_component":
        if z_norm is None:
            raise ConfigError("grad_rand_component needs z_norm")
        return float(z_norm) * (1.0 + c) * tail_trace
    # grad_norm_rand
    if z_norms is None:
        raise ConfigError("grad_norm_rand needs z_norms")
    return float(np.sum(z_norms)) * (1.0 + c) * tail_trace
