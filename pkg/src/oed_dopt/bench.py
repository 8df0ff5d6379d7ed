"""Accuracy sweeps: estimator error versus target rank, and mesh refinement."""

from __future__ import annotations

import numpy as np

from .config import ExperimentConfig
from .oed import DesignProblem
from .sketch import SketchConfig, exact_eigs
from .problem import build_problem


def _kl_spectral(lam: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.log1p(lam)) - np.sum(lam / (1.0 + lam)))


def error_vs_rank_sweep(
    design: DesignProblem,
    w: np.ndarray,
    ks,
    p: int = 5,
    q: int = 1,
    n_seeds: int = 10,
    seed0: int = 0,
):
    """Relative errors of the Eig-k and randomized estimators over target ranks.

    Truth comes from the dense reference; the KL error compares the spectral
    part only (the MAP term is shared by every method).  Returns one dict per
    (k, method) with keys err_J, err_grad, err_kl.
    """
    ref = design.dense_reference()
    J_true, grad_true, lam_true = ref.evaluate(w)
    kl_true = _kl_spectral(lam_true)
    gnorm = max(np.linalg.norm(grad_true), 1e-300)
    J_scale = max(abs(J_true), 1e-300)
    kl_scale = max(abs(kl_true), 1e-300)

    rows = []
    for k in ks:
        J_e, g_e = design.objective_grad_eig(w, k)
        lam_e = exact_eigs(design.misfit_op(w), k).lam
        rows.append(
            {
                "k": int(k),
                "method": "eig",
                "err_J": abs(J_true - J_e) / J_scale,
                "err_grad": np.linalg.norm(grad_true - g_e) / gnorm,
                "err_kl": abs(kl_true - _kl_spectral(lam_e)) / kl_scale,
            }
        )
        errs = np.zeros((n_seeds, 3))
        for s in range(n_seeds):
            cfg = SketchConfig(k=int(k), p=p, q=q, seed=seed0 + 1000 * s + int(k))
            J_r, g_r = design.objective_grad_rand(w, cfg)
            lam_r = design.sketch_eig(w, cfg).lam
            errs[s] = (
                abs(J_true - J_r) / J_scale,
                np.linalg.norm(grad_true - g_r) / gnorm,
                abs(kl_true - _kl_spectral(lam_r)) / kl_scale,
            )
        mean = errs.mean(axis=0)
        rows.append(
            {
                "k": int(k),
                "method": "rand",
                "err_J": float(mean[0]),
                "err_grad": float(mean[1]),
                "err_kl": float(mean[2]),
            }
        )
    return rows


def mesh_refinement_sweep(
    base_config: ExperimentConfig,
    levels=(1, 2, 4),
    k: int = 10,
    p: int = 5,
    q: int = 1,
    n_seeds: int = 10,
    seed0: int = 0,
):
    """Relative error of the randomized objective across mesh refinements.

    The sketch parameters stay fixed while nx is scaled by each level.  Truth
    is the dense reference when n <= 600 and the full-rank spectral value
    otherwise (both exact).  Sensor coordinates should be pinned in the
    config so every level sees the same physical sensors.
    """
    rows = []
    for level in levels:
        cfg = ExperimentConfig.from_dict(base_config.to_dict())
        cfg.mesh.nx = base_config.mesh.nx * level
        problem = build_problem(cfg)
        design = problem.design
        w = np.ones(design.n_s)
        if design.G.n <= 600:
            J_true = design.dense_reference().evaluate(w)[0]
        else:
            lam = exact_eigs(design.misfit_op(w), design.rank_bound).lam
            J_true = float(np.sum(np.log1p(lam)))
        errs = np.empty(n_seeds)
        for s in range(n_seeds):
            sk = SketchConfig(k=k, p=p, q=q, seed=seed0 + s)
            errs[s] = abs(J_true - design.objective_rand(w, sk)) / max(abs(J_true), 1e-300)
        rows.append(
            {
                "nx": cfg.mesh.nx,
                "n": design.G.n,
                "mean_rel_err_J": float(errs.mean()),
            }
        )
    return rows
