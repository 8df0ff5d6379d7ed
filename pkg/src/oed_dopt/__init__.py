"""Matrix-free D-optimal sensor placement for PDE-based Bayesian linear inverse problems.

Computes the D-optimal criterion log det(I + H(w)), its gradient, and the
posterior-to-prior KL divergence through three low-rank strategies (truncated
spectral, randomized sketching, frozen SVD), and optimizes relaxed binary
sensor designs with sparsifying penalties.  The reference application is
initial-state inversion for a 2-D advection-diffusion equation on the unit
square.

Heavy imports live in the submodules; import what you need, e.g.::

    from oed_dopt.problem import build_problem
    from oed_dopt.config import ExperimentConfig
"""

__version__ = "0.1.0"
