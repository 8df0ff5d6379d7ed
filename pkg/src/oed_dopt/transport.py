"""Time-dependent advection-diffusion forward map and its discrete adjoint.

The forward map F takes a nodal initial state theta0, marches
(M + dt (kappa K + N)) u^m = M u^{m-1} with implicit Euler, and extracts the
state at the sensor nodes at the observation time steps.  The transpose map is
the exact discrete transpose of that recursion: a reverse-order sweep with the
transposed step matrix, injecting observation residuals at the observed steps.
Both directions reuse one sparse LU factorization of the step matrix.

Observation vectors are stacked time-major: block m holds all sensors at
observation time t_m, so entry (m, j) sits at position m * n_s + j (0-based).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .accounting import solve_counter
from .errors import ConfigError, NumericalError
from .fem import AssembledOperators, MassFactor, Mesh


@dataclass
class VelocityField:
    """Divergence-free gyre velocity on the unit square.

    Stream function psi(x, y) = (amplitude / pi) sin(pi x) sin(pi y), so
    v = (d psi / dy, -d psi / dx).  The field is analytically divergence
    free with v . n = 0 on the outer boundary.  Inside holes the field is
    zeroed; the discrete no-normal-flow condition on hole boundaries is then
    only approximate.
    """

    amplitude: float = 1.0
    holes: list = field(default_factory=list)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        vx = self.amplitude * np.sin(np.pi * x) * np.cos(np.pi * y)
        vy = -self.amplitude * np.cos(np.pi * x) * np.sin(np.pi * y)
        v = np.column_stack([vx, vy])
        for x0, y0, x1, y1 in self.holes:
            inside = (x > x0) & (x < x1) & (y > y0) & (y < y1)
            v[inside] = 0.0
        return v


@dataclass
class ObservationSetup:
    """Sensor locations and observation times snapped to the discrete grid.

    Attributes
    ----------
    sensor_nodes : (n_s,) int ndarray
        Mesh-node index of each sensor (all distinct).
    sensor_coords : (n_s, 2) ndarray
        Coordinates of the snapped sensor nodes.
    obs_steps : (n_t,) int ndarray
        Time-step indices (1-based steps of the uniform grid) at which
        observations are taken, strictly increasing.
    times : (n_t,) ndarray
        The snapped observation times obs_steps * dt.
    """

    sensor_nodes: np.ndarray
    sensor_coords: np.ndarray
    obs_steps: np.ndarray
    times: np.ndarray
    n_steps: int
    T: float

    @property
    def n_s(self) -> int:
        return len(self.sensor_nodes)

    @property
    def n_t(self) -> int:
        return len(self.obs_steps)

    @property
    def n_y(self) -> int:
        return self.n_s * self.n_t

    @property
    def dt(self) -> float:
        return self.T / self.n_steps


def make_observation_setup(
    mesh: Mesh, sensor_coords, obs_times, T: float, n_steps: int
) -> ObservationSetup:
    """Snap requested sensor coordinates and times onto the mesh / time grid.

    Sensors snap to the nearest retained mesh node and must land on distinct
    nodes; observation times snap to the nearest time-grid point and must be
    distinct and positive.
    """
    sensor_coords = np.atleast_2d(np.asarray(sensor_coords, dtype=float))
    if sensor_coords.size == 0:
        raise ConfigError("empty candidate sensor set")
    if n_steps < 1 or T <= 0:
        raise ConfigError("need n_steps >= 1 and T > 0")
    tree = cKDTree(mesh.nodes)
    _, nodes = tree.query(sensor_coords)
    nodes = np.atleast_1d(nodes).astype(int)
    if len(np.unique(nodes)) != len(nodes):
        raise ConfigError("sensors snap to coincident mesh nodes; refine the mesh or move sensors")

    dt = T / n_steps
    steps = np.array([int(round(t / dt)) for t in np.atleast_1d(obs_times)], dtype=int)
    steps = np.clip(steps, 1, n_steps)
    if len(np.unique(steps)) != len(steps):
        raise ConfigError("observation times snap to coincident time-grid points")
    if np.any(np.diff(steps) <= 0):
        raise ConfigError("observation times must be strictly increasing")

    return ObservationSetup(
        sensor_nodes=nodes,
        sensor_coords=mesh.nodes[nodes],
        obs_steps=steps,
        times=steps * dt,
        n_steps=n_steps,
        T=T,
    )


class ForwardMap:
    """Matrix-free F and F^T built on one factorized implicit-Euler step.

    The step matrix A = M + dt (kappa K + N) is factorized once; forward and
    transpose applications accept a vector or a matrix of stacked columns
    (each column counts as one PDE solve in the global tally).
    """

    def __init__(
        self,
        ops: AssembledOperators,
        mass: MassFactor,
        obs: ObservationSetup,
        kappa: float,
    ):
        if kappa < 0:
            raise ConfigError("kappa must be nonnegative")
        self.obs = obs
        self.kappa = kappa
        self.M = mass.M  # effective mass matrix (lumped or consistent)
        self.n = ops.n
        dt = obs.dt
        A = (self.M + dt * (kappa * ops.K + ops.N)).tocsc()
        try:
            self._lu = spla.splu(A)
        except RuntimeError as exc:
            raise NumericalError(f"time-step matrix factorization failed: {exc}") from exc
        self._step_matrix = A

    @property
    def n_y(self) -> int:
        return self.obs.n_y

    def apply(self, theta: np.ndarray) -> np.ndarray:
        """y = F theta for a vector (n,) or matrix (n, m) of initial states."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape[0] != self.n:
            raise ConfigError(f"initial state must have leading dimension {self.n}")
        single = theta.ndim == 1
        U = theta.reshape(self.n, -1)
        ncols = U.shape[1]
        obs = self.obs
        Y = np.empty((obs.n_y, ncols))
        obs_lookup = {step: i for i, step in enumerate(obs.obs_steps)}
        last = obs.obs_steps[-1]
        for m in range(1, last + 1):
            U = self._lu.solve(self.M @ U)
            i = obs_lookup.get(m)
            if i is not None:
                Y[i * obs.n_s : (i + 1) * obs.n_s, :] = U[obs.sensor_nodes, :]
        solve_counter.add_forward(ncols)
        return Y[:, 0] if single else Y

    def apply_transpose(self, ybar: np.ndarray) -> np.ndarray:
        """F^T ybar, the exact transpose of :meth:`apply`."""
        ybar = np.asarray(ybar, dtype=float)
        if ybar.shape[0] != self.obs.n_y:
            raise ConfigError(f"observation stack must have leading dimension {self.obs.n_y}")
        single = ybar.ndim == 1
        obs = self.obs
        Y = ybar.reshape(obs.n_y, -1)
        ncols = Y.shape[1]
        G = np.zeros((self.n, ncols))
        obs_lookup = {step: i for i, step in enumerate(obs.obs_steps)}
        last = obs.obs_steps[-1]
        for m in range(last, 0, -1):
            i = obs_lookup.get(m)
            if i is not None:
                G[obs.sensor_nodes, :] += Y[i * obs.n_s : (i + 1) * obs.n_s, :]
            G = self.M @ self._lu.solve(G, trans="T")
        solve_counter.add_adjoint(ncols)
        return G[:, 0] if single else G

    def solve_with_trajectory(self, theta0: np.ndarray):
        """Forward solve returning (snapshots, y); snapshots is (n_steps+1, n)."""
        theta0 = np.asarray(theta0, dtype=float).ravel()
        obs = self.obs
        traj = np.empty((obs.n_steps + 1, self.n))
        traj[0] = theta0
        y = np.empty(obs.n_y)
        obs_lookup = {step: i for i, step in enumerate(obs.obs_steps)}
        u = theta0
        for m in range(1, obs.n_steps + 1):
            u = self._lu.solve(self.M @ u)
            traj[m] = u
            i = obs_lookup.get(m)
            if i is not None:
                y[i * obs.n_s : (i + 1) * obs.n_s] = u[obs.sensor_nodes]
        solve_counter.add_forward(1)
        return traj, y


def synthesize_data(forward: ForwardMap, theta_true: np.ndarray, noise_pct: float, rng_seed: int):
    """Noisy observations of a true initial state.

    The noise standard deviation is identical for every sensor:
    sigma = noise_pct * max |F theta_true|.  Returns (y_obs, sigma_per_sensor).
    """
    if not 0.0 <= noise_pct < 1.0:
        raise ConfigError("noise_pct must lie in [0, 1)")
    y_clean = forward.apply(theta_true)
    peak = np.max(np.abs(y_clean))
    if peak == 0.0:
        raise ConfigError("clean observations are identically zero; noise level undefined")
    sigma = noise_pct * peak
    rng = np.random.default_rng(rng_seed)
    y_obs = y_clean + sigma * rng.standard_normal(y_clean.shape)
    return y_obs, np.full(forward.obs.n_s, sigma)
