"""Finite-volume diffusion in a spherical particle and its static corrections.

A particle of radius ``R`` is cut into ``N`` concentric shells. Shell ``i`` has
outer radius ``r_i``, volume ``V_i`` and outer surface ``S_i``; its lithium
concentration obeys the linear system ``x' = A x + B m`` where ``m`` is the
volumetric insertion rate (mol m^-3 s^-1).

The corrected concentrations

    c_cor_j = c_mean - K_j (c_mean - c_j)

reach the exact PDE values at ``r_j`` once a constant input has been applied
long enough, for any number of shells.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import DomainError, InvalidGridError, NumericalFailure

SCHEMES = ("uniform-volume", "uniform-radius")


@dataclass(frozen=True)
class RadialGrid:
    radius: float
    r: np.ndarray  # outer radii, r[-1] == radius
    volumes: np.ndarray
    surfaces: np.ndarray
    scheme: str = "uniform-volume"

    @property
    def n(self) -> int:
        return len(self.r)

    @property
    def particle_volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius**3


def build_radial_grid(n: int, radius: float, scheme: str = "uniform-volume") -> RadialGrid:
    """Shell radii, volumes and surfaces of a discretized sphere.

    ``uniform-volume`` places ``r_i = R (i/n)^(1/3)`` so every shell holds
    ``V_s/n``; ``uniform-radius`` places ``r_i = R i/n``.
    """
    if int(n) != n or n < 2:
        raise InvalidGridError(f"need at least 2 shells, got {n!r}")
    if not radius > 0:
        raise InvalidGridError(f"radius must be positive, got {radius!r}")
    n = int(n)
    i = np.arange(1, n + 1)
    v_total = 4.0 / 3.0 * np.pi * radius**3
    if scheme == "uniform-volume":
        r = radius * np.cbrt(i / n)
        volumes = np.full(n, v_total / n)
    elif scheme == "uniform-radius":
        r = radius * i / n
        r_in = np.concatenate(([0.0], r[:-1]))
        volumes = 4.0 / 3.0 * np.pi * (r**3 - r_in**3)
    else:
        raise InvalidGridError(f"unknown grid scheme {scheme!r}; expected one of {SCHEMES}")
    r[-1] = radius
    surfaces = 4.0 * np.pi * r**2
    for arr in (r, volumes, surfaces):
        arr.flags.writeable = False
    return RadialGrid(radius=float(radius), r=r, volumes=volumes, surfaces=surfaces, scheme=scheme)


def k_offset(r, tau: float, radius: float):
    """Low-frequency offset of the PDE transfer function at radius ``r`` (seconds).

    The steady profile under a constant input ``m`` is ``c_mean + k(r) m``.
    """
    r_arr = np.asarray(r, dtype=float)
    if not tau > 0:
        raise DomainError("tau must be positive")
    slack = 1e-12 * radius
    if np.any(r_arr < -slack) or np.any(r_arr > radius + slack):
        raise DomainError(f"radius {r!r} outside [0, {radius}]")
    out = ((r_arr / radius) ** 2 - 0.6) / 6.0 * tau
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DiffusionSystem:
    """Matrices of one electrode's shell model.

    ``mu[i]`` couples shell ``i`` to its outer neighbour and ``mu_tilde[i]`` to
    its inner neighbour (zero where no neighbour exists), so the diagonal of
    ``A`` is ``-(mu + mu_tilde)``.
    """

    grid: RadialGrid
    diffusivity: float
    A: np.ndarray
    B: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray
    mu_tilde: np.ndarray
    A_red: np.ndarray
    K: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def upsilon(self) -> np.ndarray:
        return self.mu + self.mu_tilde

    @property
    def gamma_red(self) -> np.ndarray:
        return self.gamma[:-1]

    @property
    def tau(self) -> float:
        return self.grid.radius**2 / self.diffusivity

    def steady_offsets(self) -> np.ndarray:
        """PDE steady offsets ``k(r_j)`` at the shell radii."""
        return k_offset(self.grid.r, self.tau, self.grid.radius)


def _assemble(grid: RadialGrid, diffusivity: float):
    n, r, vol, surf = grid.n, grid.r, grid.volumes, grid.surfaces
    dr = np.diff(r)
    conductance = surf[:-1] * diffusivity / dr  # flux coefficient across interface i|i+1
    mu = np.zeros(n)
    mu_tilde = np.zeros(n)
    mu[:-1] = conductance / vol[:-1]
    mu_tilde[1:] = conductance / vol[1:]
    A = np.diag(-(mu + mu_tilde)) + np.diag(mu_tilde[1:], -1) + np.diag(mu[:-1], 1)
    B = np.zeros(n)
    B[-1] = grid.particle_volume / vol[-1]
    return A, B, mu, mu_tilde


def _reduce(A: np.ndarray, volumes: np.ndarray) -> np.ndarray:
    # eliminate the last mismatch entry through sum_i V_i xt_i = 0
    return A[:-1, :-1] - np.outer(A[:-1, -1], volumes[:-1] / volumes[-1])


def _solve_reduced(A_red: np.ndarray) -> np.ndarray:
    """Solve ``A_red y = 1`` by LU with partial pivoting."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)  # singularity handled below
            lu, piv = scipy.linalg.lu_factor(A_red, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalFailure(f"cannot factor reduced matrix: {exc}") from None
    if np.any(np.diag(lu) == 0.0):
        raise NumericalFailure("reduced matrix is singular; the grid is malformed")
    y = scipy.linalg.lu_solve((lu, piv), np.ones(A_red.shape[0]))
    if not np.all(np.isfinite(y)):
        raise NumericalFailure("reduced solve produced non-finite values")
    return y


def correction_coefficients(sys: DiffusionSystem | None = None, grid: RadialGrid | None = None, *,
                            A_red: np.ndarray | None = None, diffusivity: float | None = None) -> np.ndarray:
    """Static correction coefficients ``K_j``, one per shell.

    Either pass an assembled system, or a grid together with ``A_red`` and
    ``diffusivity``.
    """
    if sys is not None:
        grid = grid or sys.grid
        A_red = sys.A_red
        diffusivity = sys.diffusivity
    y = _solve_reduced(A_red)
    tau = grid.radius**2 / diffusivity
    k = k_offset(grid.r, tau, grid.radius)
    K = np.empty(grid.n)
    K[:-1] = k[:-1] / y
    denom = grid.volumes[:-1] @ y
    if denom == 0.0:
        raise NumericalFailure("surface correction denominator vanished")
    K[-1] = -k[-1] * grid.volumes[-1] / denom
    return K


def build_diffusion_system(grid: RadialGrid, diffusivity: float) -> DiffusionSystem:
    if not diffusivity > 0:
        raise DomainError("diffusivity must be positive")
    A, B, mu, mu_tilde = _assemble(grid, diffusivity)
    A_red = _reduce(A, grid.volumes)
    K = correction_coefficients(grid=grid, A_red=A_red, diffusivity=diffusivity)
    gamma = np.array(grid.volumes, dtype=float)
    for arr in (A, B, gamma, mu, mu_tilde, A_red, K):
        arr.flags.writeable = False
    return DiffusionSystem(grid=grid, diffusivity=float(diffusivity), A=A, B=B, gamma=gamma,
                           mu=mu, mu_tilde=mu_tilde, A_red=A_red, K=K)


def electrode_system(params, n: int, scheme: str = "uniform-volume") -> DiffusionSystem:
    """Shortcut: grid plus system for an :class:`~battkit.params.ElectrodeParams`."""
    return build_diffusion_system(build_radial_grid(n, params.radius, scheme), params.diffusivity)


def mean_concentration(x, grid: RadialGrid):
    """Volume-weighted mean over the shells (axis 0 of ``x``)."""
    x = np.asarray(x, dtype=float)
    return np.tensordot(grid.volumes, x, axes=(0, 0)) / grid.particle_volume


def correct_concentrations(x, K, grid: RadialGrid):
    """Apply ``c_mean - K_j (c_mean - c_j)`` shell by shell.

    ``x`` may carry trailing axes (time, batch); shells run along axis 0.
    """
    x = np.asarray(x, dtype=float)
    K = np.asarray(K, dtype=float)
    if x.shape[0] != grid.n or K.shape != (grid.n,):
        raise ValueError(f"expected {grid.n} shells, got x{x.shape} and K{K.shape}")
    mean = mean_concentration(x, grid)
    K = K.reshape((-1,) + (1,) * (x.ndim - 1))
    return mean - K * (mean - x)


def steady_mismatch(sys: DiffusionSystem, m: float) -> np.ndarray:
    """Steady value of ``c_mean - x`` under a constant input ``m``."""
    y = _solve_reduced(sys.A_red)
    out = np.empty(sys.n)
    out[:-1] = -y * m
    out[-1] = sys.gamma_red @ y * m / sys.gamma[-1]
    return out


class HurwitzCheck(NamedTuple):
    hurwitz: bool
    max_real: float
    threshold: float


def is_hurwitz(M) -> HurwitzCheck:
    """True when every eigenvalue has real part below ``-1e-12 * ||M||``."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix")
    try:
        eig = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigenvalue solver failed: {exc}") from None
    max_real = float(np.max(eig.real))
    threshold = -1e-12 * float(np.linalg.norm(M, 2))
    return HurwitzCheck(max_real < threshold, max_real, threshold)


def tridiagonal_spectrum(A) -> np.ndarray:
    """Eigenvalues (ascending) of a tridiagonal matrix with positive off-diagonal products.

    A diagonal similarity makes the matrix symmetric, which lets a symmetric
    tridiagonal solver return exactly real eigenvalues.
    """
    A = np.asarray(A, dtype=float)
    lower = np.diag(A, -1)
    upper = np.diag(A, 1)
    prod = lower * upper
    if np.any(prod <= 0):
        raise NumericalFailure("off-diagonal products must be positive to symmetrize")
    try:
        return scipy.linalg.eigh_tridiagonal(np.diag(A).copy(), np.sqrt(prod), eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigenvalue solver failed: {exc}") from None


def check_physical(x, c_max: float, label: str = "concentration") -> bool:
    """Warn (never raise) when concentrations leave ``[0, c_max]``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"non-finite {label}")
    ok = bool(np.all(x >= 0) and np.all(x <= c_max))
    if not ok:
        warnings.warn(f"{label} left [0, {c_max:g}] (min {x.min():.4g}, max {x.max():.4g})",
                      RuntimeWarning, stacklevel=2)
    return ok
