"""High-resolution solution of spherical diffusion, used as the ground truth.

The particle is resolved with the same shell assembly as
:mod:`battkit.diffusion` but hundreds of shells, integrated with backward
Euler. Shell values are read as cell-centred samples: on the default
``uniform-radius`` grid a shell's concentration sits at its mid radius, the
centre has zero flux, and the surface value is extrapolated linearly from the
last two shells. That read-out is second order in the shell width.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg.lapack as lapack

from .diffusion import build_diffusion_system, build_radial_grid, k_offset
from .errors import DomainError, IntegrationFailure


@dataclass
class ReferenceSolution:
    t: np.ndarray  # recorded times, s
    nodes: np.ndarray  # radius carried by each shell value, m
    radius: float
    diffusivity: float
    volumes: np.ndarray
    field: np.ndarray | None  # (len(t), n_ref) when recorded in full
    probes: np.ndarray | None  # probe radii, m
    probe_values: np.ndarray | None  # (len(t), n_probes)
    mean: np.ndarray  # volume-weighted mean at every recorded time
    surface: np.ndarray  # value at r = R at every recorded time

    @property
    def tau(self) -> float:
        return self.radius**2 / self.diffusivity

    def at(self, r, index=slice(None)):
        """Concentration at radius ``r`` (scalar or array) over the recorded times."""
        if self.field is None:
            raise ValueError("full field not recorded; pass probes to solve_reference instead")
        rows = np.atleast_2d(self.field[index])
        out = np.array([sample_profile(row, self.nodes, self.radius, r) for row in rows])
        return out if np.ndim(self.field[index]) > 1 else out[0]

    def probe(self, r) -> np.ndarray:
        """History at one of the probe radii given to :func:`solve_reference`."""
        if self.probes is None:
            return self.at(r)
        hit = np.flatnonzero(np.isclose(self.probes, r, rtol=0, atol=1e-12 * self.radius))
        if hit.size == 0:
            raise KeyError(f"radius {r!r} was not probed")
        return self.probe_values[:, hit[0]]

    def flux(self, index=-1) -> tuple[np.ndarray, np.ndarray]:
        """Flux density ``-D dc/dr`` on the shell interfaces plus both boundaries."""
        if self.field is None:
            raise ValueError("flux needs the full field")
        row = self.field[index]
        faces = 0.5 * (self.nodes[1:] + self.nodes[:-1])
        inner = -self.diffusivity * np.diff(row) / np.diff(self.nodes)
        edge = inner[-1] if self.nodes[-1] < self.radius else -self.diffusivity * (row[-1] - row[-2]) / (
            self.nodes[-1] - self.nodes[-2])
        r = np.concatenate(([0.0], faces, [self.radius]))
        return r, np.concatenate(([0.0], inner, [edge]))

    def to_csv(self, path, every: int = 1) -> Path:
        """Write long-format ``t,r,c`` rows (full field only)."""
        if self.field is None:
            raise ValueError("full field not recorded")
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "r_m", "c_mol_m3"])
            for k in range(0, len(self.t), every):
                for r, c in zip(self.nodes, self.field[k]):
                    w.writerow([repr(float(self.t[k])), repr(float(r)), repr(float(c))])
        return path


def _nodes(grid) -> np.ndarray:
    r_in = np.concatenate(([0.0], grid.r[:-1]))
    if grid.scheme == "uniform-radius":
        return 0.5 * (r_in + grid.r)
    # outer radius is where the shell model's own analysis places its samples
    return np.array(grid.r)


def _surface(values, nodes, radius):
    values = np.asarray(values)
    if nodes[-1] >= radius:
        return values[..., -1]
    slope = (values[..., -1] - values[..., -2]) / (nodes[-1] - nodes[-2])
    return values[..., -1] + slope * (radius - nodes[-1])


def sample_profile(values, nodes, radius, r):
    """Piecewise-linear read-out of shell values at radius ``r``."""
    values = np.asarray(values, dtype=float)
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0) or np.any(r_arr > radius * (1 + 1e-12)):
        raise DomainError(f"radius outside [0, {radius}]")
    xs = np.concatenate((nodes, [radius])) if nodes[-1] < radius else nodes
    ys = np.concatenate((values, [_surface(values, nodes, radius)])) if nodes[-1] < radius else values
    out = np.interp(r_arr, xs, ys)
    return float(out) if out.ndim == 0 else out


def _input_sequence(m, times):
    if callable(m):
        return np.array([float(m(t)) for t in times])
    arr = np.asarray(m, dtype=float)
    if arr.ndim == 0:
        return np.full(len(times), float(arr))
    if len(arr) < len(times):
        raise ValueError(f"input has {len(arr)} samples, need {len(times)}")
    return arr[: len(times)]


def solve_reference(params, n_ref: int = 400, m=0.0, c0: float = 0.0, horizon: float | None = None,
                    dt: float | None = None, *, scheme: str = "uniform-radius", probes=None,
                    record_every: int = 1) -> ReferenceSolution:
    """Integrate the fine shell model of one electrode.

    Parameters
    ----------
    params : ElectrodeParams
    n_ref : int
        Number of shells, at least 100.
    m : float, callable or array
        Volumetric insertion rate in mol m^-3 s^-1, held constant over each
        step (a callable is sampled at the start of the step).
    c0 : float
        Uniform initial concentration.
    horizon, dt : float
        Final time and step; ``dt`` defaults to ``tau/2000`` and ``horizon`` to
        ``10 tau``.
    probes : array_like, optional
        Radii to record at every step instead of the full field.
    """
    if n_ref < 100:
        raise DomainError("the reference needs at least 100 shells")
    if c0 < 0:
        raise DomainError("initial concentration must be non-negative")
    tau = params.radius**2 / params.diffusivity
    dt = tau / 2000 if dt is None else float(dt)
    horizon = 10 * tau if horizon is None else float(horizon)
    if not dt > 0:
        raise DomainError("dt must be positive")
    steps = int(round(horizon / dt))
    grid = build_radial_grid(n_ref, params.radius, scheme)
    sys = build_diffusion_system(grid, params.diffusivity)
    nodes = _nodes(grid)
    times = np.arange(steps + 1) * dt
    m_seq = _input_sequence(m, times[:-1])

    # (I - dt A) x_{k+1} = x_k + dt B m_k, tridiagonal LU factored once
    dl = -dt * np.diag(sys.A, -1)
    d = 1.0 - dt * np.diag(sys.A)
    du = -dt * np.diag(sys.A, 1)
    dl, d, du, du2, ipiv, info = lapack.dgttrf(dl, d, du)
    if info != 0:
        raise IntegrationFailure("backward-Euler matrix is singular", step=0)
    b_surface = dt * sys.B[-1]

    rec = np.arange(0, steps + 1, record_every)
    if rec[-1] != steps:
        rec = np.append(rec, steps)
    probes_arr = None if probes is None else np.atleast_1d(np.asarray(probes, dtype=float))
    field = None if probes_arr is not None else np.empty((len(rec), n_ref))
    probe_values = None if probes_arr is None else np.empty((len(times), len(probes_arr)))
    mean = np.empty(len(times))
    surface = np.empty(len(times))
    v_total = grid.particle_volume

    x = np.full(n_ref, float(c0))
    slot = 0
    for k in range(steps + 1):
        if k:
            rhs = x.copy()
            rhs[-1] += b_surface * m_seq[k - 1]
            x, info = lapack.dgttrs(dl, d, du, du2, ipiv, rhs)
            if info != 0 or not np.isfinite(x[-1]) or not np.isfinite(x[0]):
                raise IntegrationFailure(f"reference solve failed at step {k}", step=k)
        mean[k] = grid.volumes @ x / v_total
        surface[k] = _surface(x, nodes, params.radius)
        if probe_values is not None:
            probe_values[k] = sample_profile(x, nodes, params.radius, probes_arr)
        elif slot < len(rec) and rec[slot] == k:
            field[slot] = x
            slot += 1
    if not np.all(np.isfinite(mean)):
        bad = int(np.flatnonzero(~np.isfinite(mean))[0])
        raise IntegrationFailure(f"non-finite concentration at step {bad}", step=bad)
    keep = rec if field is not None else slice(None)
    return ReferenceSolution(t=times[keep], nodes=nodes,
                             radius=params.radius, diffusivity=params.diffusivity,
                             volumes=np.array(grid.volumes), field=field, probes=probes_arr,
                             probe_values=probe_values,
                             mean=mean[keep], surface=surface[keep])


def steady_profile(c_mean_inf: float, m: float, tau: float, radius: float, r):
    """Asymptotic concentration at ``r`` under a constant input: ``c_mean + k(r) m``."""
    return c_mean_inf + k_offset(r, tau, radius) * m
