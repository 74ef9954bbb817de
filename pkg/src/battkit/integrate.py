"""Fixed-step time integration shared by plants and observers.

Inputs are held constant over each step (zero-order hold): ``inputs[k]`` acts
on ``[t_k, t_{k+1})``.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import IntegrationFailure

METHODS = ("rk4", "implicit-linear")


def rk4_step(rhs, t, x, h, u):
    k1 = rhs(t, x, u)
    k2 = rhs(t + h / 2, x + h / 2 * k1, u)
    k3 = rhs(t + h / 2, x + h / 2 * k2, u)
    k4 = rhs(t + h, x + h * k3, u)
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _check_grid(t_grid):
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or len(t_grid) < 1:
        raise ValueError("time grid must be a non-empty 1-D array")
    if len(t_grid) > 1:
        h = np.diff(t_grid)
        if np.any(h <= 0) or not np.allclose(h, h[0], rtol=1e-9, atol=0):
            raise ValueError("time grid must be uniform and increasing")
    return t_grid


def integrate(rhs, x0, t_grid, method: str = "rk4", inputs=None, *, jacobian=None,
              substeps: int = 1, record_every: int = 1):
    """Integrate ``x' = rhs(t, x, u)`` on a uniform grid.

    Parameters
    ----------
    rhs : callable
        ``rhs(t, x, u)``; ``x`` may be a vector or an ``(n, batch)`` array.
    x0 : array_like
    t_grid : array_like
        Uniform, increasing times.
    method : {"rk4", "implicit-linear"}
        ``implicit-linear`` is backward Euler for ``rhs = jacobian @ x + f(t, u)``
        and needs ``jacobian``.
    inputs : array_like, optional
        One input per step, held over the step.
    substeps : int
        RK4 sub-steps per grid step (the input stays held).
    record_every : int
        Keep every ``record_every``-th state (the last one is always kept).

    Returns
    -------
    t, x : ndarray
        Recorded times and states, states stacked on axis 0.
    """
    t_grid = _check_grid(t_grid)
    steps = len(t_grid) - 1
    if inputs is None:
        inputs = np.zeros(steps)
    inputs = np.asarray(inputs, dtype=float)
    if len(inputs) < steps:
        raise ValueError(f"need {steps} input samples, got {len(inputs)}")
    x = np.array(x0, dtype=float)
    h = t_grid[1] - t_grid[0] if steps else 0.0
    keep = list(range(0, steps + 1, record_every))
    if keep[-1] != steps:
        keep.append(steps)
    out = np.empty((len(keep),) + x.shape)
    slot = 0

    if method == "implicit-linear":
        if jacobian is None:
            raise ValueError("implicit-linear needs the jacobian of the linear system")
        J = np.asarray(jacobian, dtype=float)
        lu = scipy.linalg.lu_factor(np.eye(J.shape[0]) - h * J) if steps else None
        zero = np.zeros_like(x)
    elif method == "rk4":
        hs = h / substeps
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")

    for k in range(steps + 1):
        if k:
            u = inputs[k - 1]
            t = t_grid[k - 1]
            if method == "rk4":
                for j in range(substeps):
                    x = rk4_step(rhs, t + j * hs, x, hs, u)
            else:
                x = scipy.linalg.lu_solve(lu, x + h * rhs(t_grid[k], zero, u))
            if not np.all(np.isfinite(x)):
                raise IntegrationFailure(f"non-finite state at step {k}", step=k)
        if slot < len(keep) and keep[slot] == k:
            out[slot] = x
            slot += 1
    return t_grid[keep], out
