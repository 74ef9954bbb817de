# %% [markdown]
# Shell model of one particle against a fine reference
#
# A few shells reproduce the mean concentration exactly but get the surface
# wrong by a constant offset once a constant current has run long enough.
# The static correction moves every shell onto the diffusion equation's
# steady profile.

# %%
import numpy as np

from battkit import default_params
from battkit.cell import m_from_current
from battkit.diffusion import correct_concentrations, electrode_system, mean_concentration, steady_mismatch
from battkit.reference import solve_reference

params = default_params()
el = params.pos
m = float(m_from_current(6.0, "pos", params))
sys = electrode_system(el, 5)
print(f"tau = {sys.tau:.0f} s, m = {m:.4f} mol/m3/s")
print("shell radii / R:", np.round(sys.grid.r / el.radius, 4))
print("correction coefficients K:", np.round(sys.K, 4))

# %% the fine reference, recorded at the shell radii
c0 = 0.5 * el.c_max
ref = solve_reference(el, 400, m, c0, probes=sys.grid.r)

# %% the coarse model, stepped with backward Euler on the same time grid
dt = ref.t[1] - ref.t[0]
M = np.eye(sys.n) - dt * sys.A
x = np.full(sys.n, c0)
for _ in range(len(ref.t) - 1):
    x = np.linalg.solve(M, x + dt * sys.B * m)

cor = correct_concentrations(x, sys.K, sys.grid)
mean = mean_concentration(x, sys.grid)
print(f"\nafter {ref.t[-1] / sys.tau:.0f} tau")
print("reference - mean     :", np.round(ref.probe_values[-1] - mean, 2))
print("uncorrected - mean   :", np.round(x - mean, 2))
print("corrected - mean     :", np.round(cor - mean, 2))
print("predicted mean - x   :", np.round(steady_mismatch(sys, m), 2))
print("k(r_j) m             :", np.round(sys.steady_offsets() * m, 2))
