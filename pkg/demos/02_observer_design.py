# %% [markdown]
# Observer gain for the 7-state cell model
#
# The gain comes from a small semidefinite program over the four corners of
# the OCV slope box. The certificate is re-checked in float64 afterwards,
# and the printed gain data is put through the same check.

# %%
import numpy as np

from battkit import default_params
from battkit.cell import cell_model, equilibrium_state, soc
from battkit.observer import build_vertices, design_gain, printed_design, simulate_coupled, verify_lmi

params = default_params()
model = cell_model(params, 4, 4)
V = build_vertices(model)
print("slope bounds neg:", V.bounds_neg, " pos:", V.bounds_pos)

d = design_gain(model.A, model.E, V)
print("L =", np.array2string(d.L, precision=4))
print("eps, mu_w, mu_v =", d.eps, d.mu_w, d.mu_v)
print("normalized margins:", np.array2string(d.certificate.margins, precision=3))

# %% printed gain data, P given to three digits only
L, P, eps, mu_w, mu_v = printed_design()
cert = verify_lmi(model.A, model.B, V, L, P, eps, mu_w, mu_v)
print("\nprinted design, normalized max eigenvalues:", np.array2string(cert.max_eig, precision=3))
print("passes:", cert.passed)

# %% estimate from 0% while the cell discharges from 100% at 0.3 A
dt, steps = 0.5, 20000
run = simulate_coupled(model, d.L, np.full(steps, 0.3), equilibrium_state(model, 100.0),
                       equilibrium_state(model, 0.0), dt, record_every=2000)
for t, x, xh in zip(run.t, run.x, run.x_hat):
    print(f"t = {t:7.0f} s  SOC {float(soc(x, model)):6.2f}%  estimate {float(soc(xh, model)):6.2f}%")
