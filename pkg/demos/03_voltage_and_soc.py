# %% [markdown]
# Voltage and SOC on a synthetic drive cycle
#
# The fine reference plays the cell. The uncorrected and corrected reduced
# models predict its terminal voltage, then observers built on each track SOC
# from biased current and voltage.

# %%
import numpy as np

from battkit import default_params
from battkit.cell import cell_model
from battkit.observer import build_vertices, design_gain
from battkit.sim import CampaignConfig, compare_models, coulomb_soc, run_campaign, synthetic_phev

params = default_params()
model = cell_model(params, 4, 4)
profile = synthetic_phev(seed=0)
_, soc_cc = coulomb_soc(profile, params.Q_cell)
print(f"profile: {len(profile.t)} pulses, SOC swings {soc_cc.max():.1f}% -> {soc_cc.min():.1f}% -> {soc_cc[-1]:.1f}%")

res = compare_models(model, profile)
for key in ("uncorrected@0-3600", "corrected@0-3600", "uncorrected@0-4500", "corrected@0-4500"):
    e = res[key]["e_V_mV"]
    print(f"{key:20s} voltage MAE {e['MAE']:.2f} mV  RMSE {e['RMSE']:.2f} mV")

# %% a shortened SOC sweep (the default runs 21 initial guesses)
design = design_gain(model.A, model.E, build_vertices(model))
cfg = CampaignConfig(soc_sweep=(0.0, 50.0, 100.0), gain_scales=(1.0, 10.0))
out = run_campaign(model, design, cfg)
for key, m in sorted(out["metrics"].items()):
    print(f"{key:28s} SOC MAE {m['e_SOC']['MAE']:6.3f}  e_c_pos MAE {m['e_c_pos']['MAE']:.3f}%")
