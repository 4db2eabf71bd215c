# %% [markdown]
# # Recovering circuit parameters from a pulse test
#
# Simulate the identification protocol on a cell with known parameters, then
# fit R_int from the voltage step and the two RC branches from each
# relaxation curve.

# %%
from aesmo import PulseSchedule, generate_ident_profile, identify, simulate_truth
from aesmo.reference import TABLE1

cell = TABLE1[0.5]
sched = PulseSchedule()
t, current = generate_ident_profile(sched)
tel = simulate_truth(current, cell, z0=sched.z0)
print(f"profile: {t[-1] / 3600:.1f} h, {len(sched.soc_steps)} pulses")

# %%
result = identify(t, current, tel.voltage, cell.q_total, z0=sched.z0)
print(f"{'SoC':>5}{'R_int':>10}{'tau_s':>9}{'tau_f':>9}{'resid [V]':>11}")
for row in result.rows:
    p = row.params
    print(f"{row.soc:>5.2f}{p.r_int * 1e3:>8.2f}mΩ{p.tau_s:>9.1f}{p.tau_f:>9.1f}{row.residual_v:>11.1e}")
print(f"true  {cell.r_int * 1e3:.2f}mΩ  tau_s {cell.tau_s:.1f}  tau_f {cell.tau_f:.1f}")

# %% [markdown]
# The result serializes to JSON and can be handed straight to the CLI
# (``aesmo synthesize --params ident.json --soc 0.1 ...``).

# %%
print(result.to_json()[:200], "...")
