# %% [markdown]
# # Tracking SoC through a pulse discharge
#
# A cell starts full and is drained to about 10 % by thirty 2.85 A pulses,
# each followed by a 20 minute rest. Its RC parameters drift with SoC, but
# every estimator uses a single fixed parameter row and starts from 60 %.

# %%
import numpy as np

from aesmo import default_gains, generate_hppc_eval, simulate_truth
from aesmo.harness import compare

t, current = generate_hppc_eval()
truth = simulate_truth(current, z0=1.0)
print(f"{len(truth)} samples, final SoC {truth.true_soc[-1]:.3f}")

# %% [markdown]
# The default gain comes from the matrix-inequality design; print it together
# with the certificate numbers that back it.

# %%
gains = default_gains()
print("L  =", np.array2string(gains.l, precision=4))
print("Ls =", np.array2string(gains.ls, precision=3))

# %%
out = compare(truth, z0_guess=0.6, gains=gains)
print(f"{'estimator':<12}{'IAE':>10}{'settled max|e|':>16}{'t(2%) [s]':>12}")
for name, rep in out["reports"].items():
    print(f"{name:<12}{rep.iae:>10.1f}{rep.settled_max_err:>16.4f}{rep.time_to_2pct:>12.0f}")

# %% [markdown]
# Plot if matplotlib happens to be installed.

# %%
try:
    import matplotlib.pyplot as plt
except ImportError:
    plt = None

if plt is not None:
    fig, ax = plt.subplots(figsize=(9, 4))
    hours = out["t"] / 3600
    ax.plot(hours, out["true_soc"], "k", lw=2, label="true")
    for name in ("aesmo", "luenberger", "ukf"):
        ax.plot(hours, np.clip(out[name], -0.2, 1.2), lw=1, label=name)
    ax.set_xlabel("time [h]")
    ax.set_ylabel("SoC")
    ax.legend()
    fig.tight_layout()
    plt.show()
