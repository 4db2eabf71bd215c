# %% [markdown]
# # Sensor noise and resistance spread
#
# Two stress tests on the pulse discharge. The first adds 5 % current noise
# and 1 % voltage noise. The second scales the cell's internal resistance by
# a random factor within ±20 % that the observer does not know about.

# %%
import numpy as np

from aesmo import add_noise, default_gains, generate_hppc_eval, run_estimation, simulate_truth
from aesmo.harness import monte_carlo_rint

gains = default_gains()
truth = simulate_truth(generate_hppc_eval()[1])

# %%
worst = []
for seed in range(10):
    _, rep = run_estimation(add_noise(truth, seed=seed), "aesmo", gains)
    worst.append(rep.settled_max_err)
print("noisy runs, settled max|e|:", np.round(worst, 4))

# %%
reports = monte_carlo_rint(pct=20.0, trials=50, seed=0, gains=gains)
errs = np.array([r.settled_max_err for r in reports])
print(f"Rint ±20 %: worst {errs.max():.4f}, median {np.median(errs):.4f} over {errs.size} trials")
