"""The time for the reflected Wright-Fisher diffusion to reach 1 has the law
of the explosion time of the birth chain started from K(x0, .).

Run with ``python demos/02_absorption_vs_explosion.py``; it prints a table
(t, empirical CDF, lower and upper bound) ready for plotting.
"""

# %% Exact moments of the explosion time from level 0.
import math

from wfintertwine.analytics import explosion_mean, explosion_variance

print(f"mean {explosion_mean(0):.7f} (ln 2 = {math.log(2):.7f})")
print(f"variance {explosion_variance(0):.7f} (pi^2/6 - 2 ln 2 = {math.pi**2 / 6 - 2 * math.log(2):.7f})")

# %% Simulate both sides.
import numpy as np
from scipy.stats import ks_2samp

from wfintertwine.sim import SimConfig, birth_ensemble, wf_ensemble

x0 = 0.5
absorbed = wf_ensemble(x0, SimConfig(n_paths=5000, dt_base=1e-4, master_seed=1)).event_time
exploded = birth_ensemble(SimConfig(n_paths=5000, master_seed=2), x_mix=x0).event_time
print(f"means: WF {absorbed.mean():.4f}, birth mixture {exploded.mean():.4f}")
print(f"two-sample KS distance {ks_2samp(absorbed, exploded).statistic:.4f}")

# %% Rigorous CDF sandwich from the hypoexponential truncation.
from wfintertwine.analytics import absorption_cdf_from, absorption_mean_from

print(f"exact mean from x0={x0}: {absorption_mean_from(x0):.4f}")
grid = np.linspace(0.0, 2.0, 21)
lower, upper = absorption_cdf_from(x0, grid)
ecdf = np.searchsorted(np.sort(absorbed), grid, side="right") / absorbed.size
print("t,ecdf,lower,upper")
for row in zip(grid, ecdf, lower, upper):
    print(",".join(f"{v:.4f}" for v in row))
