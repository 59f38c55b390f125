"""Inside the coupling: given the diffusion path, the birth level is
distributed as K(X_t, .), and at fixed level the diffusion drifts towards
sqrt(y / (y + 1)).

Run with ``python demos/03_averaging_and_drift.py`` (well under a minute).
"""

# %% One coupled path.
import numpy as np

from wfintertwine.sim import SimConfig, simulate_coupled

cfg = SimConfig(t_max=1.0, master_seed=0)
path = simulate_coupled(0.3, cfg, np.random.default_rng(0), sample_times=np.linspace(0, 1, 11))
print("t,x,y")
for t, x, y in zip(path.times, path.x, path.y):
    print(f"{t:.1f},{x:.4f},{y}")
print(f"explosion at {path.explosion_time:.4f}")

# %% Averaging: law of Y_t against the ensemble mean of K(X_t, .).
from wfintertwine.sim import check_averaging

rep = check_averaging([0.05, 0.2, 0.5], 0.5, n_paths=20_000, config=SimConfig(t_max=0.5))
for t, tv, p, q in zip(rep.times, rep.total_variation, rep.p0_empirical, rep.p0_exact):
    print(f"t={t}: TV {tv:.4f}, P(Y=0) {p:.4f} vs {q:.4f}")

# %% Drift towards the level's equilibrium point.
from wfintertwine.sim import drift_sign_check

rep = drift_sign_check(n_paths=5000)
for s in rep.sides:
    print(f"y={s['y']} {s['side']:5s} of x_y={s['x_eq']:.3f}: mean dx {s['mean']:+.2e}, z={s['z']:.1f}")
print("passed:", rep.passed)
