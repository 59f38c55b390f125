"""Exact checks of the intertwining relations on the polynomial subspaces.

Run with ``python demos/01_exact_identities.py``.
"""

# %% The two generators as matrices.
# G acts on coefficients of 1, x^2, ..., x^(2n); H acts on (f(0), ..., f(y0), f(inf)).
from wfintertwine.poly import RATIONAL, build_G_matrix, build_H_matrix

print(build_G_matrix(3, RATIONAL).entries.astype(int))
print(build_H_matrix(3, RATIONAL).entries.astype(int))

# %% Generator intertwining in exact rational arithmetic.
from wfintertwine.intertwine import verify_GK_KH

for y0 in (0, 4, 12):
    r = verify_GK_KH(y0, RATIONAL)
    print(f"y0={y0:2d}  GK - KH residual = {r.max_abs_residual}")

# %% A wrong birth rate breaks the identity, so the check has teeth.
r = verify_GK_KH(3, RATIONAL, rates={1: 13})
print("rate 12 -> 13 at y=1:", r.passed, r.max_abs_residual)

# %% Semigroup intertwining: the only error left is the matrix exponential.
from wfintertwine.intertwine import verify_PtK_KQt

for t in (0.01, 0.1, 1.0, 5.0):
    print(f"t={t:<5} max |P_t K - K Q_t| = {verify_PtK_KQt(t, 12).max_abs_residual:.2e}")

# %% The coupled generator on [0,1] x N intertwines with both marginals.
from wfintertwine.intertwine import verify_Lambda_intertwining, verify_Psi_intertwining

for n in range(6):
    a = verify_Lambda_intertwining(n, RATIONAL).max_abs_residual
    b = verify_Psi_intertwining(n, RATIONAL).max_abs_residual
    print(f"n={n}  Lambda: {a}  Psi: {b}")

# %% Small-time behaviour: (P^(t) f - f) / t approaches the coupled generator.
from wfintertwine.intertwine import APPROX_POINTS, APPROX_TIMES, verify_Pt_approximation
from wfintertwine.kernels import phi_lift
from wfintertwine.poly import EvenPolynomial

r = verify_Pt_approximation(APPROX_TIMES, phi_lift(EvenPolynomial([0.0, 1.0])), APPROX_POINTS)
for t, d in zip(r.times, r.deviations):
    print(f"t={t:.2e}  max deviation {d:.3e}")
print(f"empirical order {r.order:.3f}")
