"""Plaintext primal-dual run on the three-agent SVA instance.

Prints the iteration count, the final point against the optimum reported for
this instance, and how the stopping tolerance trades iterations for accuracy.
"""
import numpy as np

from privopt import paper_instance, solve_plaintext, SolverConfig
from privopt import problem as pb

REPORTED = np.array([0.0, 0.5258, 0.4347, 0.0621, 0.1016, 0.0])

inst = paper_instance()
res = solve_plaintext(inst, SolverConfig())
x = res.final.stacked()[:6]
print(f"default run: {res.status} after {res.iterations} iterations")
print("  x      =", np.round(x, 4))
print("  lambda =", np.round(res.final.lam, 4))
print(f"  max |x - reported| = {np.abs(x - REPORTED).max():.2e}")

# the error metric over the first iterations
for s in res.trace[1:6]:
    print(f"  k={s.k:3d}  eps={s.epsilon:.3e}")

# tighter tolerances cost iterations and buy decimals
for eps0 in (1e-3, 1e-5, 1e-8):
    r = solve_plaintext(inst, SolverConfig(eps0=eps0, k_max=5000))
    xr = r.final.stacked()[:6]
    viol = pb.constraint_aggregate(inst, r.final.x).max()
    print(f"eps0={eps0:.0e}: {r.iterations:4d} iterations, "
          f"max |x - reported|={np.abs(xr - REPORTED).max():.1e}, max constraint={viol:.1e}")
