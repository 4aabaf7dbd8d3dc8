"""
How much does the regulariser cost?
===================================

Adding tau times an entropy buys a geometric rate, but the limit minimises
the regularised cost.  Shrinking tau moves the final unregularised cost
towards its infimum; the grid oracle on a small deterministic instance gives
the infimum itself.
"""
# %%
import numpy as np

from bmdp import (ActionSpace, LQModel, LQModelParams, MirrorDescentConfig, RelativeEntropy, cost,
                  oracle_optimal_control)
from bmdp.solver import grid_oracle

model = LQModel(LQModelParams(beta=0.1, B=1.0, sigma0=0.0, Q=1.0, R=1.0, G=1.0, x0=0.5),
                ActionSpace.linspace(-1.0, 1.0, 3))
base = MirrorDescentConfig(model=model, regularizer=RelativeEntropy(), tau=0.0, n_steps=2)

# %%
star0 = grid_oracle(base)
j_inf = cost(base.tree, model, None, 0.0, star0)
print(f"grid infimum of J0: {j_inf:.6f}")

# %%
print(f"\n{'tau':>7} {'J0(pi*_tau)':>12} {'bias':>10}")
for tau in (1.0, 0.5, 0.2, 0.1, 0.05, 0.02):
    config = MirrorDescentConfig(model=model, regularizer=RelativeEntropy(), tau=tau, lam=max(1.0, tau),
                                 n_steps=2)
    # the Gibbs map gets steeper as tau shrinks, so damp the fixed point harder
    star = oracle_optimal_control(config, damping=min(0.5, tau), max_iter=200000)
    j0 = cost(config.tree, model, None, 0.0, star)
    print(f"{tau:7.2f} {j0:12.6f} {j0 - j_inf:10.2e}")
# the bias falls quickly with tau; near zero it is limited by the 1/64 grid of the oracle

# %%
print("\nroot law at tau = 0.02:", np.round(star.weights[0][0], 4), " grid:", star0.weights[0][0])
