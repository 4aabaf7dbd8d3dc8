"""
Checking the ingredients
========================

Before trusting a run it pays to test the pieces: the model audit, the
exactness of the discrete adjoint, the sampled convexity probes and the BMO
size of the martingale integrand.
"""
# %%
import numpy as np

from bmdp import (ActionSpace, LQModel, LQModelParams, MirrorDescentConfig, assumption_audit, bmo_diagnostic,
                  build_tree, cost, first_variation, simulate_state, solve_adjoint, theorem_probes)
from bmdp.dynamics import lq_concave_terminal
from bmdp.solver import ControlField, random_control

actions = ActionSpace.linspace(-1.0, 1.0, 5)
params = LQModelParams(beta=0.1, B=1.0, sigma0=0.3, Q=1.0, R=1.0, G=1.0, x0=0.5)
model = LQModel(params, actions)
rng = np.random.default_rng(0)

# %%
# Structural audit on random states and laws.
tree = build_tree(1.0, 4, 1)
report = assumption_audit(model, tree, rng.dirichlet(np.ones(5), 200), rng.normal(size=(200, 1)))
print("audit flags:", report.flagged or "none", " margins:", {k: f"{v:.1e}" for k, v in report.margins.items()})
concave = lq_concave_terminal(params, actions)
report = assumption_audit(concave, tree, rng.dirichlet(np.ones(5), 200), rng.normal(size=(200, 1)))
print("concave terminal cost flags:", report.flagged)

# %%
# The adjoint is the exact gradient of the discrete cost, so difference
# quotients converge to the first variation at rate eps.
tree = build_tree(1.0, 8, 1)
ref = np.full(5, 0.2)
pi, other = random_control(tree, ref, rng), random_control(tree, ref, rng)
fv = first_variation(tree, model, pi, other)
base = cost(tree, model, None, 0.0, pi)
for eps in (1e-2, 1e-3, 1e-4):
    fd = (cost(tree, model, None, 0.0, pi.mix(other, eps)) - base) / eps
    print(f"eps={eps:.0e}: difference quotient {fd:.10f}, first variation {fv:.10f}, error {abs(fd - fv):.1e}")

# %%
# BMO size of Z for the uniform control, under refinement of the tree.
for n in (4, 8, 12):
    tree = build_tree(1.0, n, 1)
    uniform = ControlField.constant(tree, ref)
    adj = solve_adjoint(tree, model, uniform, simulate_state(tree, model, uniform))
    print(f"n_steps={n:2d}: BMO diagnostic {bmo_diagnostic(tree, adj):.6f}")

# %%
# Sampled first-order inequalities: clean on the convex model, violated on the concave one.
for name, m in (("convex", model), ("concave", concave)):
    config = MirrorDescentConfig(model=m, tau=0.0, lam=4.0, n_steps=6, n_probe_pairs=20)
    s = theorem_probes(config).summary()
    print(f"{name:>8}: convexity violations {s['convexity_violations']}/{s['pairs']}, "
          f"min residual {s['min_convexity_residual']:.2e}")
