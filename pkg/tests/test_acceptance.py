"""Acceptance criteria, one test each, at the stated tolerances.

Every test attaches a one-line summary; ``conftest.py`` prints PASS/FAIL per
criterion at the end of the session.  Run standalone with
``python tests/test_acceptance.py``.
"""
import json
import time

import numpy as np
import pytest
from scipy.special import softmax

from bmdp import (ChiSquared, Composite, EntropicOT, Measure, RelativeEntropy, bregman, calibrate_lambda, cost,
                  first_variation, mirror_step, oracle_optimal_control, run_mirror_descent,
                  sinkhorn_potentials, theorem_probes)
from bmdp.cli import main
from bmdp.measures import bregman_of_bregman_check, prox_variational_residual, three_point_check
from bmdp.solver import grid_oracle, optimality_residual, probe_pairs, random_control, simplex_grid

from _bench import bench_actions, bench_config, random_simplex, regularizers, tiny_config
from conftest import SESSION

# every mirror-descent run made below, for the dissipation criterion
RUNS = []


def _detail(record_property, text):
    record_property("detail", text)
    print(text)


@pytest.mark.criterion(1, "exponential rate, tau > 0")
def test_exponential_rate(record_property):
    start = time.perf_counter()
    config = bench_config(lam="auto")
    lam = max(4.0, calibrate_lambda(config))
    config = config.with_lambda(lam)
    star = oracle_optimal_control(config)
    residual = optimality_residual(config, star)
    report = run_mirror_descent(config, star)
    elapsed = time.perf_counter() - start
    RUNS.append(("rate", report))
    gap, bound = np.array(report.gap), np.array(report.bound)
    slack = float(np.max(gap - bound))
    _detail(record_property, f"lambda={lam:g}, oracle residual {residual:.1e}, max(gap - bound) {slack:.2e} "
                             f"over {report.iterations} iterations, fitted rate {report.fitted_rate:.4f} "
                             f"(limit 0.895), {elapsed:.1f}s")
    assert residual <= 1e-10
    assert report.oracle_certified
    assert report.iterations == 200
    assert slack <= 1e-9
    assert report.fitted_rate <= 0.875 + 0.02
    assert elapsed <= 10.0


@pytest.mark.criterion(2, "O(1/n) rate, tau = 0")
def test_sublinear_rate(record_property):
    start = time.perf_counter()
    config = tiny_config()
    config = config.with_lambda(calibrate_lambda(config))
    star = grid_oracle(config, resolution=64)
    report = run_mirror_descent(config, star)
    elapsed = time.perf_counter() - start
    RUNS.append(("tau0", report))
    n = np.arange(1, len(report.gap))
    excess = n * np.array(report.gap[1:]) - report.lam * report.D0 - 2e-3 * n
    _detail(record_property, f"lambda={report.lam:g}, D0={report.D0:.4f}, max(n gap - lambda D0 - 2e-3 n) "
                             f"{excess.max():.3e} for n <= {n[-1]}, {elapsed:.1f}s")
    assert n[-1] == 500
    assert excess.max() <= 0
    assert elapsed <= 30.0


@pytest.mark.criterion(3, "energy dissipation")
def test_energy_dissipation(record_property):
    runs = list(RUNS)
    for name, reg in regularizers().items():
        config = bench_config(reg=reg, lam="auto", tol=1e-10, max_iters=2000)
        runs.append((name, run_mirror_descent(config)))
    violations = sum(r.dissipation_violations for _, r in runs)
    worst = max(r.max_increase for _, r in runs)
    tails = {name: r.step_divergence[-1] for name, r in runs[-3:]}
    _detail(record_property, f"{len(runs)} runs, {violations} violations, largest increase {worst:.1e}; tail step "
                             + ", ".join(f"{k} {v:.1e}" for k, v in tails.items()))
    assert violations == 0
    assert worst <= 1e-10
    for _, r in runs[-3:]:
        assert r.lam_source == "calibrated"
        assert r.converged and r.step_divergence[-1] < 1e-10


@pytest.mark.criterion(4, "first variation")
def test_first_variation(record_property):
    config = bench_config()
    tree, model = config.tree, config.model
    rng = np.random.default_rng(2024)
    rel, ratios = [], []
    for _ in range(20):
        pi, other = random_control(tree, config.reference, rng), random_control(tree, config.reference, rng)
        fv = first_variation(tree, model, pi, other)
        base = cost(tree, model, None, 0.0, pi)
        err = {eps: abs((cost(tree, model, None, 0.0, pi.mix(other, eps)) - base) / eps - fv)
               for eps in (1e-3, 1e-4)}
        rel.append(err[1e-4] / (1 + abs(fv)))
        ratios.append(err[1e-3] / err[1e-4])
    _detail(record_property, f"max relative error {max(rel):.2e} at eps=1e-4, error ratios "
                             f"{min(ratios):.3f}..{max(ratios):.3f}")
    assert max(rel) <= 1e-3
    assert all(9 <= r <= 11 for r in ratios)


@pytest.mark.criterion(5, "relative smoothness and convexity")
def test_smoothness_and_convexity(record_property):
    lines, failed = [], False
    for name, reg in regularizers().items():
        config = bench_config(reg=reg, lam="auto")
        lam = calibrate_lambda(config)
        # fresh pairs, independent of the ones used to calibrate
        probes = theorem_probes(config, probe_pairs(config, 50, seed=config.seed + 1), lam=lam)
        s = probes.summary()
        lines.append(f"{name}: L_hat={lam:g}, violations {s['convexity_violations']}/"
                     f"{s['smoothness_violations']}, min residuals {s['min_convexity_residual']:.1e}/"
                     f"{s['min_smoothness_residual']:.1e}")
        failed |= bool(s["convexity_violations"] or s["smoothness_violations"] or s["pairs"] != 50)
    _detail(record_property, "; ".join(lines))
    assert not failed


@pytest.mark.criterion(6, "Bregman identities")
def test_bregman_suite(record_property):
    rng = np.random.default_rng(6)
    regs = regularizers(bench_actions())
    ref = random_simplex(rng, 5, floor=0.2)
    min_div = {}
    for name, reg in regs.items():
        a, b = random_simplex(rng, 5, (2, 1000), floor=1e-4)
        min_div[name] = float(np.min(reg.divergence(a, b, ref)))
    comp = Composite([(0.7, regs["relative_entropy"]), (2.5, regs["chi_squared"]), (1.3, regs["entropic_ot"])])
    additivity = bob = 0.0
    three = {}
    for _ in range(100):
        a, b, nu = (Measure(w, ref) for w in random_simplex(rng, 5, 3, floor=1e-3))
        parts = sum(w * bregman(r, a, b) for w, r in comp.terms)
        additivity = max(additivity, abs(bregman(comp, a, b) - parts))
    for name, reg in regs.items():
        worst = np.inf
        for _ in range(100):
            a, b, nu, prior, probe = (Measure(w, ref) for w in random_simplex(rng, 5, 5, floor=1e-3))
            bob = max(bob, bregman_of_bregman_check(reg, nu, a, b))
            grad, lam = rng.normal(size=5), rng.uniform(0.25, 4)
            worst = min(worst, three_point_check(reg, prior, grad, lam, probe))
        three[name] = worst
    _detail(record_property, "min divergence " + ", ".join(f"{k} {v:.1e}" for k, v in min_div.items())
            + f"; additivity {additivity:.1e}; Bregman-of-Bregman {bob:.1e}; min three-point "
            + ", ".join(f"{k} {v:.1e}" for k, v in three.items()))
    assert all(v >= 0 for v in min_div.values())
    assert additivity <= 1e-10
    assert bob <= 1e-10
    assert all(v >= -1e-8 for v in three.values())


@pytest.mark.criterion(7, "Sinkhorn fixed point")
def test_sinkhorn(record_property):
    rng = np.random.default_rng(7)
    worst_res = worst_tv = 0.0
    most_iters = 0
    anchored = True
    for kappa in (0.05, 0.5, 5.0):
        for _ in range(16):
            cost_matrix = rng.uniform(0, 1, (16, 16))
            reg = EntropicOT(cost_matrix, kappa=kappa, max_iter=500)
            ref = random_simplex(rng, 16, floor=0.1)
            m = random_simplex(rng, 16, floor=0.01)
            res = sinkhorn_potentials(reg, Measure(m, ref))
            plan = reg.coupling(res.phi, res.psi, m, ref)
            tv = max(0.5 * np.abs(plan.sum(1) - m).sum(), 0.5 * np.abs(plan.sum(0) - ref).sum())
            worst_res, worst_tv = max(worst_res, res.residual), max(worst_tv, tv)
            most_iters = max(most_iters, res.iterations)
            anchored &= bool(res.phi[0] == 0.0)
    _detail(record_property, f"48 problems with N=16: max residual {worst_res:.1e}, max marginal TV "
                             f"{worst_tv:.1e}, at most {most_iters} iterations, phi(a0) == 0: {anchored}")
    assert worst_res <= 1e-8 and worst_tv <= 1e-8 and most_iters <= 500 and anchored


@pytest.mark.criterion(8, "prox oracles")
def test_prox_oracles(record_property):
    rng = np.random.default_rng(8)
    kl_err = 0.0
    for _ in range(50):
        ref, prior = random_simplex(rng, 5, floor=0.2), random_simplex(rng, 5, floor=0.01)
        grad, lam = rng.normal(scale=2, size=5), rng.uniform(0.2, 5)
        got = mirror_step(RelativeEntropy(), Measure(prior, ref), grad, lam).weights
        kl_err = max(kl_err, float(np.max(np.abs(got - softmax(np.log(prior) - grad / lam)))))
    grid = simplex_grid(3, 1000)
    chi_err = 0.0
    for _ in range(50):
        ref, prior = random_simplex(rng, 3, floor=0.2), random_simplex(rng, 3, floor=0.01)
        grad, lam = rng.normal(size=3), rng.uniform(0.2, 5)
        obj = grid @ grad + lam * ChiSquared().divergence(grid, prior, ref)
        got = mirror_step(ChiSquared(), Measure(prior, ref), grad, lam).weights
        chi_err = max(chi_err, float(np.max(np.abs(got - grid[np.argmin(obj)]))))
    reg = regularizers(bench_actions())["entropic_ot"]
    vi = 0.0
    for _ in range(50):
        ref, prior = random_simplex(rng, 5, floor=0.2), random_simplex(rng, 5, floor=0.01)
        grad, lam = rng.normal(scale=2, size=5), rng.uniform(0.2, 5)
        star = mirror_step(reg, Measure(prior, ref), grad, lam)
        vi = max(vi, -prox_variational_residual(reg, Measure(prior, ref), grad, lam, star))
    _detail(record_property, f"KL vs softmax {kl_err:.1e}; chi-squared vs grid {chi_err:.1e}; "
                             f"entropic OT VI residual {max(vi, 0.0):.1e}")
    assert kl_err <= 1e-12 and chi_err <= 2e-3 and vi <= 1e-8


@pytest.mark.criterion(9, "determinism")
def test_determinism(record_property, tmp_path):
    config = {
        "tree": {"T": 1.0, "n_steps": 8, "d_prime": 1},
        "model": {"kind": "lq", "parameters": {"beta": 0.1, "B": 1.0, "sigma0": 0.3, "Q": 1.0, "R": 1.0,
                                               "G": 1.0, "x0": 0.5}},
        "action_space": {"linspace": [-1.0, 1.0, 5]},
        "regularizer": {"kind": "relative_entropy"},
        "solver": {"tau": 0.5, "lambda": 4.0, "max_iters": 200},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    codes = [main(["solve", str(path), "--out-dir", str(tmp_path / k), "--quiet"]) for k in "ab"]
    a, b = ((tmp_path / k / "report.json").read_bytes() for k in "ab")
    _detail(record_property, f"exit codes {codes}, report.json {len(a)} bytes, identical: {a == b}")
    assert codes == [0, 0] and a == b


@pytest.mark.run_last
@pytest.mark.criterion(10, "suite wall clock")
def test_suite_wall_clock(record_property):
    elapsed = time.perf_counter() - SESSION["start"]
    _detail(record_property, f"{elapsed:.1f}s since the session started (limit 120s)")
    assert elapsed <= 120.0


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
