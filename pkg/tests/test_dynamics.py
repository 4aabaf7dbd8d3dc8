import numpy as np
import pytest

from bmdp import (ActionSpace, LQControlledSigma, LQModel, LQModelParams, NonFiniteState, assumption_audit,
                  build_tree, sensitivity_process, simulate_state)
from bmdp.dynamics import lq_concave_terminal
from bmdp.solver import ControlField, random_control

from _bench import BENCH_PARAMS, bench_actions, bench_model, random_simplex
from _models import QuadraticSigmaModel, SineModel


def _lq(n_actions=3, **kw):
    return LQModel(LQModelParams(**kw), ActionSpace.linspace(-1.0, 1.0, n_actions))


def test_zero_coefficients_keep_initial_state():
    model = _lq(beta=0.0, B=0.0, sigma0=0.0, x0=0.7)
    tree = build_tree(1.0, 5, 1)
    states = simulate_state(tree, model, ControlField.constant(tree, [0.2, 0.3, 0.5]))
    for x in states:
        np.testing.assert_array_equal(x, 0.7)


def test_point_mass_drift():
    model = _lq(beta=0.0, B=1.0, sigma0=0.0, x0=0.5)
    tree = build_tree(1.0, 4, 1)
    states = simulate_state(tree, model, ControlField.constant(tree, [0.0, 0.0, 1.0]))
    np.testing.assert_allclose(states[-1], 1.5, atol=1e-15)


def test_single_noise_step():
    model = _lq(beta=0.0, B=0.0, sigma0=1.0, x0=0.25)
    tree = build_tree(1.0, 1, 1)
    states = simulate_state(tree, model, ControlField.constant(tree, [1 / 3, 1 / 3, 1 / 3]))
    np.testing.assert_allclose(np.sort(states[1][:, 0]), [-0.75, 1.25], atol=1e-15)


def test_deterministic_model_matches_scalar_recursion():
    model = bench_model(sigma0=0.0)
    tree = build_tree(1.0, 6, 1)
    rng = np.random.default_rng(0)
    pi = random_control(tree, np.full(5, 0.2), rng)
    states = simulate_state(tree, model, pi)
    a = model.actions.points[:, 0]
    # with no noise both children coincide, so follow the first branch by hand
    x, node = 0.5, 0
    for level in range(tree.n_steps):
        x = x + (0.1 * x + pi.weights[level][node] @ a) * tree.dt
        node *= 2
        assert abs(states[level + 1][node, 0] - x) <= 1e-14
        assert states[level + 1][node + 1, 0] == states[level + 1][node, 0]


def test_non_finite_state():
    model = _lq(beta=1e308, x0=10.0)
    tree = build_tree(1.0, 3, 1)
    with pytest.raises(NonFiniteState):
        simulate_state(tree, model, ControlField.constant(tree, [1 / 3, 1 / 3, 1 / 3]))


def test_sensitivity_vanishes_for_identical_controls():
    model = bench_model()
    tree = build_tree(1.0, 4, 1)
    pi = random_control(tree, np.full(5, 0.2), np.random.default_rng(1))
    v = sensitivity_process(tree, model, pi, pi, simulate_state(tree, model, pi))
    assert all(np.all(level == 0) for level in v)


def _mean_shift(tree, delta):
    """Uniform control on {-1, 0, 1} and a copy whose mean action is larger by ``delta``."""
    pi = ControlField.constant(tree, [1 / 3, 1 / 3, 1 / 3])
    shifted = ControlField.constant(tree, [1 / 3 - delta / 2, 1 / 3, 1 / 3 + delta / 2])
    return pi, shifted


def test_sensitivity_of_mean_shift_without_feedback():
    model = _lq(beta=0.0, B=1.0, sigma0=0.4)
    tree = build_tree(2.0, 5, 1)
    pi, shifted = _mean_shift(tree, 0.3)
    v = sensitivity_process(tree, model, pi, shifted, simulate_state(tree, model, pi))
    np.testing.assert_allclose(v[-1], 0.3 * 2.0, atol=1e-14)


def test_sensitivity_geometric_recursion():
    c, delta = 0.7, 0.2
    model = _lq(beta=c, B=1.0, sigma0=0.5)
    tree = build_tree(1.0, 6, 1)
    pi, shifted = _mean_shift(tree, delta)
    v = sensitivity_process(tree, model, pi, shifted, simulate_state(tree, model, pi))
    dt = tree.dt
    for level in range(tree.n_steps + 1):
        expected = delta * dt * sum((1 + c * dt) ** j for j in range(level))
        np.testing.assert_allclose(v[level], expected, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("make_model", [SineModel, lambda: LQControlledSigma(
    LQModelParams(**BENCH_PARAMS), bench_actions(4), S=0.5)])
def test_sensitivity_is_gateaux_derivative(make_model):
    model = make_model()
    tree = build_tree(1.0, 5, 1)
    rng = np.random.default_rng(2)
    ref = np.full(4, 0.25)
    pi, other = random_control(tree, ref, rng), random_control(tree, ref, rng)
    base = simulate_state(tree, model, pi)
    v = sensitivity_process(tree, model, pi, other, base)
    errs = []
    for eps in (1e-2, 1e-3, 1e-4):
        moved = simulate_state(tree, model, pi.mix(other, eps))
        errs.append(max(float(np.max(np.abs((a - b) / eps - c))) for a, b, c in zip(moved, base, v)))
    if isinstance(model, SineModel):
        assert errs[-1] <= 1e-3
        assert errs[0] / errs[1] == pytest.approx(10, rel=0.1)
        assert errs[1] / errs[2] == pytest.approx(10, rel=0.1)
    else:
        # the state is affine in the control, so the quotient is exact up to rounding
        assert max(errs) <= 1e-9


def test_sensitivity_superposition():
    model = SineModel()
    tree = build_tree(1.0, 4, 1)
    rng = np.random.default_rng(3)
    ref = np.full(4, 0.25)
    pi, d1, d2 = (random_control(tree, ref, rng) for _ in range(3))
    states = simulate_state(tree, model, pi)
    v1 = sensitivity_process(tree, model, pi, d1, states)
    v2 = sensitivity_process(tree, model, pi, d2, states)
    v3 = sensitivity_process(tree, model, pi, d1.mix(d2, 0.3), states)
    for a, b, c in zip(v1, v2, v3):
        np.testing.assert_allclose(c, 0.7 * a + 0.3 * b, atol=1e-13)


def _samples(model, n=200, seed=4):
    rng = np.random.default_rng(seed)
    return random_simplex(rng, model.n_actions, n, floor=0.05), rng.normal(size=(n, model.d))


def test_audit_accepts_lq_models():
    for model in (bench_model(), LQControlledSigma(LQModelParams(**BENCH_PARAMS), bench_actions(), S=0.4)):
        tree = build_tree(1.0, 4, 1)
        report = assumption_audit(model, tree, *_samples(model))
        assert report.ok, report.flagged
        assert all(v <= 1e-9 for v in report.margins.values())
        assert report.derivative_error <= 1e-6
        assert all(np.isfinite(r) for r in report.lipschitz_ratios.values())


def test_audit_flags_nonlinear_measure_dependence_of_sigma():
    model = QuadraticSigmaModel()
    report = assumption_audit(model, build_tree(1.0, 2, 1), *_samples(model))
    assert "d2m_sigma" in report.flagged
    assert not report.ok


def test_audit_flags_concave_terminal_cost():
    model = lq_concave_terminal(LQModelParams(**BENCH_PARAMS), bench_actions())
    report = assumption_audit(model, build_tree(1.0, 2, 1), *_samples(model))
    assert report.terminal_convexity_gap < 0
    assert "terminal_convexity" in report.flagged


def test_audit_checks_hand_written_derivatives():
    model = SineModel()
    report = assumption_audit(model, build_tree(1.0, 2, 1), *_samples(model))
    assert report.derivative_error <= 1e-6
    assert report.centering <= 1e-12


def test_lq_params_validation():
    with pytest.raises(ValueError):
        LQModelParams(Q=-1.0)
    with pytest.raises(ValueError):
        LQModelParams(G=-1.0)
    LQModelParams(G=-1.0, require_psd=False)
    with pytest.raises(ValueError):
        LQModel(LQModelParams(k=2), bench_actions())
