"""Mirror descent on measure-valued controls over a scenario tree.

One iteration runs the forward state sweep and the backward adjoint sweep,
then replaces the control at every node by the Bregman prox of the
Hamiltonian's flat derivative.  Alongside the iteration this module provides
the cost functional, its first variation, a step-size calibration, two
optimality oracles (a Pontryagin fixed point for ``tau > 0`` and a simplex
grid search for tiny ``tau = 0`` instances), sampled checks of the relative
smoothness / convexity / three-point inequalities and rate fitting.
"""
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import stats

from .adjoint import hamiltonian_gradient_field, solve_adjoint
from .dynamics import simulate_state
from .errors import (CalibrationFailed, InsufficientData, OracleDidNotConverge, OracleTooLarge,
                     RangeError, ZeroAtomInKL)
from .measures import Measure, Regularizer, RelativeEntropy, check_reference, check_weights, uniform
from .tree import build_tree, expectation_pathwise

DISSIPATION_TOL = 1e-10
PROBE_TOL = 1e-8
CALIBRATION_TOL = 1e-9
LAMBDA_CAP = 2.0**20


# ----------------------------------------------------------------------------
# controls


@dataclass(frozen=True, eq=False)
class ControlField:
    """A probability vector over the actions at every decision node.

    ``weights[l]`` has shape ``(K**l, N)`` for ``l = 0..n_steps-1``.
    """

    weights: tuple
    reference: np.ndarray

    def __post_init__(self):
        ref = check_reference(self.reference)
        levels = []
        for level, w in enumerate(self.weights):
            w = np.array(w, dtype=float)
            if w.ndim != 2 or w.shape[1] != ref.size:
                raise ValueError(f"level {level} weights must have shape (nodes, {ref.size})")
            check_weights(w)
            w.setflags(write=False)
            levels.append(w)
        ref = ref.copy()
        ref.setflags(write=False)
        object.__setattr__(self, "weights", tuple(levels))
        object.__setattr__(self, "reference", ref)

    @classmethod
    def constant(cls, tree, weights, reference=None):
        w = np.asarray(weights, dtype=float)
        ref = uniform(w.size) if reference is None else reference
        return cls(tuple(np.tile(w, (tree.level_size(k), 1)) for k in range(tree.n_steps)), ref)

    @classmethod
    def from_flat(cls, tree, flat, reference):
        sizes = [tree.level_size(k) for k in range(tree.n_steps)]
        return cls(tuple(np.split(np.asarray(flat), np.cumsum(sizes)[:-1])), reference)

    @property
    def n_levels(self):
        return len(self.weights)

    def flat(self):
        return np.concatenate(self.weights)

    def measure(self, level, node):
        return Measure(self.weights[level][node], self.reference)

    def mix(self, other, eps):
        """``(1 - eps) * self + eps * other``, computed as ``self + eps * (other - self)``."""
        return ControlField(tuple(a + eps * (b - a) for a, b in zip(self.weights, other.weights)),
                            self.reference)

    def sup_distance(self, other):
        return float(max(np.max(np.abs(a - b)) for a, b in zip(self.weights, other.weights)))

    def to_list(self):
        return [w.tolist() for w in self.weights]

    def __eq__(self, other):
        if not isinstance(other, ControlField):
            return NotImplemented
        return (np.array_equal(self.reference, other.reference)
                and len(self.weights) == len(other.weights)
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights)))

    __hash__ = None


def random_control(tree, reference, rng, concentration=1.0, floor=1e-6):
    """Dirichlet-distributed weights at every node, mixed with ``floor * reference``."""
    n = len(reference)
    levels = []
    for k in range(tree.n_steps):
        w = rng.dirichlet(np.full(n, concentration), tree.level_size(k))
        levels.append((1 - floor) * w + floor * np.asarray(reference))
    return ControlField(tuple(levels), reference)


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True, eq=False)
class MirrorDescentConfig:
    """Inputs of a mirror-descent run.

    Parameters
    ----------
    model : ModelCoefficients
    regularizer : Regularizer
    tau : float
        Weight of the regulariser in the cost.
    lam : float or "auto"
        Bregman step weight; ``"auto"`` calibrates it by doubling.
    max_iters : int
    tol : float
        Stop once the step divergence ``sum E D_h(pi^{n+1} | pi^n) dt`` falls below it.
    T, n_steps, d_prime : tree parameters
    reference : array_like, optional
        Reference measure; uniform by default.
    initial : ControlField, optional
        Starting control; the reference measure at every node by default.
    seed : int
        Seed of the randomised probes.
    n_probe_pairs : int
        Random control pairs used by calibration and by :func:`theorem_probes`.
    """

    model: object
    regularizer: Regularizer = field(default_factory=RelativeEntropy)
    tau: float = 0.0
    lam: object = "auto"
    max_iters: int = 200
    tol: float = 0.0
    T: float = 1.0
    n_steps: int = 8
    d_prime: int = 1
    reference: np.ndarray = None
    initial: ControlField = None
    seed: int = 0
    n_probe_pairs: int = 50
    calibration_iters: int = 10

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau >= 0):
            raise RangeError(["solver.tau"], "tau must be nonnegative")
        if self.lam != "auto":
            if not (np.isfinite(self.lam) and self.lam > 0):
                raise RangeError(["solver.lambda"], "lambda must be positive or 'auto'")
            if self.tau > self.lam:
                raise RangeError(["solver.tau", "solver.lambda"],
                                 f"tau={self.tau} exceeds lambda={self.lam}")
        if self.d_prime != self.model.d_prime:
            raise ValueError("tree and model disagree on the noise dimension")
        ref = uniform(self.model.n_actions) if self.reference is None else self.reference
        object.__setattr__(self, "reference", check_reference(ref))

    @cached_property
    def tree(self):
        return build_tree(self.T, self.n_steps, self.d_prime)

    def initial_control(self):
        if self.initial is not None:
            return self.initial
        return ControlField.constant(self.tree, self.reference, self.reference)

    def with_lambda(self, lam):
        kwargs = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kwargs["lam"] = lam
        return MirrorDescentConfig(**kwargs)

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "actions": self.model.actions.points.tolist(),
            "regularizer": self.regularizer.to_dict(),
            "tau": self.tau,
            "lambda": self.lam,
            "max_iters": self.max_iters,
            "tol": self.tol,
            "tree": {"T": self.T, "n_steps": self.n_steps, "d_prime": self.d_prime},
            "reference": self.reference.tolist(),
            "seed": self.seed,
        }


# ----------------------------------------------------------------------------
# cost and derivatives


@dataclass(eq=False)
class Evaluation:
    """Everything computed from one control: states, adjoint, costs and gradients."""

    policy: ControlField
    states: list
    J0: float
    entropy: float
    J: float
    tau: float
    h_nodes: np.ndarray = None
    adjoint: object = None
    grad0: np.ndarray = None  # flat (n_nodes, N): dH0/dm
    dh: np.ndarray = None  # flat (n_nodes, N): dh/dm, None when tau == 0

    @property
    def grad(self):
        """Flat derivative of the regularised Hamiltonian."""
        return self.grad0 if self.dh is None else self.grad0 + self.tau * self.dh


def node_masses(tree):
    """``P(node) * dt`` for every decision node, in flat order."""
    return np.concatenate([tree.probabilities(k) for k in range(tree.n_steps)]) * tree.dt


def _running_cost(tree, model, policy, states):
    return [model.f(tree.time(k), states[k], policy.weights[k]) for k in range(tree.n_steps)]


def evaluate(tree, model, reg, tau, policy, gradient=True):
    """Forward sweep, costs and (optionally) adjoint sweep and gradients of ``policy``."""
    states = simulate_state(tree, model, policy)
    running = _running_cost(tree, model, policy, states)
    terminal = model.g(states[-1])
    J0 = expectation_pathwise(tree, running, terminal)
    ref = policy.reference
    flat = policy.flat()
    if tau:
        if isinstance(reg, RelativeEntropy) and np.any(flat <= 0):
            raise ZeroAtomInKL("the regularised cost needs strictly positive weights")
        h_nodes = reg.value(flat, ref)
        entropy = float(node_masses(tree) @ h_nodes)
        direct = expectation_pathwise(
            tree, [f + tau * h for f, h in zip(running, np.split(h_nodes, _splits(tree)))], terminal)
        J = J0 + tau * entropy
        if abs(direct - J) > 1e-12 * max(1.0, abs(J)):
            raise AssertionError(f"cost split inconsistent: {direct!r} vs {J!r}")
    else:
        h_nodes, entropy, J = None, 0.0, J0
    ev = Evaluation(policy, states, J0, entropy, J, tau, h_nodes)
    if gradient:
        ev.adjoint = solve_adjoint(tree, model, policy, states)
        ev.grad0 = np.concatenate(hamiltonian_gradient_field(tree, model, policy, states, ev.adjoint))
        ev.dh = reg.flat_derivative(flat, ref) if tau else None
    return ev


def _splits(tree):
    return np.cumsum([tree.level_size(k) for k in range(tree.n_steps)])[:-1]


def cost(tree, model, reg, tau, policy):
    """Regularised cost ``E[sum (f + tau h(pi)) dt + g(X_T)]``."""
    return evaluate(tree, model, reg, tau, policy, gradient=False).J


def first_variation(tree, model, policy, direction):
    """Directional derivative of the unregularised cost at ``policy`` towards ``direction``."""
    ev = evaluate(tree, model, None, 0.0, policy)
    return float(node_masses(tree) @ np.sum(ev.grad0 * (direction.flat() - policy.flat()), axis=-1))


def _first_order(tree, ev, direction):
    delta = direction.flat() - ev.policy.flat()
    return float(node_masses(tree) @ np.sum(ev.grad * delta, axis=-1))


def expected_divergence(tree, reg, a, b):
    """``sum E D_h(a | b) dt`` between two controls."""
    return float(node_masses(tree) @ reg.divergence(a.flat(), b.flat(), a.reference))


# ----------------------------------------------------------------------------
# iteration


def _prox(reg, prior, grad, lam, reference, dh_prior=None):
    if type(reg).prox is not Regularizer.prox or dh_prior is None:
        return reg.prox(prior, grad, lam, reference)
    return reg.argmin_linear(grad - lam * dh_prior, lam, reference, start=prior)


def _normalise(w):
    w = np.clip(w, 0.0, None)
    return w / w.sum(axis=-1, keepdims=True)


def _step(config, ev, lam):
    reg = config.regularizer
    prior = ev.policy.flat()
    dh_prior = ev.dh
    if dh_prior is None and type(reg).prox is Regularizer.prox:
        dh_prior = reg.flat_derivative(prior, config.reference)
    new = _prox(reg, prior, ev.grad, lam, config.reference, dh_prior)
    return ControlField.from_flat(config.tree, _normalise(new), config.reference)


def mirror_iterate(config, state, lam=None):
    """One mirror-descent step from the control ``state``."""
    lam = config.lam if lam is None else lam
    if lam == "auto":
        lam = calibrate_lambda(config)
    ev = evaluate(config.tree, config.model, config.regularizer, config.tau, state)
    return _step(config, ev, lam)


@dataclass(eq=False)
class ConvergenceReport:
    """Per-iteration record of a mirror-descent run.

    Lists indexed by ``n`` hold values at the iterate ``pi^n``; ``step_divergence[n]``
    is ``sum E D_h(pi^{n+1} | pi^n) dt``.  ``wall_clock`` is informational and
    excluded from equality and serialisation.
    """

    config: dict
    lam: float
    lam_source: str
    tau: float
    J_tau: list
    J0: list
    step_divergence: list
    dissipation_violations: int
    max_increase: float
    converged: bool
    final_control: list
    theoretical_rate: float
    gap: list = None
    bregman_to_oracle: list = None
    bound: list = None
    oracle_J: float = None
    oracle_residual: float = None
    oracle_certified: bool = None
    D0: float = None
    fitted_rate: float = None
    rate_intercept: float = None
    rate_r2: float = None
    probe_summary: dict = None
    wall_clock: float = field(default=None, compare=False)

    @property
    def iterations(self):
        return len(self.step_divergence)

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "wall_clock"}
        out["iterations"] = self.iterations
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data.pop("iterations", None)
        return cls(**data)

    def __eq__(self, other):
        if not isinstance(other, ConvergenceReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def run_mirror_descent(config, oracle=None, lam=None):
    """Iterate from the initial control until ``max_iters`` or the step-divergence tolerance.

    Parameters
    ----------
    oracle : ControlField, optional
        Optimal control; fills the gap, Bregman-to-oracle, bound and rate fields.
    lam : float, optional
        Overrides ``config.lam`` (used by the calibration).
    """
    start = time.perf_counter()
    tree, model, reg, tau = config.tree, config.model, config.regularizer, config.tau
    lam_source = "fixed"
    if lam is None:
        lam = config.lam
        if lam == "auto":
            lam, lam_source = calibrate_lambda(config), "calibrated"
    lam = float(lam)
    policy = config.initial_control()
    ev = evaluate(tree, model, reg, tau, policy)
    J, J0, steps = [ev.J], [ev.J0], []
    violations, worst = 0, -np.inf
    breg = [] if oracle is not None else None
    converged = False
    for _ in range(config.max_iters):
        if breg is not None:
            breg.append(expected_divergence(tree, reg, oracle, policy))
        new = _step(config, ev, lam)
        steps.append(expected_divergence(tree, reg, new, policy))
        ev = evaluate(tree, model, reg, tau, new)
        policy = new
        increase = ev.J - J[-1]
        worst = max(worst, increase)
        if increase > DISSIPATION_TOL:
            violations += 1
        J.append(ev.J)
        J0.append(ev.J0)
        if config.tol > 0 and steps[-1] < config.tol:
            converged = True
            break
    if breg is not None:
        breg.append(expected_divergence(tree, reg, oracle, policy))
    report = ConvergenceReport(
        config=config.to_dict(), lam=lam, lam_source=lam_source, tau=float(tau),
        J_tau=J, J0=J0, step_divergence=steps, dissipation_violations=violations,
        max_increase=float(worst) if steps else 0.0, converged=converged,
        final_control=policy.to_list(), theoretical_rate=1.0 - tau / lam,
    )
    if oracle is not None:
        j_star = cost(tree, model, reg, tau, oracle)
        report.oracle_J = j_star
        report.gap = [j - j_star for j in J]
        report.bregman_to_oracle = breg
        report.D0 = breg[0]
        if tau > 0:
            report.bound = [lam * (1 - tau / lam) ** n * report.D0 for n in range(len(J))]
        else:
            report.bound = [None] + [lam * report.D0 / n for n in range(1, len(J))]
        report.oracle_certified = bool(j_star <= min(J) + 1e-12)
        try:
            report.fitted_rate, report.rate_intercept, report.rate_r2 = fit_rate(report.gap)
        except InsufficientData:
            pass
    report.wall_clock = time.perf_counter() - start
    return report


# ----------------------------------------------------------------------------
# probes and calibration


@dataclass
class ProbeReport:
    """Residuals of the sampled first-order inequalities; violations are counted at ``tol``."""

    L_hat: float
    tau: float
    convexity: list
    smoothness: list
    three_point: list
    divergences: list
    tol: float = PROBE_TOL

    @property
    def convexity_violations(self):
        return int(sum(r < -self.tol for r in self.convexity))

    @property
    def smoothness_violations(self):
        return int(sum(r < -self.tol for r in self.smoothness))

    @property
    def three_point_violations(self):
        return int(sum(r < -self.tol for r in self.three_point))

    @property
    def ok(self):
        return not (self.convexity_violations or self.smoothness_violations or self.three_point_violations)

    def summary(self):
        return {
            "L_hat": self.L_hat,
            "pairs": len(self.convexity),
            "convexity_violations": self.convexity_violations,
            "smoothness_violations": self.smoothness_violations,
            "three_point_violations": self.three_point_violations,
            "min_convexity_residual": min(self.convexity, default=0.0),
            "min_smoothness_residual": min(self.smoothness, default=0.0),
            "min_three_point_residual": min(self.three_point, default=0.0),
        }

    def to_dict(self):
        out = self.summary()
        out.update(tau=self.tau, tol=self.tol, convexity=self.convexity, smoothness=self.smoothness,
                   three_point=self.three_point, divergences=self.divergences)
        return out


def probe_pairs(config, n_pairs=None, seed=None):
    """Random control pairs: half far apart, half small perturbations of each other."""
    n_pairs = config.n_probe_pairs if n_pairs is None else n_pairs
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tree, ref = config.tree, config.reference
    pairs = []
    for i in range(n_pairs):
        a = random_control(tree, ref, rng)
        b = random_control(tree, ref, rng)
        if i % 2:
            b = a.mix(b, 10.0 ** rng.uniform(-3, -1))
        pairs.append((a, b))
    return pairs


def _pair_terms(config, a, b, ev_a=None, ev_b=None):
    """``(remainder, divergence)`` with remainder ``J(b) - J(a) - <dJ(a), b - a>``."""
    tree, model, reg, tau = config.tree, config.model, config.regularizer, config.tau
    ev_a = evaluate(tree, model, reg, tau, a) if ev_a is None else ev_a
    J_b = cost(tree, model, reg, tau, b) if ev_b is None else ev_b.J
    rem = J_b - ev_a.J - _first_order(tree, ev_a, b)
    return rem, expected_divergence(tree, reg, b, a), ev_a


def _three_point(config, ev, probe, lam):
    """Nodewise three-point residual at the prox point of ``ev`` against ``probe``; returns the minimum."""
    reg, ref = config.regularizer, config.reference
    prior = ev.policy.flat()
    star = _step(config, ev, lam).flat()
    m = probe.flat()
    grad = ev.grad

    def G(w):
        return np.sum(grad * (w - prior), axis=-1) / lam

    res = (G(m) + reg.divergence(m, prior, ref) - G(star)
           - reg.divergence(m, star, ref) - reg.divergence(star, prior, ref))
    return float(np.min(res))


def theorem_probes(config, pairs=None, lam=None):
    """Relative convexity, relative smoothness and three-point residuals on control pairs.

    ``lam`` is the smoothness constant to test (by default ``config.lam``,
    calibrated when ``"auto"``).
    """
    if lam is None:
        lam = calibrate_lambda(config) if config.lam == "auto" else config.lam
    pairs = probe_pairs(config) if pairs is None else pairs
    conv, smooth, three, divs = [], [], [], []
    for a, b in pairs:
        rem, div, ev_a = _pair_terms(config, a, b)
        conv.append(rem - config.tau * div)
        smooth.append(lam * div - rem)
        divs.append(div)
        three.append(_three_point(config, ev_a, b, lam))
    return ProbeReport(float(lam), float(config.tau), conv, smooth, three, divs)


def calibrate_lambda(config, pairs=None):
    """Smallest ``lam = max(1, 2 tau) * 2**k`` passing the dissipation and smoothness checks.

    Each candidate runs ``config.calibration_iters`` iterations; it is accepted
    when no iteration increases the cost by more than ``1e-10`` and
    ``lam * D - remainder >= -1e-9`` on the probe pairs and on consecutive
    iterates.
    """
    pairs = probe_pairs(config) if pairs is None else pairs
    need = 0.0
    for a, b in pairs:
        rem, div, _ = _pair_terms(config, a, b)
        if div > 0:
            need = max(need, (rem - CALIBRATION_TOL) / div)
        elif rem > CALIBRATION_TOL:
            need = np.inf
    lam = max(1.0, 2.0 * config.tau)
    while lam <= LAMBDA_CAP:
        if lam >= need and _calibration_run_ok(config, lam):
            return lam
        lam *= 2.0
    raise CalibrationFailed(f"no lambda up to {LAMBDA_CAP:g} passed the dissipation and smoothness checks")


def _calibration_run_ok(config, lam):
    tree, model, reg, tau = config.tree, config.model, config.regularizer, config.tau
    ev = evaluate(tree, model, reg, tau, config.initial_control())
    for _ in range(config.calibration_iters):
        new = _step(config, ev, lam)
        ev_new = evaluate(tree, model, reg, tau, new)
        if ev_new.J > ev.J + DISSIPATION_TOL:
            return False
        rem, div, _ = _pair_terms(config, ev.policy, new, ev, ev_new)
        if lam * div - rem < -CALIBRATION_TOL:
            return False
        ev = ev_new
    return True


# ----------------------------------------------------------------------------
# oracles


def optimality_residual(config, policy, ev=None):
    """Largest nodewise violation of ``policy(node) in argmin_m <dH0/dm, m> + tau h(m)``.

    Computed as ``max(<v, pi> - min v)`` with ``v`` the flat derivative of the
    regularised Hamiltonian, restricted to the support of ``pi``'s minimiser.
    """
    if ev is None:
        ev = evaluate(config.tree, config.model, config.regularizer, config.tau, policy)
    w = policy.flat()
    v = ev.grad
    return float(np.max(np.sum(v * w, axis=-1) - np.min(v, axis=-1)))


def oracle_optimal_control(config, damping=0.5, tol=1e-11, max_iter=20000, residual_tol=1e-10):
    """Optimal control of the regularised problem.

    For ``tau > 0``: damped fixed point of ``pi <- argmin_m <dH0/dm(pi), m> + tau h(m)``,
    accepted when the sup change is below ``tol`` and :func:`optimality_residual`
    below ``residual_tol``.  For ``tau = 0``: exhaustive search over the simplex
    grid of resolution 1/64 (at most three decision nodes and three actions).
    """
    if config.tau == 0:
        return grid_oracle(config)
    tree, model, reg, tau = config.tree, config.model, config.regularizer, config.tau
    ref = config.reference
    policy = config.initial_control()
    for _ in range(max_iter):
        ev = evaluate(tree, model, reg, tau, policy)
        best = _normalise(reg.argmin_linear(ev.grad0, tau, ref, start=policy.flat()))
        change = float(np.max(np.abs(best - policy.flat())))
        if change <= tol:
            candidate = ControlField.from_flat(tree, best, ref)
            res = optimality_residual(config, candidate)
            if res <= residual_tol:
                return candidate
            raise OracleDidNotConverge(f"fixed point reached but optimality residual is {res:.3e}")
        policy = ControlField.from_flat(tree, (1 - damping) * policy.flat() + damping * best, ref)
    raise OracleDidNotConverge(f"no fixed point after {max_iter} iterations (last change {change:.3e})")


def simplex_grid(n, resolution=64):
    """All points of the simplex in ``R^n`` with coordinates in ``{0, 1/r, ..., 1}``."""
    axes = np.meshgrid(*([np.arange(resolution + 1)] * (n - 1)), indexing="ij")
    pts = np.stack([a.ravel() for a in axes], axis=1) if n > 1 else np.zeros((1, 0), dtype=int)
    pts = pts[pts.sum(axis=1) <= resolution]
    arr = np.column_stack([pts, resolution - pts.sum(axis=1)]).astype(float)
    return arr / resolution


def grid_oracle(config, resolution=64, chunk=256):
    """Exact minimiser of the unregularised cost over grid-valued controls.

    Given the controls above a node, the subtrees below its children are
    independent, so the search is a backward recursion over node states.
    """
    tree, model = config.tree, config.model
    if tree.n_decision_nodes > 3 or model.n_actions > 3:
        raise OracleTooLarge("grid oracle needs at most 3 decision nodes and 3 actions")
    grid = simplex_grid(model.n_actions, resolution)
    n_grid, K = len(grid), tree.n_children

    def best(level, x):
        vals, idx = [], []
        for lo in range(0, len(x), chunk):
            xs = x[lo:lo + chunk]
            xb = np.repeat(xs, n_grid, axis=0)
            mb = np.tile(grid, (len(xs), 1))
            t = tree.time(level)
            drift = xb + model.b(t, xb, mb) * tree.dt
            kids = drift[:, None, :] + np.einsum("bij,kj->bki", model.sigma(t, xb, mb), tree.branch_increments)
            kids = kids.reshape(-1, model.d)
            if level + 1 == tree.n_steps:
                cont = model.g(kids)
            else:
                cont = best(level + 1, kids)[0]
            total = (model.f(t, xb, mb) * tree.dt + cont.reshape(-1, K).mean(axis=1)).reshape(len(xs), n_grid)
            i = np.argmin(total, axis=1)
            vals.append(total[np.arange(len(xs)), i])
            idx.append(i)
        return np.concatenate(vals), np.concatenate(idx)

    levels = []
    x = np.asarray(model.x0, dtype=float).reshape(1, model.d)
    for level in range(tree.n_steps):
        _, i = best(level, x)
        m = grid[i]
        levels.append(m)
        t = tree.time(level)
        drift = x + model.b(t, x, m) * tree.dt
        x = (drift[:, None, :] + np.einsum("bij,kj->bki", model.sigma(t, x, m), tree.branch_increments)
             ).reshape(-1, model.d)
    return ControlField(tuple(levels), config.reference)


# ----------------------------------------------------------------------------
# rates


def fit_rate(report, threshold=1e-12, min_points=10):
    """Least-squares fit of ``log gap_n = log C + n log rate``.

    Parameters
    ----------
    report : ConvergenceReport or sequence of float
        Gaps indexed by iteration.

    Returns
    -------
    rate, intercept, r2 : float
        ``exp(slope)``, the intercept on the log scale and the coefficient of determination.
    """
    gaps = np.asarray(report.gap if isinstance(report, ConvergenceReport) else report, dtype=float)
    n = np.arange(len(gaps))
    keep = gaps > threshold
    if keep.sum() < min_points:
        raise InsufficientData(f"{int(keep.sum())} gaps above {threshold:g}; need {min_points}")
    fit = stats.linregress(n[keep], np.log(gaps[keep]))
    return float(np.exp(fit.slope)), float(fit.intercept), float(fit.rvalue**2)
