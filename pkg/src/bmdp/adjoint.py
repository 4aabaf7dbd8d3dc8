"""Backward adjoint sweep, Hamiltonian and its flat derivative on the scenario tree.

The adjoint is the exact discrete costate of the Euler scheme: with
``Ybar = E[Y_child]`` and ``Z = E[Y_child dW'] / dt``,

    Y = Ybar + dt * Dx H0(t, X, Ybar, Z, pi),      Y_leaf = Dx g(X_leaf),

so that ``Y`` at a node is the gradient of the discrete cost with respect to
the state at that node.  The control gradient uses the same ``(Ybar, Z)``.
"""
from dataclasses import dataclass

import numpy as np

from .dynamics import _ham0, _ham0_dm, _ham0_dx
from .errors import LevelMismatch
from .measures import Measure
from .tree import conditional_expectation


@dataclass(frozen=True, eq=False)
class AdjointField:
    """Costate on the tree.

    Attributes
    ----------
    Y : list of ndarray
        Levels ``0..n_steps``, shape ``(K**l, d)``.
    Ybar : list of ndarray
        Conditional mean of ``Y`` over the children, levels ``0..n_steps-1``.
    Z : list of ndarray
        Levels ``0..n_steps-1``, shape ``(K**l, d, d')``.
    """

    Y: list
    Ybar: list
    Z: list


def solve_adjoint(tree, model, policy, states):
    """Backward sweep for ``(Y, Z)`` given the forward states of ``policy``."""
    if len(states) != tree.n_steps + 1:
        raise LevelMismatch("state field does not cover the tree")
    inc = tree.branch_increments
    y = model.Dx_g(states[-1])
    ys = [y]
    ybars, zs = [], []
    for level in range(tree.n_steps - 1, -1, -1):
        kids = tree.children(y, level)  # (B, K, d)
        ybar = kids.mean(axis=1)
        z = np.einsum("bki,kj->bij", kids, inc) / (tree.n_children * tree.dt)
        x, m = states[level], policy.weights[level]
        y = ybar + tree.dt * _ham0_dx(model, tree.time(level), x, ybar, z, m)
        ys.append(y)
        ybars.append(ybar)
        zs.append(z)
    return AdjointField(ys[::-1], ybars[::-1], zs[::-1])


def bsde_residual(tree, model, policy, states, adjoint):
    """Largest violation of the discrete backward identity and the regression formula for ``Z``."""
    res = float(np.max(np.abs(adjoint.Y[-1] - model.Dx_g(states[-1]))))
    for level in range(tree.n_steps):
        child = adjoint.Y[level + 1]
        ybar = conditional_expectation(tree, child, level)
        inc = tree.increments(level + 1)
        dev = child - np.repeat(ybar, tree.n_children, axis=0)
        cov = conditional_expectation(tree, dev[:, :, None] * inc[:, None, :], level)
        res = max(res, float(np.max(np.abs(cov - adjoint.Z[level] * tree.dt))))
        drv = _ham0_dx(model, tree.time(level), states[level], ybar, adjoint.Z[level], policy.weights[level])
        res = max(res, float(np.max(np.abs(adjoint.Y[level] - ybar - tree.dt * drv))))
    return res


def _unpack(m, reference):
    if isinstance(m, Measure):
        return m.weights, m.reference
    w = np.asarray(m, dtype=float)
    ref = np.full(w.shape[-1], 1.0 / w.shape[-1]) if reference is None else np.asarray(reference)
    return w, ref


def hamiltonian_value(model, reg, tau, t, x, y, z, m, reference=None):
    """``H = b.y + tr(sigma' z) + f + tau h(m)`` at a single point."""
    w, ref = _unpack(m, reference)
    x = np.asarray(x, dtype=float).reshape(1, model.d)
    y = np.asarray(y, dtype=float).reshape(1, model.d)
    z = np.asarray(z, dtype=float).reshape(1, model.d, model.d_prime)
    val = float(_ham0(model, t, x, y, z, w[None])[0])
    if tau:
        val += tau * float(reg.value(w, ref))
    return val


def hamiltonian_flat_derivative(model, reg, tau, t, x, y, z, m, reference=None):
    """Flat derivative of the Hamiltonian in ``m`` at every action; centred against ``m``."""
    w, ref = _unpack(m, reference)
    x = np.asarray(x, dtype=float).reshape(1, model.d)
    y = np.asarray(y, dtype=float).reshape(1, model.d)
    z = np.asarray(z, dtype=float).reshape(1, model.d, model.d_prime)
    out = _ham0_dm(model, t, x, y, z, w[None])[0]
    if tau:
        out = out + tau * reg.flat_derivative(w, ref)
    return out


def hamiltonian_gradient_field(tree, model, policy, states, adjoint):
    """``dH0/dm`` at every decision node, evaluated at ``(Ybar, Z)``; list of ``(K**l, N)``."""
    return [
        _ham0_dm(model, tree.time(level), states[level], adjoint.Ybar[level], adjoint.Z[level],
                 policy.weights[level])
        for level in range(tree.n_steps)
    ]


def bmo_diagnostic(tree, adjoint):
    """``max_nodes sqrt(E_node[sum_{l >= level} |Z_l|^2 dt])`` over deterministic node times."""
    remaining = np.zeros(tree.level_size(tree.n_steps))
    best = 0.0
    for level in range(tree.n_steps - 1, -1, -1):
        z2 = np.sum(adjoint.Z[level] ** 2, axis=(1, 2))
        remaining = z2 * tree.dt + conditional_expectation(tree, remaining, level)
        best = max(best, float(np.max(remaining)))
    return float(np.sqrt(best))


def stability_constant(tree, model, reg, pairs):
    """Fitted ``C`` in ``sup |Y - Y'|^2 <= C * sum E D_h(pi | pi') dt`` over policy pairs.

    Monitoring only; the value depends on the sampled pairs.
    """
    from .dynamics import simulate_state
    from .tree import expectation_pathwise

    worst = 0.0
    for pi, pi2 in pairs:
        ya = solve_adjoint(tree, model, pi, simulate_state(tree, model, pi)).Y
        yb = solve_adjoint(tree, model, pi2, simulate_state(tree, model, pi2)).Y
        sup = max(float(np.max(np.sum((a - b) ** 2, axis=-1))) for a, b in zip(ya, yb))
        div = expectation_pathwise(
            tree, [reg.divergence(pi.weights[k], pi2.weights[k], pi.reference) for k in range(tree.n_steps)])
        if div > 1e-14:
            worst = max(worst, sup / div)
    return worst
