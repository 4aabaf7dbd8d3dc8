"""Non-recombining binomial scenario tree for a d'-dimensional Brownian motion.

Every node has ``K = 2**d_prime`` children, one per sign pattern of the
increment ``dW in {+sqrt(dt), -sqrt(dt)}**d_prime``, each with conditional
probability ``1/K``.  Nodes at level ``l`` are stored contiguously, so a field
on the tree is a list of arrays whose ``l``-th entry has leading dimension
``K**l``; the children of node ``i`` at level ``l`` are ``i*K .. i*K + K - 1``
at level ``l + 1``.
"""
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import LevelMismatch, SizeExceeded

MAX_LEAVES = 2**20


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Immutable scenario tree; see :func:`build_tree`."""

    T: float
    n_steps: int
    d_prime: int
    branch_increments: np.ndarray = field(repr=False)

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def n_children(self):
        return 2**self.d_prime

    @property
    def n_decision_nodes(self):
        return sum(self.level_size(level) for level in range(self.n_steps))

    def level_size(self, level):
        self._check_level(level)
        return self.n_children**level

    def time(self, level):
        return level * self.dt

    def probabilities(self, level):
        """Unconditional node probabilities at ``level``."""
        k = self.level_size(level)
        return np.full(k, 1.0 / k)

    def increments(self, level):
        """``dW`` on the branch leading into each node of ``level >= 1``, shape ``(K**level, d')``."""
        if level < 1:
            raise LevelMismatch("the root has no incoming increment")
        return np.tile(self.branch_increments, (self.level_size(level - 1), 1))

    def parents(self, level):
        if level < 1:
            raise LevelMismatch("the root has no parent")
        return np.arange(self.level_size(level)) // self.n_children

    def children(self, values, level):
        """Reshape a level ``level + 1`` field to ``(K**level, K, ...)``."""
        values = np.asarray(values)
        expected = self.level_size(level + 1) if level < self.n_steps else None
        if expected is None or values.shape[0] != expected:
            raise LevelMismatch(f"field with {values.shape[0]} rows is not a level-{level + 1} field")
        return values.reshape((self.level_size(level), self.n_children) + values.shape[1:])

    def to_dict(self):
        return {"T": self.T, "n_steps": self.n_steps, "d_prime": self.d_prime}

    def _check_level(self, level):
        if not 0 <= level <= self.n_steps:
            raise LevelMismatch(f"level {level} outside 0..{self.n_steps}")


def build_tree(T, n_steps, d_prime):
    """Build the depth-``n_steps`` tree on ``[0, T]`` with ``2**d_prime`` branches per node.

    Raises
    ------
    SizeExceeded
        If the leaf count ``2**(d_prime * n_steps)`` exceeds ``2**20``.
    """
    if not (np.isfinite(T) and T > 0):
        raise ValueError("horizon T must be positive")
    if int(n_steps) != n_steps or not 1 <= n_steps <= 16:
        raise ValueError("n_steps must be an integer in 1..16")
    if int(d_prime) != d_prime or not 1 <= d_prime <= 2:
        raise ValueError("d_prime must be 1 or 2")
    n_steps, d_prime = int(n_steps), int(d_prime)
    if d_prime * n_steps > 20:
        raise SizeExceeded(f"tree would have 2**{d_prime * n_steps} leaves (limit {MAX_LEAVES})")
    root_dt = np.sqrt(T / n_steps)
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=d_prime)))
    inc = signs * root_dt
    inc.setflags(write=False)
    return ScenarioTree(float(T), n_steps, d_prime, inc)


def conditional_expectation(tree, values, level):
    """Average of a level ``level + 1`` field over the children of each level ``level`` node."""
    if not 0 <= level < tree.n_steps:
        raise LevelMismatch(f"no level {level + 1} below level {level}")
    return tree.children(values, level).mean(axis=1)


def expectation_pathwise(tree, running, terminal=None):
    """``E[sum_l running_l dt + terminal]`` computed exactly on the tree.

    ``running`` holds one array per level ``0..n_steps-1`` (scalars broadcast),
    ``terminal`` is a level ``n_steps`` array or ``None``.
    """
    if len(running) != tree.n_steps:
        raise LevelMismatch(f"expected {tree.n_steps} running levels, got {len(running)}")
    total = 0.0
    for level, vals in enumerate(running):
        vals = np.broadcast_to(np.asarray(vals, dtype=float), (tree.level_size(level),))
        total += float(np.mean(vals)) * tree.dt
    if terminal is not None:
        term = np.broadcast_to(np.asarray(terminal, dtype=float), (tree.level_size(tree.n_steps),))
        total += float(np.mean(term))
    return total
