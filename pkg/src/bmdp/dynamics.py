"""Model coefficients, forward state simulation and the first-order sensitivity process.

Coefficient evaluators are batched over nodes.  With ``B`` nodes, state
dimension ``d``, noise dimension ``d'`` and ``N`` actions, a model receives
``x`` of shape ``(B, d)`` and measure weights ``m`` of shape ``(B, N)`` and
returns

==========================  ==================
``b``                       ``(B, d)``
``sigma``                   ``(B, d, d')``
``f``, ``g``                ``(B,)``
``Dx_b``                    ``(B, d, d)``      ``[i, k] = d b_i / d x_k``
``Dx_sigma``                ``(B, d, d', d)``
``Dx_f``, ``Dx_g``          ``(B, d)``
``dm_b``                    ``(B, N, d)``      flat derivative at each action
``dm_sigma``                ``(B, N, d, d')``
``dm_f``                    ``(B, N)``
``Dx_dm_b``                 ``(B, N, d, d)``
``Dx_dm_sigma``             ``(B, N, d, d', d)``
``Dx_dm_f``                 ``(B, N, d)``
``d2m_b``                   ``(B, N, N, d)``
``d2m_sigma``               ``(B, N, N, d, d')``
``d2m_f``                   ``(B, N, N)``
==========================  ==================

Second flat derivatives are only determined up to terms depending on one of
the two action arguments, which vanish against pairs of tangent directions.
The shipped models return the representative that is zero for coefficients
affine in the measure.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteState
from .measures import ActionSpace


class ModelCoefficients:
    """Base class for controlled coefficients on a finite action space.

    Subclasses set ``actions`` (:class:`ActionSpace`), ``d``, ``d_prime`` and
    ``x0`` and implement the evaluators listed in the module docstring.
    Mixed and second derivatives default to zero.
    """

    kind = "custom"
    actions: ActionSpace
    d: int
    d_prime: int
    x0: np.ndarray

    @property
    def n_actions(self):
        return self.actions.size

    def mean_action(self, m):
        return np.asarray(m) @ self.actions.points

    def Dx_dm_b(self, t, x, m):
        return np.zeros(m.shape + (self.d, self.d))

    def Dx_dm_sigma(self, t, x, m):
        return np.zeros(m.shape + (self.d, self.d_prime, self.d))

    def Dx_dm_f(self, t, x, m):
        return np.zeros(m.shape + (self.d,))

    def d2m_b(self, t, x, m):
        return np.zeros(m.shape + (m.shape[-1], self.d))

    def d2m_sigma(self, t, x, m):
        return np.zeros(m.shape + (m.shape[-1], self.d, self.d_prime))

    def d2m_f(self, t, x, m):
        return np.zeros(m.shape + (m.shape[-1],))

    def to_dict(self):
        return {"kind": self.kind}


def _matrix(value, shape, name):
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr * np.eye(shape[0], shape[1]) if len(shape) == 2 and shape[0] == shape[1] else np.full(shape, float(arr))
    arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


def _check_psd(mat, name):
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(mat)) < -1e-12:
        raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True, eq=False)
class LQModelParams:
    """Coefficients of the linear-quadratic benchmark.

    Scalars are promoted to ``scalar * I`` for square matrices and filled
    otherwise.  ``require_psd=False`` skips the semidefiniteness check, which
    is only useful to build deliberately nonconvex examples.
    """

    d: int = 1
    d_prime: int = 1
    k: int = 1
    beta: np.ndarray = 0.0
    B: np.ndarray = 1.0
    sigma0: np.ndarray = 0.0
    Q: np.ndarray = 1.0
    R: np.ndarray = 1.0
    G: np.ndarray = 1.0
    x0: np.ndarray = 0.0
    require_psd: bool = True

    def __post_init__(self):
        d, dp, k = self.d, self.d_prime, self.k
        shapes = {"beta": (d, d), "B": (d, k), "sigma0": (d, dp), "Q": (d, d), "R": (k, k), "G": (d, d)}
        for name, shape in shapes.items():
            object.__setattr__(self, name, _matrix(getattr(self, name), shape, name))
        x0 = np.broadcast_to(np.asarray(self.x0, dtype=float), (d,)).copy()
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        for name in ("Q", "R"):
            _check_psd(getattr(self, name), name)
        if self.require_psd:
            _check_psd(self.G, "G")

    def to_dict(self):
        out = {"d": self.d, "d_prime": self.d_prime, "k": self.k}
        for name in ("beta", "B", "sigma0", "Q", "R", "G", "x0"):
            out[name] = getattr(self, name).tolist()
        return out


class LQModel(ModelCoefficients):
    """``b = beta x + B abar``, ``sigma = sigma0``, ``f = x'Qx/2 + int a'Ra/2 dm``, ``g = x'Gx/2``.

    ``abar = int a m(da)`` is the mean action.
    """

    kind = "lq"

    def __init__(self, params, actions):
        if not isinstance(actions, ActionSpace):
            actions = ActionSpace(actions)
        if actions.dim != params.k:
            raise ValueError(f"actions have dimension {actions.dim}, params expect {params.k}")
        self.params = params
        self.actions = actions
        self.d, self.d_prime, self.x0 = params.d, params.d_prime, params.x0
        a = actions.points
        self._action_cost = 0.5 * np.einsum("ij,jk,ik->i", a, params.R, a)

    def b(self, t, x, m):
        p = self.params
        return x @ p.beta.T + self.mean_action(m) @ p.B.T

    def sigma(self, t, x, m):
        return np.broadcast_to(self.params.sigma0, (x.shape[0], self.d, self.d_prime))

    def f(self, t, x, m):
        return 0.5 * np.einsum("bi,ij,bj->b", x, self.params.Q, x) + m @ self._action_cost

    def g(self, x):
        return 0.5 * np.einsum("bi,ij,bj->b", x, self.params.G, x)

    def Dx_b(self, t, x, m):
        return np.broadcast_to(self.params.beta, (x.shape[0], self.d, self.d))

    def Dx_sigma(self, t, x, m):
        return np.zeros((x.shape[0], self.d, self.d_prime, self.d))

    def Dx_f(self, t, x, m):
        return x @ self.params.Q

    def Dx_g(self, x):
        return x @ self.params.G

    def dm_b(self, t, x, m):
        centred = self.actions.points[None, :, :] - self.mean_action(m)[:, None, :]
        return centred @ self.params.B.T

    def dm_sigma(self, t, x, m):
        return np.zeros(m.shape + (self.d, self.d_prime))

    def dm_f(self, t, x, m):
        c = self._action_cost
        return np.broadcast_to(c, m.shape) - (m @ c)[:, None]

    def to_dict(self):
        return {"kind": self.kind, "parameters": self.params.to_dict()}


class LQControlledSigma(LQModel):
    """LQ benchmark with diffusion ``sigma = sigma0 + S abar``, linear in the measure.

    ``S`` has shape ``(d, d', k)``.
    """

    kind = "lq_controlled_sigma"

    def __init__(self, params, actions, S=1.0):
        super().__init__(params, actions)
        S = np.array(S, dtype=float)
        self.S = np.broadcast_to(S, (self.d, self.d_prime, params.k)).copy()

    def sigma(self, t, x, m):
        return self.params.sigma0 + np.einsum("ijk,bk->bij", self.S, self.mean_action(m))

    def dm_sigma(self, t, x, m):
        centred = self.actions.points[None, :, :] - self.mean_action(m)[:, None, :]
        return np.einsum("ijk,bnk->bnij", self.S, centred)

    def to_dict(self):
        out = super().to_dict()
        out["parameters"]["S"] = self.S.tolist()
        return out


def lq_concave_terminal(params, actions):
    """LQ model whose terminal cost is ``-x'Gx/2``; used to exercise convexity checks."""
    p = LQModelParams(
        d=params.d, d_prime=params.d_prime, k=params.k, beta=params.beta, B=params.B,
        sigma0=params.sigma0, Q=params.Q, R=params.R, G=-params.G, x0=params.x0,
        require_psd=False,
    )
    model = LQModel(p, actions)
    model.kind = "lq_concave_terminal"
    return model


MODEL_REGISTRY = {
    "lq": LQModel,
    "lq_controlled_sigma": LQControlledSigma,
    "lq_concave_terminal": lq_concave_terminal,
}


def register_model(name, factory):
    """Make ``factory(params, actions, **extra)`` selectable by ``name`` in configs."""
    MODEL_REGISTRY[name] = factory


# ----------------------------------------------------------------------------
# forward sweeps


def _weights(policy, level):
    return policy.weights[level]


def simulate_state(tree, model, policy):
    """Euler scheme ``X' = X + b dt + sigma dW`` on every branch of ``tree``.

    Returns a list of arrays, one per level ``0..n_steps``, of shape ``(K**l, d)``.
    """
    x = np.asarray(model.x0, dtype=float).reshape(1, model.d)
    states = [x]
    for level in range(tree.n_steps):
        m = _weights(policy, level)
        t = tree.time(level)
        with np.errstate(over="ignore", invalid="ignore"):
            drift = x + model.b(t, x, m) * tree.dt
            vol = model.sigma(t, x, m)
            # (B, K, d): every child of every node
            x = (drift[:, None, :] + np.einsum("bij,kj->bki", vol, tree.branch_increments)).reshape(-1, model.d)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"state overflowed at level {level + 1}")
        states.append(x)
    return states


def sensitivity_process(tree, model, policy, direction, states):
    """Directional derivative ``V`` of :func:`simulate_state` along ``direction - policy``."""
    v = np.zeros((1, model.d))
    out = [v]
    for level in range(tree.n_steps):
        m = _weights(policy, level)
        dm = _weights(direction, level) - m
        x = states[level]
        t = tree.time(level)
        drift = v + (np.einsum("bik,bk->bi", model.Dx_b(t, x, m), v)
                     + np.einsum("bni,bn->bi", model.dm_b(t, x, m), dm)) * tree.dt
        vol = (np.einsum("bijk,bk->bij", model.Dx_sigma(t, x, m), v)
               + np.einsum("bnij,bn->bij", model.dm_sigma(t, x, m), dm))
        v = (drift[:, None, :] + np.einsum("bij,kj->bki", vol, tree.branch_increments)).reshape(-1, model.d)
        out.append(v)
    return out


# ----------------------------------------------------------------------------
# assumption audit


@dataclass
class AuditReport:
    """Numerical check of the structural assumptions on a model.

    ``margins`` maps each checked property to its worst violation (zero or
    negative means satisfied); ``flagged`` lists those above ``tol``.
    """

    lipschitz_ratios: dict
    centering: float
    d2m_sigma: float
    hamiltonian_convexity_gap: float
    terminal_convexity_gap: float
    derivative_error: float
    tol: float = 1e-9
    margins: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)

    def __post_init__(self):
        self.margins = {
            "centering": self.centering,
            "d2m_sigma": self.d2m_sigma,
            "hamiltonian_convexity": max(0.0, -self.hamiltonian_convexity_gap),
            "terminal_convexity": max(0.0, -self.terminal_convexity_gap),
        }
        self.flagged = [k for k, v in self.margins.items() if v > self.tol]
        if self.derivative_error > 1e-5:
            self.flagged.append("derivatives")

    @property
    def ok(self):
        return not self.flagged


def _ham0(model, t, x, y, z, m):
    return (np.sum(model.b(t, x, m) * y, axis=-1)
            + np.einsum("bij,bij->b", model.sigma(t, x, m), z)
            + model.f(t, x, m))


def _ham0_dx(model, t, x, y, z, m):
    return (np.einsum("bik,bi->bk", model.Dx_b(t, x, m), y)
            + np.einsum("bijk,bij->bk", model.Dx_sigma(t, x, m), z)
            + model.Dx_f(t, x, m))


def _ham0_dm(model, t, x, y, z, m):
    return (np.einsum("bni,bi->bn", model.dm_b(t, x, m), y)
            + np.einsum("bnij,bij->bn", model.dm_sigma(t, x, m), z)
            + model.dm_f(t, x, m))


def assumption_audit(model, tree, sample_measures, sample_states, reg=None, reference=None, seed=0):
    """Estimate the regularity, centring and convexity properties of ``model``.

    Parameters
    ----------
    sample_measures : array_like, shape (S, N)
        Strictly positive probability vectors.
    sample_states : array_like, shape (S, d)
    reg : Regularizer, optional
        Divergence used in the Lipschitz ratios; defaults to relative entropy.
    """
    from .measures import RelativeEntropy, uniform

    reg = RelativeEntropy() if reg is None else reg
    m = np.asarray(sample_measures, dtype=float)
    x = np.asarray(sample_states, dtype=float).reshape(len(m), model.d)
    ref = uniform(model.n_actions) if reference is None else np.asarray(reference)
    rng = np.random.default_rng(seed)
    s = len(m)
    t = 0.0
    perm = rng.permutation(s)
    x2, m2 = x[perm], m[perm]

    dist = np.sum((x - x2) ** 2, axis=-1) + reg.divergence(m, m2, ref)
    keep = dist > 1e-12
    ratios = {}
    for name in ("b", "sigma", "Dx_b", "Dx_sigma", "dm_b", "dm_sigma"):
        fn = getattr(model, name)
        diff = (fn(t, x, m) - fn(t, x2, m2)).reshape(s, -1)
        ratios[name] = float(np.max(np.sum(diff**2, axis=-1)[keep] / dist[keep], initial=0.0))

    centering = 0.0
    for name in ("dm_b", "dm_sigma", "dm_f"):
        vals = getattr(model, name)(t, x, m)
        integ = np.einsum("bn...,bn->b...", vals, m)
        centering = max(centering, float(np.max(np.abs(integ), initial=0.0)))

    # second derivative of sigma tested against pairs of tangent directions, and
    # the second difference of sigma itself along them
    u = rng.dirichlet(np.ones(model.n_actions), s) - m
    w = rng.dirichlet(np.ones(model.n_actions), s) - m
    d2 = np.einsum("bnpij,bn,bp->bij", model.d2m_sigma(t, x, m), u, w)
    eps = 1e-3
    sig = model.sigma
    second_diff = (sig(t, x, m + eps * u + eps * w) - sig(t, x, m + eps * u)
                   - sig(t, x, m + eps * w) + sig(t, x, m)) / eps**2
    d2m_sigma = float(max(np.max(np.abs(d2), initial=0.0), np.max(np.abs(second_diff), initial=0.0)))

    y = rng.normal(size=(s, model.d))
    z = rng.normal(size=(s, model.d, model.d_prime))
    h1 = _ham0(model, t, x2, y, z, m2)
    h0 = _ham0(model, t, x, y, z, m)
    lin = (np.sum(_ham0_dx(model, t, x, y, z, m) * (x2 - x), axis=-1)
           + np.sum(_ham0_dm(model, t, x, y, z, m) * (m2 - m), axis=-1))
    ham_gap = float(np.min(h1 - h0 - lin))
    g_gap = float(np.min(model.g(x2) - model.g(x) - np.sum(model.Dx_g(x) * (x2 - x), axis=-1)))

    # analytic derivatives against central differences
    h = 1e-6
    err = 0.0
    for k in range(model.d):
        e = np.zeros(model.d)
        e[k] = h
        fd = (_ham0(model, t, x + e, y, z, m) - _ham0(model, t, x - e, y, z, m)) / (2 * h)
        err = max(err, float(np.max(np.abs(fd - _ham0_dx(model, t, x, y, z, m)[:, k]))))
        fd = (model.g(x + e) - model.g(x - e)) / (2 * h)
        err = max(err, float(np.max(np.abs(fd - model.Dx_g(x)[:, k]))))
    fd = (_ham0(model, t, x, y, z, m + h * u) - _ham0(model, t, x, y, z, m - h * u)) / (2 * h)
    err = max(err, float(np.max(np.abs(fd - np.sum(_ham0_dm(model, t, x, y, z, m) * u, axis=-1)))))

    return AuditReport(
        lipschitz_ratios=ratios,
        centering=centering,
        d2m_sigma=d2m_sigma,
        hamiltonian_convexity_gap=ham_gap,
        terminal_convexity_gap=g_gap,
        derivative_error=err,
    )
