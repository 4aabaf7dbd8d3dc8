"""Probability measures on a finite action set and the Bregman geometry on them.

Three convex regularisers are provided, each exposing its value, centred flat
derivative, Bregman divergence and mirror (prox) step:

* :class:`RelativeEntropy`  ``h(m) = sum m log(m / rho)``
* :class:`ChiSquared`       ``h(m) = 1/2 sum rho (m / rho - 1)^2``
* :class:`EntropicOT`       entropic transport cost from ``m`` to ``rho``

All regulariser methods work on batches: ``weights`` has shape ``(..., N)`` and
the reference measure ``rho`` has shape ``(N,)``.  The free functions
(:func:`h_value`, :func:`bregman`, :func:`mirror_step`, ...) are the
single-measure interface on top of them.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .errors import InnerSolveFailed, InvalidMeasure, SinkhornDiverged, ZeroAtomInKL

SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ActionSpace:
    """Finite set of action points, stored as an ``(N, k)`` array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("action points must form a non-empty (N, k) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("action points must be finite")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("action points must be distinct")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return self.size

    @classmethod
    def linspace(cls, lo, hi, n):
        return cls(np.linspace(lo, hi, n))

    def squared_distance_cost(self):
        diff = self.points[:, None, :] - self.points[None, :, :]
        return np.sum(diff**2, axis=-1)


def uniform(n):
    return np.full(n, 1.0 / n)


def check_reference(reference):
    ref = np.asarray(reference, dtype=float)
    if ref.ndim != 1 or ref.size < 1:
        raise InvalidMeasure("reference must be a non-empty vector")
    if np.any(~np.isfinite(ref)) or np.any(ref <= 0):
        raise InvalidMeasure("reference weights must be strictly positive")
    if abs(ref.sum() - 1.0) > SUM_TOL:
        raise InvalidMeasure(f"reference weights sum to {ref.sum()!r}, not 1")
    return ref


def check_weights(weights, n=None):
    w = np.asarray(weights, dtype=float)
    if n is not None and w.shape[-1] != n:
        raise InvalidMeasure(f"expected {n} weights, got {w.shape[-1]}")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise InvalidMeasure("weights must be finite and nonnegative")
    if np.any(np.abs(w.sum(axis=-1) - 1.0) > SUM_TOL):
        raise InvalidMeasure("weights must sum to 1")
    return w


@dataclass(frozen=True, eq=False)
class Measure:
    """Probability vector ``weights`` together with its reference measure."""

    weights: np.ndarray
    reference: np.ndarray = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        ref = uniform(w.shape[-1]) if self.reference is None else np.array(self.reference, dtype=float)
        if w.ndim != 1:
            raise InvalidMeasure("a Measure holds a single weight vector")
        ref = check_reference(ref)
        check_weights(w, ref.size)
        w.setflags(write=False)
        ref.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "reference", ref)

    @property
    def size(self):
        return self.weights.size

    def density(self):
        return self.weights / self.reference

    def __eq__(self, other):
        if not isinstance(other, Measure):
            return NotImplemented
        return np.array_equal(self.weights, other.weights) and np.array_equal(self.reference, other.reference)

    def __hash__(self):
        return hash((self.weights.tobytes(), self.reference.tobytes()))


def _center(values, weights):
    return values - np.sum(values * weights, axis=-1, keepdims=True)


def _lse(x, axis, keepdims=False):
    # lean log-sum-exp for the inner loops; scipy's version dominates small-array runtime
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - top), axis=axis, keepdims=True)) + top
    return out if keepdims else np.squeeze(out, axis=axis)


def variational_residual(v, m):
    """``min_i v_i - <v, m>``: nonnegative iff ``m`` minimises ``<v, .>`` on the simplex
    among vertices reachable from ``m`` (all of them)."""
    return np.min(v, axis=-1) - np.sum(v * m, axis=-1)


# ----------------------------------------------------------------------------
# regularisers


class Regularizer:
    """Interface shared by the regularisers; all arrays are batched over leading axes."""

    kind = None

    def value(self, weights, reference):
        raise NotImplementedError

    def flat_derivative(self, weights, reference):
        raise NotImplementedError

    def divergence(self, w_prime, w, reference):
        """Bregman divergence from the definition ``h(m') - h(m) - <dh/dm(m), m' - m>``."""
        dh = self.flat_derivative(w, reference)
        return (self.value(w_prime, reference) - self.value(w, reference)
                - np.sum(dh * (w_prime - w), axis=-1))

    def argmin_linear(self, g, scale, reference, start=None):
        """Minimiser over the simplex of ``<g, m> + scale * h(m)``."""
        raise NotImplementedError

    def prox(self, prior, grad, lam, reference):
        """Mirror step ``argmin_m <grad, m - prior> + lam * D_h(m | prior)``."""
        g = grad - lam * self.flat_derivative(prior, reference)
        return self.argmin_linear(g, lam, reference, start=prior)

    def to_dict(self):
        return {"kind": self.kind}


class RelativeEntropy(Regularizer):
    kind = "relative_entropy"

    @staticmethod
    def _require_positive(weights):
        if np.any(np.asarray(weights) <= 0):
            raise ZeroAtomInKL("relative entropy flat derivative needs strictly positive weights")

    def value(self, weights, reference):
        # 0 log 0 := 0
        w = np.asarray(weights, dtype=float)
        return np.sum(xlogy(w, w) - xlogy(w, reference), axis=-1)

    def flat_derivative(self, weights, reference):
        self._require_positive(weights)
        logd = np.log(weights) - np.log(reference)
        return _center(logd, weights)

    def divergence(self, w_prime, w, reference):
        self._require_positive(w)
        wp = np.asarray(w_prime, dtype=float)
        return np.sum(xlogy(wp, wp) - xlogy(wp, w), axis=-1)

    def argmin_linear(self, g, scale, reference, start=None):
        logits = np.log(reference) - np.asarray(g) / scale
        return _softmax(logits)

    def prox(self, prior, grad, lam, reference):
        self._require_positive(prior)
        return _softmax(np.log(prior) - np.asarray(grad) / lam)


def _softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class ChiSquared(Regularizer):
    kind = "chi_squared"

    def value(self, weights, reference):
        d = np.asarray(weights) / reference
        return 0.5 * np.sum(reference * (d - 1.0) ** 2, axis=-1)

    def flat_derivative(self, weights, reference):
        return _center(np.asarray(weights) / reference, weights)

    def divergence(self, w_prime, w, reference):
        gap = (np.asarray(w_prime) - np.asarray(w)) / reference
        return 0.5 * np.sum(reference * gap**2, axis=-1)

    def argmin_linear(self, g, scale, reference, start=None):
        return reference * project_density(1.0 - np.asarray(g) / scale, reference)

    def prox(self, prior, grad, lam, reference):
        v = np.asarray(prior) / reference - np.asarray(grad) / lam
        return reference * project_density(v, reference)


def project_density(v, reference):
    """Weighted projection of ``v`` onto ``{d >= 0, sum(reference * d) = 1}``.

    The solution is ``max(v - theta, 0)`` where ``theta`` is found by sorting
    ``v`` and scanning for the active set.  Works on batches ``(..., N)``.
    """
    v = np.asarray(v, dtype=float)
    ref = np.broadcast_to(reference, v.shape)
    order = np.argsort(-v, axis=-1, kind="stable")
    vs = np.take_along_axis(v, order, axis=-1)
    rs = np.take_along_axis(ref, order, axis=-1)
    cum_r = np.cumsum(rs, axis=-1)
    cum_rv = np.cumsum(rs * vs, axis=-1)
    thetas = (cum_rv - 1.0) / cum_r
    active = vs > thetas
    # the active set is always a prefix of the sorted order; k is its length
    k = np.sum(np.cumprod(active, axis=-1), axis=-1, keepdims=True)
    theta = np.take_along_axis(thetas, k - 1, axis=-1)
    return np.maximum(v - theta, 0.0)


@dataclass(frozen=True)
class SinkhornResult:
    phi: np.ndarray
    psi: np.ndarray
    iterations: int
    residual: float


@dataclass(eq=False)
class EntropicOT(Regularizer):
    """Entropic optimal transport cost from ``m`` to the reference measure.

    ``cost`` is the ``(N, N)`` matrix ``c(a, a')`` with the first index on the
    side of ``m``.  Potentials are normalised so that ``phi[anchor] == 0``.
    """

    cost: np.ndarray
    kappa: float = 1.0
    anchor: int = 0
    tol: float = 1e-12
    max_iter: int = 10_000
    inner_tol: float = 1e-8
    inner_max_iter: int = 10_000
    newton_after: int = 10

    kind = "entropic_ot"

    def __post_init__(self):
        self.cost = np.array(self.cost, dtype=float)
        if self.cost.ndim != 2 or self.cost.shape[0] != self.cost.shape[1]:
            raise ValueError("cost must be a square matrix")
        if not np.all(np.isfinite(self.cost)):
            raise ValueError("cost matrix must be finite")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not (self.tol > 0 and self.inner_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.inner_max_iter < 1:
            raise ValueError("iteration caps must be at least 1")
        if not 0 <= self.anchor < self.cost.shape[0]:
            raise ValueError("anchor index out of range")

    def to_dict(self):
        return {"kind": self.kind, "cost": self.cost.tolist(), "kappa": self.kappa,
                "anchor": self.anchor, "tol": self.tol, "max_iter": self.max_iter,
                "inner_tol": self.inner_tol, "inner_max_iter": self.inner_max_iter}

    # -- Schrodinger potentials ------------------------------------------------

    def _phi_update(self, psi, log_ref):
        # phi(a) = -kappa log sum_a' rho(a') exp((psi(a') - c(a, a')) / kappa)
        k = self.kappa
        return -k * _lse((psi[..., None, :] - self.cost) / k + log_ref, axis=-1)

    def _psi_update(self, phi, log_m):
        # psi(a') = -kappa log sum_a m(a) exp((phi(a) - c(a, a')) / kappa)
        k = self.kappa
        z = (phi[..., :, None] - self.cost) / k + log_m[..., :, None]
        return -k * _lse(z, axis=-2)

    def potentials(self, weights, reference, phi0=None, tol=None, max_iter=None):
        """Batched log-domain Sinkhorn; see :meth:`_potentials`.

        The last default-argument result is memoised, since value, flat
        derivative and divergence are usually requested for the same weights.
        """
        if phi0 is not None or tol is not None or max_iter is not None:
            return self._potentials(weights, reference, phi0, tol, max_iter)
        w = np.ascontiguousarray(weights, dtype=float)
        key = (w.shape, w.tobytes(), np.asarray(reference, dtype=float).tobytes())
        cached = getattr(self, "_last", None)
        if cached is None or cached[0] != key:
            out = self._potentials(w, reference)
            for arr in out[:2]:
                arr.setflags(write=False)
            cached = (key, out)
            self._last = cached
        return cached[1]

    def _potentials(self, weights, reference, phi0=None, tol=None, max_iter=None):
        """Batched log-domain Sinkhorn; returns ``(phi, psi, iterations, residual)``.

        Plain alternating updates are used first.  If they have not met the
        tolerance after ``newton_after`` sweeps (a symptom of near-degenerate
        couplings at small ``kappa``) the marginal equation is finished with
        Newton steps, each counted as one iteration.
        """
        tol = self.tol if tol is None else tol
        # potentials are -kappa * log(...), so rounding alone leaves kappa * eps
        tol = max(tol, 16 * np.finfo(float).eps * self.kappa)
        max_iter = self.max_iter if max_iter is None else max_iter
        w = np.asarray(weights, dtype=float)
        with np.errstate(divide="ignore"):
            log_m = np.log(w)
        log_ref = np.log(reference)
        phi = np.zeros(w.shape) if phi0 is None else np.array(np.broadcast_to(phi0, w.shape), dtype=float)
        damping = 1.0
        prev_res = np.inf
        rises = 0
        res = np.inf
        it = 0
        while it < max_iter:
            it += 1
            psi = self._psi_update(phi, log_m)
            phi_new = self._phi_update(psi, log_ref)
            res = float(np.max(np.abs(phi_new - phi)))
            if res <= tol:
                break
            if it >= self.newton_after:
                phi, used = self._newton(phi_new, w, log_m, log_ref, tol, max_iter - it)
                it += used
                continue
            # oscillation guard: switch to half-damping after repeated growth
            rises = rises + 1 if res > prev_res else 0
            if rises >= 3:
                damping = 0.5
            prev_res = res
            phi = phi_new if damping == 1.0 else damping * phi_new + (1 - damping) * phi
        else:
            raise SinkhornDiverged(f"Sinkhorn residual {res:.3e} > {tol:.1e} after {max_iter} iterations")
        shift = phi[..., self.anchor:self.anchor + 1].copy()
        phi = phi - shift
        psi = psi + shift
        residual = self.schrodinger_residual(phi, psi, w, reference)
        return phi, psi, it, residual

    def _newton(self, phi, w, log_m, log_ref, tol, budget):
        """Newton iterations on ``log gamma_1(phi) = log m`` over the support of ``m``.

        The equation of the heaviest atom is replaced by ``delta = 0`` there,
        which both removes the redundant equation and fixes the gauge.
        """
        k = self.kappa
        n = w.shape[-1]
        shape = phi.shape
        phi = phi.reshape(-1, n).copy()
        lm = np.broadcast_to(log_m, shape).reshape(-1, n)
        pos = np.broadcast_to(w, shape).reshape(-1, n) > 0
        rows = np.arange(phi.shape[0])
        piv = np.argmax(lm, axis=-1)
        eye = np.eye(n)

        def evaluate(ph, idx):
            logits = (ph[:, :, None] - self.cost) / k + lm[idx, :, None]
            log_p = logits - _lse(logits, axis=1, keepdims=True)
            log_g1 = _lse(log_p + log_ref, axis=2)
            with np.errstate(invalid="ignore"):
                r = np.where(pos[idx], log_g1 - lm[idx], 0.0)
            return r, log_p, log_g1

        r, log_p, log_g1 = evaluate(phi, rows)
        merit = np.max(np.abs(r), axis=-1)
        used = 0
        while used < budget:
            # rows already at the tolerance (or stuck at the rounding floor) drop out
            act = np.flatnonzero(k * merit > 0.1 * tol)
            if act.size == 0:
                break
            used += 1
            p = np.exp(log_p[act])
            a = np.einsum("bij,j,bkj->bik", p, np.exp(log_ref), p)
            with np.errstate(divide="ignore", invalid="ignore"):
                jac = (eye - a / np.exp(log_g1[act])[:, :, None]) / k
            jac = np.where(pos[act, :, None], jac, eye)
            sub = np.arange(act.size)
            jac[sub, piv[act]] = eye[piv[act]]
            rhs = -r[act]
            rhs[sub, piv[act]] = 0.0
            delta = np.linalg.solve(jac, rhs[..., None])[..., 0]
            t = np.ones(act.size)
            base = merit[act]
            for _ in range(40):
                cand = phi[act] + t[:, None] * delta
                r_c, log_p_c, log_g1_c = evaluate(cand, act)
                merit_c = np.max(np.abs(r_c), axis=-1)
                ok = merit_c < base
                if np.all(ok):
                    break
                t = np.where(ok, t, 0.5 * t)
            if not np.any(ok):
                break
            upd = act[ok]
            phi[upd] = cand[ok]
            r[upd], log_p[upd], log_g1[upd], merit[upd] = r_c[ok], log_p_c[ok], log_g1_c[ok], merit_c[ok]
            # rows whose step failed cannot improve further at this precision
            merit[act[~ok]] = 0.0
        return phi.reshape(shape), used

    def schrodinger_residual(self, phi, psi, weights, reference):
        with np.errstate(divide="ignore"):
            log_m = np.log(weights)
        r1 = np.abs(phi - self._phi_update(psi, np.log(reference)))
        r2 = np.abs(psi - self._psi_update(phi, log_m))
        return float(max(np.max(r1), np.max(r2)))

    def coupling(self, phi, psi, weights, reference):
        z = (phi[..., :, None] + psi[..., None, :] - self.cost) / self.kappa
        return np.asarray(weights)[..., :, None] * reference * np.exp(z)

    def value(self, weights, reference):
        phi, psi, _, _ = self.potentials(weights, reference)
        gamma = self.coupling(phi, psi, weights, reference)
        # primal objective at the Gibbs coupling: <c, gamma> + kappa KL(gamma | m x rho)
        return np.sum(gamma * (phi[..., :, None] + psi[..., None, :]), axis=(-2, -1))

    def flat_derivative(self, weights, reference):
        phi, _, _, _ = self.potentials(weights, reference)
        return _center(phi, weights)

    def divergence(self, w_prime, w, reference):
        phi, psi, _, _ = self.potentials(w, reference)
        h_prime = self.value(w_prime, reference)
        # h(m) - <phi, m> = <psi, rho> at the fixed point
        return h_prime - np.sum(phi * w_prime, axis=-1) - np.sum(psi * reference, axis=-1)

    # -- prox -------------------------------------------------------------------

    def argmin_linear(self, g, scale, reference, start=None, return_info=False):
        """Minimise ``<g, m> + scale * h(m)`` over the simplex.

        Eliminating the coupling leaves the concave program
        ``max_q sum_a' rho(a') log sum_a q(a) exp(-(s(a) + c(a, a')) / kappa)``
        with ``s = g / scale``, whose maximiser is the optimal ``m``.  It is
        solved by an active-set Newton method warm-started at ``start``, with a
        log-barrier Newton method as fallback for rows it does not settle;
        acceptance is the variational inequality ``s + phi[q] >= 0`` (equality
        on the support), checked with Sinkhorn potentials of the final ``q``.
        """
        g = np.asarray(g, dtype=float)
        s = g / scale
        s = s - np.min(s, axis=-1, keepdims=True)
        shape = s.shape
        n = shape[-1]
        s2 = s.reshape(-1, n)
        log_k = -(s2[:, :, None] + self.cost) / self.kappa
        if start is None:
            q = np.tile(reference, (len(s2), 1))
        else:
            q = np.array(np.broadcast_to(start, shape), dtype=float).reshape(-1, n)
            q = 0.5 * q + 0.5 * reference
        q = q / q.sum(axis=-1, keepdims=True)
        q, done, steps = _active_set_portfolio(log_k, reference, q)
        if not np.all(done):
            q_b, more = _barrier_portfolio(log_k[~done], reference, q[~done] * 0.5 + 0.5 * reference,
                                           self.inner_max_iter)
            q[~done] = q_b
            steps += more
        q = q.reshape(shape)
        phi, _, _, _ = self.potentials(q, reference)
        # residual in units of g / scale, since the minimiser only depends on that ratio
        v = g / scale + phi
        res = float(max(0.0, -np.min(variational_residual(v, q))))
        if res > self.inner_tol:
            raise InnerSolveFailed(f"entropic OT prox: variational residual {res:.3e} > {self.inner_tol:.1e}")
        if return_info:
            return q, {"iterations": steps, "residual": res}
        return q


def _active_set_portfolio(log_k, reference, q, max_steps=60, tol=1e-13):
    """Active-set Newton for ``max_q sum_j rho_j log (K^T q)_j`` on the simplex.

    Optimality is ``G_a = sum_j rho_j K_aj / (K^T q)_j <= 1`` with equality on the
    support.  Returns the iterate, a per-row convergence mask and the step count.
    """
    b, n = q.shape
    q = q.copy()
    support = q > 0
    eye = np.eye(n)
    done = np.zeros(b, dtype=bool)
    rows = np.arange(b)

    def objective(qq):
        with np.errstate(divide="ignore"):
            log_z = _lse(np.log(qq)[:, :, None] + log_k, axis=1)
        return log_z @ reference, log_z

    f, log_z = objective(q)
    steps = 0
    for steps in range(1, max_steps + 1):
        r = np.exp(log_k - log_z[:, None, :])
        grad = r @ reference
        inside = np.max(np.where(support, np.abs(grad - 1.0), 0.0), axis=-1)
        outside = np.where(support, -np.inf, grad - 1.0)
        done = (inside <= tol) & (np.max(outside, axis=-1) <= tol)
        if np.all(done):
            break
        # settled on the current support but an excluded atom still pays: release it
        enter = ~done & (inside <= tol)
        if np.any(enter):
            support[rows[enter], np.argmax(outside[enter], axis=-1)] = True
        live = ~done
        mask = support & live[:, None]
        neg_hess = np.einsum("bij,j,bkj->bik", r, reference, r)
        off = ~mask
        neg_hess = np.where(off[:, :, None] | off[:, None, :], 0.0, neg_hess) + eye * off[:, :, None]
        neg_hess += 1e-14 * eye
        h_inv_g = np.linalg.solve(neg_hess, (grad * mask)[..., None])[..., 0]
        h_inv_1 = np.linalg.solve(neg_hess, mask[..., None].astype(float))[..., 0]
        denom = h_inv_1.sum(-1)
        nu = np.where(live, h_inv_g.sum(-1) / np.where(live, denom, 1.0), 0.0)
        delta = (h_inv_g - nu[:, None] * h_inv_1) * mask
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(delta < 0, -q / delta, np.inf)
        blocker = np.argmin(ratio, axis=-1)
        t_max = ratio[rows, blocker]
        t = np.minimum(1.0, t_max)
        slope = np.sum(grad * delta, axis=-1)
        # near the optimum the Armijo test drowns in rounding; take the step as is
        accept = live & (slope <= 1e-12)
        search = live & ~accept & (slope > 0)
        for _ in range(40):
            if not np.any(search):
                break
            cand = np.clip(q + t[:, None] * delta, 0.0, None)
            f_c, _ = objective(cand)
            ok = f_c >= f + 1e-4 * t * slope - 1e-15
            accept |= search & ok
            search &= ~ok
            t = np.where(search, 0.5 * t, t)
        new = np.clip(q + t[:, None] * delta, 0.0, None)
        hit = accept & (t >= t_max)
        new[rows[hit], blocker[hit]] = 0.0
        support[rows[hit], blocker[hit]] = False
        q = np.where(accept[:, None], new, q)
        q = q / q.sum(axis=-1, keepdims=True)
        f, log_z = objective(q)
    return q, done, steps


def _barrier_portfolio(log_k, reference, q, max_steps, mu0=1e-2, mu_min=1e-14):
    """Batched barrier Newton for ``min_q -sum_j rho_j log (K^T q)_j`` on the simplex.

    ``log_k`` has shape ``(B, N, N')``; ``q`` is a strictly positive start.
    """
    b, n = q.shape
    eye = np.eye(n)

    def objective(qq, mu):
        with np.errstate(divide="ignore", invalid="ignore"):
            lq = np.log(qq)
            log_z = _lse(lq[:, :, None] + log_k, axis=1)
            val = -(log_z @ reference) - mu * np.sum(lq, axis=-1)
        return np.where(np.all(qq > 0, axis=-1), val, np.inf), log_z

    mu = mu0
    steps = 0
    while True:
        f, log_z = objective(q, mu)
        for _ in range(60):
            steps += 1
            r = np.exp(log_k - log_z[:, None, :])  # (B, N, N')
            grad = -(r @ reference) - mu / q
            hess = np.einsum("bij,j,bkj->bik", r, reference, r) + mu * eye / q[:, :, None] ** 2
            h_inv_g = np.linalg.solve(hess, grad[..., None])[..., 0]
            h_inv_1 = np.linalg.solve(hess, np.ones((b, n, 1)))[..., 0]
            nu = -h_inv_g.sum(-1) / h_inv_1.sum(-1)
            delta = -(h_inv_g + nu[:, None] * h_inv_1)
            decrement = -np.sum(grad * delta, axis=-1)
            active = decrement > 1e-14
            if not np.any(active):
                break
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(delta < 0, -q / delta, np.inf)
            t = np.minimum(1.0, 0.99 * np.min(ratio, axis=-1))
            # inside the quadratic-convergence region take the step unchecked;
            # the Armijo test cannot resolve decreases below rounding there
            accept = active & (decrement < 1e-8)
            search = active & ~accept
            for _ in range(50):
                cand = q + t[:, None] * delta
                if not np.any(search):
                    break
                f_c, _ = objective(cand, mu)
                ok = f_c <= f - 1e-4 * t * decrement
                accept |= search & ok
                search &= ~ok
                t = np.where(search, 0.5 * t, t)
            q = np.where(accept[:, None], q + t[:, None] * delta, q)
            q = q / q.sum(axis=-1, keepdims=True)
            f, log_z = objective(q, mu)
            if steps >= max_steps:
                return q, steps
        if mu <= mu_min:
            return _polish(log_k, reference, q, support_tol=1e3 * mu_min), steps
        mu = max(mu * 0.01, mu_min)


def _polish(log_k, reference, q, support_tol, n_steps=4):
    # plain Newton on the detected support; the barrier leaves O(mu) mass off it
    b, n = q.shape
    mask = q > support_tol
    q = np.where(mask, q, 0.0)
    q = q / q.sum(axis=-1, keepdims=True)
    eye = np.eye(n)
    for _ in range(n_steps):
        with np.errstate(divide="ignore"):
            log_z = _lse(np.log(q)[:, :, None] + log_k, axis=1)
        r = np.exp(log_k - log_z[:, None, :]) * mask[:, :, None]
        grad = -(r @ reference)
        hess = np.einsum("bij,j,bkj->bik", r, reference, r)
        off = ~mask
        hess = np.where(off[:, :, None] | off[:, None, :], 0.0, hess) + eye * off[:, :, None]
        h_inv_g = np.linalg.solve(hess, (grad * mask)[..., None])[..., 0]
        h_inv_1 = np.linalg.solve(hess, mask[..., None].astype(float))[..., 0]
        nu = -h_inv_g.sum(-1) / h_inv_1.sum(-1)
        delta = -(h_inv_g + nu[:, None] * h_inv_1) * mask
        cand = q + delta
        if np.any(cand < 0):
            # a support atom wants out; keep the barrier answer for those rows
            bad = np.any(cand < 0, axis=-1)
            cand[bad] = q[bad]
        q = cand / cand.sum(axis=-1, keepdims=True)
    return q


@dataclass(eq=False)
class Composite(Regularizer):
    """Nonnegative combination ``sum_i alpha_i h_i`` of other regularisers."""

    terms: list = field(default_factory=list)

    kind = "composite"

    def value(self, weights, reference):
        return sum(a * r.value(weights, reference) for a, r in self.terms)

    def flat_derivative(self, weights, reference):
        return sum(a * r.flat_derivative(weights, reference) for a, r in self.terms)

    def to_dict(self):
        return {"kind": self.kind, "terms": [[a, r.to_dict()] for a, r in self.terms]}


@dataclass(eq=False)
class AnchoredDivergence(Regularizer):
    """The map ``m -> D_h(m | nu)`` treated as a regulariser in its own right."""

    base: Regularizer
    nu: np.ndarray

    kind = "anchored_divergence"

    def value(self, weights, reference):
        return self.base.divergence(weights, self.nu, reference)

    def flat_derivative(self, weights, reference):
        d = (self.base.flat_derivative(weights, reference)
             - self.base.flat_derivative(self.nu, reference))
        return _center(d, weights)


# RegularizerSpec is any of the classes above
RegularizerSpec = Regularizer


# ----------------------------------------------------------------------------
# single-measure interface


def _same_reference(*measures):
    ref = measures[0].reference
    for m in measures[1:]:
        if not np.array_equal(m.reference, ref):
            raise InvalidMeasure("measures must share a reference measure")
    return ref


def h_value(reg, m):
    return float(reg.value(m.weights, m.reference))


def flat_derivative_h(reg, m):
    return reg.flat_derivative(m.weights, m.reference)


def bregman(reg, m_prime, m):
    ref = _same_reference(m_prime, m)
    return float(reg.divergence(m_prime.weights, m.weights, ref))


def sinkhorn_potentials(reg, m):
    phi, psi, it, res = reg.potentials(m.weights, m.reference)
    return SinkhornResult(phi=phi, psi=psi, iterations=it, residual=res)


def _as_measure(weights, reference):
    w = np.clip(weights, 0.0, None)
    return Measure(w / w.sum(), reference)


def mirror_step(reg, prior, grad, lam):
    grad = np.asarray(grad, dtype=float)
    if grad.shape != prior.weights.shape or not np.all(np.isfinite(grad)):
        raise ValueError("grad must be a finite vector matching the measure")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return _as_measure(reg.prox(prior.weights, grad, lam, prior.reference), prior.reference)


def prox_variational_residual(reg, prior, grad, lam, m_star):
    """``min_i <v, e_i - m*>`` with ``v = grad + lam (dh(m*) - dh(prior))``.

    Restricted to the support of ``m*`` for the relative entropy, whose
    derivative is unbounded at the boundary.
    """
    v = np.asarray(grad) + lam * (flat_derivative_h(reg, m_star) - flat_derivative_h(reg, prior))
    return float(variational_residual(v, m_star.weights))


def three_point_check(reg, prior, grad, lam, m_probe, m_star=None):
    """Three-point inequality residual; nonnegative when ``m_star`` is the prox point."""
    if m_star is None:
        m_star = mirror_step(reg, prior, grad, lam)
    grad = np.asarray(grad, dtype=float)

    def G(m):
        return float(grad @ (m.weights - prior.weights)) / lam

    return (G(m_probe) + bregman(reg, m_probe, prior) - G(m_star)
            - bregman(reg, m_probe, m_star) - bregman(reg, m_star, prior))


def bregman_of_bregman_check(reg, nu, m_prime, m):
    anchored = AnchoredDivergence(reg, nu.weights)
    ref = _same_reference(nu, m_prime, m)
    lhs = float(anchored.divergence(m_prime.weights, m.weights, ref))
    return abs(lhs - bregman(reg, m_prime, m))
