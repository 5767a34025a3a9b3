"""Joint generators, master-equation integration and stationary analysis."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.stats import poisson

from .model import CtbnModel, all_states, clamp

MAX_STATES = 2 ** 20
UNIFORMIZATION_TOL = 1e-10
DENSE_STATIONARY_LIMIT = 10 ** 4
POWER_ITERATION_TOL = 1e-13


class StateSpaceTooLarge(ValueError):
    pass


class NonErgodicError(ValueError):
    """Raised when a generator has more than one closed communicating class."""

    def __init__(self, message: str, classes: list[list[int]] | None = None):
        super().__init__(message)
        self.classes = classes or []


@dataclass(frozen=True, eq=False)
class FastSlowSplit:
    """Epsilon-independent parts of the joint generator.

    The full generator at scale ``eps`` is ``q_fast / eps + q_slow``.
    """

    q_fast: np.ndarray
    q_slow: np.ndarray

    def compose(self, epsilon: float) -> np.ndarray:
        return self.q_fast / epsilon + self.q_slow


def rate_multipliers(model: CtbnModel, epsilon: float | None = None) -> dict[int, float]:
    """Factor applied to each component's stored rates at scale ``epsilon``."""
    eps = model.epsilon if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError(f"epsilon must be positive, got {eps}")
    out = {}
    for c in model.components:
        if c.is_fast:
            out[c.id] = 1.0 / (c.epsilon if c.epsilon is not None else eps)
        else:
            out[c.id] = 1.0
    return out


def _assemble(model: CtbnModel, multipliers: Mapping[int, float], *,
              max_states: int = MAX_STATES, sparse: bool = False):
    n = model.n_states
    if n > max_states:
        raise StateSpaceTooLarge(f"joint state space has {n} states, cap is {max_states}")
    states = all_states(model)
    cards = model.cardinalities
    strides = np.cumprod((1,) + cards[:0:-1])[::-1]
    idx = np.arange(n)
    rows, cols, vals = [], [], []
    for c in model.components:
        mult = multipliers.get(c.id, 0.0)
        if mult == 0.0:
            continue
        pos = model.position(c.id)
        ppos = [model.position(p) for p in c.parents]
        if ppos:
            pidx = np.ravel_multi_index(states[:, ppos].T, [cards[k] for k in ppos])
        else:
            pidx = np.zeros(n, dtype=np.int64)
        local = states[:, pos]
        rates = model.rate_tensor(c.id)[pidx, local, :] * mult
        for b in range(c.cardinality):
            m = local != b
            rows.append(idx[m])
            cols.append(idx[m] + (b - local[m]) * strides[pos])
            vals.append(rates[m, b])
    if rows:
        rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    off = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    exit_rates = np.asarray(off.sum(axis=1)).ravel()
    q = off - sp.diags(exit_rates)
    return q.tocsr() if sparse else q.toarray()


def amalgamate(model: CtbnModel, epsilon: float | None = None, *,
               max_states: int = MAX_STATES, sparse: bool = False):
    """Joint rate matrix of the CTBN, fast components scaled by 1/epsilon.

    ``epsilon`` defaults to ``model.epsilon``.  With ``sparse=True`` a CSR
    matrix is returned instead of a dense array.
    """
    return _assemble(model, rate_multipliers(model, epsilon), max_states=max_states, sparse=sparse)


def split_fast_slow(model: CtbnModel, *, max_states: int = MAX_STATES) -> FastSlowSplit:
    fast = {c.id: 1.0 for c in model.components if c.is_fast}
    slow = {c.id: 1.0 for c in model.components if not c.is_fast}
    return FastSlowSplit(_assemble(model, fast, max_states=max_states),
                         _assemble(model, slow, max_states=max_states))


def master_rhs(model: CtbnModel, p: np.ndarray, epsilon: float | None = None) -> np.ndarray:
    """Right-hand side of the master equation, evaluated component by component.

    For every state b this sums, over components i and source values a_i,
    q^i(a_i -> b_i | parents of b) * p(b with b_i replaced by a_i).  The
    joint generator is never formed.
    """
    mults = rate_multipliers(model, epsilon)
    p = np.asarray(p, dtype=float)
    states = all_states(model)
    cards = model.cardinalities
    strides = np.cumprod((1,) + cards[:0:-1])[::-1]
    idx = np.arange(model.n_states)
    dp = np.zeros_like(p)
    for c in model.components:
        pos = model.position(c.id)
        ppos = [model.position(q) for q in c.parents]
        pidx = (np.ravel_multi_index(states[:, ppos].T, [cards[k] for k in ppos])
                if ppos else np.zeros(len(idx), dtype=np.int64))
        tensor = model.rate_tensor(c.id) * mults[c.id]
        target = states[:, pos]
        for a in range(c.cardinality):
            source = idx + (a - target) * strides[pos]
            dp += tensor[pidx, a, target] * p[source]
    return dp


def _check_generator(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValueError(f"rate matrix must be square, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("rate matrix has non-finite entries")
    return q


def _check_distribution(p: np.ndarray, n: int) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (n,):
        raise ValueError(f"distribution has shape {p.shape}, expected ({n},)")
    if not np.all(np.isfinite(p)):
        raise ValueError("distribution has non-finite entries")
    return p


def solve_master(q, p0, t: float, *, tol: float = UNIFORMIZATION_TOL) -> np.ndarray:
    """Solve dp/dt = Q^T p from ``p0`` up to time ``t`` by uniformization.

    The Poisson series is truncated once the neglected right tail mass is
    below ``tol``; the retained weights are renormalised so total
    probability is preserved.
    """
    q = _check_generator(q)
    p = _check_distribution(p0, q.shape[0])
    if not np.isfinite(t) or t < 0:
        raise ValueError(f"time must be finite and non-negative, got {t}")
    lam = float(np.max(-np.diag(q))) if q.size else 0.0
    if t == 0 or lam == 0:
        return p.copy()
    pt = (np.eye(q.shape[0]) + q / lam).T
    mu = lam * t
    k_max = int(poisson.isf(tol, mu)) + 1
    weights = poisson.pmf(np.arange(k_max + 1), mu)
    # terms this far left contribute nothing representable
    k_min = int(np.argmax(weights > 1e-300 * weights.max()))
    out = np.zeros_like(p)
    term = p.copy()
    for k in range(k_max + 1):
        if k >= k_min:
            out += weights[k] * term
        term = pt @ term
    return out / weights[k_min:].sum()


def is_ergodic(q) -> bool:
    """True iff the graph of strictly positive off-diagonal rates is strongly connected."""
    q = _check_generator(q)
    if q.shape[0] <= 1:
        return True
    adj = (q > 0) & ~np.eye(q.shape[0], dtype=bool)
    n_comp, _ = connected_components(sp.csr_matrix(adj), directed=True, connection="strong")
    return n_comp == 1


def _closed_classes(q: np.ndarray) -> list[list[int]]:
    adj = (q > 0) & ~np.eye(q.shape[0], dtype=bool)
    n_comp, labels = connected_components(sp.csr_matrix(adj), directed=True, connection="strong")
    classes = [np.flatnonzero(labels == k) for k in range(n_comp)]
    closed = []
    for members in classes:
        leaves = adj[np.ix_(members, np.setdiff1d(np.arange(q.shape[0]), members))].any()
        if not leaves:
            closed.append(members.tolist())
    return closed


def stationary_distribution(q) -> np.ndarray:
    """Unique distribution pi with Q^T pi = 0 for an ergodic generator."""
    q = _check_generator(q)
    n = q.shape[0]
    if not is_ergodic(q):
        closed = _closed_classes(q)
        adj = (q > 0) & ~np.eye(n, dtype=bool)
        _, labels = connected_components(sp.csr_matrix(adj), directed=True, connection="strong")
        strata = [np.flatnonzero(labels == k).tolist() for k in range(labels.max() + 1)]
        raise NonErgodicError(
            f"generator is not ergodic: {len(strata)} communicating classes {strata}, "
            f"closed classes {closed} cannot reach one another", strata)
    if n == 1:
        return np.ones(1)
    if n > DENSE_STATIONARY_LIMIT:
        return _stationary_power(q)
    a = q.T.copy()
    a[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(a, b)
    pi = np.maximum(pi, 0.0)
    return pi / pi.sum()


def _stationary_power(q: np.ndarray, max_iter: int = 1_000_000) -> np.ndarray:
    n = q.shape[0]
    lam = float(np.max(-np.diag(q))) * 1.05
    pt = sp.csr_matrix((np.eye(n) + q / lam).T)
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pt @ pi
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < POWER_ITERATION_TOL:
            return nxt
        pi = nxt
    raise RuntimeError("power iteration did not converge")


def equilibration_rate(q) -> float:
    """|Re lambda_2|, lambda_2 being the eigenvalue with second largest real part.

    Zero when the chain has more than one closed class.  A one-state chain
    has no second eigenvalue and is reported as equilibrating instantly
    (``inf``).
    """
    q = _check_generator(q)
    if q.shape[0] < 2:
        return float("inf")
    re = np.sort(np.linalg.eigvals(q).real)[::-1]
    scale = max(1.0, float(np.max(np.abs(q))))
    gap = abs(re[1])
    return 0.0 if gap < 1e-10 * scale else float(gap)


def conditional_fast_generator(model: CtbnModel, slow_state: Mapping[int, int] | Sequence[int]) -> np.ndarray:
    """Epsilon-independent generator of the fast components with slow ones held fixed.

    ``slow_state`` is either a mapping from slow component id to its value
    or a sequence of values over ``model.slow_ids``.
    """
    if not isinstance(slow_state, Mapping):
        slow_state = dict(zip(model.slow_ids, slow_state))
    fast = model.fast_ids
    if not fast:
        return np.zeros((1, 1))
    sub = clamp(model, fast, slow_state)
    return _assemble(sub, {i: 1.0 for i in fast})
