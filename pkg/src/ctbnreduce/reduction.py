"""Elimination of fast components.

The reduced CTBN keeps the slow components only.  Each slow component's
conditional rates are averaged over the equilibrium of the fast-upward
closure of its fast parents, conditioned on the last slow ancestors of that
closure.  :func:`effective_joint_generator` and :func:`projection_g` work
on the joint space instead and serve as independent cross-checks of the
graph construction.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.linalg

from .dynamics import (
    NonErgodicError,
    _assemble,
    conditional_fast_generator,
    is_ergodic,
    split_fast_slow,
    stationary_distribution,
)
from .model import (
    SLOW,
    ComponentSpec,
    CtbnModel,
    all_states,
    assignments,
    clamp,
    marginal,
)

RANGE_TOL = 1e-10


class UpwardClosureError(ValueError):
    pass


class AssumptionViolation(ValueError):
    """Fast dynamics with the slow components clamped are not ergodic."""

    def __init__(self, message: str, assignments: list[dict[int, int]] | None = None):
        super().__init__(message)
        self.assignments = assignments or []


class BoundaryLayerWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ClosureResult:
    members: frozenset[int]
    query: frozenset[int]

    def sorted(self) -> tuple[int, ...]:
        return tuple(sorted(self.members))

    def __contains__(self, i):
        return i in self.members

    def __iter__(self):
        return iter(self.sorted())

    def __len__(self):
        return len(self.members)


def _check_ids(model: CtbnModel, ids: Iterable[int]) -> frozenset[int]:
    ids = frozenset(int(i) for i in ids)
    unknown = sorted(ids - set(model.ids))
    if unknown:
        raise KeyError(f"unknown component ids {unknown}")
    return ids


def upward_closure(model: CtbnModel, J: Iterable[int]) -> ClosureResult:
    """Smallest superset of ``J`` that contains the parents of all its members."""
    query = _check_ids(model, J)
    if not query:
        raise ValueError("closure query must be non-empty")
    members = set(query)
    stack = list(query)
    while stack:
        for p in model.parents(stack.pop()):
            if p not in members:
                members.add(p)
                stack.append(p)
    return ClosureResult(frozenset(members), query)


def fast_upward_closure(model: CtbnModel, J: Iterable[int]) -> ClosureResult:
    """Closure of ``J`` (fast ids only) under fast parents."""
    query = _check_ids(model, J)
    fast = set(model.fast_ids)
    slow = sorted(query - fast)
    if slow:
        raise ValueError(f"components {slow} are slow; fast-upward closure needs fast ids")
    members = set(query)
    stack = list(query)
    while stack:
        for p in model.parents(stack.pop()):
            if p in fast and p not in members:
                members.add(p)
                stack.append(p)
    return ClosureResult(frozenset(members), query)


def last_slow_ancestors(model: CtbnModel, J: Iterable[int]) -> tuple[int, ...]:
    slow = set(model.slow_ids)
    closure = fast_upward_closure(model, J)
    return tuple(sorted({p for j in closure for p in model.parents(j) if p in slow}))


def is_upward_closed(model: CtbnModel, J: Iterable[int]) -> bool:
    J = set(J)
    return all(set(model.parents(i)) <= J for i in J)


def sub_ctbn(model: CtbnModel, J: Iterable[int]) -> CtbnModel:
    """The CTBN spanned by an upward-closed set of components."""
    J = sorted(_check_ids(model, J))
    members = set(J)
    for i in J:
        missing = sorted(set(model.parents(i)) - members)
        if missing:
            raise UpwardClosureError(f"{J} is not upward closed: parents {missing} of component {i} are missing")
    comps = tuple(model.component(i) for i in J)
    if model.is_factored:
        initial = tuple(model.initial[model.position(i)] for i in J)
    else:
        initial = marginal(model, model.initial_joint(), J)
    return CtbnModel(comps, initial, model.epsilon)


def _fast_generator(model: CtbnModel, fast_set, conditioners: Mapping[int, int]) -> np.ndarray:
    sub = clamp(model, fast_set, conditioners)
    return _assemble(sub, {i: 1.0 for i in sub.ids})


def conditional_equilibrium(model: CtbnModel, fast_set: Iterable[int],
                            conditioners: Mapping[int, int]) -> np.ndarray:
    """Equilibrium of the fast components ``fast_set`` with slow conditioners clamped.

    ``fast_set`` must be fast-upward closed; ``conditioners`` must give a
    value for each of its last slow ancestors (extra entries are ignored).
    The result is indexed by the joint state of ``fast_set`` in ascending id
    order.
    """
    fast_set = sorted(_check_ids(model, fast_set))
    closure = fast_upward_closure(model, fast_set)
    if set(closure.members) != set(fast_set):
        raise UpwardClosureError(
            f"{fast_set} is not fast-upward closed (closure is {closure.sorted()})")
    needed = last_slow_ancestors(model, fast_set)
    missing = [i for i in needed if i not in conditioners]
    if missing:
        raise KeyError(f"conditioning values missing for slow components {missing}")
    given = {i: int(conditioners[i]) for i in needed}
    q = _fast_generator(model, fast_set, given)
    if not is_ergodic(q):
        raise AssumptionViolation(
            f"fast components {fast_set} are not ergodic with slow components fixed at {given}",
            [given])
    return stationary_distribution(q)


@dataclass
class AssumptionReport:
    fast_ids: tuple[int, ...]
    conditioners: tuple[int, ...]
    failures: list[dict[int, int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        if self.passed:
            return f"fast dynamics ergodic for every assignment of {list(self.conditioners)}"
        lines = [f"fast dynamics not ergodic for {len(self.failures)} slow assignment(s):"]
        lines += [f"  {a}" for a in self.failures]
        return "\n".join(lines)


def check_assumption(model: CtbnModel) -> AssumptionReport:
    """Check that the clamped fast dynamics are ergodic for every slow assignment.

    Only the slow parents of fast components can influence the fast
    generator, so the sweep runs over their joint assignments.
    """
    fast = model.fast_ids
    report = AssumptionReport(fast, ())
    if not fast:
        return report
    cond = last_slow_ancestors(model, fast)
    report.conditioners = cond
    for values in assignments([model.cardinality(i) for i in cond]):
        fixed = dict(zip(cond, values))
        if not is_ergodic(_fast_generator(model, fast, fixed)):
            report.failures.append(fixed)
    return report


def _require_assumption(model: CtbnModel) -> None:
    report = check_assumption(model)
    if not report.passed:
        raise AssumptionViolation(str(report), report.failures)


def reduced_parents(model: CtbnModel, i: int) -> tuple[int, ...]:
    """Parents of slow component ``i`` in the reduced CTBN."""
    comp = model.component(i)
    if comp.is_fast:
        raise ValueError(f"component {i} is fast; only slow components survive reduction")
    fast = set(model.fast_ids)
    slow_par = {p for p in comp.parents if p not in fast}
    fast_par = [p for p in comp.parents if p in fast]
    if fast_par:
        slow_par |= set(last_slow_ancestors(model, fast_par))
    # a feedback loop i -> fast -> i makes i an ancestor of itself; that
    # dependence is carried by the row index of its own matrix instead
    slow_par.discard(i)
    return tuple(sorted(slow_par))


def effective_conditional_rates(model: CtbnModel, i: int) -> dict[tuple[int, ...], np.ndarray]:
    """Conditional rate table of slow component ``i`` in the reduced CTBN.

    Keys are assignments of :func:`reduced_parents`.  For each one, the
    original conditional matrix is averaged over the equilibrium of the
    fast-upward closure of ``i``'s fast parents.
    """
    comp = model.component(i)
    red_par = reduced_parents(model, i)
    fast = set(model.fast_ids)
    fast_par = [p for p in comp.parents if p in fast]
    if not fast_par:
        return dict(comp.rate_table)
    closure = fast_upward_closure(model, fast_par).sorted()
    zetas = assignments([model.cardinality(j) for j in closure])
    self_loop = i in last_slow_ancestors(model, fast_par)
    table = {}
    for key in assignments([model.cardinality(p) for p in red_par]):
        q = np.zeros((comp.cardinality, comp.cardinality))
        for a in range(comp.cardinality) if self_loop else (None,):
            slow_vals = dict(zip(red_par, key))
            if self_loop:
                slow_vals[i] = a
            pi = conditional_equilibrium(model, closure, slow_vals)
            rows = slice(None) if a is None else slice(a, a + 1)
            for weight, zeta in zip(pi, zetas):
                vals = {**slow_vals, **dict(zip(closure, zeta))}
                q[rows] += weight * comp.rate_table[tuple(vals[p] for p in comp.parents)][rows]
        # keep rows exactly conservative after averaging
        np.fill_diagonal(q, 0.0)
        np.fill_diagonal(q, -q.sum(axis=1))
        table[key] = q
    return table


def reduce_ctbn(model: CtbnModel) -> CtbnModel:
    """CTBN over the slow components whose law is the epsilon -> 0 limit."""
    _require_assumption(model)
    comps = []
    for i in model.slow_ids:
        c = model.component(i)
        comps.append(ComponentSpec(i, c.cardinality, reduced_parents(model, i),
                                   effective_conditional_rates(model, i), SLOW))
    if model.is_factored:
        initial = tuple(model.initial[model.position(i)] for i in model.slow_ids)
    else:
        initial = marginal(model, model.initial_joint(), model.slow_ids)
    return CtbnModel(tuple(comps), initial, model.epsilon)


# -- joint-space constructions -------------------------------------------

def _slow_fast_index(model: CtbnModel) -> tuple[np.ndarray, np.ndarray]:
    states = all_states(model)

    def flat(ids):
        if not ids:
            return np.zeros(len(states), dtype=np.int64)
        pos = [model.position(i) for i in ids]
        return np.ravel_multi_index(states[:, pos].T, [model.cardinality(i) for i in ids])

    return flat(model.slow_ids), flat(model.fast_ids)


def fast_equilibria(model: CtbnModel) -> np.ndarray:
    """Conditional fast equilibrium for every slow state: shape (|S_slow|, |S_fast|)."""
    _require_assumption(model)
    slow_states = assignments([model.cardinality(i) for i in model.slow_ids])
    return np.array([stationary_distribution(conditional_fast_generator(model, a))
                     for a in slow_states])


def _product_weights(model: CtbnModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pi = fast_equilibria(model)
    s_idx, f_idx = _slow_fast_index(model)
    return pi[s_idx, f_idx], s_idx, f_idx


def effective_joint_generator(model: CtbnModel) -> np.ndarray:
    """Slow-space generator: the slow part of Q averaged over the fast equilibria."""
    weights, s_idx, f_idx = _product_weights(model)
    q_slow = split_fast_slow(model).q_slow
    rows, cols = np.nonzero(q_slow)
    same_fast = f_idx[rows] == f_idx[cols]
    rows, cols = rows[same_fast], cols[same_fast]
    n_slow = int(np.prod([model.cardinality(i) for i in model.slow_ids], dtype=np.int64))
    out = np.zeros((n_slow, n_slow))
    np.add.at(out, (s_idx[rows], s_idx[cols]), weights[rows] * q_slow[rows, cols])
    return out


def projection_g(model: CtbnModel) -> np.ndarray:
    """Limit of exp(t Q_fast) as t -> infinity.

    Entry (a, b) is the fast equilibrium probability of Fast(b) given Slow(b)
    when a and b share their slow part, and zero otherwise.
    """
    weights, s_idx, _ = _product_weights(model)
    return (s_idx[:, None] == s_idx[None, :]) * weights[None, :]


def slow_marginal(model: CtbnModel, p: np.ndarray) -> np.ndarray:
    return marginal(model, p, model.slow_ids)


def limiting_solve(model: CtbnModel, p0: np.ndarray, t: float) -> np.ndarray:
    """Solve dp/dt = G^T Q_slow^T p on the full space by a dense matrix exponential.

    If ``p0`` is not of product form (not in the range of G^T) it is first
    projected, with a :class:`BoundaryLayerWarning`.
    """
    p0 = np.asarray(p0, dtype=float)
    if not (np.all(np.isfinite(p0)) and np.isfinite(t)):
        raise ValueError("non-finite input")
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")
    g = projection_g(model)
    projected = g.T @ p0
    if np.abs(projected - p0).sum() > RANGE_TOL:
        warnings.warn("initial distribution is not fast-equilibrated; projecting it "
                      "(the true solution differs only in an initial boundary layer)",
                      BoundaryLayerWarning, stacklevel=2)
        p0 = projected
    if t == 0:
        return p0.copy()
    a = g.T @ split_fast_slow(model).q_slow.T
    return scipy.linalg.expm(t * a) @ p0


__all__ = [
    "AssumptionReport",
    "AssumptionViolation",
    "BoundaryLayerWarning",
    "ClosureResult",
    "NonErgodicError",
    "UpwardClosureError",
    "check_assumption",
    "conditional_equilibrium",
    "effective_conditional_rates",
    "effective_joint_generator",
    "fast_equilibria",
    "fast_upward_closure",
    "is_upward_closed",
    "last_slow_ancestors",
    "limiting_solve",
    "projection_g",
    "reduce_ctbn",
    "reduced_parents",
    "slow_marginal",
    "sub_ctbn",
    "upward_closure",
]
