"""Exact sample paths of a CTBN by competing exponential clocks.

Each component's exit rate is looked up from its own conditional rate table
given the current parent values, so the joint generator is never built.
Random numbers come from numpy's Philox4x32-10 counter-based bit generator,
which gives identical streams for a given seed on every platform.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dynamics import rate_multipliers
from .model import CtbnModel, require_valid

_CHUNK = 1 << 16


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Piecewise-constant path stored as segment entry times and flat state codes.

    ``codes`` index joint states of the components ``ids`` (cardinalities
    ``cardinalities``) in mixed-radix order, first component most
    significant.
    """

    times: np.ndarray
    codes: np.ndarray
    ids: tuple[int, ...]
    cardinalities: tuple[int, ...]
    horizon: float
    seed: int | None = None

    @property
    def transition_count(self) -> int:
        return len(self.times) - 1

    @property
    def states(self) -> np.ndarray:
        """Decoded states, shape (n_segments, n_components)."""
        return np.stack(np.unravel_index(self.codes, self.cardinalities), axis=1)

    @property
    def durations(self) -> np.ndarray:
        return np.diff(np.append(self.times, self.horizon))

    @property
    def segments(self) -> list[tuple[tuple[int, ...], float]]:
        return [(tuple(int(v) for v in s), float(t)) for s, t in zip(self.states, self.times)]

    def __len__(self):
        return len(self.times)


def _initial_state(model: CtbnModel, rng: np.random.Generator) -> list[int]:
    if model.is_factored:
        return [int(rng.choice(len(v), p=v)) for v in model.initial]
    code = int(rng.choice(model.n_states, p=model.initial_joint()))
    return [int(v) for v in np.unravel_index(code, model.cardinalities)]


# kernel exit codes
_DONE, _HALTED, _NEED_RANDOM, _NEED_SPACE = 0, 1, 2, 3


def _advance(x, rates, t, code, n, cap, max_time, exps, unis, i, out_t, out_c, n_out,
             strides, parent_pos, parent_stride, exit_off, exit_flat, cum_off, cum_flat,
             cards, affected):
    """Run the jump chain until a stop criterion or an exhausted buffer.

    Written for numba but valid plain Python.  ``x`` and ``rates`` are
    updated in place; scalars are returned.
    """
    M = x.shape[0]
    while True:
        if n == cap:
            return _DONE, t, code, n, i, n_out
        total = 0.0
        for k in range(M):
            total += rates[k]
        if total <= 0.0:
            return _HALTED, t, code, n, i, n_out
        if i >= exps.shape[0]:
            return _NEED_RANDOM, t, code, n, i, n_out
        if n_out >= out_t.shape[0]:
            return _NEED_SPACE, t, code, n, i, n_out
        dt = exps[i] / total
        if max_time > 0.0 and t + dt >= max_time:
            return _DONE, t, code, n, i, n_out
        t += dt
        u = unis[i] * total
        i += 1
        k = 0
        while k < M - 1 and u >= rates[k]:
            u -= rates[k]
            k += 1
        while rates[k] <= 0.0:
            # rounding can push u past the last positive clock
            k -= 1
            u = rates[k]
        d = cards[k]
        pidx = 0
        for j in range(parent_pos.shape[1]):
            if parent_pos[k, j] < 0:
                break
            pidx += x[parent_pos[k, j]] * parent_stride[k, j]
        a = x[k]
        base = cum_off[k] + (pidx * d + a) * d
        b = -1
        last = -1
        prev = 0.0
        for c in range(d):
            acc = cum_flat[base + c]
            if acc > prev:
                last = c
                if b < 0 and u < acc:
                    b = c
            prev = acc
        if b < 0:
            b = last
        x[k] = b
        code += (b - a) * strides[k]
        for jj in range(affected.shape[1]):
            j = affected[k, jj]
            if j < 0:
                break
            pj = 0
            for m in range(parent_pos.shape[1]):
                if parent_pos[j, m] < 0:
                    break
                pj += x[parent_pos[j, m]] * parent_stride[j, m]
            rates[j] = exit_flat[exit_off[j] + pj * cards[j] + x[j]]
        out_t[n_out] = t
        out_c[n_out] = code
        n_out += 1
        n += 1


try:
    from numba import njit
except ImportError:  # pragma: no cover
    _advance_compiled = _advance
else:
    _advance_compiled = njit(cache=True)(_advance)


def _tables(model: CtbnModel, mults):
    M = len(model.components)
    cards = np.array(model.cardinalities, dtype=np.int64)
    strides = np.array([int(np.prod(cards[k + 1:])) for k in range(M)], dtype=np.int64)
    max_par = max([len(c.parents) for c in model.components] + [1])
    parent_pos = np.full((M, max_par), -1, dtype=np.int64)
    parent_stride = np.zeros((M, max_par), dtype=np.int64)
    exit_parts, cum_parts, exit_off, cum_off = [], [], [], []
    n_exit = n_cum = 0
    for k, c in enumerate(model.components):
        pcards = [model.cardinality(p) for p in c.parents]
        for j, p in enumerate(c.parents):
            parent_pos[k, j] = model.position(p)
            parent_stride[k, j] = int(np.prod(pcards[j + 1:], dtype=np.int64))
        tensor = model.rate_tensor(c.id) * mults[c.id]
        off = tensor.copy()
        idx = np.arange(c.cardinality)
        off[:, idx, idx] = 0.0
        exit_parts.append(off.sum(axis=2).ravel())
        cum_parts.append(np.cumsum(off, axis=2).ravel())
        exit_off.append(n_exit)
        cum_off.append(n_cum)
        n_exit += exit_parts[-1].size
        n_cum += cum_parts[-1].size
    max_aff = 1 + max(len(model.children(c.id)) for c in model.components)
    affected = np.full((M, max_aff), -1, dtype=np.int64)
    for k, c in enumerate(model.components):
        row = [k] + [model.position(ch) for ch in model.children(c.id)]
        affected[k, :len(row)] = row
    return dict(strides=strides, parent_pos=parent_pos, parent_stride=parent_stride,
                exit_off=np.array(exit_off, dtype=np.int64), exit_flat=np.concatenate(exit_parts),
                cum_off=np.array(cum_off, dtype=np.int64), cum_flat=np.concatenate(cum_parts),
                cards=cards, affected=affected)


def sample_trajectory(model: CtbnModel, epsilon: float | None = None, seed: int = 0, *,
                      max_time: float | None = None, max_transitions: int | None = None,
                      initial_state: Sequence[int] | None = None, compiled: bool = True) -> Trajectory:
    """Simulate the CTBN exactly until ``max_time`` or ``max_transitions``.

    At least one stop criterion is required.  With only a transition cap the
    horizon is the time of the last transition.  If every exit rate vanishes
    the path is held constant up to the horizon.  ``compiled=False`` runs
    the jump kernel as plain Python; the path is identical either way.
    """
    if max_time is None and max_transitions is None:
        raise ValueError("give max_time and/or max_transitions")
    if max_time is not None and not (np.isfinite(max_time) and max_time > 0):
        raise ValueError(f"max_time must be positive and finite, got {max_time}")
    if max_transitions is not None and max_transitions < 0:
        raise ValueError(f"max_transitions must be non-negative, got {max_transitions}")
    require_valid(model)
    rng = make_rng(seed)
    tab = _tables(model, rate_multipliers(model, epsilon))
    cards = model.cardinalities

    x0 = list(initial_state) if initial_state is not None else _initial_state(model, rng)
    if len(x0) != len(cards) or any(not 0 <= v < d for v, d in zip(x0, cards)):
        raise ValueError(f"initial state {x0} out of range")
    x = np.array(x0, dtype=np.int64)
    code = int(np.dot(x, tab["strides"]))
    rates = np.empty(len(cards))
    for k in range(len(cards)):
        pidx = sum(x[p] * s for p, s in zip(tab["parent_pos"][k], tab["parent_stride"][k]) if p >= 0)
        rates[k] = tab["exit_flat"][tab["exit_off"][k] + pidx * cards[k] + x[k]]

    kernel = _advance_compiled if compiled else _advance
    cap = -1 if max_transitions is None else int(max_transitions)
    tmax = -1.0 if max_time is None else float(max_time)
    times_out = [np.zeros(1)]
    codes_out = [np.array([code], dtype=np.int64)]
    exps = unis = np.zeros(0)
    i = 0
    t = 0.0
    n = 0
    buf_t = np.empty(_CHUNK)
    buf_c = np.empty(_CHUNK, dtype=np.int64)
    n_out = 0
    while True:
        status, t, code, n, i, n_out = kernel(
            x, rates, t, code, n, cap, tmax, exps, unis, i, buf_t, buf_c, n_out, **tab)
        if status == _NEED_RANDOM:
            exps = rng.standard_exponential(_CHUNK)
            unis = rng.random(_CHUNK)
            i = 0
            continue
        times_out.append(buf_t[:n_out].copy())
        codes_out.append(buf_c[:n_out].copy())
        n_out = 0
        if status == _NEED_SPACE:
            continue
        break
    horizon = float(max_time) if max_time is not None else t
    return Trajectory(np.concatenate(times_out), np.concatenate(codes_out),
                      model.ids, cards, horizon, seed)


def restrict_trajectory(traj: Trajectory, component_ids: Iterable[int]) -> Trajectory:
    """Project a path onto a subset of components, merging repeated states."""
    keep = sorted(set(int(i) for i in component_ids))
    if not keep:
        raise ValueError("component set must be non-empty")
    pos = [traj.ids.index(i) for i in keep]
    sub_cards = tuple(traj.cardinalities[p] for p in pos)
    states = traj.states[:, pos]
    codes = np.ravel_multi_index(states.T, sub_cards).astype(np.int64)
    change = np.ones(len(codes), dtype=bool)
    change[1:] = codes[1:] != codes[:-1]
    return Trajectory(traj.times[change], codes[change], tuple(keep), sub_cards, traj.horizon, traj.seed)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Write ``traj`` to a path or an open text file."""
    if isinstance(path, (str, Path)):
        with open(path, "w", newline="") as f:
            write_trajectory_csv(traj, f)
        return
    path.write(f"# seed={traj.seed} horizon={traj.horizon!r} "
               f"cardinalities={','.join(map(str, traj.cardinalities))}\n")
    w = csv.writer(path)
    w.writerow(["entry_time"] + [f"x_{i}" for i in traj.ids])
    for t, s in zip(traj.times, traj.states):
        w.writerow([repr(float(t))] + [int(v) for v in s])


def read_trajectory_csv(path: str | Path, cardinalities: Sequence[int] | None = None) -> Trajectory:
    """Read a trajectory written by :func:`write_trajectory_csv`."""
    meta = {}
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for item in line[1:].split():
                k, _, v = item.partition("=")
                meta[k] = v
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    header, rows = rows[0], rows[1:]
    ids = tuple(int(h.split("_", 1)[1]) for h in header[1:])
    times = np.array([float(r[0]) for r in rows])
    states = np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64).reshape(len(rows), len(ids))
    if cardinalities is None:
        if "cardinalities" in meta:
            cardinalities = tuple(int(v) for v in meta["cardinalities"].split(","))
        else:
            cardinalities = tuple(int(v) + 1 for v in states.max(axis=0))
    cardinalities = tuple(cardinalities)
    horizon = float(meta["horizon"]) if "horizon" in meta else float(times[-1])
    seed = int(meta["seed"]) if meta.get("seed", "None") != "None" else None
    codes = np.ravel_multi_index(states.T, cardinalities).astype(np.int64)
    return Trajectory(times, codes, ids, cardinalities, horizon, seed)
