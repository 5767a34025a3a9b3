"""Maximum-likelihood rate estimates from observed trajectories.

The MLE of a conditional rate is the number of observed a -> b jumps
divided by the total time spent in a (under the same conditioning values).
The last, right-censored sojourn of a path adds residence time but no jump.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .model import assignments
from .sampler import Trajectory


@dataclass
class SufficientStats:
    """Residence times and jump counts of one target, keyed by conditioner values.

    ``residence[c][a]`` is the time spent with target in ``a`` while the
    conditioners took the values ``c``; ``counts[c][a, b]`` the number of
    a -> b jumps started under ``c``.  A ``target`` of ``None`` means the
    joint state of the whole trajectory is the target.
    """

    target: int | None
    conditioners: tuple[int, ...]
    cardinality: int
    residence: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)
    counts: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    def merge(self, other: "SufficientStats") -> "SufficientStats":
        if (self.target, self.conditioners, self.cardinality) != (other.target, other.conditioners, other.cardinality):
            raise ValueError("cannot merge statistics of different targets or conditioners")
        out = SufficientStats(self.target, self.conditioners, self.cardinality)
        for key in sorted(set(self.residence) | set(other.residence)):
            zero_r = np.zeros(self.cardinality)
            zero_c = np.zeros((self.cardinality, self.cardinality), dtype=np.int64)
            out.residence[key] = self.residence.get(key, zero_r) + other.residence.get(key, zero_r)
            out.counts[key] = self.counts.get(key, zero_c) + other.counts.get(key, zero_c)
        return out

    __add__ = merge

    def total_residence(self) -> float:
        return float(sum(v.sum() for v in self.residence.values()))


def _accumulate(durations, target_vals, cond_codes, n_cond, d):
    residence = np.zeros((n_cond, d))
    np.add.at(residence, (cond_codes, target_vals), durations)
    counts = np.zeros((n_cond, d, d), dtype=np.int64)
    jump = target_vals[1:] != target_vals[:-1]
    np.add.at(counts, (cond_codes[:-1][jump], target_vals[:-1][jump], target_vals[1:][jump]), 1)
    return residence, counts


def _columns(traj: Trajectory, ids) -> tuple[np.ndarray, tuple[int, ...]]:
    missing = [i for i in ids if i not in traj.ids]
    if missing:
        raise KeyError(f"components {missing} are not in the trajectory (has {traj.ids})")
    pos = [traj.ids.index(i) for i in ids]
    cards = tuple(traj.cardinalities[p] for p in pos)
    states = traj.states
    if not ids:
        return np.zeros(len(traj), dtype=np.int64), ()
    return np.ravel_multi_index(states[:, pos].T, cards), cards


def collect_stats(traj: Trajectory, target: int | None, conditioners: Iterable[int] = ()) -> SufficientStats:
    """Sufficient statistics of ``target`` given ``conditioners`` along ``traj``.

    Conditioner changes split the target's sojourns.  ``target=None`` uses
    the joint state of the trajectory as the target (conditioners must then
    be empty).
    """
    conditioners = tuple(sorted(int(c) for c in conditioners))
    if target is None:
        if conditioners:
            raise ValueError("a joint-state target takes no conditioners")
        vals, d = traj.codes, int(np.prod(traj.cardinalities))
    else:
        if target in conditioners:
            raise ValueError(f"target {target} is also a conditioner")
        vals, (d,) = _columns(traj, [target])
    cond_codes, cond_cards = _columns(traj, conditioners)
    keys = assignments(cond_cards)
    residence, counts = _accumulate(traj.durations, vals, cond_codes, len(keys), d)
    stats = SufficientStats(target, conditioners, d)
    for k, key in enumerate(keys):
        stats.residence[key] = residence[k]
        stats.counts[key] = counts[k]
    return stats


@dataclass
class RateEstimate:
    """MLE conditional rate table with Fisher standard errors.

    Rows whose source state was never visited are NaN (undefined), as are
    standard errors of rates with no observed jump.
    """

    stats: SufficientStats
    rates: dict[tuple[int, ...], np.ndarray]
    stderr: dict[tuple[int, ...], np.ndarray]

    def rate(self, cond: tuple[int, ...], a: int, b: int) -> float:
        return float(self.rates[tuple(cond)][a, b])

    def rows(self) -> list[dict]:
        out = []
        for key in sorted(self.rates):
            q, se = self.rates[key], self.stderr[key]
            res, cnt = self.stats.residence[key], self.stats.counts[key]
            for a in range(q.shape[0]):
                for b in range(q.shape[1]):
                    if a == b:
                        continue
                    out.append(dict(conditioning=key, from_state=a, to_state=b, rate=float(q[a, b]),
                                    stderr=float(se[a, b]), count=int(cnt[a, b]), residence=float(res[a])))
        return out


def mle_rates(stats: SufficientStats) -> RateEstimate:
    rates, stderr = {}, {}
    for key in sorted(stats.residence):
        res = stats.residence[key]
        cnt = stats.counts[key].astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(res[:, None] > 0, cnt / res[:, None], np.nan)
            se = np.where(cnt > 0, q / np.sqrt(cnt), np.nan)
        idx = np.arange(len(res))
        q[idx, idx] = 0.0
        q[idx, idx] = -np.nansum(q, axis=1)
        q[res <= 0, :] = np.nan
        se[idx, idx] = np.nan
        rates[key] = q
        stderr[key] = se
    return RateEstimate(stats, rates, stderr)


def estimate_generator(traj: Trajectory) -> np.ndarray:
    """MLE of the full generator over the trajectory's joint states (NaN rows if unvisited)."""
    return mle_rates(collect_stats(traj, None)).rates[()]


@dataclass
class ProbeRow:
    previous: int
    conditioning: tuple[int, ...]
    from_state: int
    to_state: int
    rate: float
    pooled_rate: float
    expected_count: float
    count: int

    @property
    def relative_deviation(self) -> float:
        return abs(self.rate - self.pooled_rate) / self.pooled_rate

    @property
    def z(self) -> float:
        # Poisson noise of the stratum count under the pooled rate
        return (self.count - self.expected_count) / np.sqrt(self.expected_count)


@dataclass
class MarkovianityReport:
    rows: list[ProbeRow]
    undefined: list[tuple[int, tuple[int, ...], int]]
    min_expected: float

    @property
    def max_relative_deviation(self) -> float:
        return max((r.relative_deviation for r in self.rows), default=float("nan"))

    @property
    def max_abs_z(self) -> float:
        return max((abs(r.z) for r in self.rows), default=float("nan"))


def markovianity_probe(traj: Trajectory, target: int | None = None, conditioners: Iterable[int] = (),
                       *, min_expected: float = 100.0) -> MarkovianityReport:
    """Compare rates stratified by the previous joint state with the pooled rates.

    If the observed process is Markov, the previous state carries no
    information and stratified rates differ from pooled ones by sampling
    noise only.  Strata whose expected jump count under the pooled rate is
    below ``min_expected`` are listed as undefined.  The first segment has
    no predecessor and is left out of both estimates.
    """
    conditioners = tuple(sorted(int(c) for c in conditioners))
    if target is None:
        if conditioners:
            raise ValueError("a joint-state target takes no conditioners")
        vals, d = traj.codes, int(np.prod(traj.cardinalities))
    else:
        vals, (d,) = _columns(traj, [target])
    cond_codes, cond_cards = _columns(traj, conditioners)
    keys = assignments(cond_cards)
    n_prev = int(np.prod(traj.cardinalities))
    dur = traj.durations[1:]
    prev = traj.codes[:-1]
    vals, cond_codes = vals[1:], cond_codes[1:]

    pooled_res, pooled_cnt = _accumulate(dur, vals, cond_codes, len(keys), d)
    strat = prev * len(keys) + cond_codes
    # stratum boundaries: a jump is attributed to the stratum of its source segment
    res, cnt = _accumulate(dur, vals, strat, n_prev * len(keys), d)
    rows, undefined = [], []
    for s in np.flatnonzero(res.sum(axis=1) > 0):
        p, c = divmod(int(s), len(keys))
        for a in np.flatnonzero(res[s] > 0):
            if pooled_res[c, a] <= 0:
                continue
            pooled = pooled_cnt[c, a] / pooled_res[c, a]
            for b in range(d):
                if b == a or pooled[b] <= 0:
                    continue
                expected = pooled[b] * res[s, a]
                if expected < min_expected:
                    undefined.append((p, keys[c], int(a)))
                    continue
                rows.append(ProbeRow(p, keys[c], int(a), b, cnt[s, a, b] / res[s, a], float(pooled[b]),
                                     float(expected), int(cnt[s, a, b])))
    return MarkovianityReport(rows, sorted(set(undefined)), min_expected)


def write_estimates_csv(est: RateEstimate, path) -> None:
    """Write an estimate table to a path or an open text file."""
    if isinstance(path, (str, Path)):
        with open(path, "w", newline="") as f:
            write_estimates_csv(est, f)
        return
    w = csv.writer(path)
    w.writerow(["conditioning", "from", "to", "rate", "stderr", "count", "residence"])
    for r in est.rows():
        w.writerow([",".join(map(str, r["conditioning"])), r["from_state"], r["to_state"],
                    repr(r["rate"]), repr(r["stderr"]), r["count"], repr(r["residence"])])
