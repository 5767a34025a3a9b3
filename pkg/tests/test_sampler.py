import io

import numpy as np
import pytest
from scipy import stats

from ctbnreduce.dynamics import amalgamate, stationary_distribution
from ctbnreduce.model import ComponentSpec, CtbnModel, InvalidModelError, builtin_model
from ctbnreduce.sampler import (
    read_trajectory_csv,
    restrict_trajectory,
    sample_trajectory,
    write_trajectory_csv,
)

from conftest import random_model

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def ex51_paths():
    model = builtin_model("ex51")
    return model, {seed: sample_trajectory(model, 0.05, seed, max_time=50000.0) for seed in SEEDS}


@pytest.fixture(scope="module")
def ex52_path():
    model = builtin_model("ex52")
    return model, sample_trajectory(model, 1.0, seed=2024, max_transitions=200_000)


def holding_z(q, traj):
    """Standardised mean holding time per visited source state (censored last sojourn dropped)."""
    exit_rate = -np.diag(q)
    dur, src = traj.durations[:-1], traj.codes[:-1]
    return {int(k): (dur[src == k].mean() * exit_rate[k] - 1) * np.sqrt((src == k).sum())
            for k in np.unique(src)}


def next_state_pvalues(q, traj):
    src, dst = traj.codes[:-1], traj.codes[1:]
    out = {}
    for k in np.unique(src):
        targets = np.flatnonzero(q[k] > 0)
        seen = dst[src == k]
        assert np.isin(seen, targets).all()
        observed = np.array([(seen == b).sum() for b in targets])
        expected = observed.sum() * q[k, targets] / q[k, targets].sum()
        if expected.min() >= 5:
            out[int(k)] = stats.chisquare(observed, expected).pvalue
    return out


class TestStatistics:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_holding_time_state_000(self, ex51_paths, seed):
        model, paths = ex51_paths
        assert abs(holding_z(amalgamate(model, 0.05), paths[seed])[0]) <= 3.0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_holding_times_every_state(self, ex51_paths, seed):
        model, paths = ex51_paths
        z = holding_z(amalgamate(model, 0.05), paths[seed])
        assert len(z) == 8
        assert max(abs(v) for v in z.values()) <= 3.0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_next_state_every_state(self, ex51_paths, seed):
        model, paths = ex51_paths
        p = next_state_pvalues(amalgamate(model, 0.05), paths[seed])
        assert len(p) == 8
        assert min(p.values()) > 0.01

    def test_larger_model_family_wise(self, ex52_path):
        # 64 simultaneous tests: Bonferroni-corrected at a 1% family-wise level
        model, traj = ex52_path
        q = amalgamate(model, 1.0)
        z = holding_z(q, traj)
        p = next_state_pvalues(q, traj)
        assert len(p) >= 32
        z_crit = stats.norm.isf(0.01 / (2 * len(z)))
        assert max(abs(v) for v in z.values()) <= z_crit
        assert min(p.values()) > 0.01 / len(p)

    def test_holding_times_exponential(self, ex52_path):
        model, traj = ex52_path
        exit_rate = -np.diag(amalgamate(model, 1.0))
        scaled = traj.durations[:-1] * exit_rate[traj.codes[:-1]]
        assert stats.kstest(scaled, "expon").pvalue > 0.01

    def test_single_component_jumps(self, ex52_path):
        _, traj = ex52_path
        changed = (np.diff(traj.states, axis=0) != 0).sum(axis=1)
        assert (changed == 1).all()

    def test_occupation_matches_stationary(self):
        model = builtin_model("ex51")
        traj = sample_trajectory(model, 1.0, seed=99, max_transitions=10 ** 6)
        occ = np.bincount(traj.codes, weights=traj.durations, minlength=model.n_states) / traj.horizon
        pi = stationary_distribution(amalgamate(model, 1.0))
        assert np.abs(occ - pi).sum() <= 0.02

    def test_random_model_occupation(self):
        model = random_model(12, max_components=4, max_card=3, max_states=81)
        traj = sample_trajectory(model, seed=5, max_transitions=10 ** 6)
        occ = np.bincount(traj.codes, weights=traj.durations, minlength=model.n_states) / traj.horizon
        assert np.abs(occ - stationary_distribution(amalgamate(model))).sum() <= 0.02


class TestMechanics:
    def test_deterministic_per_seed(self, ex51):
        a = sample_trajectory(ex51, seed=3, max_transitions=5000)
        b = sample_trajectory(ex51, seed=3, max_transitions=5000)
        c = sample_trajectory(ex51, seed=4, max_transitions=5000)
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.codes, b.codes)
        assert not np.array_equal(a.times, c.times)

    def test_compiled_and_python_paths_agree(self, ex52):
        a = sample_trajectory(ex52, seed=8, max_transitions=3000, compiled=True)
        b = sample_trajectory(ex52, seed=8, max_transitions=3000, compiled=False)
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.codes, b.codes)

    def test_crosses_random_chunk_boundary(self, ex51):
        # more than 65536 draws forces a refill inside the kernel
        a = sample_trajectory(ex51, seed=1, max_transitions=150_000)
        assert a.transition_count == 150_000
        assert np.all(np.diff(a.times) > 0)

    def test_max_time(self, ex51):
        traj = sample_trajectory(ex51, seed=0, max_time=10.0)
        assert traj.horizon == 10.0
        assert traj.times[0] == 0.0 and traj.times[-1] < 10.0
        assert traj.durations.sum() == pytest.approx(10.0)

    def test_max_transitions_horizon(self, ex51):
        traj = sample_trajectory(ex51, seed=0, max_transitions=100)
        assert traj.transition_count == 100
        assert traj.horizon == traj.times[-1]

    def test_initial_state(self, ex51):
        traj = sample_trajectory(ex51, seed=0, max_transitions=1, initial_state=(1, 0, 1))
        assert traj.segments[0][0] == (1, 0, 1)

    def test_initial_distribution(self):
        comp = ComponentSpec(1, 3, (), {(): np.zeros((3, 3))})
        model = CtbnModel((comp,), (np.array([0.0, 1.0, 0.0]),))
        traj = sample_trajectory(model, seed=0, max_time=5.0)
        assert traj.segments == [((1,), 0.0)]

    def test_absorbing_holds_to_horizon(self):
        q = np.array([[-1.0, 1.0], [0.0, 0.0]])
        model = CtbnModel((ComponentSpec(1, 2, (), {(): q}),), (np.array([1.0, 0.0]),))
        traj = sample_trajectory(model, seed=0, max_time=1e6)
        assert traj.transition_count == 1
        assert traj.codes.tolist() == [0, 1]
        assert traj.horizon == 1e6

    def test_requires_stop(self, ex51):
        with pytest.raises(ValueError):
            sample_trajectory(ex51)

    def test_rejects_invalid_model(self):
        bad = CtbnModel((ComponentSpec(1, 2, (), {(): np.array([[-1.0, 2.0], [1.0, -1.0]])}),))
        with pytest.raises(InvalidModelError):
            sample_trajectory(bad, max_time=1.0)

    def test_epsilon_speeds_up_fast_components(self, ex51):
        slow = sample_trajectory(ex51, 1.0, seed=0, max_time=200.0)
        fast = sample_trajectory(ex51, 0.01, seed=0, max_time=200.0)
        assert fast.transition_count > 20 * slow.transition_count


class TestRestrictAndFiles:
    def test_restrict_merges_repeats(self, ex51):
        traj = sample_trajectory(ex51, seed=0, max_transitions=2000)
        sub = restrict_trajectory(traj, [1, 3])
        assert sub.ids == (1, 3)
        assert np.all(sub.codes[1:] != sub.codes[:-1])
        assert sub.horizon == traj.horizon
        # time in each slow state is preserved
        full = np.bincount(traj.states[:, 0] * 2 + traj.states[:, 2], weights=traj.durations, minlength=4)
        np.testing.assert_allclose(np.bincount(sub.codes, weights=sub.durations, minlength=4), full)

    def test_csv_round_trip(self, tmp_path, ex52):
        traj = sample_trajectory(ex52, seed=6, max_time=3.0)
        path = tmp_path / "t.csv"
        write_trajectory_csv(traj, path)
        back = read_trajectory_csv(path)
        np.testing.assert_array_equal(back.times, traj.times)
        np.testing.assert_array_equal(back.codes, traj.codes)
        assert (back.ids, back.cardinalities, back.horizon, back.seed) == (traj.ids, traj.cardinalities, 3.0, 6)

    def test_csv_byte_identical_for_same_seed(self, ex52):
        outs = []
        for _ in range(2):
            buf = io.StringIO()
            write_trajectory_csv(sample_trajectory(ex52, seed=6, max_time=3.0), buf)
            outs.append(buf.getvalue())
        assert outs[0] == outs[1]
        assert outs[0].splitlines()[1] == "entry_time,x_1,x_2,x_3,x_4,x_5,x_6"
