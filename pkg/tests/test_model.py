import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctbnreduce.model import (
    ComponentSpec,
    CtbnModel,
    builtin_model,
    decode_state,
    encode_state,
    load_model,
    model_from_dict,
    model_to_dict,
    restrict_fast_slow,
    restrict_to_parents,
    save_model,
    validate,
)

from conftest import random_model


def binary(M, parents=None):
    parents = parents or {}
    comps = []
    for i in range(1, M + 1):
        par = parents.get(i, ())
        table = {k: np.array([[-1.0, 1.0], [1.0, -1.0]]) for k in itertools.product((0, 1), repeat=len(par))}
        comps.append(ComponentSpec(i, 2, par, table))
    return CtbnModel(tuple(comps))


class TestValidate:
    def test_ex51_is_valid(self, ex51):
        assert validate(ex51) == []

    @pytest.mark.parametrize("name", ["ex31", "ex41", "ex42", "ex43", "ex44", "ex51", "ex52"])
    def test_builtins_valid(self, name):
        assert validate(builtin_model(name)) == []

    def test_bad_row_sum_names_component(self, ex51):
        doc = model_to_dict(ex51)
        doc["components"][0]["rate_table"][""] = [[-1.0, 1.5], [2.0, -2.0]]
        problems = validate(model_from_dict(doc))
        assert len(problems) == 1
        assert "component 1" in problems[0].location
        assert "sums to 0.5" in problems[0].message

    @pytest.mark.parametrize("bad", [0, 4])
    def test_dangling_parent(self, ex51, bad):
        doc = model_to_dict(ex51)
        doc["components"][2]["parents"] = [bad]
        doc["components"][2]["rate_table"] = {"0": [[-1, 1], [1, -1]], "1": [[-1, 1], [1, -1]]}
        problems = validate(model_from_dict(doc))
        assert len(problems) == 1
        assert str(bad) in problems[0].message

    def test_self_parent(self):
        comp = ComponentSpec(1, 2, (1,), {(0,): np.zeros((2, 2)), (1,): np.zeros((2, 2))})
        problems = validate(CtbnModel((comp,)))
        assert any("own parent" in p.message for p in problems)

    def test_missing_table_entry(self):
        comp0 = ComponentSpec(1, 2, (), {(): np.zeros((2, 2))})
        comp1 = ComponentSpec(2, 2, (1,), {(0,): np.zeros((2, 2))})
        problems = validate(CtbnModel((comp0, comp1)))
        assert any("missing [(1,)]" in p.message for p in problems)

    def test_negative_off_diagonal(self):
        comp = ComponentSpec(1, 2, (), {(): np.array([[1.0, -1.0], [1.0, -1.0]])})
        assert any("negative" in p.message for p in validate(CtbnModel((comp,))))

    def test_initial_must_sum_to_one(self):
        m = binary(2).replace(initial=np.array([0.25, 0.25, 0.25, 0.3]))
        problems = validate(m)
        assert len(problems) == 1 and problems[0].location == "initial"

    def test_cycles_allowed(self):
        assert validate(binary(2, {1: (2,), 2: (1,)})) == []

    def test_per_component_epsilon_needs_segregation(self, ex52, ex42):
        c = ex42.component(3)
        ok = ex42.replace(components=tuple(
            ComponentSpec(x.id, x.cardinality, x.parents, x.rate_table, x.scale, 0.01 if x.id == 3 else None)
            for x in ex42.components))
        assert validate(ok) == []
        bad = ex52.replace(components=tuple(
            ComponentSpec(x.id, x.cardinality, x.parents, x.rate_table, x.scale, 0.01 if x.id == 3 else None)
            for x in ex52.components))
        assert any("segregated" in p.message for p in validate(bad))
        assert c.epsilon is None

    def test_idempotent_and_pure(self, ex51):
        doc = model_to_dict(ex51)
        doc["components"][0]["rate_table"][""] = [[-1.0, 1.5], [2.0, -2.0]]
        m = model_from_dict(doc)
        first = [str(v) for v in validate(m)]
        assert [str(v) for v in validate(m)] == first
        assert model_to_dict(m) == doc


@pytest.fixture
def ex42():
    return builtin_model("ex42")


class TestEncoding:
    def test_zero_and_max(self):
        m = binary(3)
        assert encode_state(m, (0, 0, 0)) == 0
        assert encode_state(m, (1, 1, 1)) == 7

    def test_mixed_radix(self):
        comps = (ComponentSpec(1, 2, (), {(): np.zeros((2, 2))}), ComponentSpec(2, 3, (), {(): np.zeros((3, 3))}))
        m = CtbnModel(comps)
        # first component most significant, last varies fastest
        order = list(itertools.product(range(2), range(3)))
        assert order.index((1, 2)) == 5
        assert encode_state(m, (1, 2)) == 5
        assert decode_state(m, 5) == (1, 2)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            encode_state(binary(2), (0, 2))
        with pytest.raises(ValueError):
            decode_state(binary(2), 4)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_round_trip_random_models(self, seed):
        m = random_model(seed, max_components=6, max_card=4, max_states=4096)
        for k in range(m.n_states):
            assert encode_state(m, decode_state(m, k)) == k


class TestRestriction:
    def test_figure1_parents(self):
        m = binary(4, {2: (1,), 3: (1,), 4: (2, 3)})
        assert restrict_to_parents(m, 4, (5, 6, 7, 8)) == (6, 7)

    def test_root(self):
        assert restrict_to_parents(binary(2), 1, (1, 0)) == ()

    def test_ex44_parents(self, ex44):
        s = (0, 1, 0, 1, 1, 0)
        assert restrict_to_parents(ex44, 4, s) == (s[1], s[2])

    def test_figure1_fast_slow(self):
        m = binary(4, {2: (1,), 3: (1,), 4: (2, 3)})
        comps = tuple(ComponentSpec(c.id, 2, c.parents, c.rate_table, "fast" if c.id == 3 else "slow")
                      for c in m.components)
        m = m.replace(components=comps)
        assert restrict_fast_slow(m, (1, 0, 1, 0)) == ((1,), (1, 0, 0))

    def test_no_fast(self):
        assert restrict_fast_slow(binary(3), (1, 0, 1)) == ((), (1, 0, 1))

    def test_ex44_fast_slow(self, ex44):
        s = (0, 1, 1, 0, 1, 1)
        assert restrict_fast_slow(ex44, s) == ((1, 0), (0, 1, 1, 1))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6), st.data())
    def test_parents_depend_only_on_parent_coords(self, seed, data):
        m = random_model(seed, max_components=6, max_card=4, max_states=4096)
        s = [data.draw(st.integers(0, d - 1)) for d in m.cardinalities]
        i = data.draw(st.sampled_from(m.ids))
        base = restrict_to_parents(m, i, s)
        for j in m.ids:
            if j in m.parents(i):
                continue
            t = list(s)
            t[m.position(j)] = (t[m.position(j)] + 1) % m.cardinality(j)
            assert restrict_to_parents(m, i, t) == base


class TestFiles:
    def test_round_trip(self, tmp_path, ex52):
        path = tmp_path / "m.json"
        save_model(ex52, path)
        back = load_model(path)
        assert model_to_dict(back) == model_to_dict(ex52)

    def test_keys_are_comma_joined(self, ex52):
        doc = model_to_dict(ex52)
        assert set(doc["components"][3]["rate_table"]) == {"0,0", "0,1", "1,0", "1,1"}
        assert doc["components"][0]["rate_table"].keys() == {""}

    def test_joint_initial(self, tmp_path):
        m = random_model(3, joint_initial=True)
        save_model(m, tmp_path / "m.json")
        doc = json.loads((tmp_path / "m.json").read_text())
        assert "joint" in doc["initial"]
        np.testing.assert_allclose(load_model(tmp_path / "m.json").initial_joint(), m.initial_joint())

    def test_unsorted_parents_are_normalised(self):
        table = {(0, 1): np.array([[-1.0, 1.0], [0.0, 0.0]]),
                 (1, 0): np.array([[-2.0, 2.0], [0.0, 0.0]]),
                 (0, 0): np.zeros((2, 2)), (1, 1): np.zeros((2, 2))}
        c = ComponentSpec(1, 2, (3, 2), table)
        assert c.parents == (2, 3)
        # key (x3=0, x2=1) becomes (x2=1, x3=0)
        np.testing.assert_array_equal(c.rate_table[(1, 0)], [[-1.0, 1.0], [0.0, 0.0]])

    def test_malformed(self):
        with pytest.raises(ValueError):
            model_from_dict({"components": [{"id": 1}]})

    def test_factored_expansion(self):
        m = binary(2).replace(initial=(np.array([0.2, 0.8]), np.array([0.5, 0.5])))
        np.testing.assert_allclose(m.initial_joint(), [0.1, 0.1, 0.4, 0.4])
