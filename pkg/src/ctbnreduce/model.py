"""CTBN model objects, state enumeration and restriction operators.

Joint states are enumerated in mixed-radix order with the first component
as the most significant digit, so the last component varies fastest.
Parent assignments follow the same convention over the parents sorted by
ascending component id.
"""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

SLOW = "slow"
FAST = "fast"

ROW_SUM_TOL = 1e-10
INITIAL_SUM_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ComponentSpec:
    """One component of a CTBN together with its conditional rate table.

    ``rate_table`` maps a parent assignment (tuple of local states of the
    parents, in ascending parent id order) to the local rate matrix of this
    component.  For a fast component the stored matrices are the
    epsilon-independent ones; the 1/epsilon factor is applied when a joint
    generator is assembled.
    """

    id: int
    cardinality: int
    parents: tuple[int, ...] = ()
    rate_table: Mapping[tuple[int, ...], np.ndarray] = field(default_factory=dict)
    scale: str = SLOW
    epsilon: float | None = None

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        table = {tuple(int(v) for v in k): _frozen(m) for k, m in self.rate_table.items()}
        order = sorted(range(len(parents)), key=lambda k: parents[k])
        if order != list(range(len(parents))):
            table = {tuple(k[j] for j in order): m for k, m in table.items()}
            parents = tuple(parents[j] for j in order)
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "cardinality", int(self.cardinality))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rate_table", MappingProxyType(table))

    @property
    def is_fast(self) -> bool:
        return self.scale == FAST


@dataclass(frozen=True, eq=False)
class CtbnModel:
    """A CTBN: components (graph + conditional rates), initial law and epsilon.

    ``initial`` is either a joint probability vector over the enumerated state
    space, or a tuple of per-component vectors (factored form).
    """

    components: tuple[ComponentSpec, ...]
    initial: np.ndarray | tuple[np.ndarray, ...] | None = None
    epsilon: float = 1.0

    def __post_init__(self):
        comps = tuple(sorted(self.components, key=lambda c: c.id))
        object.__setattr__(self, "components", comps)
        init = self.initial
        if init is None:
            init = tuple(_frozen(np.full(c.cardinality, 1.0 / c.cardinality)) for c in comps)
        elif isinstance(init, (list, tuple)) and len(init) > 0 and np.ndim(init[0]) == 1:
            init = tuple(_frozen(v) for v in init)
        else:
            init = _frozen(init)
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "_pos", MappingProxyType({c.id: k for k, c in enumerate(comps)}))

    # -- basic structure -------------------------------------------------
    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.components)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(c.cardinality for c in self.components)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.cardinalities, dtype=np.int64))

    @property
    def fast_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.components if c.is_fast)

    @property
    def slow_ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.components if not c.is_fast)

    @property
    def is_factored(self) -> bool:
        return isinstance(self.initial, tuple)

    def position(self, i: int) -> int:
        """Position (0-based) of component ``i`` in the state vector."""
        try:
            return self._pos[i]
        except KeyError:
            raise KeyError(f"unknown component id {i}") from None

    def component(self, i: int) -> ComponentSpec:
        return self.components[self.position(i)]

    def parents(self, i: int) -> tuple[int, ...]:
        return self.component(i).parents

    def children(self, i: int) -> tuple[int, ...]:
        return tuple(c.id for c in self.components if i in c.parents)

    def cardinality(self, i: int) -> int:
        return self.component(i).cardinality

    def rate_tensor(self, i: int) -> np.ndarray:
        """Stack the rate table of ``i`` as an array (n_assignments, d, d).

        The first axis follows the mixed-radix order of parent assignments.
        """
        comp = self.component(i)
        keys = assignments([self.cardinality(p) for p in comp.parents])
        return np.stack([comp.rate_table[k] for k in keys])

    def initial_joint(self) -> np.ndarray:
        """Initial distribution as a joint vector (expands the factored form)."""
        if not self.is_factored:
            return np.asarray(self.initial)
        joint = np.ones(1)
        for v in self.initial:
            joint = np.kron(joint, v)
        return joint

    def replace(self, **changes) -> "CtbnModel":
        kw = dict(components=self.components, initial=self.initial, epsilon=self.epsilon)
        kw.update(changes)
        return CtbnModel(**kw)


def assignments(cards: Sequence[int]) -> list[tuple[int, ...]]:
    """All assignments over a product space, in mixed-radix (big-endian) order."""
    return list(itertools.product(*(range(d) for d in cards)))


def all_states(model: CtbnModel) -> np.ndarray:
    """Array of shape (n_states, M) listing every joint state in index order."""
    cards = model.cardinalities
    grids = np.indices(cards).reshape(len(cards), -1)
    return grids.T.copy()


def encode_state(model: CtbnModel, s: Sequence[int]) -> int:
    cards = model.cardinalities
    if len(s) != len(cards):
        raise ValueError(f"state has {len(s)} entries, model has {len(cards)} components")
    flat = 0
    for pos, (v, d) in enumerate(zip(s, cards)):
        if not 0 <= v < d:
            raise ValueError(f"component {model.ids[pos]}: local state {v} outside [0, {d})")
        flat = flat * d + int(v)
    return flat


def decode_state(model: CtbnModel, k: int) -> tuple[int, ...]:
    cards = model.cardinalities
    if not 0 <= k < model.n_states:
        raise ValueError(f"state index {k} outside [0, {model.n_states})")
    out = []
    for d in reversed(cards):
        k, r = divmod(int(k), d)
        out.append(r)
    return tuple(reversed(out))


def restrict(model: CtbnModel, ids: Iterable[int], s: Sequence[int]) -> tuple[int, ...]:
    """Sub-vector of ``s`` at the given component ids, in the given order."""
    return tuple(int(s[model.position(i)]) for i in ids)


def restrict_to_parents(model: CtbnModel, i: int, s: Sequence[int]) -> tuple[int, ...]:
    return restrict(model, model.parents(i), s)


def restrict_fast_slow(model: CtbnModel, s: Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split a joint state into its (fast, slow) parts, each in ascending id order."""
    return restrict(model, model.fast_ids, s), restrict(model, model.slow_ids, s)


def merge_fast_slow(model: CtbnModel, fast: Sequence[int], slow: Sequence[int]) -> tuple[int, ...]:
    """Inverse of :func:`restrict_fast_slow`."""
    s = [0] * len(model.components)
    for i, v in zip(model.fast_ids, fast):
        s[model.position(i)] = int(v)
    for i, v in zip(model.slow_ids, slow):
        s[model.position(i)] = int(v)
    return tuple(s)


# -- validation ---------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    location: str
    message: str

    def __str__(self):
        return f"{self.location}: {self.message}"


def _fast_segregated(model: CtbnModel) -> bool:
    fast = set(model.fast_ids)
    return not any(set(model.parents(i)) & fast for i in fast)


def validate(model: CtbnModel) -> list[Violation]:
    """Collect every invariant violation of ``model``; empty list if well formed."""
    out: list[Violation] = []
    ids = [c.id for c in model.components]
    known = set(ids)
    if len(known) != len(ids):
        out.append(Violation("model", f"duplicate component ids {ids}"))
    if not (np.isfinite(model.epsilon) and model.epsilon > 0):
        out.append(Violation("model.epsilon", f"must be positive, got {model.epsilon}"))

    structurally_ok = True
    for c in model.components:
        loc = f"component {c.id}"
        if c.id < 1:
            out.append(Violation(loc, "id must be a positive integer"))
        if c.cardinality < 2:
            out.append(Violation(loc, f"cardinality {c.cardinality} < 2"))
        if c.scale not in (SLOW, FAST):
            out.append(Violation(loc, f"scale must be 'slow' or 'fast', got {c.scale!r}"))
        if c.epsilon is not None:
            if c.scale != FAST:
                out.append(Violation(loc, "per-component epsilon given for a slow component"))
            elif not c.epsilon > 0:
                out.append(Violation(loc, f"per-component epsilon must be positive, got {c.epsilon}"))
        if c.id in c.parents:
            out.append(Violation(loc, "component is its own parent"))
        if len(set(c.parents)) != len(c.parents):
            out.append(Violation(loc, f"repeated parents {c.parents}"))
        bad = [p for p in c.parents if p not in known]
        if bad:
            out.append(Violation(loc, f"parent ids {bad} do not refer to components"))
            structurally_ok = False
            continue

        expected = set(assignments([model.cardinality(p) for p in c.parents]))
        got = set(c.rate_table)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            out.append(Violation(loc, f"rate table keys mismatch (missing {missing}, unexpected {extra})"))
            structurally_ok = False
        for key in sorted(got & expected):
            q = c.rate_table[key]
            kloc = f"{loc}, parent assignment {key}"
            if q.shape != (c.cardinality, c.cardinality):
                out.append(Violation(kloc, f"rate matrix shape {q.shape}, expected {(c.cardinality,) * 2}"))
                structurally_ok = False
                continue
            out.extend(Violation(kloc, m) for m in rate_matrix_problems(q))

    if any(c.epsilon is not None for c in model.components) and not _fast_segregated(model):
        out.append(Violation("model", "per-component epsilon requires segregated fast components"))

    if structurally_ok:
        out.extend(_initial_problems(model))
    return out


def rate_matrix_problems(q: np.ndarray, tol: float = ROW_SUM_TOL) -> list[str]:
    """Reasons ``q`` is not a valid rate matrix (empty if it is)."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        return [f"not square: shape {q.shape}"]
    if not np.all(np.isfinite(q)):
        return ["non-finite entries"]
    msgs = []
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        r, c = np.argwhere(off < 0)[0]
        msgs.append(f"negative off-diagonal rate {off[r, c]} at ({r}, {c})")
    sums = q.sum(axis=1)
    for r in np.flatnonzero(np.abs(sums) > tol):
        msgs.append(f"row {r} sums to {sums[r]:.6g}, not 0")
    return msgs


def _initial_problems(model: CtbnModel) -> list[Violation]:
    out = []
    if model.is_factored:
        if len(model.initial) != len(model.components):
            return [Violation("initial", f"{len(model.initial)} factors for {len(model.components)} components")]
        vecs = [(f"initial factor of component {c.id}", v, c.cardinality)
                for c, v in zip(model.components, model.initial)]
    else:
        vecs = [("initial", np.asarray(model.initial), model.n_states)]
    for loc, v, n in vecs:
        if v.shape != (n,):
            out.append(Violation(loc, f"length {v.shape}, expected {n}"))
            continue
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            out.append(Violation(loc, "entries must be finite and non-negative"))
        if abs(v.sum() - 1.0) > INITIAL_SUM_TOL:
            out.append(Violation(loc, f"sums to {v.sum():.15g}, not 1"))
    return out


class InvalidModelError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("invalid model:\n" + "\n".join(f"  {v}" for v in violations))


def require_valid(model: CtbnModel) -> CtbnModel:
    problems = validate(model)
    if problems:
        raise InvalidModelError(problems)
    return model


# -- JSON model files ---------------------------------------------------

def _key_str(key: tuple[int, ...]) -> str:
    return ",".join(str(v) for v in key)


def _parse_key(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(v) for v in s.split(",")) if s else ()


def model_to_dict(model: CtbnModel) -> dict:
    comps = []
    for c in model.components:
        entry = {
            "id": c.id,
            "cardinality": c.cardinality,
            "parents": list(c.parents),
            "scale": c.scale,
            "rate_table": {_key_str(k): np.asarray(m).tolist() for k, m in sorted(c.rate_table.items())},
        }
        if c.epsilon is not None:
            entry["epsilon"] = c.epsilon
        comps.append(entry)
    if model.is_factored:
        initial = {"factored": [np.asarray(v).tolist() for v in model.initial]}
    else:
        initial = {"joint": np.asarray(model.initial).tolist()}
    return {"epsilon": model.epsilon, "components": comps, "initial": initial}


def model_from_dict(doc: Mapping) -> CtbnModel:
    """Build a model from the JSON document layout.

    Raises ``ValueError`` on malformed documents (missing fields, bad
    keys); semantic problems are left to :func:`validate`.
    """
    try:
        comps = []
        for c in doc["components"]:
            comps.append(ComponentSpec(
                id=int(c["id"]),
                cardinality=int(c["cardinality"]),
                parents=tuple(int(p) for p in c.get("parents", [])),
                rate_table={_parse_key(k): np.array(v, dtype=float) for k, v in c["rate_table"].items()},
                scale=c.get("scale", SLOW),
                epsilon=c.get("epsilon"),
            ))
        init = doc.get("initial")
        if init is None:
            initial = None
        elif "joint" in init:
            initial = np.array(init["joint"], dtype=float)
        elif "factored" in init:
            initial = tuple(np.array(v, dtype=float) for v in init["factored"])
        else:
            raise ValueError("initial must contain 'joint' or 'factored'")
        return CtbnModel(tuple(comps), initial, float(doc.get("epsilon", 1.0)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model document: {exc!r}") from exc


def load_model(path: str | Path) -> CtbnModel:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc)


_NUMBER_LIST = re.compile(r"\[\s*([-+0-9.eEinfaN,\s]*?)\s*\]")


def dumps_model(model: CtbnModel) -> str:
    """JSON text of a model, with each matrix row kept on one line."""
    text = json.dumps(model_to_dict(model), indent=2)
    return _NUMBER_LIST.sub(lambda m: "[" + ", ".join(v.strip() for v in m.group(1).split(",") if v.strip()) + "]", text)


def save_model(model: CtbnModel, path: str | Path) -> None:
    with open(path, "w") as f:
        f.write(dumps_model(model))
        f.write("\n")


def clamp(model: CtbnModel, members: Sequence[int], fixed: Mapping[int, int]) -> CtbnModel:
    """Model over ``members`` with every outside parent held at ``fixed``.

    Each member keeps its conditional rates; parents outside ``members`` are
    sliced out of the rate tables at the values in ``fixed``.  The initial
    distribution of the result is uniform and carries no meaning.
    """
    members = sorted(members)
    member_set = set(members)
    comps = []
    for i in members:
        c = model.component(i)
        inner = tuple(p for p in c.parents if p in member_set)
        missing = [p for p in c.parents if p not in member_set and p not in fixed]
        if missing:
            raise KeyError(f"component {i}: no value given for parents {missing}")
        table = {}
        for key in assignments([model.cardinality(p) for p in inner]):
            vals = dict(zip(inner, key))
            full = tuple(vals[p] if p in member_set else int(fixed[p]) for p in c.parents)
            table[key] = c.rate_table[full]
        comps.append(ComponentSpec(i, c.cardinality, inner, table, c.scale, c.epsilon))
    return CtbnModel(tuple(comps), None, model.epsilon)


def marginalize(p: np.ndarray, cards: Sequence[int], keep: Sequence[int]) -> np.ndarray:
    """Marginal of a joint vector onto the positions ``keep`` (kept in ascending order)."""
    tensor = np.asarray(p, dtype=float).reshape(tuple(cards))
    drop = tuple(k for k in range(len(cards)) if k not in set(keep))
    return tensor.sum(axis=drop).ravel()


def marginal(model: CtbnModel, p: np.ndarray, ids: Iterable[int]) -> np.ndarray:
    """Marginal of the joint vector ``p`` over the components ``ids``."""
    return marginalize(p, model.cardinalities, sorted(model.position(i) for i in ids))


BUILTIN_MODELS = ("ex31", "ex41", "ex42", "ex43", "ex44", "ex51", "ex52")


def builtin_model(name: str) -> CtbnModel:
    """One of the shipped example models, e.g. ``"ex51"``."""
    from importlib import resources

    if name not in BUILTIN_MODELS:
        raise KeyError(f"unknown built-in model {name!r}; choose from {', '.join(BUILTIN_MODELS)}")
    text = resources.files("ctbnreduce").joinpath("data", f"{name}.json").read_text()
    return model_from_dict(json.loads(text))
