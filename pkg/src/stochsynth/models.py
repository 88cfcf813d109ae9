"""Interval-valued Markov models: chains, IMCs and bounded-parameter MDPs.

Rows are sparse dicts keyed by target state id; a missing entry means the
transition interval [0, 0].  All model objects are treated as immutable after
construction so they can be shared freely between workers.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

#: default tolerance for interval and row-sum comparisons
FLOAT_TOL = 1e-9
#: Markov chain rows must be stochastic to this accuracy
ROW_SUM_TOL = 1e-12

Row = dict[int, tuple[float, float]]


class ModelError(ValueError):
    pass


class InvalidActionError(ModelError):
    """A policy picked an action outside the state's action set."""


class SizeLimitError(ModelError):
    """Brute-force enumeration requested on a model above the state bound."""


@dataclass
class Violation:
    state: int
    action: int | None
    message: str

    def __str__(self):
        where = f"state {self.state}" if self.action is None else f"state {self.state}, action {self.action}"
        return f"{where}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    def ok(self) -> bool:
        return not self.violations

    def add(self, state, action, message):
        self.violations.append(Violation(state, action, message))

    def __str__(self):
        return "valid" if self.ok() else "\n".join(str(v) for v in self.violations)


def _check_row(report: ValidationReport, state: int, action: int | None, row: Row, tol: float):
    lo_sum = 0.0
    hi_sum = 0.0
    for target, (lo, hi) in row.items():
        if lo < -tol or hi > 1.0 + tol:
            report.add(state, action, f"entry to {target} outside [0,1]: [{lo}, {hi}]")
        if lo > hi + tol:
            report.add(state, action, f"entry to {target} has lo > hi: [{lo}, {hi}]")
        lo_sum += lo
        hi_sum += hi
    if lo_sum > 1.0 + tol:
        report.add(state, action, f"Σlo={lo_sum:.6g} > 1")
    if hi_sum < 1.0 - tol:
        report.add(state, action, f"Σhi={hi_sum:.6g} < 1")


class MarkovChain:
    """Finite Markov chain with labelled states."""

    def __init__(self, n_states: int, rows: list[dict[int, float]], labels=None, initial=None):
        self.n_states = n_states
        self.rows = rows
        self.labels = labels if labels is not None else [frozenset() for _ in range(n_states)]
        self.initial = set(initial) if initial is not None else set(range(n_states))
        for q, row in enumerate(rows):
            s = sum(row.values())
            if abs(s - 1.0) > ROW_SUM_TOL:
                raise ModelError(f"row of state {q} sums to {s!r}, not 1")

    def dense(self) -> np.ndarray:
        T = np.zeros((self.n_states, self.n_states))
        for q, row in enumerate(self.rows):
            for t, p in row.items():
                T[q, t] = p
        return T

    def row_key(self) -> tuple:
        return tuple(tuple(sorted((t, round(p, 12)) for t, p in row.items())) for row in self.rows)


class IMC:
    """Interval-valued Markov chain: one implicit action per state."""

    def __init__(self, n_states: int, rows: list[Row], labels=None, initial=None):
        self.n_states = n_states
        self.rows = rows
        self.labels = labels if labels is not None else [frozenset() for _ in range(n_states)]
        self.initial = set(initial) if initial is not None else set(range(n_states))

    def validate(self, tol: float = FLOAT_TOL) -> ValidationReport:
        report = ValidationReport()
        for q, row in enumerate(self.rows):
            _check_row(report, q, None, row, tol)
        return report

    def as_bmdp(self) -> "BMDP":
        return BMDP(
            self.n_states,
            [[0] for _ in range(self.n_states)],
            {(q, 0): self.rows[q] for q in range(self.n_states)},
            labels=self.labels,
            initial=self.initial,
        )


class BMDP:
    """Bounded-parameter MDP: per-(state, action) interval transition rows."""

    def __init__(self, n_states: int, actions: list[list[int]], rows: dict[tuple[int, int], Row],
                 labels=None, initial=None):
        self.n_states = n_states
        self.actions = actions
        self.rows = rows
        self.labels = labels if labels is not None else [frozenset() for _ in range(n_states)]
        self.initial = set(initial) if initial is not None else set(range(n_states))

    def row(self, state: int, action: int) -> Row:
        return self.rows.get((state, action), {})


@dataclass(frozen=True)
class MemorylessPolicy:
    choice: dict[int, int]

    def __getitem__(self, state: int) -> int:
        return self.choice[state]


@dataclass
class IntervalResult:
    """Per-state satisfaction interval [p_min, p_max]."""

    p_min: np.ndarray
    p_max: np.ndarray

    def __post_init__(self):
        self.p_min = np.asarray(self.p_min, dtype=float)
        self.p_max = np.asarray(self.p_max, dtype=float)

    def validate(self, tol: float = FLOAT_TOL) -> bool:
        return bool(
            np.all(self.p_min >= -tol)
            and np.all(self.p_max <= 1.0 + tol)
            and np.all(self.p_min <= self.p_max + tol)
        )


def validate_bmdp(model: BMDP, tol: float = FLOAT_TOL) -> ValidationReport:
    """Check every structural invariant of a BMDP; empty report means valid."""
    report = ValidationReport()
    if len(model.actions) != model.n_states:
        report.add(-1, None, f"action table covers {len(model.actions)} states, model has {model.n_states}")
        return report
    for q in range(model.n_states):
        acts = model.actions[q]
        if not acts:
            report.add(q, None, "state has no actions")
        for a in acts:
            row = model.rows.get((q, a))
            if row is None:
                report.add(q, a, "missing transition row")
                continue
            for t in row:
                if not (0 <= t < model.n_states):
                    report.add(q, a, f"target {t} out of range")
            _check_row(report, q, a, row, tol)
    return report


def induce_imc(model: BMDP, policy: MemorylessPolicy) -> IMC:
    """The IMC obtained by fixing one action per state."""
    rows = []
    for q in range(model.n_states):
        a = policy[q]
        if a not in model.actions[q]:
            raise InvalidActionError(f"policy picks action {a} at state {q}; allowed: {model.actions[q]}")
        rows.append(dict(model.rows[(q, a)]))
    return IMC(model.n_states, rows, labels=list(model.labels), initial=set(model.initial))


def complement_result(r: IntervalResult) -> IntervalResult:
    """Satisfaction interval of the complement property: [1-p_max, 1-p_min]."""
    return IntervalResult(1.0 - r.p_max, 1.0 - r.p_min)


def corner_rows(row: Row, tol: float = FLOAT_TOL) -> list[dict[int, float]]:
    """All extreme stochastic rows of an interval row.

    One row per permutation of the support: walk the permutation and give each
    target min(hi, mass left after reserving the later targets' lower bounds).
    Duplicates are removed.
    """
    targets = sorted(row)
    if not targets:
        return [{}]
    seen = {}
    for perm in itertools.permutations(targets):
        alloc = {}
        used = 0.0
        for i, t in enumerate(perm):
            lo_rest = sum(row[s][0] for s in perm[i + 1:])
            z = min(row[t][1], 1.0 - used - lo_rest)
            z = max(z, row[t][0])
            alloc[t] = z
            used += z
        if abs(used - 1.0) > 1e-9:
            raise ModelError(f"row {row} admits no stochastic completion (sum {used})")
        key = tuple(round(alloc[t], 12) for t in targets)
        if key not in seen:
            seen[key] = {t: float(p) for t, p in alloc.items() if p > 0.0 or row[t][0] > 0.0}
    return list(seen.values())


def enumerate_corner_mcs(model: IMC, state_bound: int = 6):
    """Yield every Markov chain assembled from per-row corner allocations.

    Brute-force oracle for small models; refuses models above `state_bound`.
    """
    if model.n_states > state_bound:
        raise SizeLimitError(f"{model.n_states} states exceeds the enumeration bound {state_bound}")
    per_row = [corner_rows(model.rows[q]) for q in range(model.n_states)]
    seen = set()
    for combo in itertools.product(*per_row):
        chain = MarkovChain(model.n_states, [dict(r) for r in combo],
                            labels=list(model.labels), initial=set(model.initial))
        key = chain.row_key()
        if key not in seen:
            seen.add(key)
            yield chain


# -- structured-text serialization -------------------------------------------

def bmdp_to_dict(model: BMDP) -> dict:
    transitions = []
    for q in range(model.n_states):
        for a in model.actions[q]:
            for t, (lo, hi) in sorted(model.rows[(q, a)].items()):
                transitions.append({"from": q, "action": a, "to": t, "lo": lo, "hi": hi})
    return {
        "n_states": model.n_states,
        "labels": [sorted(l) for l in model.labels],
        "initial": sorted(model.initial),
        "transitions": transitions,
    }


def bmdp_from_dict(data: dict) -> BMDP:
    n = data["n_states"]
    labels = [frozenset(l) for l in data["labels"]]
    rows: dict[tuple[int, int], Row] = {}
    actions: list[list[int]] = [[] for _ in range(n)]
    for tr in data["transitions"]:
        key = (tr["from"], tr["action"])
        if tr["action"] not in actions[tr["from"]]:
            actions[tr["from"]].append(tr["action"])
        rows.setdefault(key, {})[tr["to"]] = (float(tr["lo"]), float(tr["hi"]))
    for q in range(n):
        actions[q].sort()
    return BMDP(n, actions, rows, labels=labels, initial=set(data["initial"]))


def imc_to_dict(model: IMC) -> dict:
    data = bmdp_to_dict(model.as_bmdp())
    return data


def imc_from_dict(data: dict) -> IMC:
    b = bmdp_from_dict(data)
    rows = [b.rows[(q, b.actions[q][0])] if b.actions[q] else {} for q in range(b.n_states)]
    return IMC(b.n_states, rows, labels=b.labels, initial=b.initial)


def save_json(obj: dict, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
