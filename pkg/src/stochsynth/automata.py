"""Deterministic Rabin automata and their products with interval models.

A DRA is consumed from a structured-text file; no temporal-logic translation
happens here.  Product states are indexed `j * n_dra + i` for model state j
and automaton state i so that exports are reproducible.

Convention: initialization counts as a transition.  When cell Q_j is chosen
as the initial state, the run effectively starts at delta(s0, L(Q_j)); the
product therefore keeps <Q_j, s0> as its formal initial state and the helper
`effective_initial` applies the first step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .models import BMDP, IMC, Row


class DRAError(ValueError):
    pass


class AlphabetMismatchError(DRAError):
    pass


@dataclass
class RabinAutomaton:
    n_states: int
    alphabet: set[frozenset[str]]
    delta: dict[tuple[int, frozenset[str]], int]
    s0: int
    pairs: list[tuple[frozenset[int], frozenset[int]]]  # (E_i, F_i)

    def step(self, s: int, label: frozenset[str]) -> int:
        try:
            return self.delta[(s, label)]
        except KeyError:
            raise AlphabetMismatchError(
                f"label set {sorted(label)} not handled from automaton state {s}") from None

    def check_total(self):
        missing = [(s, sorted(lab)) for s in range(self.n_states) for lab in self.alphabet
                   if (s, lab) not in self.delta]
        if missing:
            raise DRAError(f"transition function not total; missing entries: {missing}")


def parse_dra(text: str) -> RabinAutomaton:
    """Parse a DRA document: {"states","s0","pairs","edges"}.

    The alphabet is inferred from the label sets on edges; every (state,
    label-set) pair must then be covered or parsing fails.
    """
    try:
        data = json.loads(text) if isinstance(text, str) else text
    except json.JSONDecodeError as exc:
        raise DRAError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    for key in ("states", "s0", "pairs", "edges"):
        if key not in data:
            raise DRAError(f"missing field '{key}'")
    n = int(data["states"])
    delta = {}
    alphabet: set[frozenset[str]] = set()
    for k, edge in enumerate(data["edges"]):
        try:
            src, label, dst = int(edge["from"]), frozenset(edge["label"]), int(edge["to"])
        except (KeyError, TypeError) as exc:
            raise DRAError(f"edge {k} malformed ({exc})") from None
        if not (0 <= src < n and 0 <= dst < n):
            raise DRAError(f"edge {k} references state outside 0..{n - 1}")
        if (src, label) in delta and delta[(src, label)] != dst:
            raise DRAError(f"edge {k} makes delta({src}, {sorted(label)}) nondeterministic")
        delta[(src, label)] = dst
        alphabet.add(label)
    pairs = []
    for k, pair in enumerate(data["pairs"]):
        if len(pair) != 2:
            raise DRAError(f"pair {k} must be [E, F]")
        e, f = frozenset(int(x) for x in pair[0]), frozenset(int(x) for x in pair[1])
        if any(x >= n or x < 0 for x in e | f):
            raise DRAError(f"pair {k} references state outside 0..{n - 1}")
        pairs.append((e, f))
    dra = RabinAutomaton(n, alphabet, delta, int(data["s0"]), pairs)
    dra.check_total()
    return dra


def load_dra(path) -> RabinAutomaton:
    with open(path) as fh:
        return parse_dra(fh.read())


class ProductModel:
    """Product of a BMDP (or IMC) with a DRA.

    The underlying interval model lives in `.model`; per-state Rabin flags are
    boolean vectors `e_flags[i]`, `f_flags[i]`, one entry per product state.
    """

    def __init__(self, model: BMDP, dra: RabinAutomaton, n_cells: int):
        self.model = model
        self.dra = dra
        self.n_cells = n_cells
        self.n_dra = dra.n_states
        self.n_states = model.n_states
        self.n_pairs = len(dra.pairs)
        self.e_flags = [[False] * self.n_states for _ in range(self.n_pairs)]
        self.f_flags = [[False] * self.n_states for _ in range(self.n_pairs)]
        for i, (e, f) in enumerate(dra.pairs):
            for j in range(n_cells):
                for s in e:
                    self.e_flags[i][j * self.n_dra + s] = True
                for s in f:
                    self.f_flags[i][j * self.n_dra + s] = True
        self.initial = {j * self.n_dra + dra.s0 for j in range(n_cells)}

    @classmethod
    def from_flags(cls, model: BMDP, flag_pairs, n_cells: int | None = None) -> "ProductModel":
        """Wrap an already-flagged model (one trivial automaton state per cell).

        `flag_pairs` is a list of (E_set, F_set) over the model's state ids.
        Useful for analyses that start from a hand-built product.
        """
        obj = cls.__new__(cls)
        obj.model = model
        obj.dra = None
        obj.n_cells = n_cells if n_cells is not None else model.n_states
        obj.n_dra = model.n_states // obj.n_cells
        obj.n_states = model.n_states
        obj.n_pairs = len(flag_pairs)
        obj.e_flags = [[q in e for q in range(model.n_states)] for e, _ in flag_pairs]
        obj.f_flags = [[q in f for q in range(model.n_states)] for _, f in flag_pairs]
        obj.initial = set(model.initial)
        return obj

    def state_id(self, cell: int, dra_state: int) -> int:
        return cell * self.n_dra + dra_state

    def cell_of(self, state: int) -> int:
        return state // self.n_dra

    def dra_state_of(self, state: int) -> int:
        return state % self.n_dra

    def flag_mask(self, state: int) -> int:
        """Bitmask: bit 2i set when in E_i, bit 2i+1 set when in F_i."""
        mask = 0
        for i in range(self.n_pairs):
            if self.e_flags[i][state]:
                mask |= 1 << (2 * i)
            if self.f_flags[i][state]:
                mask |= 1 << (2 * i + 1)
        return mask

    def effective_initial(self, cell: int) -> int:
        """Product state after the initialization step from <cell, s0>."""
        label = self.model.labels[self.state_id(cell, self.dra.s0)]
        return self.state_id(cell, self.dra.step(self.dra.s0, label))


def product(model: BMDP, dra: RabinAutomaton) -> ProductModel:
    """Cartesian product of a BMDP with a DRA.

    Row of <Q_j, s> under action a sends mass to <Q_l, delta(s, L(Q_l))>
    with the (Q_j, a, Q_l) interval; every other automaton successor gets 0.
    """
    for lab in model.labels:
        if frozenset(lab) not in dra.alphabet:
            raise AlphabetMismatchError(f"model label set {sorted(lab)} absent from DRA alphabet")
    nd = dra.n_states
    n_prod = model.n_states * nd
    actions = [list(model.actions[p // nd]) for p in range(n_prod)]
    labels = [frozenset(model.labels[p // nd]) for p in range(n_prod)]
    rows: dict[tuple[int, int], Row] = {}
    for j in range(model.n_states):
        targets = {}
        for a in model.actions[j]:
            targets[a] = model.rows[(j, a)]
        for s in range(nd):
            p = j * nd + s
            for a in model.actions[j]:
                row: Row = {}
                for l, (lo, hi) in targets[a].items():
                    s_next = dra.step(s, frozenset(model.labels[l]))
                    row[l * nd + s_next] = (lo, hi)
                rows[(p, a)] = row
    prod_bmdp = BMDP(n_prod, actions, rows, labels=labels,
                     initial={j * nd + dra.s0 for j in range(model.n_states)})
    return ProductModel(prod_bmdp, dra, model.n_states)


def product_imc(model: IMC, dra: RabinAutomaton) -> ProductModel:
    return product(model.as_bmdp(), dra)
