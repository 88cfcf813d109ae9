"""Qualitative analysis of product models.

Finds the extended greatest permanent accepting components, their
greatest-accepting (best-case) counterparts, and the greatest permanent
winning component, together with the partial policies generating them.

The search keeps a FIFO worklist of candidate sets (deterministically ordered
by smallest member id).  Candidates shrink monotonically: the transition
filters only ever remove actions, and every split produces strictly smaller
(states, actions) descendants, so the worklist terminates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .automata import ProductModel
from .models import BMDP
from .reachability import maximize_reach

ZERO_TOL = 1e-9

KIND_PERMANENT_ACCEPTING = "permanent-accepting-extended"
KIND_GREATEST_ACCEPTING = "greatest-accepting-extended"
KIND_PERMANENT_WINNING = "greatest-permanent-winning"


@dataclass
class Component:
    """One certified component: members, generating actions, accepting core."""

    states: frozenset[int]
    policy: dict[int, int]
    acts: dict[int, tuple[int, ...]]
    core: frozenset[int]


@dataclass
class ComponentResult:
    member_states: set[int]
    partial_policy: dict[int, int]
    kind: str
    components: list[Component] = field(default_factory=list)
    accepting_core: set[int] = field(default_factory=set)
    action_sets: dict[int, tuple[int, ...]] = field(default_factory=dict)
    pot_leftover: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "members": sorted(self.member_states),
            "policy": {str(q): a for q, a in sorted(self.partial_policy.items())},
        }


def is_accepting_set(states, e_flags, f_flags) -> bool:
    """True iff some Rabin pair has a flagged member and no spoiler in the set."""
    return bool(witnessing_pairs(states, e_flags, f_flags))


def witnessing_pairs(states, e_flags, f_flags) -> list[int]:
    out = []
    for i in range(len(f_flags)):
        if any(f_flags[i][q] for q in states) and not any(e_flags[i][q] for q in states):
            out.append(i)
    return out


def at_p(B, C, acts, model: BMDP):
    """Drop every action of a C-state that can put mass into B under at least
    one adversary (hi > 0 to some B member); returns C-states left actionless."""
    removed = set()
    for q in sorted(C):
        keep = []
        for a in acts[q]:
            row = model.rows[(q, a)]
            if any(hi > ZERO_TOL and B[t] for t, (_, hi) in row.items()):
                continue
            keep.append(a)
        acts[q] = tuple(keep)
        if not keep:
            removed.add(q)
    return removed, acts


def at_pot(B, C, acts, model: BMDP):
    """Drop every action of a C-state that puts mass into B under every
    adversary: either some B entry has lo > 0, or the non-B mass cannot
    absorb the whole distribution (sum of hi outside B below 1)."""
    removed = set()
    for q in sorted(C):
        keep = []
        for a in acts[q]:
            row = model.rows[(q, a)]
            forced = sum(lo for t, (lo, _) in row.items() if B[t])
            escape = sum(hi for t, (_, hi) in row.items() if not B[t])
            if forced > ZERO_TOL or escape < 1 - ZERO_TOL:
                continue
            keep.append(a)
        acts[q] = tuple(keep)
        if not keep:
            removed.add(q)
    return removed, acts


def _sccs(model: BMDP, states, acts) -> list[frozenset[int]]:
    """SCCs of the hi>0 edge graph restricted to `states` with `acts`."""
    order = sorted(states)
    if not order:
        return []
    local = {q: i for i, q in enumerate(order)}
    ri, ci = [], []
    for q in order:
        for a in acts[q]:
            for t, (_, hi) in model.rows[(q, a)].items():
                if hi > ZERO_TOL and t in local:
                    ri.append(local[q])
                    ci.append(local[t])
    adj = sp.csr_matrix((np.ones(len(ri)), (ri, ci)), shape=(len(order), len(order)))
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    comps: list[list[int]] = [[] for _ in range(n_comp)]
    for i, q in enumerate(order):
        comps[labels[i]].append(q)
    return sorted((frozenset(c) for c in comps), key=min)


def _shrink(model: BMDP, states: frozenset[int], acts: dict, permanent: bool,
            protected: set[int] | None = None):
    """Iterate the transition filter until stable.

    Tr is everything outside the candidate (minus `protected`, which Alg-2
    style searches treat as a legal destination).  Returns surviving states,
    their action sets, and whether anything was removed."""
    live = set(states)
    fltr = at_p if permanent else at_pot
    n = model.n_states
    changed = False
    while True:
        tr = np.ones(n, dtype=bool)
        tr[list(live)] = False
        if protected:
            tr[list(protected)] = False
        before = {q: acts[q] for q in live}
        removed, acts = fltr(tr, live, acts, model)
        live -= removed
        act_change = any(before[q] != acts[q] for q in before if q not in removed)
        if removed or act_change:
            changed = True
        if not removed and not act_change:
            return frozenset(live), acts, changed


def _restricted_bmdp(model: BMDP, states: frozenset[int], acts: dict, with_sink: bool):
    """Sub-model over `states`; mass leaving the set is aggregated onto an
    absorbing sink when `with_sink`, otherwise dropped (legal only when the
    surviving actions cannot be forced outside)."""
    order = sorted(states)
    local = {q: i for i, q in enumerate(order)}
    n_loc = len(order) + (1 if with_sink else 0)
    sink = len(order)
    rows = {}
    actions = []
    for q in order:
        actions.append(sorted(acts[q]))
        for a in acts[q]:
            row = {}
            out_lo = 0.0
            out_hi = 0.0
            for t, (lo, hi) in model.rows[(q, a)].items():
                if t in local:
                    row[local[t]] = (lo, hi)
                else:
                    out_lo += lo
                    out_hi += hi
            if with_sink and out_hi > ZERO_TOL:
                row[sink] = (out_lo, min(1.0, out_hi))
            rows[(local[q], a)] = row
    if with_sink:
        actions.append([0])
        rows[(sink, 0)] = {sink: (1.0, 1.0)}
    sub = BMDP(n_loc, actions, rows)
    return sub, order


def _certify(model: BMDP, prod: ProductModel, states: frozenset[int], acts: dict,
             permanent: bool, with_sink: bool):
    """Reach-maximization certificate for an acceptance-stable candidate.

    Maximizes the lower (permanent) or upper (greatest) bound of reaching the
    unmatched Rabin accepting states inside the candidate.  Returns the bad
    set (zero-value states), the certified policy, and the accepting core."""
    pairs = witnessing_pairs(states, prod.e_flags, prod.f_flags)
    core = frozenset(q for i in pairs for q in states if prod.f_flags[i][q])
    sub, order = _restricted_bmdp(model, states, acts, with_sink=with_sink)
    target = [i for i, q in enumerate(order) if q in core]
    sol = maximize_reach(sub, target, bound="lower" if permanent else "upper", eps_conv=1e-9)
    bad = frozenset(order[i] for i in range(len(order)) if sol.values[i] <= ZERO_TOL)
    policy = {order[i]: sol.policy[i] for i in range(len(order))}
    return bad, policy, core


class _Worklist:
    def __init__(self):
        self.queue: list[tuple[frozenset[int], dict]] = []
        self.seen: set = set()

    def push(self, states: frozenset[int], acts: dict):
        if not states:
            return
        key = (states, tuple(sorted((q, tuple(acts[q])) for q in states)))
        if key in self.seen:
            return
        self.seen.add(key)
        self.queue.append((states, {q: tuple(acts[q]) for q in states}))

    def pop(self):
        return self.queue.pop(0)

    def __bool__(self):
        return bool(self.queue)


def _component_search(prod: ProductModel, permanent: bool,
                      states=None, acts=None, protected: set[int] | None = None) -> list[Component]:
    """Worklist search for extended greatest (permanent) accepting components.

    `permanent=True` runs the all-adversary variant (transition filter at_p,
    lower-bound certificates); `permanent=False` the some-adversary variant
    (at_pot, upper-bound certificates).  `protected` marks states that count
    as legal destinations when shrinking (used by the winning-component
    construction); candidates never include them.
    """
    model = prod.model
    if states is None:
        states = set(range(model.n_states))
    if acts is None:
        acts = {q: tuple(model.actions[q]) for q in states}
    if protected:
        states = set(states) - set(protected)
    work = _Worklist()
    for scc in _sccs(model, states, acts):
        work.push(scc, {q: acts[q] for q in scc})
    found: list[Component] = []
    while work:
        cand, cand_acts = work.pop()
        live, cand_acts, changed = _shrink(model, cand, cand_acts, permanent, protected)
        if changed:
            for scc in _sccs(model, live, cand_acts):
                work.push(scc, {q: cand_acts[q] for q in scc})
            continue
        pairs = witnessing_pairs(live, prod.e_flags, prod.f_flags)
        if pairs:
            bad, policy, core = _certify(model, prod, live, cand_acts, permanent,
                                         with_sink=protected is not None)
            if not bad:
                found.append(Component(live, policy, {q: cand_acts[q] for q in live}, core))
            else:
                for part in (bad, live - bad):
                    for scc in _sccs(model, part, cand_acts):
                        work.push(scc, {q: cand_acts[q] for q in scc})
        else:
            flagged_pairs = [i for i in range(prod.n_pairs) if any(prod.f_flags[i][q] for q in live)]
            for i in flagged_pairs:
                spoilers = {q for q in live if prod.e_flags[i][q]}
                rest = live - spoilers
                for scc in _sccs(model, rest, cand_acts):
                    work.push(scc, {q: cand_acts[q] for q in scc})
    return found


def _as_result(found: list[Component], kind: str) -> ComponentResult:
    members: set[int] = set()
    policy: dict[int, int] = {}
    core: set[int] = set()
    action_sets: dict[int, tuple[int, ...]] = {}
    for comp in found:
        members |= comp.states
        policy.update(comp.policy)
        core |= comp.core
        action_sets.update(comp.acts)
    return ComponentResult(members, policy, kind, components=found,
                           accepting_core=core, action_sets=action_sets)


def _search_space(prod: ProductModel, allowed):
    if allowed is None:
        return None, None
    acts = {q: tuple(allowed[q]) for q in range(prod.model.n_states)}
    states = {q for q, a in acts.items() if a}
    return states, acts


def find_extended_permanent_accepting(prod: ProductModel, allowed=None) -> ComponentResult:
    """Extended greatest permanent accepting components with generating policy.

    States whose allowed action set is empty are excluded from the search."""
    states, acts = _search_space(prod, allowed)
    return _as_result(_component_search(prod, permanent=True, states=states, acts=acts),
                      KIND_PERMANENT_ACCEPTING)


def find_extended_greatest_accepting(prod: ProductModel, allowed=None) -> ComponentResult:
    """Best-case variant: components accepting under at least one adversary."""
    states, acts = _search_space(prod, allowed)
    return _as_result(_component_search(prod, permanent=False, states=states, acts=acts),
                      KIND_GREATEST_ACCEPTING)


def find_greatest_permanent_winning(prod: ProductModel, uP: ComponentResult, uL: ComponentResult,
                                    reach_allowed=None, eps_conv: float = 1e-6,
                                    seed: ComponentResult | None = None) -> ComponentResult:
    """Greatest permanent winning component and its generating policy.

    Alternates a lower-bound reach maximization onto the current component
    (absorbing certain sinks) with a search for accepting components among
    the remaining best-case candidates, until the set stops growing.
    """
    model = prod.model
    wc: set[int] = set(uP.member_states)
    policy: dict[int, int] = dict(uP.partial_policy)
    core: set[int] = set(uP.accepting_core)
    comps: list[Component] = list(uP.components)
    if seed is not None:
        wc |= seed.member_states
        policy.update(seed.partial_policy)
        core |= seed.accepting_core
        comps = comps + list(seed.components)
    pot: dict[int, tuple[int, ...]] = {q: a for q, a in uL.action_sets.items() if q not in wc}

    prev: set[int] | None = None
    while wc != prev:
        prev = set(wc)
        if wc:
            sol = maximize_reach(model, wc, bound="lower", eps_conv=eps_conv,
                                 allowed_actions=reach_allowed)
            for q in range(model.n_states):
                if q not in wc and sol.values[q] >= 1.0 - ZERO_TOL:
                    wc.add(q)
                    policy[q] = sol.policy[q]
        pot = {q: a for q, a in pot.items() if q not in wc}
        pot_comps = _component_search(prod, permanent=False,
                                      states=set(pot), acts=dict(pot))
        pot = {q: comp.acts[q] for comp in pot_comps for q in comp.states}
        work = _Worklist()
        for comp in sorted(pot_comps, key=lambda c: min(c.states)):
            work.push(comp.states, dict(comp.acts))
        while work:
            cand, cand_acts = work.pop()
            cand = frozenset(q for q in cand if q not in wc)
            if not cand:
                continue
            live, cand_acts, changed = _shrink(model, cand, cand_acts, permanent=True, protected=wc)
            if changed:
                for comp in _component_search(prod, permanent=False,
                                              states=set(live), acts={q: cand_acts[q] for q in live}):
                    work.push(comp.states, dict(comp.acts))
                continue
            pairs = witnessing_pairs(live, prod.e_flags, prod.f_flags)
            if not pairs:
                continue
            bad, cert_policy, cert_core = _certify(model, prod, live, cand_acts,
                                                   permanent=True, with_sink=True)
            if not bad:
                wc |= live
                for q in live:
                    policy[q] = cert_policy[q]
                    pot.pop(q, None)
                core |= cert_core
                comps.append(Component(live, {q: cert_policy[q] for q in live},
                                       {q: cand_acts[q] for q in live}, cert_core))
            else:
                for part in (bad, live - bad):
                    for comp in _component_search(prod, permanent=False,
                                                  states=set(part), acts={q: cand_acts[q] for q in part}):
                        work.push(comp.states, dict(comp.acts))
    return ComponentResult(wc, policy, KIND_PERMANENT_WINNING, components=comps,
                           accepting_core=core,
                           action_sets={q: (a,) for q, a in policy.items()},
                           pot_leftover=dict(pot))
