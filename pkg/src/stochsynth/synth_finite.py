"""Finite-mode synthesis loop: policy computation, suboptimality accounting,
refinement scoring and carry-over of facts across partition refinements.

Each iteration builds the abstraction, (re)runs the component search, solves
the two reachability maximizations, prices every state's possible improvement
(the suboptimality factor), and refines the cells that contribute the most
uncertainty until the target precision is met or the iteration cap hits.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .abstraction import Partition, SystemModel, build_bmdp
from .automata import ProductModel, RabinAutomaton, product
from .components import (
    Component,
    ComponentResult,
    KIND_PERMANENT_WINNING,
    find_extended_greatest_accepting,
    find_extended_permanent_accepting,
    find_greatest_permanent_winning,
)
from .models import IntervalResult
from .reachability import ChainHitting, bsccs, maximize_reach, reach_probability

STATUS_OPTIMAL = "optimal"
STATUS_SUBOPTIMAL = "suboptimal"
STATUS_UNDECIDED = "undecided"

ONE_TOL = 1e-9


@dataclass
class SuboptimalityReport:
    eps: np.ndarray
    chosen: dict[int, int]
    status: dict[tuple[int, int], str]
    eps_max: float
    mean_eps: float
    frac_above: float
    eps_thr: float


@dataclass
class RefinementScores:
    sigma: np.ndarray

    def selected(self, frac: float) -> list[int]:
        top = float(self.sigma.max()) if len(self.sigma) else 0.0
        if top <= 0.0:
            return []
        return [int(i) for i in np.nonzero(self.sigma > frac * top)[0]]


@dataclass
class IterationRecord:
    iteration: int
    n_cells: int
    n_product_states: int
    eps_max: float
    mean_eps: float
    frac_above: float
    mean_actions: float
    mean_actions_flat: float
    wall_seconds: float


@dataclass
class SynthesisResult:
    partition: Partition
    product: ProductModel
    policy: dict[int, int]
    mode_table: dict[int, np.ndarray]
    interval: IntervalResult
    initial_intervals: list[tuple[float, float]]
    report: SuboptimalityReport
    history: list[IterationRecord]
    winning: ComponentResult
    action_table: dict[int, dict[int, tuple[float, float]]] = field(default_factory=dict)
    capped: bool = False

    def policy_rows(self):
        """(cell, dra_state, mode, p_min, p_max, eps) per product state."""
        nd = self.product.n_dra
        for p in sorted(self.policy):
            yield (p // nd, p % nd, self.policy[p],
                   float(self.interval.p_min[p]), float(self.interval.p_max[p]),
                   float(self.report.eps[p]))


@dataclass
class FiniteSynthesisConfig:
    system: SystemModel
    dra: RabinAutomaton
    partition: Partition
    eps_thr: float = 0.3
    score_frac: float = 0.05
    max_iters: int = 10
    eps_conv: float = 1e-6
    modes: list | None = None


@dataclass
class CarryOver:
    """Facts inherited by a refined partition from its parent analysis."""

    pruned: dict[int, set[int]] = field(default_factory=dict)
    qual_actions: dict[int, tuple[int, ...]] | None = None
    wc_seed: ComponentResult | None = None
    target_cache: dict | None = None


def classify_actions(table: dict[int, dict[int, tuple[float, float]]]):
    """Per-state action statuses from a (p_lo, p_hi) table.

    An action is suboptimal when some sibling's lower bound beats its upper
    bound; optimal when its lower bound beats every sibling's upper bound.
    """
    status: dict[int, dict[int, str]] = {}
    for q, entries in table.items():
        st = {}
        for a, (lo_a, hi_a) in entries.items():
            others = [entries[b] for b in entries if b != a]
            if any(lo_b > hi_a for lo_b, _ in others):
                st[a] = STATUS_SUBOPTIMAL
            elif all(hi_b <= lo_a for _, hi_b in others):
                st[a] = STATUS_OPTIMAL
            else:
                st[a] = STATUS_UNDECIDED
        status[q] = st
    return status


def suboptimality(table, chosen, eps_thr: float) -> SuboptimalityReport:
    """Suboptimality factor per state: best alternative upper bound minus the
    chosen action's lower bound, floored at zero."""
    n = max(table) + 1 if table else 0
    eps = np.zeros(n)
    status_flat: dict[tuple[int, int], str] = {}
    statuses = classify_actions(table)
    for q, entries in table.items():
        st = statuses[q]
        for a, s in st.items():
            status_flat[(q, a)] = s
        a_star = chosen[q]
        if st.get(a_star) == STATUS_OPTIMAL:
            eps[q] = 0.0
            continue
        rivals = [entries[a][1] for a in entries
                  if a != a_star and st[a] != STATUS_SUBOPTIMAL]
        if rivals:
            eps[q] = max(0.0, max(rivals) - entries[a_star][0])
    eps_max = float(eps.max()) if n else 0.0
    return SuboptimalityReport(eps, dict(chosen), status_flat, eps_max,
                               float(eps.mean()) if n else 0.0,
                               float((eps > eps_thr).mean()) if n else 0.0, eps_thr)


def _row_diff_norms(best_mc, worst_mc) -> np.ndarray:
    out = np.zeros(best_mc.n_states)
    for q in range(best_mc.n_states):
        keys = set(best_mc.rows[q]) | set(worst_mc.rows[q])
        out[q] = np.sqrt(sum((best_mc.rows[q].get(t, 0.0) - worst_mc.rows[q].get(t, 0.0)) ** 2
                             for t in keys))
    return out


def _accepting_reach(chain, prod: ProductModel) -> np.ndarray:
    acc = set()
    for comp in bsccs(chain):
        for i in range(prod.n_pairs):
            if any(prod.f_flags[i][q] for q in comp) and not any(prod.e_flags[i][q] for q in comp):
                acc |= comp
                break
    if not acc:
        return np.zeros(chain.n_states)
    return reach_probability(chain, acc)


def score_refinement(prod: ProductModel, best_mc, worst_mc, report: SuboptimalityReport,
                     eps_thr: float, available: dict[int, list[int]]) -> RefinementScores:
    """Cell scores: how much each state's behavior differs between the two
    extreme chains, weighted by how much it influences underspecified states,
    plus extra weight for states able to flip a disputed component."""
    n = prod.model.n_states
    sigma = np.zeros(prod.n_cells)
    sources = [q for q in range(n) if report.eps[q] >= eps_thr]
    if not sources:
        return RefinementScores(sigma)
    u_bsccs = set(bsccs(best_mc))
    l_bsccs = set(bsccs(worst_mc))
    disputed = (u_bsccs - l_bsccs) | (l_bsccs - u_bsccs)
    in_disputed = np.zeros(n, dtype=bool)
    for comp in disputed:
        for q in comp:
            in_disputed[q] = True
    pu = _accepting_reach(best_mc, prod)
    pl = _accepting_reach(worst_mc, prod)
    settled = ((pu <= ONE_TOL) & (pl <= ONE_TOL)) | ((pu >= 1 - ONE_TOL) & (pl >= 1 - ONE_TOL))
    weights = ChainHitting(best_mc).summed_from(sources)
    diffs = _row_diff_norms(best_mc, worst_mc)

    undecided_out = np.zeros(n, dtype=bool)
    for q in range(n):
        for a in available[q]:
            row = prod.model.rows[(q, a)]
            if any(lo <= ONE_TOL < hi for lo, hi in row.values()):
                undecided_out[q] = True
                break

    partner_lists: dict[int, set[int]] = {}
    for comp in u_bsccs | l_bsccs:
        for q in comp:
            partner_lists.setdefault(q, set()).update(comp)

    for dst in range(n):
        if settled[dst]:
            continue
        w = weights[dst] * diffs[dst]
        if w <= 0.0:
            continue
        sigma[prod.cell_of(dst)] += w
        if in_disputed[dst]:
            for partner in partner_lists.get(dst, ()):  # shared component in either chain
                if undecided_out[partner]:
                    sigma[prod.cell_of(partner)] += w
    return RefinementScores(sigma)


def _children_of(parents: list[int], n_parent_cells: int) -> list[list[int]]:
    kids: list[list[int]] = [[] for _ in range(n_parent_cells)]
    for child, par in enumerate(parents):
        kids[par].append(child)
    return kids


def carry_over(prev: "LoopState", refined: Partition, parents: list[int]) -> CarryOver:
    """Map the previous iteration's conclusions onto the refined partition.

    Children inherit pruned actions; qualitative action sets keep only what
    supported best-case membership; winning-component members freeze their
    children to the generating action; and transition-target candidates are
    restricted to children of previously reachable cells."""
    if len(refined) < len(prev.partition):
        raise ValueError("refined partition has fewer cells than its parent")
    nd = prev.prod.n_dra
    kids = _children_of(parents, len(prev.partition))
    for par, ch in enumerate(kids):
        if not ch:
            raise ValueError(f"cell {par} lost all children; not a refinement")

    def map_state(child_cell: int, i: int) -> int:
        return child_cell * nd + i

    pruned: dict[int, set[int]] = {}
    qual: dict[int, tuple[int, ...]] = {}
    for child_cell, par_cell in enumerate(parents):
        for i in range(nd):
            p_new = map_state(child_cell, i)
            p_old = par_cell * nd + i
            if prev.pruned.get(p_old):
                pruned[p_new] = set(prev.pruned[p_old])
            qual[p_new] = prev.uL.action_sets.get(p_old, ())

    seed_members: set[int] = set()
    seed_policy: dict[int, int] = {}
    seed_core: set[int] = set()
    seed_components: list[Component] = []
    for comp in prev.wc.components:
        states = set()
        pol = {}
        acts = {}
        core = set()
        for p_old in comp.states:
            for child_cell in kids[p_old // nd]:
                p_new = map_state(child_cell, p_old % nd)
                states.add(p_new)
                pol[p_new] = comp.policy[p_old]
                acts[p_new] = comp.acts[p_old]
                if p_old in comp.core:
                    core.add(p_new)
        seed_components.append(Component(frozenset(states), pol, acts, frozenset(core)))
        seed_members |= states
        seed_policy.update(pol)
        seed_core |= core
    for p_old, a in prev.wc.partial_policy.items():
        for child_cell in kids[p_old // nd]:
            p_new = map_state(child_cell, p_old % nd)
            if p_new not in seed_policy:
                seed_members.add(p_new)
                seed_policy[p_new] = a
    wc_seed = ComponentResult(seed_members, seed_policy, KIND_PERMANENT_WINNING,
                              components=seed_components, accepting_core=seed_core)

    target_cache: dict = {}
    for (cell, a), row in prev.model.rows.items():
        reachable = np.array(sorted({c for t in row for c in kids[t]}), dtype=np.int64)
        for child_cell in kids[cell]:
            target_cache[(child_cell, a)] = reachable
    return CarryOver(pruned, qual, wc_seed, target_cache)


@dataclass
class LoopState:
    partition: Partition
    model: object
    prod: ProductModel
    wc: ComponentResult
    uL: ComponentResult
    pruned: dict[int, set[int]]


def _empty_component(kind: str) -> ComponentResult:
    return ComponentResult(set(), {}, kind)


def synthesize_finite(cfg: FiniteSynthesisConfig) -> SynthesisResult:
    """Refinement loop for finite-mode switching policies (maximization form;
    minimize by supplying the complement automaton and complementing the
    reported intervals)."""
    partition = cfg.partition
    carry = CarryOver()
    history: list[IterationRecord] = []
    reach_cache: dict = {}
    skip_components = False
    t0 = time.monotonic()
    result: SynthesisResult | None = None
    parents = None
    prev_state: LoopState | None = None

    for iteration in range(cfg.max_iters):
        if prev_state is not None:
            carry = carry_over(prev_state, partition, parents)
        model, mode_table = build_bmdp(partition, cfg.system, modes=cfg.modes,
                                       target_cache=carry.target_cache,
                                       reach_cache=reach_cache)
        prod = product(model, cfg.dra)
        n = prod.model.n_states

        pruned = {q: set(v) for q, v in carry.pruned.items()}
        frozen = dict(carry.wc_seed.partial_policy) if carry.wc_seed else {}
        available = {}
        for q in range(n):
            if q in frozen:
                available[q] = [frozen[q]]
            else:
                available[q] = [a for a in prod.model.actions[q] if a not in pruned.get(q, ())]
                if not available[q]:
                    available[q] = list(prod.model.actions[q])

        if not skip_components:
            if carry.qual_actions is None:
                qual = {q: tuple(available[q]) for q in range(n)}
            else:
                qual = {q: tuple(a for a in carry.qual_actions.get(q, ()) if a in available[q])
                        for q in range(n)}
            seed_states = carry.wc_seed.member_states if carry.wc_seed else set()
            search_qual = {q: (qual[q] if q not in seed_states else ())
                           for q in range(n)}
            uP = find_extended_permanent_accepting(prod, allowed=search_qual)
            uL = find_extended_greatest_accepting(prod, allowed=search_qual)
            wc = find_greatest_permanent_winning(prod, uP, uL, reach_allowed=available,
                                                 eps_conv=cfg.eps_conv, seed=carry.wc_seed)
            skip_components = not wc.pot_leftover
        else:
            uL = _empty_component("greatest-accepting-extended")
            wc = find_greatest_permanent_winning(prod, carry.wc_seed or _empty_component(KIND_PERMANENT_WINNING),
                                                 uL, reach_allowed=available,
                                                 eps_conv=cfg.eps_conv)

        upper_target = set(uL.member_states) | set(wc.member_states)
        lower_target = set(wc.member_states)
        if not lower_target:
            # nothing is surely winning anywhere: everything is zero
            low_values = np.zeros(n)
            low_policy = {q: available[q][0] for q in range(n)}
            low_table = {(q, a): 0.0 for q in range(n) for a in available[q]}
            low_sol = None
        else:
            low_sol = maximize_reach(prod.model, lower_target, bound="lower",
                                     eps_conv=cfg.eps_conv, allowed_actions=available)
            low_values = low_sol.values
            low_policy = dict(low_sol.policy.choice)
            low_table = low_sol.action_table
        for q, a in wc.partial_policy.items():
            low_policy[q] = a

        if upper_target:
            up_sol = maximize_reach(prod.model, upper_target, bound="upper",
                                    eps_conv=cfg.eps_conv, allowed_actions=available)
            up_values = up_sol.values
            up_table = up_sol.action_table
            up_frozen = maximize_reach(prod.model, upper_target, bound="upper",
                                       eps_conv=cfg.eps_conv, frozen=low_policy)
            up_under_policy = up_frozen.values
        else:
            up_sol = None
            up_values = np.zeros(n)
            up_table = {(q, a): 0.0 for q in range(n) for a in available[q]}
            up_under_policy = np.zeros(n)

        table: dict[int, dict[int, tuple[float, float]]] = {q: {} for q in range(n)}
        for q in range(n):
            for a in available[q]:
                lo = low_table.get((q, a), 0.0)
                hi = up_table.get((q, a), 0.0)
                if q in wc.member_states and a == wc.partial_policy.get(q):
                    lo = 1.0
                if q in uL.member_states and a in uL.action_sets.get(q, ()):
                    hi = 1.0
                table[q][a] = (lo, min(1.0, max(hi, lo)))

        report = suboptimality(table, low_policy, cfg.eps_thr)
        for q in range(n):
            for a in available[q]:
                if report.status.get((q, a)) == STATUS_SUBOPTIMAL:
                    pruned.setdefault(q, set()).add(a)

        # actions left after this step's pruning (winning states count as one);
        # weighting by cell volume makes the statistic invariant under cell
        # splitting, so it can only move when actions are actually removed
        counts = np.array([
            1 if q in wc.member_states else
            (len([a for a in available[q] if a not in pruned.get(q, ())]) or 1)
            for q in range(n)], dtype=float)
        vols = np.array([partition.cells[prod.cell_of(q)].volume() for q in range(n)])
        mean_actions = float(np.sum(counts * vols) / np.sum(vols))
        mean_actions_flat = float(np.mean(counts))
        history.append(IterationRecord(iteration, len(partition), n, report.eps_max,
                                       report.mean_eps, report.frac_above, mean_actions,
                                       mean_actions_flat, time.monotonic() - t0))

        p_min = np.minimum(low_values, 1.0)
        p_max = np.clip(np.maximum(up_under_policy, p_min), 0.0, 1.0)
        interval = IntervalResult(p_min, p_max)
        initial_intervals = []
        for j in range(len(partition)):
            p0 = prod.effective_initial(j)
            initial_intervals.append((float(p_min[p0]), float(p_max[p0])))
        result = SynthesisResult(partition, prod, low_policy, mode_table, interval,
                                 initial_intervals, report, history, wc, action_table=table)

        if report.eps_max <= cfg.eps_thr:
            return result
        if iteration == cfg.max_iters - 1:
            break
        best_mc = up_sol.extreme_mc if up_sol is not None else None
        worst_mc = low_sol.extreme_mc if low_sol is not None else None
        if best_mc is None or worst_mc is None:
            break
        avail_after_prune = {q: ([a for a in available[q] if a not in pruned.get(q, ())]
                                 or available[q]) for q in range(n)}
        scores = score_refinement(prod, best_mc, worst_mc, report, cfg.eps_thr, avail_after_prune)
        cells = scores.selected(cfg.score_frac)
        if not cells:
            break
        prev_state = LoopState(partition, model, prod, wc, uL, pruned)
        partition, parents = partition.refine(cells)

    result.capped = True
    return result
