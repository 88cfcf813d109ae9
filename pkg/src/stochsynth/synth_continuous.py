"""Continuous-input synthesis: trigger regions, overlap enumeration, input
selection, component construction through an induced finite model, grid-based
reachability optimization over the input space, and the outer refinement loop.

The input space of every product state is carried as a union of axis-aligned
boxes.  All trigger-region boundaries are axis-aligned half-spaces, so the
region algebra stays exact box arithmetic throughout; the only numerics are
the interval transition bounds and the gridded objective evaluations.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .abstraction import Partition, SystemModel, bounds_grid, cell_labels
from .automata import ProductModel, RabinAutomaton, product
from .components import (
    ComponentResult,
    KIND_PERMANENT_WINNING,
    find_extended_greatest_accepting,
    find_extended_permanent_accepting,
    find_greatest_permanent_winning,
)
from .geometry import BoxUnion, Rect, arrangement_cells, merge_boxes, project_point, subtract
from .models import BMDP, IntervalResult, MarkovChain
from .synth_finite import IterationRecord, SuboptimalityReport, score_refinement

VOLUME_TOL = 1e-9
FEAS_TOL = 1e-9


@dataclass
class GridConfig:
    n_min: int = 3
    n_init: int = 12
    u_total_area: float = 1.0

    def points_per_axis(self, box: Rect) -> int:
        frac = box.volume() / self.u_total_area if self.u_total_area > 0 else 1.0
        return max(self.n_min, int(math.ceil(self.n_init * frac)))


@dataclass
class TriggerRegions:
    off: BoxUnion
    on: BoxUnion
    undecided: BoxUnion

    def coverage_volume(self) -> float:
        return self.off.volume() + self.on.volume() + self.undecided.volume()


@dataclass
class Overlap:
    box: Rect
    types: tuple[str, ...]
    undecided: tuple[int, ...]

    @property
    def simple(self) -> bool:
        return len(self.undecided) <= 1


@dataclass
class OverlapSet:
    source: int
    targets: list[int]
    overlaps: list[Overlap]

    @property
    def simple(self):
        return [o for o in self.overlaps if o.simple]

    @property
    def entangled(self):
        return [o for o in self.overlaps if not o.simple]


@dataclass
class SelectedInput:
    u: np.ndarray
    profile: tuple[str, ...]


class SourceContext:
    """Everything one source cell needs to price its transitions: the unshifted
    reach box, candidate targets over the whole input extent, their
    boundary-extended boxes, and per-axis trigger thresholds in input space."""

    def __init__(self, partition: Partition, system: SystemModel, cell_id: int,
                 u_extent: Rect, base_reach: Rect):
        self.cell_id = cell_id
        self.reach = base_reach
        r_lo = np.asarray(base_reach.lo)
        r_hi = np.asarray(base_reach.hi)
        w_lo = system.noise.support_lo
        w_hi = system.noise.support_hi
        q_lo = r_lo + w_lo + np.asarray(u_extent.lo)
        q_hi = r_hi + w_hi + np.asarray(u_extent.hi)
        at_lo = np.abs(partition.los - np.asarray(system.domain.lo)) <= 1e-12
        at_hi = np.abs(partition.his - np.asarray(system.domain.hi)) <= 1e-12
        lo_eff = np.where(at_lo, -np.inf, partition.los)
        hi_eff = np.where(at_hi, np.inf, partition.his)
        ok = np.all(q_lo <= hi_eff + 1e-12, axis=1) & np.all(q_hi >= lo_eff - 1e-12, axis=1)
        self.targets = [int(t) for t in np.nonzero(ok)[0]]
        idx = np.asarray(self.targets, dtype=np.int64)
        tg_lo = partition.los[idx].copy()
        tg_hi = partition.his[idx].copy()
        tg_lo = np.where(at_lo[idx], np.minimum(tg_lo, q_lo), tg_lo)
        tg_hi = np.where(at_hi[idx], np.maximum(tg_hi, q_hi), tg_hi)
        self.tg_lo = tg_lo
        self.tg_hi = tg_hi
        # per-axis thresholds (k targets x dim): the transition is surely on
        # inside [on_lo, on_hi] and carries no mass outside (pos_lo, pos_hi)
        self.on_lo = np.where(at_lo[idx], -np.inf, self.tg_lo - r_lo - w_hi)
        self.on_hi = np.where(at_hi[idx], np.inf, self.tg_hi - r_hi - w_lo)
        self.pos_lo = np.where(at_lo[idx], -np.inf, self.tg_lo - r_hi - w_hi)
        self.pos_hi = np.where(at_hi[idx], np.inf, self.tg_hi - r_lo - w_lo)
        self.noise = system.noise

    def bounds_for(self, us: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) rows (n_u x n_targets) of the shifted reach under inputs."""
        us = np.atleast_2d(np.asarray(us, dtype=float))
        r_lo = np.asarray(self.reach.lo)[None, :] + us
        r_hi = np.asarray(self.reach.hi)[None, :] + us
        return bounds_grid(r_lo, r_hi, self.tg_lo, self.tg_hi, self.noise)

    def type_at(self, u, target_index: int) -> str:
        u = np.asarray(u, dtype=float)
        if np.all(self.on_lo[target_index] <= u) and np.all(u <= self.on_hi[target_index]):
            return "o"
        if np.all(self.pos_lo[target_index] < u) and np.all(u < self.pos_hi[target_index]):
            return "n"
        return "f"

    def profile_at(self, u) -> tuple[str, ...]:
        return tuple(self.type_at(u, i) for i in range(len(self.targets)))


def build_contexts(partition: Partition, system: SystemModel, U: BoxUnion,
                   reach_cache: dict | None = None) -> list[SourceContext]:
    extent = Rect.of(np.min([b.lo for b in U.boxes], axis=0),
                     np.max([b.hi for b in U.boxes], axis=0))
    out = []
    for j, cell in enumerate(partition.cells):
        if reach_cache is not None and cell in reach_cache:
            base = reach_cache[cell]
        else:
            base = system.reach(cell)
            if reach_cache is not None:
                reach_cache[cell] = base
        out.append(SourceContext(partition, system, j, extent, base))
    return out


def _clip_box(lo, hi, bb_lo, bb_hi, pad) -> Rect | None:
    lo = np.maximum(lo, bb_lo - pad)
    hi = np.minimum(hi, bb_hi + pad)
    if np.any(lo >= hi):
        return None
    return Rect.of(lo, hi)


def trigger_regions(ctx: SourceContext, target_index: int, U: BoxUnion) -> TriggerRegions:
    """Off / on / undecided input regions of one source-target pair, as exact
    unions of boxes."""
    bb_lo = np.min([b.lo for b in U.boxes], axis=0)
    bb_hi = np.max([b.hi for b in U.boxes], axis=0)
    pad = np.maximum(bb_hi - bb_lo, 1.0)
    on_box = _clip_box(ctx.on_lo[target_index], ctx.on_hi[target_index], bb_lo, bb_hi, pad)
    pos_box = _clip_box(ctx.pos_lo[target_index], ctx.pos_hi[target_index], bb_lo, bb_hi, pad)
    on_parts = []
    if on_box is not None:
        on_parts = [r for r in (b.intersect(on_box) for b in U.boxes)
                    if r is not None and r.volume() > VOLUME_TOL]
    if pos_box is None:
        return TriggerRegions(BoxUnion(list(U.boxes)), BoxUnion([]), BoxUnion([]))
    off_u = BoxUnion(subtract(list(U.boxes), [pos_box]))
    inside = [r for r in (b.intersect(pos_box) for b in U.boxes)
              if r is not None and r.volume() > VOLUME_TOL]
    und_u = BoxUnion(subtract(inside, [on_box] if on_box else []))
    return TriggerRegions(off_u, BoxUnion(merge_boxes(on_parts)), und_u)


def enumerate_overlaps(ctx: SourceContext, U: BoxUnion) -> OverlapSet:
    """Arrangement of all trigger boundaries: maximal boxes carrying one
    constant qualitative transition profile each."""
    bb_lo = np.min([b.lo for b in U.boxes], axis=0)
    bb_hi = np.max([b.hi for b in U.boxes], axis=0)
    pad = np.maximum(bb_hi - bb_lo, 1.0)
    cuts = []
    for i in range(len(ctx.targets)):
        for lo, hi in ((ctx.on_lo[i], ctx.on_hi[i]), (ctx.pos_lo[i], ctx.pos_hi[i])):
            box = _clip_box(lo, hi, bb_lo, bb_hi, pad)
            if box is not None:
                cuts.append(box)
    cells = arrangement_cells(list(U.boxes), cuts)
    by_profile: dict[tuple[str, ...], list[Rect]] = {}
    for cell in cells:
        profile = ctx.profile_at(cell.center())
        by_profile.setdefault(profile, []).append(cell)
    overlaps = []
    for profile, boxes in sorted(by_profile.items()):
        und = tuple(i for i, t in enumerate(profile) if t == "n")
        for box in merge_boxes(boxes):
            overlaps.append(Overlap(box, profile, und))
    overlaps.sort(key=lambda o: (o.box.lo, o.box.hi))
    return OverlapSet(ctx.cell_id, list(ctx.targets), overlaps)


def off_combination_feasible(hi_row: np.ndarray, on_idx, undecided_idx, off_set) -> bool:
    """Can the listed undecided transitions all be off at once?  Yes iff the
    remaining mass can still absorb the whole unit of probability."""
    keep = list(on_idx) + [i for i in undecided_idx if i not in off_set]
    return float(np.sum(np.asarray(hi_row)[keep])) >= 1.0 - FEAS_TOL


def _min_norm_point(box: Rect) -> np.ndarray:
    return project_point(box, np.zeros(box.dim))


def _constrained_min_norm(ctx: SourceContext, box: Rect, cfg: GridConfig, feasible):
    """Grid the box, keep feasible points, take the smallest-norm one, then
    bisect each coordinate toward zero while staying feasible."""
    pts = box.grid_points(cfg.points_per_axis(box))
    ok = [u for u in pts if feasible(u)]
    if not ok:
        return None
    u = min(ok, key=lambda v: (float(v @ v), tuple(v))).copy()
    for _ in range(2):
        for k in range(box.dim):
            cand = u.copy()
            cand[k] = np.clip(0.0, box.lo[k], box.hi[k])
            if feasible(cand):
                u = cand
                continue
            a, b = cand[k], u[k]
            for _ in range(30):
                cand[k] = 0.5 * (a + b)
                if feasible(cand):
                    b = cand[k]
                else:
                    a = cand[k]
            cand[k] = b
            u = cand
    return u


def select_inputs(ctx: SourceContext, overlaps: OverlapSet, cfg: GridConfig) -> list[SelectedInput]:
    """One representative input per qualitatively distinct transition profile.

    Simple overlaps contribute their minimum-energy input.  Overlaps with two
    or more undecided transitions are additionally searched for inputs
    realizing each achievable combination of simultaneously-off transitions,
    recursing into smaller combinations when a set proves infeasible."""
    chosen: list[SelectedInput] = []
    seen_profiles: set = set()

    def add(u):
        profile = ctx.profile_at(u)
        if profile not in seen_profiles:
            seen_profiles.add(profile)
            chosen.append(SelectedInput(np.asarray(u, dtype=float), profile))

    for ov in overlaps.simple:
        add(_min_norm_point(ov.box))
    for ov in overlaps.entangled:
        add(_min_norm_point(ov.box))
        on_idx = [i for i, t in enumerate(ov.types) if t == "o"]
        und_idx = list(ov.undecided)
        work: list[frozenset[int]] = [frozenset(und_idx)]
        seen_sets = {frozenset(und_idx)}
        feasible_sets: list[frozenset[int]] = []
        while work:
            S = work.pop(0)

            def feas(u, S=S):
                _, hi = ctx.bounds_for(u)
                return off_combination_feasible(hi[0], on_idx, und_idx, S)

            if any(feas(sel.u) for sel in chosen):
                feasible_sets.append(S)
                continue
            u_star = _constrained_min_norm(ctx, ov.box, cfg, feas)
            if u_star is not None:
                feasible_sets.append(S)
                add(u_star)
            else:
                for drop in sorted(S):
                    sub = S - {drop}
                    if not sub or sub in seen_sets:
                        continue
                    if any(sub <= f for f in feasible_sets):
                        continue
                    seen_sets.add(sub)
                    work.append(sub)
    return chosen


@dataclass
class CimcComponents:
    wc: ComponentResult
    uL: ComponentResult
    model: BMDP
    prod: ProductModel
    action_inputs: dict[tuple[int, int], np.ndarray]
    contexts: list[SourceContext]


def construct_components_cimc(partition: Partition, system: SystemModel, U: BoxUnion,
                              dra: RabinAutomaton, cfg: GridConfig | None = None,
                              contexts: list[SourceContext] | None = None,
                              selected: dict[int, list[SelectedInput]] | None = None,
                              forced_inputs: dict[int, list[np.ndarray]] | None = None,
                              frozen_states: dict[int, np.ndarray] | None = None) -> CimcComponents:
    """Component construction for a continuous input space: select finitely
    many inputs realizing every achievable transition profile, build the
    induced finite model, and search its product for winning components.

    `frozen_states` maps product states to inputs certified winning earlier;
    they are injected as actions and seed the winning-component fixpoint."""
    if cfg is None:
        cfg = GridConfig(u_total_area=U.volume())
    if contexts is None:
        contexts = build_contexts(partition, system, U)
    labels = cell_labels(partition, system.label_regions)
    rows = {}
    actions = []
    action_inputs: dict[tuple[int, int], np.ndarray] = {}
    for j, ctx in enumerate(contexts):
        if selected is not None and j in selected:
            inputs = list(selected[j])
        else:
            inputs = select_inputs(ctx, enumerate_overlaps(ctx, U), cfg)
            if selected is not None:
                selected[j] = list(inputs)
        for u in (forced_inputs or {}).get(j, []):
            if not any(np.allclose(u, sel.u, atol=1e-12) for sel in inputs):
                inputs.append(SelectedInput(np.asarray(u, dtype=float), ctx.profile_at(u)))
        if not inputs:
            inputs = [SelectedInput(_min_norm_point(U.boxes[0]), ctx.profile_at(_min_norm_point(U.boxes[0])))]
        actions.append(list(range(len(inputs))))
        lo, hi = ctx.bounds_for(np.stack([sel.u for sel in inputs]))
        for a in range(len(inputs)):
            row = {ctx.targets[t]: (float(lo[a, t]), float(hi[a, t]))
                   for t in range(len(ctx.targets)) if hi[a, t] > 1e-12}
            rows[(j, a)] = row
            action_inputs[(j, a)] = inputs[a].u
    model = BMDP(len(partition), actions, rows, labels=labels,
                 initial=set(range(len(partition))))
    prod = product(model, dra)
    seed = None
    if frozen_states:
        pol = {}
        for p, u in frozen_states.items():
            j = prod.cell_of(p)
            for a in model.actions[j]:
                if np.allclose(action_inputs[(j, a)], u, atol=1e-12):
                    pol[p] = a
                    break
        if pol:
            seed = ComponentResult(set(pol), pol, KIND_PERMANENT_WINNING)
    uP = find_extended_permanent_accepting(prod)
    uL = find_extended_greatest_accepting(prod)
    wc = find_greatest_permanent_winning(prod, uP, uL, seed=seed)
    return CimcComponents(wc, uL, model, prod, action_inputs, contexts)


# -- grid-based reachability optimization -------------------------------------------


def _successors(ctx: SourceContext, prod: ProductModel, dra_state: int) -> np.ndarray:
    out = []
    for t in ctx.targets:
        label = frozenset(prod.model.labels[prod.state_id(t, 0)])
        out.append(prod.state_id(t, prod.dra.step(dra_state, label)))
    return np.asarray(out, dtype=np.int64)


def _alloc_objective(lo: np.ndarray, hi: np.ndarray, succ: np.ndarray, W: np.ndarray,
                     descending: bool) -> np.ndarray:
    """Order-extreme objective for a batch of candidate rows (n_u x k)."""
    w = W[succ]
    order = np.lexsort((succ, -w if descending else w))
    lo_s = lo[:, order]
    hi_s = hi[:, order]
    H = np.cumsum(hi_s, axis=1)
    lo_total = lo_s.sum(axis=1, keepdims=True)
    C = 1.0 - (lo_total - np.cumsum(lo_s, axis=1))
    S = np.minimum(H, C)
    z = np.diff(np.concatenate([np.zeros((S.shape[0], 1)), S], axis=1), axis=1)
    np.maximum(z, 0.0, out=z)
    return z @ w[order]


def optimize_reach_input(ctx: SourceContext, prod: ProductModel, dra_state: int,
                         W: np.ndarray, region: BoxUnion, cfg: GridConfig,
                         descending: bool = False, polish: bool = True):
    """Best input over a union of boxes for the order-allocation objective:
    mesh each box, evaluate exactly per point, then one coordinate-descent
    polish from the best point.  Ties break on the lexicographically smaller u."""
    if not region.boxes:
        raise ValueError(f"empty input region at cell {ctx.cell_id}")
    succ = _successors(ctx, prod, dra_state)
    best_u, best_val, best_box = None, -np.inf, None
    for box in region.boxes:
        pts = box.grid_points(cfg.points_per_axis(box))
        lo, hi = ctx.bounds_for(pts)
        vals = _alloc_objective(lo, hi, succ, W, descending)
        for i in range(len(pts)):
            v = float(vals[i])
            better = v > best_val + 1e-15
            tie = abs(v - best_val) <= 1e-15 and best_u is not None and tuple(pts[i]) < tuple(best_u)
            if better or tie:
                best_u, best_val, best_box = pts[i].copy(), max(v, best_val), box
    if polish and best_u is not None:
        step = np.maximum(best_box.sides / max(cfg.points_per_axis(best_box) - 1, 1), 1e-12) * 0.5
        u = best_u
        for _ in range(6):
            moved = False
            for k in range(len(u)):
                for sgn in (-1.0, 1.0):
                    cand = u.copy()
                    cand[k] = float(np.clip(cand[k] + sgn * step[k], best_box.lo[k], best_box.hi[k]))
                    lo, hi = ctx.bounds_for(cand[None, :])
                    v = float(_alloc_objective(lo, hi, succ, W, descending)[0])
                    if v > best_val + 1e-12:
                        best_val, u, moved = v, cand, True
            if not moved:
                step *= 0.5
        best_u = u
    return best_u, best_val


def split_box_quarters(box: Rect) -> list[Rect]:
    """Four equal-volume sub-boxes (two bisections; 1-D boxes become four
    equal segments)."""
    out = []
    for part in box.split_halves():
        out.extend(part.split_halves())
    return out


def prune_inputs(ctx: SourceContext, prod: ProductModel, dra_state: int,
                 region: BoxUnion, lower_value: float, W_up: np.ndarray, cfg: GridConfig):
    """Quarter every box of the region, bound each sub-box's best-case value,
    and drop sub-boxes that cannot beat the current guarantee."""
    kept: list[Rect] = []
    evaluated: list[tuple[Rect, float]] = []
    for box in region.boxes:
        for sub in split_box_quarters(box):
            _, val = optimize_reach_input(ctx, prod, dra_state, W_up, BoxUnion([sub]),
                                          cfg, descending=True, polish=False)
            evaluated.append((sub, float(val)))
            if val >= lower_value - FEAS_TOL:
                kept.append(sub)
    return BoxUnion(merge_boxes(kept)), evaluated


# -- value iteration over cached grids ------------------------------------------------


class _StateGrid:
    """Per-product-state cache: grid points of the current region and their
    interval rows (input-independent of the value vector, so reusable across
    sweeps)."""

    def __init__(self, ctx: SourceContext, prod: ProductModel, p: int, region: BoxUnion,
                 cfg: GridConfig, fixed_u: np.ndarray | None):
        self.succ = _successors(ctx, prod, prod.dra_state_of(p))
        if fixed_u is not None:
            self.pts = np.atleast_2d(np.asarray(fixed_u, dtype=float))
        else:
            self.pts = np.concatenate([box.grid_points(cfg.points_per_axis(box))
                                       for box in region.boxes], axis=0)
        self.lo, self.hi = ctx.bounds_for(self.pts)

    def best(self, W: np.ndarray, descending: bool) -> tuple[np.ndarray, float]:
        vals = _alloc_objective(self.lo, self.hi, self.succ, W, descending)
        i = int(np.argmax(vals))
        top = vals[i]
        ties = np.nonzero(vals >= top - 1e-15)[0]
        if len(ties) > 1:
            i = min(ties, key=lambda k: tuple(self.pts[k]))
        return self.pts[i], float(vals[i])


def continuous_reach(prod, contexts, regions, target, cfg: GridConfig, eps_conv: float,
                     max_sweeps: int, descending: bool = False,
                     frozen_u: dict[int, np.ndarray] | None = None, polish: bool = True):
    """Value iteration whose per-state action step optimizes over the input
    region; returns values, the chosen inputs, the final residual and sweeps."""
    n = prod.model.n_states
    frozen_u = frozen_u or {}
    tgt = np.zeros(n, dtype=bool)
    tgt[list(target)] = True
    grids: dict[int, _StateGrid] = {}
    for p in range(n):
        if tgt[p] and p not in frozen_u:
            continue
        ctx = contexts[prod.cell_of(p)]
        grids[p] = _StateGrid(ctx, prod, p, regions.get(p, BoxUnion([])), cfg,
                              frozen_u.get(p))
    W = tgt.astype(float)
    inputs: dict[int, np.ndarray] = {}
    residual = np.inf
    sweeps = 0
    while sweeps < max_sweeps:
        W_next = W.copy()
        for p, grid in grids.items():
            if tgt[p]:
                continue
            u, val = grid.best(W, descending)
            W_next[p] = val
            inputs[p] = u
        residual = float(np.max(np.abs(W_next - W))) if n else 0.0
        W = W_next
        sweeps += 1
        if residual < eps_conv:
            break
    if polish:
        for p in sorted(inputs):
            if p in frozen_u:
                continue
            ctx = contexts[prod.cell_of(p)]
            u, val = optimize_reach_input(ctx, prod, prod.dra_state_of(p), W,
                                          regions[p], cfg, descending=descending, polish=True)
            if val > W[p]:
                W[p] = val
                inputs[p] = u
    for p in frozen_u:
        if not tgt[p]:
            inputs[p] = frozen_u[p]
    return W, inputs, residual, sweeps


def _extreme_chain(prod, contexts, inputs, W, descending, default_u) -> MarkovChain:
    n = prod.model.n_states
    order = np.lexsort((np.arange(n), -W if descending else W))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    rows: list[dict[int, float]] = []
    for p in range(n):
        ctx = contexts[prod.cell_of(p)]
        u = inputs.get(p, default_u)
        lo, hi = ctx.bounds_for(u)
        succ = _successors(ctx, prod, prod.dra_state_of(p))
        entries = sorted(range(len(succ)), key=lambda i: (rank[succ[i]], succ[i]))
        row: dict[int, float] = {}
        used = 0.0
        lo_after = float(np.sum(lo[0]))
        for i in entries:
            lo_after -= float(lo[0, i])
            z = max(0.0, min(float(hi[0, i]), 1.0 - used - lo_after))
            if z > 0:
                row[int(succ[i])] = row.get(int(succ[i]), 0.0) + z
            used += z
        total = sum(row.values())
        if total > 0 and abs(total - 1.0) > 1e-12:
            row = {t: v / total for t, v in row.items()}
        rows.append(row)
    return MarkovChain(n, rows, labels=list(prod.model.labels), initial=set(prod.model.initial))


# -- the outer loop -------------------------------------------------------------------


@dataclass
class ContinuousSynthesisConfig:
    system: SystemModel
    dra: RabinAutomaton
    partition: Partition
    input_box: Rect | None = None
    eps_thr: float = 0.3
    score_frac: float = 0.01
    max_iters: int = 4
    eps_conv: float = 1e-2
    n_min: int = 3
    n_init: int = 12
    max_sweeps: int = 400


@dataclass
class ContinuousResult:
    partition: Partition
    prod: ProductModel
    policy_inputs: dict[int, np.ndarray]
    interval: IntervalResult
    initial_intervals: list[tuple[float, float]]
    report: SuboptimalityReport
    history: list[IterationRecord]
    regions: dict[int, BoxUnion]
    winning: ComponentResult
    grid_resolution: float = 0.0
    capped: bool = False

    def region_rows(self):
        """(state, box corners...) per retained input box, for export."""
        for p in sorted(self.regions):
            for box in self.regions[p].boxes:
                yield (p,) + tuple(box.lo) + tuple(box.hi)


def synthesize_continuous(cfg: ContinuousSynthesisConfig) -> ContinuousResult:
    """Refinement loop for continuous-input policies (maximization form)."""
    system = cfg.system
    input_box = cfg.input_box if cfg.input_box is not None else system.input_box
    if input_box is None:
        raise ValueError("no input box configured")
    partition = cfg.partition
    grid = GridConfig(cfg.n_min, cfg.n_init, input_box.volume())
    regions: dict[int, BoxUnion] | None = None
    frozen_u: dict[int, np.ndarray] = {}
    selected_cache: dict[int, list[SelectedInput]] = {}
    reach_cache: dict = {}
    history: list[IterationRecord] = []
    t0 = time.monotonic()
    result: ContinuousResult | None = None
    default_u = _min_norm_point(input_box)

    for iteration in range(cfg.max_iters):
        contexts = build_contexts(partition, system, BoxUnion([input_box]), reach_cache)
        forced: dict[int, list[np.ndarray]] = {}
        n_dra = cfg.dra.n_states
        for p, u in frozen_u.items():
            forced.setdefault(p // n_dra, []).append(u)
        comp = construct_components_cimc(partition, system, BoxUnion([input_box]), cfg.dra,
                                         cfg=grid, contexts=contexts, selected=selected_cache,
                                         forced_inputs=forced, frozen_states=frozen_u)
        prod = comp.prod
        n = prod.model.n_states
        if regions is None:
            regions = {p: BoxUnion([input_box]) for p in range(n)}
        wc = comp.wc
        frozen_now = dict(frozen_u)
        for p in wc.member_states:
            if p not in frozen_now:
                a = wc.partial_policy.get(p)
                if a is not None:
                    frozen_now[p] = comp.action_inputs[(prod.cell_of(p), a)]

        lower_target = set(wc.member_states) | set(frozen_now)
        upper_target = set(comp.uL.member_states) | lower_target
        if lower_target:
            W_lo, u_lo, residual, sweeps = continuous_reach(
                prod, contexts, regions, lower_target, grid, cfg.eps_conv,
                cfg.max_sweeps, descending=False, frozen_u=frozen_now)
        else:
            W_lo = np.zeros(n)
            u_lo = {p: default_u for p in range(n)}
        if upper_target:
            W_up, u_up, _, _ = continuous_reach(
                prod, contexts, regions, upper_target, grid, cfg.eps_conv,
                cfg.max_sweeps, descending=True)
        else:
            W_up = np.zeros(n)
            u_up = dict(u_lo)

        policy_inputs = {}
        for p in range(n):
            if p in frozen_now:
                policy_inputs[p] = frozen_now[p]
            else:
                policy_inputs[p] = u_lo.get(p, default_u)

        eps = np.zeros(n)
        new_regions: dict[int, BoxUnion] = {}
        for p in range(n):
            if p in lower_target:
                new_regions[p] = BoxUnion([])
                continue
            guarantee = float(W_lo[p])
            region_p = regions.get(p, BoxUnion([input_box]))
            kept, evaluated = prune_inputs(contexts[prod.cell_of(p)], prod,
                                           prod.dra_state_of(p), region_p, guarantee,
                                           W_up, grid)
            new_regions[p] = kept if kept.boxes else region_p
            u_star = policy_inputs[p]
            best_rival = 0.0
            for sub, val in evaluated:
                if not sub.contains_point(u_star):
                    best_rival = max(best_rival, val)
            eps[p] = max(0.0, best_rival - guarantee)
        regions = new_regions

        eps_max = float(eps.max()) if n else 0.0
        report = SuboptimalityReport(eps, {p: 0 for p in range(n)}, {}, eps_max,
                                     float(eps.mean()), float((eps > cfg.eps_thr).mean()),
                                     cfg.eps_thr)
        vols = np.array([partition.cells[prod.cell_of(p)].volume() for p in range(n)])
        region_frac = np.array([regions[p].volume() / input_box.volume()
                                if regions[p].boxes else 0.0 for p in range(n)])
        history.append(IterationRecord(iteration, len(partition), n, eps_max,
                                       float(eps.mean()), float((eps > cfg.eps_thr).mean()),
                                       float(np.sum(region_frac * vols) / np.sum(vols)),
                                       float(region_frac.mean()),
                                       time.monotonic() - t0))

        if upper_target:
            up_frozen, _, _, _ = continuous_reach(prod, contexts, regions, upper_target,
                                                  grid, cfg.eps_conv, cfg.max_sweeps,
                                                  descending=True, frozen_u=policy_inputs,
                                                  polish=False)
        else:
            up_frozen = np.zeros(n)
        p_min = np.clip(W_lo, 0.0, 1.0)
        p_max = np.clip(np.maximum(up_frozen, p_min), 0.0, 1.0)
        spacing = float(np.max([(np.asarray(b.hi) - np.asarray(b.lo)) /
                                max(grid.points_per_axis(b) - 1, 1)
                                for b in [input_box]]))
        result = ContinuousResult(partition, prod, policy_inputs, IntervalResult(p_min, p_max),
                                  [(float(p_min[prod.effective_initial(j)]),
                                    float(p_max[prod.effective_initial(j)]))
                                   for j in range(len(partition))],
                                  report, history, regions, wc, grid_resolution=spacing)
        if eps_max <= cfg.eps_thr:
            return result
        if iteration == cfg.max_iters - 1:
            break

        best_mc = _extreme_chain(prod, contexts, u_up, W_up, True, default_u)
        worst_mc = _extreme_chain(prod, contexts, policy_inputs, W_lo, False, default_u)
        avail = {p: list(prod.model.actions[p]) for p in range(n)}
        scores = score_refinement(prod, best_mc, worst_mc, report, cfg.eps_thr, avail)
        cells = scores.selected(cfg.score_frac)
        if not cells:
            break

        new_partition, parents = partition.refine(cells)
        kids: dict[int, list[int]] = {}
        for c, par in enumerate(parents):
            kids.setdefault(par, []).append(c)
        # trigger/overlap recomputation rule: only cells touching the gap
        # between best-case and permanent components, whose geometry (or a
        # reachable target's geometry) changed, are redone
        refined_cells = set(cells)
        pot_cells = {prod.cell_of(p) for p in (set(comp.uL.member_states) - set(wc.member_states))}
        new_selected: dict[int, list[SelectedInput]] = {}
        for child, par in enumerate(parents):
            reachable = {t for a in comp.model.actions[par] for t in comp.model.rows[(par, a)]}
            touched = par in refined_cells or any(t in refined_cells for t in reachable)
            if par in pot_cells and touched:
                continue  # recompute from scratch
            new_selected[child] = selected_cache.get(par, [])
        selected_cache = {c: s for c, s in new_selected.items() if s}

        nd = prod.n_dra
        moved_regions: dict[int, BoxUnion] = {}
        moved_frozen: dict[int, np.ndarray] = {}
        for p in range(n):
            for child in kids[prod.cell_of(p)]:
                p_new = child * nd + prod.dra_state_of(p)
                if p in lower_target:
                    moved_frozen[p_new] = policy_inputs[p]
                    moved_regions[p_new] = BoxUnion([])
                else:
                    moved_regions[p_new] = BoxUnion(list(regions[p].boxes)) \
                        if regions[p].boxes else BoxUnion([input_box])
        regions = moved_regions
        frozen_u = moved_frozen
        partition = new_partition

    result.capped = True
    return result
