import json

import numpy as np
import pytest

from stochsynth.abstraction import (
    AffineMap,
    NoiseModel,
    Partition,
    SystemModel,
    build_bmdp,
    uniform_noise,
)
from stochsynth.automata import parse_dra, product
from stochsynth.components import (
    find_extended_greatest_accepting,
    find_extended_permanent_accepting,
    find_greatest_permanent_winning,
)
from stochsynth.geometry import BoxUnion, Rect
from stochsynth.reachability import maximize_reach
from stochsynth.synth_continuous import (
    ContinuousSynthesisConfig,
    GridConfig,
    SourceContext,
    build_contexts,
    construct_components_cimc,
    continuous_reach,
    enumerate_overlaps,
    off_combination_feasible,
    optimize_reach_input,
    prune_inputs,
    select_inputs,
    split_box_quarters,
    synthesize_continuous,
    trigger_regions,
)


def ctx_1d(cells, reach=(0.0, 1.0), support=(-0.5, 0.5), domain=(-100.0, 100.0),
           u_extent=(-1.0, 1.0)):
    noise = NoiseModel([uniform_noise(support)])
    part = Partition([Rect.of([a], [b]) for a, b in cells], Rect.of([domain[0]], [domain[1]]))
    system = SystemModel(1, AffineMap([[1.0]], [0.0]), noise, part.domain)
    return SourceContext(part, system, 0, Rect.of([u_extent[0]], [u_extent[1]]),
                         Rect.of([reach[0]], [reach[1]]))


def U1(a=-1.0, b=1.0):
    return BoxUnion([Rect.of([a], [b])])


# -- trigger regions ---------------------------------------------------------------


def test_trigger_regions_band_example():
    ctx = ctx_1d([(-100.0, 2.0), (2.0, 3.0), (3.0, 100.0)])
    i = ctx.targets.index(1)
    regions = trigger_regions(ctx, i, U1())
    assert regions.on.is_empty()
    assert len(regions.off.boxes) == 1
    assert regions.off.boxes[0] == Rect.of([-1.0], [0.5])
    assert len(regions.undecided.boxes) == 1
    assert regions.undecided.boxes[0] == Rect.of([0.5], [1.0])


def test_trigger_regions_unreachable_target_is_all_off():
    ctx = ctx_1d([(-100.0, 50.0), (50.0, 60.0), (60.0, 100.0)])
    i = ctx.targets.index(1) if 1 in ctx.targets else None
    if i is None:
        # target not even a candidate; by convention the whole space is off
        return
    regions = trigger_regions(ctx, i, U1())
    assert regions.off.volume() == pytest.approx(2.0)


def test_trigger_regions_enclosing_target_is_all_on():
    ctx = ctx_1d([(-100.0, -3.0), (-3.0, 4.0), (4.0, 100.0)])
    i = ctx.targets.index(1)
    regions = trigger_regions(ctx, i, U1())
    assert regions.on.volume() == pytest.approx(2.0)
    assert regions.off.is_empty() and regions.undecided.is_empty()


def test_trigger_regions_tile_input_space():
    rng = np.random.default_rng(3)
    for _ in range(25):
        a = float(rng.uniform(-3, 2))
        b = a + float(rng.uniform(0.2, 3))
        ctx = ctx_1d([(-100.0, a), (a, b), (b, 100.0)],
                     reach=(float(rng.uniform(-1, 0)), float(rng.uniform(0.2, 1.5))))
        if 1 not in ctx.targets:
            continue  # target box unreachable over the whole input extent
        i = ctx.targets.index(1)
        regions = trigger_regions(ctx, i, U1())
        assert regions.coverage_volume() == pytest.approx(2.0, abs=1e-9)


def test_trigger_classification_matches_bound_signature():
    rng = np.random.default_rng(11)
    for trial in range(12):
        a = float(rng.uniform(-2.5, 1.5))
        b = a + float(rng.uniform(0.3, 2.5))
        ctx = ctx_1d([(-100.0, a), (a, b), (b, 100.0)])
        if 1 not in ctx.targets:
            continue
        i = ctx.targets.index(1)
        regions = trigger_regions(ctx, i, U1())
        for region, kind in ((regions.off, "f"), (regions.on, "o"), (regions.undecided, "n")):
            for box in region.boxes:
                for u in box.grid_points(12)[1:-1]:  # interior points
                    lo, hi = ctx.bounds_for(u[None, :])
                    if kind == "f":
                        assert hi[0, i] <= 1e-12
                    elif kind == "o":
                        assert lo[0, i] > 1e-12
                    else:
                        assert lo[0, i] <= 1e-12 < hi[0, i]


# -- overlaps ----------------------------------------------------------------------


def test_overlap_two_band_example():
    # two targets whose undecided bands are (0.5, 1] and (0.7, 1]
    ctx = ctx_1d([(2.0, 3.0), (2.2, 3.2)], domain=(-100.0, 100.0))
    # verify band edges first
    r0 = trigger_regions(ctx, 0, U1())
    r1 = trigger_regions(ctx, 1, U1())
    assert r0.undecided.boxes[0].lo[0] == pytest.approx(0.5)
    assert r0.undecided.boxes[0].hi[0] == pytest.approx(1.0)
    assert r1.undecided.boxes[0].lo[0] == pytest.approx(0.7)
    assert r1.undecided.boxes[0].hi[0] == pytest.approx(1.0)
    overlaps = enumerate_overlaps(ctx, U1())
    boxes = sorted((o.box.lo[0], o.box.hi[0], len(o.undecided)) for o in overlaps.overlaps)
    assert len(boxes) == 3
    for got, want in zip(boxes, [(-1.0, 0.5, 0), (0.5, 0.7, 1), (0.7, 1.0, 2)]):
        assert got[0] == pytest.approx(want[0]) and got[1] == pytest.approx(want[1])
        assert got[2] == want[2]
    assert len(overlaps.entangled) == 1


def test_overlap_single_target_all_simple():
    ctx = ctx_1d([(2.0, 3.0)])
    overlaps = enumerate_overlaps(ctx, U1())
    assert 1 <= len(overlaps.overlaps) <= 3
    assert not overlaps.entangled


def test_overlap_everything_off_single_overlap():
    ctx = ctx_1d([(90.0, 95.0)], u_extent=(-1.0, 1.0))
    overlaps = enumerate_overlaps(ctx, U1())
    assert len(overlaps.overlaps) == 1
    assert overlaps.overlaps[0].types.count("f") == len(ctx.targets)


def test_overlaps_tile_input_space():
    ctx = ctx_1d([(1.0, 2.0), (1.5, 2.5), (-0.5, 0.5)])
    overlaps = enumerate_overlaps(ctx, U1())
    assert sum(o.box.volume() for o in overlaps.overlaps) == pytest.approx(2.0, abs=1e-9)


# -- input selection ----------------------------------------------------------------


def test_off_combination_feasibility_profiles():
    # profile 1: the certain transition can absorb at most 0.8 of the mass
    hi_row = np.array([0.5, 0.3, 0.8])
    assert not off_combination_feasible(hi_row, on_idx=[2], undecided_idx=[0, 1], off_set={0, 1})
    # profile 2: the certain transition can take the whole unit
    hi_row2 = np.array([0.4, 0.6, 1.0])
    assert off_combination_feasible(hi_row2, on_idx=[2], undecided_idx=[0, 1], off_set={0, 1})


def test_select_min_norm_input_in_simple_overlap():
    noise = NoiseModel([uniform_noise((-0.1, 0.1)), uniform_noise((-0.1, 0.1))])
    part = Partition([Rect.of([5, 5], [6, 6])], Rect.of([-100, -100], [100, 100]))
    system = SystemModel(2, AffineMap(np.eye(2), np.zeros(2)), noise, part.domain)
    ctx = SourceContext(part, system, 0, Rect.of([-1, -1], [1, 1]), Rect.of([0, 0], [1, 1]))

    from stochsynth.synth_continuous import Overlap, OverlapSet
    ov = OverlapSet(0, list(ctx.targets),
                    [Overlap(Rect.of([0.2, -0.1], [0.4, 0.1]), ("f",), ())])
    out = select_inputs(ctx, ov, GridConfig(u_total_area=4.0))
    assert len(out) == 1
    assert np.allclose(out[0].u, [0.2, 0.0])


def test_select_inputs_covers_entangled_combinations():
    # one certain target that can absorb everything plus two undecided ones:
    # the all-off combination must be realized by some selected input
    ctx = ctx_1d([(-3.0, 3.5), (2.0, 3.0), (2.2, 3.2)], support=(-0.5, 0.5))
    overlaps = enumerate_overlaps(ctx, U1())
    sel = select_inputs(ctx, overlaps, GridConfig(u_total_area=2.0))
    assert sel, "selection must not be empty"
    profiles = {s.profile for s in sel}
    assert len(profiles) == len(sel)  # deduped by profile


# -- reachability optimization -------------------------------------------------------


def reach_fixture_1d(cells, labels, dra_doc, support=(-0.25, 0.25)):
    noise = NoiseModel([uniform_noise(support)])
    domain = Rect.of([cells[0][0]], [cells[-1][1]])
    part = Partition([Rect.of([a], [b]) for a, b in cells], domain)
    system = SystemModel(1, AffineMap([[1.0]], [0.0]), noise, domain,
                         label_regions=labels, input_box=Rect.of([-1.0], [1.0]))
    dra = parse_dra(json.dumps(dra_doc))
    return part, system, dra


SAFETY_DRA = {
    "states": 2, "s0": 0,
    "pairs": [[[1], [0]]],
    "edges": [
        {"from": 0, "label": ["A"], "to": 0},
        {"from": 0, "label": [], "to": 1},
        {"from": 1, "label": ["A"], "to": 1},
        {"from": 1, "label": [], "to": 1},
    ],
}


def test_optimize_single_point_region_is_exact():
    part, system, dra = reach_fixture_1d([(0.0, 1.0), (1.0, 2.0)],
                                         {"A": [Rect.of([1.0], [2.0])]}, SAFETY_DRA)
    contexts = build_contexts(part, system, BoxUnion([Rect.of([-1.0], [1.0])]))
    prod_model = construct_components_cimc(part, system, BoxUnion([Rect.of([-1.0], [1.0])]),
                                           dra).prod
    W = np.zeros(prod_model.model.n_states)
    W[prod_model.state_id(1, 0)] = 1.0
    point = BoxUnion([Rect.of([0.7], [0.7])])
    u, val = optimize_reach_input(contexts[0], prod_model, 0, W, point,
                                  GridConfig(u_total_area=2.0))
    assert np.allclose(u, [0.7])
    lo, hi = contexts[0].bounds_for(np.array([[0.7]]))
    # adversarial allocation: check value equals the hand-rolled objective
    from stochsynth.synth_continuous import _alloc_objective, _successors
    succ = _successors(contexts[0], prod_model, 0)
    ref = _alloc_objective(lo, hi, succ, W, False)[0]
    assert val == pytest.approx(ref, abs=1e-12)


def test_optimize_constant_objective_returns_lexicographic_min():
    part, system, dra = reach_fixture_1d([(0.0, 1.0), (1.0, 2.0)],
                                         {"A": [Rect.of([1.0], [2.0])]}, SAFETY_DRA)
    contexts = build_contexts(part, system, BoxUnion([Rect.of([-1.0], [1.0])]))
    prod_model = construct_components_cimc(part, system, BoxUnion([Rect.of([-1.0], [1.0])]),
                                           dra).prod
    W = np.zeros(prod_model.model.n_states)  # all-zero target values: flat objective
    region = BoxUnion([Rect.of([-0.4], [0.4])])
    u, val = optimize_reach_input(contexts[0], prod_model, 0, W, region,
                                  GridConfig(u_total_area=2.0), polish=False)
    assert val == 0.0
    assert u[0] == pytest.approx(-0.4)


def test_optimizer_close_to_dense_reference():
    part, system, dra = reach_fixture_1d([(0.0, 1.0), (1.0, 2.0)],
                                         {"A": [Rect.of([1.0], [2.0])]}, SAFETY_DRA)
    contexts = build_contexts(part, system, BoxUnion([Rect.of([-1.0], [1.0])]))
    prod_model = construct_components_cimc(part, system, BoxUnion([Rect.of([-1.0], [1.0])]),
                                           dra).prod
    from stochsynth.synth_continuous import _alloc_objective, _successors
    rng = np.random.default_rng(5)
    for trial in range(10):
        W = rng.random(prod_model.model.n_states)
        region = BoxUnion([Rect.of([-1.0], [1.0])])
        cfgs = GridConfig(n_min=3, n_init=12, u_total_area=2.0)
        u, val = optimize_reach_input(contexts[0], prod_model, 0, W, region, cfgs)
        dense = Rect.of([-1.0], [1.0]).grid_points(200)
        lo, hi = contexts[0].bounds_for(dense)
        succ = _successors(contexts[0], prod_model, 0)
        ref = float(np.max(_alloc_objective(lo, hi, succ, W, False)))
        assert val >= ref - 0.05


def test_prune_drops_dominated_half():
    part, system, dra = reach_fixture_1d([(0.0, 1.0), (1.0, 2.0)],
                                         {"A": [Rect.of([1.0], [2.0])]}, SAFETY_DRA)
    contexts = build_contexts(part, system, BoxUnion([Rect.of([-1.0], [1.0])]))
    comp = construct_components_cimc(part, system, BoxUnion([Rect.of([-1.0], [1.0])]), dra)
    prod_model = comp.prod
    # upper values: reaching the A cell at automaton state 0
    W_up = np.zeros(prod_model.model.n_states)
    W_up[prod_model.state_id(1, 0)] = 1.0
    region = BoxUnion([Rect.of([-1.0], [1.0])])
    cfgs = GridConfig(u_total_area=2.0)
    # dense per-sub-box reference: the best-case value rises with u, so a
    # guarantee strictly between the quarter values trims the left part
    kept, evaluated = prune_inputs(contexts[0], prod_model, 0, region, 0.5, W_up, cfgs)
    vals = {(s.lo[0], s.hi[0]): v for s, v in evaluated}
    for (a, b), v in vals.items():
        dense = Rect.of([a], [b]).grid_points(200)
        lo, hi = contexts[0].bounds_for(dense)
        from stochsynth.synth_continuous import _alloc_objective, _successors
        succ = _successors(contexts[0], prod_model, 0)
        ref = float(np.max(_alloc_objective(lo, hi, succ, W_up, True)))
        assert v <= ref + 1e-9  # grid value never exceeds the dense reference
    kept_lo = min(b.lo[0] for b in kept.boxes)
    assert kept_lo >= -0.5  # the left half cannot beat the guarantee
    assert any(b.hi[0] == pytest.approx(1.0) for b in kept.boxes)


def test_split_box_quarters():
    parts = split_box_quarters(Rect.of([0.0], [1.0]))
    assert [(
        p.lo[0], p.hi[0]) for p in parts] == [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)]
    parts2 = split_box_quarters(Rect.of([0, 0], [2, 2]))
    assert len(parts2) == 4
    assert sum(p.volume() for p in parts2) == pytest.approx(4.0)
    assert len({(tuple(p.lo), tuple(p.hi)) for p in parts2}) == 4


# -- component construction and the loop ----------------------------------------------


def test_point_input_space_matches_finite_pipeline_components():
    part, system, dra = reach_fixture_1d([(0.0, 0.5), (0.5, 1.0), (1.0, 1.5), (1.5, 2.0)],
                                         {"A": [Rect.of([1.0], [2.0])]}, SAFETY_DRA,
                                         support=(-0.1, 0.1))
    eps = 1e-6
    tiny = BoxUnion([Rect.of([0.3 - eps], [0.3 + eps]), Rect.of([1.15 - eps], [1.15 + eps])])
    comp = construct_components_cimc(part, system, tiny, dra)
    model_fin, _ = build_bmdp(part, system, modes=[np.array([0.3]), np.array([1.15])])
    prod_fin = product(model_fin, dra)
    uP = find_extended_permanent_accepting(prod_fin)
    uL = find_extended_greatest_accepting(prod_fin)
    wc_fin = find_greatest_permanent_winning(prod_fin, uP, uL)
    assert comp.wc.member_states == wc_fin.member_states


def test_cross_pipeline_values_close_on_fixed_partition():
    part, system, dra = reach_fixture_1d([(0.0, 0.5), (0.5, 1.0), (1.0, 1.5), (1.5, 2.0)],
                                         {"A": [Rect.of([1.0], [2.0])]}, SAFETY_DRA,
                                         support=(-0.1, 0.1))
    modes = [np.array([0.3]), np.array([1.15])]
    eps = 1e-6
    tiny = BoxUnion([Rect.of([m[0] - eps], [m[0] + eps]) for m in modes])
    comp = construct_components_cimc(part, system, tiny, dra)
    regions = {p: BoxUnion(list(tiny.boxes)) for p in range(comp.prod.model.n_states)}
    W_lo, _, _, _ = continuous_reach(comp.prod, comp.contexts, regions,
                                     comp.wc.member_states, GridConfig(u_total_area=4e-6),
                                     1e-6, 2000, descending=False)
    model_fin, _ = build_bmdp(part, system, modes=modes)
    prod_fin = product(model_fin, dra)
    uP = find_extended_permanent_accepting(prod_fin)
    uL = find_extended_greatest_accepting(prod_fin)
    wc_fin = find_greatest_permanent_winning(prod_fin, uP, uL)
    sol = maximize_reach(prod_fin.model, wc_fin.member_states, bound="lower", eps_conv=1e-6)
    assert np.max(np.abs(W_lo - sol.values)) < 0.02


def test_synthesize_continuous_vacuous_threshold():
    part, system, dra = reach_fixture_1d([(0.0, 0.5), (0.5, 1.0), (1.0, 1.5), (1.5, 2.0)],
                                         {"A": [Rect.of([1.0], [2.0])]}, SAFETY_DRA,
                                         support=(-0.1, 0.1))
    cfg = ContinuousSynthesisConfig(system, dra, part, input_box=Rect.of([-0.5], [0.5]),
                                    eps_thr=1.0, max_iters=3)
    res = synthesize_continuous(cfg)
    assert len(res.history) == 1 and not res.capped
    assert res.interval.validate()


def test_synthesize_continuous_smoke_refines():
    part, system, dra = reach_fixture_1d([(0.0, 1.0), (1.0, 2.0)],
                                         {"A": [Rect.of([1.0], [2.0])]}, SAFETY_DRA,
                                         support=(-0.1, 0.1))
    cfg = ContinuousSynthesisConfig(system, dra, part, input_box=Rect.of([-0.5], [0.5]),
                                    eps_thr=0.2, max_iters=3, eps_conv=1e-3)
    res = synthesize_continuous(cfg)
    assert res.interval.validate()
    assert len(res.history) >= 1
    assert set(res.policy_inputs) == set(range(res.prod.model.n_states))
    # monotone guarantee per fixed partition is reflected in valid intervals
    assert np.all(res.interval.p_min <= res.interval.p_max + 1e-9)
