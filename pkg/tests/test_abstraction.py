import numpy as np
import pytest
from scipy import stats

from stochsynth.abstraction import (
    AbstractionError,
    AffineMap,
    LabelingError,
    MonotoneMap,
    NoiseModel,
    Partition,
    SystemModel,
    UnsoundReachError,
    bistable_map,
    build_bmdp,
    cell_labels,
    load_system,
    reach_overapprox,
    shift_reach,
    split_rect,
    transition_bounds,
    truncated_gaussian,
    uniform_noise,
)
from stochsynth.geometry import Rect
from stochsynth.models import validate_bmdp

from pathlib import Path

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def uniform_1d(lo=-0.5, hi=0.5):
    return NoiseModel([uniform_noise((lo, hi))])


def case_noise():
    ax = truncated_gaussian(-0.3, 0.1, (-0.4, -0.2))
    return NoiseModel([ax, ax])


# -- reach boxes -----------------------------------------------------------------


def test_shift_reach_examples():
    assert shift_reach(Rect.of([0, 0], [1, 1]), (0.05, -0.05)) == Rect.of([0.05, -0.05], [1.05, 0.95])
    r = Rect.of([2], [3])
    assert shift_reach(r, (0.0,)) == r
    assert shift_reach(r, (-0.3,)) == Rect.of([1.7], [2.7])


def test_shift_reach_dimension_mismatch():
    with pytest.raises(Exception):
        shift_reach(Rect.of([0], [1]), (0.1, 0.2))


def test_split_rect():
    a, b = split_rect(Rect.of([0, 0], [4, 2]))
    assert a == Rect.of([0, 0], [2, 2]) and b == Rect.of([2, 0], [4, 2])
    a, b = split_rect(Rect.of([0, 0], [1, 1]))  # tie -> axis 0
    assert a == Rect.of([0, 0], [0.5, 1])
    a, b = split_rect(Rect.of([0, 0], [1, 4]))
    assert a == Rect.of([0, 0], [1, 2])


def test_reach_affine():
    sys_model = SystemModel(1, AffineMap([[0.5]], [0.0]), uniform_1d(), Rect.of([0], [2]))
    assert reach_overapprox(Rect.of([0], [2]), sys_model) == Rect.of([0], [1])


def test_reach_identity():
    sys_model = SystemModel(2, AffineMap(np.eye(2), np.zeros(2)), case_noise(),
                            Rect.of([0, 0], [4, 4]))
    cell = Rect.of([1, 1], [2, 3])
    assert reach_overapprox(cell, sys_model) == cell


def test_reach_bistable_corners_cover_samples():
    dyn = bistable_map(1.3, 0.25, 0.05)
    sys_model = SystemModel(2, dyn, case_noise(), Rect.of([0, 0], [4, 4]))
    box = reach_overapprox(Rect.of([0, 0], [1, 1]), sys_model)
    pts = Rect.of([0, 0], [1, 1]).grid_points(9)
    img = dyn(pts)
    assert np.all(img >= np.asarray(box.lo) - 1e-12)
    assert np.all(img <= np.asarray(box.hi) + 1e-12)


def test_unsound_oracle_is_rejected():
    bad = MonotoneMap(lambda x: np.atleast_2d(x) * 2.0, 1)  # claims identity-monotone but scales
    bad.reach = lambda rect: Rect.of(rect.lo, rect.hi)  # lies about the reach set
    sys_model = SystemModel(1, bad, uniform_1d(), Rect.of([0], [2]))
    with pytest.raises(UnsoundReachError):
        reach_overapprox(Rect.of([0], [1]), sys_model)


# -- transition bounds -------------------------------------------------------------


def test_transition_bounds_shifted_overlap():
    lo, hi = transition_bounds(Rect.of([0], [1]), Rect.of([1], [2]), uniform_1d())
    assert hi == pytest.approx(0.5, abs=1e-12)
    assert lo == pytest.approx(0.0, abs=1e-12)


def test_transition_bounds_centered_target():
    lo, hi = transition_bounds(Rect.of([0], [1]), Rect.of([0], [1]), uniform_1d())
    assert hi == pytest.approx(1.0, abs=1e-12)
    # either reach endpoint gives the same mass by symmetry
    assert lo == pytest.approx(0.5, abs=1e-12)


def test_transition_bounds_disjoint():
    lo, hi = transition_bounds(Rect.of([0], [1]), Rect.of([5], [6]), uniform_1d())
    assert (lo, hi) == (0.0, 0.0)


def test_truncated_gaussian_matches_reference():
    ax = truncated_gaussian(-0.3, 0.1, (-0.4, -0.2))
    sigma = np.sqrt(0.1)
    ref = stats.truncnorm((-0.4 + 0.3) / sigma, (-0.2 + 0.3) / sigma, loc=-0.3, scale=sigma)
    xs = np.linspace(-0.45, -0.15, 101)
    assert np.max(np.abs(ax.cdf(xs) - ref.cdf(xs))) < 1e-12
    us = np.linspace(0.001, 0.999, 53)
    assert np.max(np.abs(ax.ppf(us) - ref.ppf(us))) < 1e-9


def test_asymmetric_noise_rejected():
    ax = truncated_gaussian(0.0, 0.1, (-0.1, 0.3))
    with pytest.raises(AbstractionError, match="symmetric"):
        NoiseModel([ax])


# -- partitions and labels ----------------------------------------------------------


def test_partition_regular_and_validate():
    p = Partition.regular(Rect.of([0, 0], [4, 4]), 4)
    assert len(p) == 16
    p.validate()
    assert p.locate([1.1, 3.9]) == p.cells.index(Rect.of([1, 3], [2, 4]))


def test_partition_refine_tracks_parents():
    p = Partition.regular(Rect.of([0, 0], [2, 2]), 2)
    p2, parents = p.refine([0])
    assert len(p2) == 5
    assert parents.count(0) == 2
    p2.validate()


def test_partition_overlap_detected():
    cells = [Rect.of([0], [1.2]), Rect.of([1], [2])]
    with pytest.raises(AbstractionError):
        Partition(cells, Rect.of([0], [2])).validate()


def test_cell_labels_and_conformance():
    p = Partition.regular(Rect.of([0, 0], [4, 4]), 2)
    labels = cell_labels(p, {"A": [Rect.of([0, 2], [4, 4])]})
    assert labels == [frozenset(), frozenset(), frozenset({"A"}), frozenset({"A"})] or \
        sorted(map(sorted, labels)) == sorted([[], [], ["A"], ["A"]])
    with pytest.raises(LabelingError):
        cell_labels(p, {"B": [Rect.of([0, 1], [4, 3])]})


def test_label_region_union_of_boxes():
    p = Partition.regular(Rect.of([0], [4]), 2)
    labels = cell_labels(p, {"A": [Rect.of([0], [1]), Rect.of([1], [2])]})
    assert labels[0] == frozenset({"A"}) and labels[1] == frozenset()


# -- abstraction construction --------------------------------------------------------


def bistable_system():
    return load_system(str(CONFIGS / "bistable.json"))


def test_one_cell_partition_self_loop():
    sys_model = bistable_system()
    sys_model.label_regions = {}  # a single cell cannot conform to the A region
    p = Partition([sys_model.domain], sys_model.domain)
    model, table = build_bmdp(p, sys_model, modes=[np.zeros(2)])
    assert model.rows[(0, 0)] == {0: (1.0, 1.0)}
    assert list(table) == [0]


def test_bistable_two_by_two_single_mode():
    sys_model = bistable_system()
    p = Partition.regular(sys_model.domain, 2)
    model, _ = build_bmdp(p, sys_model, modes=[np.zeros(2)])
    assert model.n_states == 4
    assert validate_bmdp(model).ok()
    assert all(model.actions[q] == [0] for q in range(4))


def test_bistable_five_modes():
    sys_model = bistable_system()
    p = Partition.regular(sys_model.domain, 2)
    model, table = build_bmdp(p, sys_model)
    assert all(model.actions[q] == [0, 1, 2, 3, 4] for q in range(4))
    assert np.allclose(table[1], [0.05, 0.0])


def test_refinement_keeps_zero_bounds():
    sys_model = bistable_system()
    p = Partition.regular(sys_model.domain, 4)
    model, _ = build_bmdp(p, sys_model, modes=[np.zeros(2)])
    p2, parents = p.refine(range(len(p)))
    model2, _ = build_bmdp(p2, sys_model, modes=[np.zeros(2)])
    for (j2, a), row2 in model2.rows.items():
        parent_row = model.rows[(parents[j2], a)]
        for t2, (lo2, hi2) in row2.items():
            if hi2 > 0:
                assert parents[t2] in parent_row, (
                    f"child edge {j2}->{t2} has no parent edge {parents[j2]}->{parents[t2]}")


def sample_transition_frequencies(sys_model, cell, u, target_ext, n_points=16, draws=4000, seed=0):
    """Empirical per-start-point frequencies of landing in the extended target box."""
    rng = np.random.default_rng(seed)
    pts = cell.grid_points(int(np.ceil(n_points ** (1 / cell.dim))))
    freqs = []
    for x in pts:
        w = sys_model.noise.sample(rng, draws)
        nxt = sys_model.step(np.tile(x, (draws, 1)), u, w)
        inside = np.all(nxt >= np.asarray(target_ext.lo) - 1e-12, axis=1) & \
            np.all(nxt <= np.asarray(target_ext.hi) + 1e-12, axis=1)
        freqs.append(inside.mean())
    return np.array(freqs)


def test_bounds_contain_empirical_frequencies():
    sys_model = bistable_system()
    p = Partition.regular(sys_model.domain, 4)
    model, table = build_bmdp(p, sys_model)
    rng = np.random.default_rng(42)
    for trial in range(6):
        j = rng.integers(len(p))
        a = int(rng.integers(5))
        row = model.rows[(j, a)]
        if not row:
            continue
        t = int(rng.choice(list(row)))
        lo, hi = row[t]
        cell = p.cells[j]
        target = p.cells[t]
        freqs = sample_transition_frequencies(sys_model, cell, table[a], target,
                                              seed=int(trial))
        assert freqs.max() <= hi + 0.02, (j, a, t, lo, hi, freqs.max())
        assert freqs.min() >= lo - 0.02, (j, a, t, lo, hi, freqs.min())


def test_load_system_round_trip_fields():
    sys_model = bistable_system()
    assert sys_model.dim == 2
    assert len(sys_model.modes) == 5
    assert sys_model.input_box == Rect.of([-0.05, -0.05], [0.05, 0.05])
    assert set(sys_model.label_regions) == {"A"}
