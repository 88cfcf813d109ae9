import json
from pathlib import Path

import pytest

from stochsynth.automata import (
    AlphabetMismatchError,
    DRAError,
    load_dra,
    parse_dra,
    product,
    product_imc,
)
from stochsynth.models import BMDP, IMC, MemorylessPolicy, induce_imc

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

UNIVERSAL = {
    "states": 1,
    "s0": 0,
    "pairs": [[[], [0]]],
    "edges": [{"from": 0, "label": [], "to": 0}, {"from": 0, "label": ["x"], "to": 0}],
}


def two_state_bmdp():
    rows = {
        (0, 0): {0: (0.1, 0.5), 1: (0.5, 0.9)},
        (1, 0): {0: (1.0, 1.0)},
        (1, 1): {1: (1.0, 1.0)},
    }
    return BMDP(2, [[0], [0, 1]], rows, labels=[frozenset(), frozenset({"x"})], initial={0, 1})


def two_state_dra():
    return parse_dra(json.dumps({
        "states": 2,
        "s0": 0,
        "pairs": [[[], [1]]],
        "edges": [
            {"from": 0, "label": [], "to": 0},
            {"from": 0, "label": ["x"], "to": 1},
            {"from": 1, "label": [], "to": 0},
            {"from": 1, "label": ["x"], "to": 1},
        ],
    }))


def test_parse_case_study_automata():
    safety = load_dra(CONFIGS / "stay_after_entry.dra.json")
    assert safety.n_states == 5 and len(safety.pairs) == 1
    response = load_dra(CONFIGS / "persistence_response.dra.json")
    assert response.n_states == 7 and len(response.pairs) == 3
    # alphabet inferred from edges and total over it
    assert len(response.alphabet) == 8


def test_parse_universal_automaton():
    dra = parse_dra(json.dumps(UNIVERSAL))
    assert dra.n_states == 1
    assert dra.pairs == [(frozenset(), frozenset({0}))]


def test_parse_rejects_missing_entries():
    doc = dict(UNIVERSAL, edges=[{"from": 0, "label": [], "to": 0}])
    doc["edges"] = [{"from": 0, "label": [], "to": 0}]
    # introduce a second state with no edge for label []
    doc["states"] = 2
    with pytest.raises(DRAError, match="not total"):
        parse_dra(json.dumps(doc))


def test_parse_error_is_reported_with_position():
    with pytest.raises(DRAError, match="line"):
        parse_dra("{not json")


def test_product_two_by_two_hand_expansion():
    b = two_state_bmdp()
    dra = two_state_dra()
    prod = product(b, dra)
    assert prod.model.n_states == 4
    # state <0, s> routes cell-0 mass to dra state delta(s, {}) = 0
    # and cell-1 mass to delta(s, {x}) = 1
    for s in (0, 1):
        row = prod.model.rows[(prod.state_id(0, s), 0)]
        assert row == {prod.state_id(0, 0): (0.1, 0.5), prod.state_id(1, 1): (0.5, 0.9)}
    # action sets are inherited from the cell
    assert prod.model.actions[prod.state_id(1, 0)] == [0, 1]
    assert prod.initial == {prod.state_id(0, 0), prod.state_id(1, 0)}
    # mass conservation per row
    for (q, a), row in prod.model.rows.items():
        src = b.rows[(prod.cell_of(q), a)]
        assert sum(lo for lo, _ in row.values()) == pytest.approx(sum(lo for lo, _ in src.values()))
        assert sum(hi for _, hi in row.values()) == pytest.approx(sum(hi for _, hi in src.values()))


def test_product_universal_dra_flags_everything():
    b = BMDP(2, [[0], [0]], {(0, 0): {1: (1.0, 1.0)}, (1, 0): {0: (1.0, 1.0)}},
             labels=[frozenset(), frozenset({"x"})])
    prod = product(b, parse_dra(json.dumps(UNIVERSAL)))
    assert prod.model.n_states == 2
    assert all(prod.f_flags[0]) and not any(prod.e_flags[0])
    for (q, a), row in prod.model.rows.items():
        assert row == b.rows[(q, a)]


def test_product_label_mismatch():
    b = BMDP(1, [[0]], {(0, 0): {0: (1.0, 1.0)}}, labels=[frozenset({"y"})])
    with pytest.raises(AlphabetMismatchError, match="y"):
        product(b, two_state_dra())


def test_product_imc_single_self_loop():
    imc = IMC(1, [{0: (1.0, 1.0)}], labels=[frozenset()])
    prod = product_imc(imc, parse_dra(json.dumps(UNIVERSAL)))
    assert prod.model.n_states == 1
    assert prod.f_flags[0][0]


def test_product_flags_depend_only_on_dra_component():
    prod = product(two_state_bmdp(), two_state_dra())
    for p in range(prod.model.n_states):
        assert prod.f_flags[0][p] == (prod.dra_state_of(p) == 1)


def test_product_commutes_with_policy_induction():
    b = two_state_bmdp()
    dra = two_state_dra()
    # policy depending only on the cell component, liftable both ways
    cell_choice = {0: 0, 1: 1}
    prod = product(b, dra)
    lifted = MemorylessPolicy({p: cell_choice[prod.cell_of(p)] for p in range(prod.model.n_states)})
    left = product_imc(induce_imc(b, MemorylessPolicy(cell_choice)), dra)
    right = induce_imc(prod.model, lifted)
    assert left.model.n_states == right.n_states
    for p in range(right.n_states):
        assert left.model.rows[(p, 0)] == right.rows[p]
        assert left.model.labels[p] == right.labels[p]
    assert left.initial == prod.initial == right.initial


def test_effective_initial_applies_initialization_step():
    b = two_state_bmdp()
    dra = two_state_dra()
    prod = product(b, dra)
    assert prod.effective_initial(0) == prod.state_id(0, 0)
    assert prod.effective_initial(1) == prod.state_id(1, 1)
