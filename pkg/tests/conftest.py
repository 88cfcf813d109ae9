"""Shared strategies and helpers for the test suite."""

from hypothesis import strategies as st

from stochsynth.models import IMC


def repair_row(row):
    """Nudge an interval row until it admits a distribution (sum lo <= 1 <= sum hi)."""
    lo_sum = sum(v[0] for v in row.values())
    if lo_sum > 1.0:
        row = {t: (lo / lo_sum, max(lo / lo_sum, hi)) for t, (lo, hi) in row.items()}
    hi_sum = sum(v[1] for v in row.values())
    if hi_sum < 1.0:
        for t in sorted(row):
            lo, hi = row[t]
            bump = min(1.0, hi + (1.0 - hi_sum))
            hi_sum += bump - hi
            row[t] = (lo, bump)
            if hi_sum >= 1.0:
                break
    return row


@st.composite
def interval_rows(draw, n_targets, grid=20):
    support = draw(st.lists(st.integers(0, n_targets - 1), min_size=1, max_size=min(3, n_targets),
                            unique=True))
    row = {}
    for t in support:
        a = draw(st.integers(0, grid)) / grid
        b = draw(st.integers(0, grid)) / grid
        row[t] = (min(a, b), max(a, b))
    return repair_row(row)


@st.composite
def small_imc_models(draw, max_states=4):
    n = draw(st.integers(2, max_states))
    return IMC(n, [draw(interval_rows(n)) for _ in range(n)])
