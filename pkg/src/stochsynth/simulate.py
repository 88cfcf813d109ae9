"""Monte Carlo closed-loop validation of synthesized policies.

The automaton rides along as a runtime monitor (s' = delta(s, L(x'))), and a
run counts as violating once the monitor enters any state that belongs to
some rejecting Rabin set.  Frequencies over a bounded horizon soundly bound
the safety-style part of the objective from above, so they can only sit above
the certified lower bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .abstraction import Partition, SystemModel
from .automata import RabinAutomaton

Z_99 = 2.5758293035489004  # two-sided 99% normal quantile


class PolicyError(KeyError):
    pass


class CellLocator:
    """Uniform overlay grid mapping points to partition cells in O(1)-ish."""

    def __init__(self, partition: Partition, resolution: int = 64):
        self.partition = partition
        dom = partition.domain
        self.lo = np.asarray(dom.lo)
        self.hi = np.asarray(dom.hi)
        self.res = resolution
        self.h = (self.hi - self.lo) / resolution
        self.buckets: dict[tuple, list[int]] = {}
        for i, cell in enumerate(partition.cells):
            b_lo = np.clip(np.floor((np.asarray(cell.lo) - self.lo) / self.h).astype(int),
                           0, resolution - 1)
            b_hi = np.clip(np.ceil((np.asarray(cell.hi) - self.lo) / self.h).astype(int) - 1,
                           0, resolution - 1)
            for idx in np.ndindex(*(b_hi - b_lo + 1)):
                key = tuple(b_lo + np.asarray(idx))
                self.buckets.setdefault(key, []).append(i)

    def locate_many(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        keys = np.clip(((xs - self.lo) / self.h).astype(int), 0, self.res - 1)
        out = np.full(len(xs), -1, dtype=np.int64)
        los = self.partition.los
        his = self.partition.his
        for key in {tuple(k) for k in keys}:
            mask = np.all(keys == np.asarray(key), axis=1)
            pts = xs[mask]
            cand = self.buckets.get(key, [])
            found = np.full(pts.shape[0], -1, dtype=np.int64)
            for c in cand:
                hit = np.all(pts >= los[c] - 1e-12, axis=1) & np.all(pts <= his[c] + 1e-12, axis=1)
                found = np.where((found < 0) & hit, c, found)
            out[mask] = found
        if np.any(out < 0):
            bad = xs[out < 0][0]
            raise ValueError(f"point {bad} not inside any partition cell")
        return out


@dataclass
class SimulationOutcome:
    cell_id: int
    runs: int
    horizon: int
    violations: int
    frequency: float
    ci_lo: float
    ci_hi: float


def _policy_lookup(policy, n_dra: int, dim: int):
    """Normalize a (cell, dra-state) -> input mapping to a fast array, raising
    on the first missing pair actually needed."""

    def lookup(cells: np.ndarray, dras: np.ndarray) -> np.ndarray:
        out = np.empty((len(cells), dim))
        for i, (c, s) in enumerate(zip(cells, dras)):
            key = (int(c), int(s))
            if key not in policy:
                raise PolicyError(f"policy has no action for cell {key[0]}, automaton state {key[1]}")
            out[i] = policy[key]
        return out

    return lookup


def simulate_closed_loop(system: SystemModel, policy: dict, dra: RabinAutomaton,
                         partition: Partition, horizon: int, runs: int, seed: int,
                         cells=None, locator: CellLocator | None = None) -> list[SimulationOutcome]:
    """Seeded bounded-horizon rollout of the controlled system per initial cell.

    `policy` maps (cell_id, dra_state) to an input vector.  Violation = the
    monitor touches any rejecting Rabin state within the horizon.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if locator is None:
        locator = CellLocator(partition)
    bad = set()
    for e, _ in dra.pairs:
        bad |= set(e)
    labels_by_cell = _labels_by_cell(partition, system)
    label_ids = {lab: i for i, lab in enumerate(sorted(dra.alphabet, key=sorted))}
    step_table = np.zeros((dra.n_states, len(label_ids)), dtype=np.int64)
    for (s, lab), t in dra.delta.items():
        step_table[s, label_ids[lab]] = t
    cell_label_ids = np.array([label_ids[labels_by_cell[c]] for c in range(len(partition))])
    lookup = _policy_lookup(policy, dra.n_states, system.dim)

    cells = list(range(len(partition))) if cells is None else list(cells)
    outcomes = []
    root = np.random.SeedSequence(seed)
    seeds = root.spawn(len(cells))
    for cell, ss in zip(cells, seeds):
        rng = np.random.Generator(np.random.PCG64(ss))
        box = partition.cells[cell]
        x = np.asarray(box.lo) + rng.random((runs, system.dim)) * box.sides
        cur_cells = locator.locate_many(x)
        s = step_table[dra.s0, cell_label_ids[cur_cells]]  # initialization transition
        violated = np.isin(s, list(bad)) if bad else np.zeros(runs, dtype=bool)
        for _ in range(horizon):
            alive = ~violated
            if not alive.any():
                break
            u = lookup(cur_cells[alive], s[alive])
            w = system.noise.sample(rng, int(alive.sum()))
            x_alive = system.step(x[alive], u, w)
            x[alive] = x_alive
            cur_cells[alive] = locator.locate_many(x_alive)
            s[alive] = step_table[s[alive], cell_label_ids[cur_cells[alive]]]
            if bad:
                violated[alive] |= np.isin(s[alive], list(bad))
        v = int(violated.sum())
        freq = 1.0 - v / runs
        half = Z_99 * np.sqrt(max(freq * (1 - freq), 0.0) / runs)
        outcomes.append(SimulationOutcome(cell, runs, horizon, v, freq,
                                          max(0.0, freq - half), min(1.0, freq + half)))
    return outcomes


def _labels_by_cell(partition: Partition, system: SystemModel):
    from .abstraction import cell_labels

    labs = cell_labels(partition, system.label_regions)
    return {i: frozenset(l) for i, l in enumerate(labs)}
