"""Ordering-based interval value iteration and exact Markov-chain reachability.

The extreme one-step assignment allocates interval mass greedily along a
value ordering of the targets:

    z_i = min(hi_i, 1 - sum_{j<i} z_j - sum_{j>i} lo_j)

which admits the closed prefix form  S_i = min(cumsum(hi)_i, 1 - lo_after_i),
so whole sweeps vectorize over a flattened (state, action, entry) layout.
Sweeps are Jacobi (whole-vector): results do not depend on state order.

Undiscounted reachability has two classic pitfalls that the plain iteration
does not handle:
  * values can stall asymptotically below an exact 0/1 fixpoint, and
  * at convergence, several actions can tie in value while only some of them
    actually realize it (e.g. a pure self-loop ties the backup).
Both are dealt with here: a qualitative graph pass snaps exact-0 / exact-1
states, and action extraction prefers the action that produced the last
strict improvement at each state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .models import BMDP, IMC, MarkovChain, MemorylessPolicy, Row

DEFAULT_EPS_CONV = 1e-6
VALUE_TOL = 1e-9
MAX_SWEEPS = 100_000


class ReachError(ValueError):
    pass


def o_extreme_row(row: Row, ranking: dict[int, int], direction: str) -> dict[int, float]:
    """Extreme stochastic row under a target ranking.

    direction 'adversarial-min': allocate along ascending ranking (mass pushed
    to low-rank targets first); 'favorable-max': descending ranking.  Ranking
    ties break on the smaller state id.
    """
    if direction == "adversarial-min":
        targets = sorted(row, key=lambda t: (ranking[t], t))
    elif direction == "favorable-max":
        targets = sorted(row, key=lambda t: (-ranking[t], t))
    else:
        raise ValueError(f"unknown direction {direction!r}")
    lo_total = sum(row[t][0] for t in targets)
    hi_total = sum(row[t][1] for t in targets)
    if lo_total > 1 + VALUE_TOL or hi_total < 1 - VALUE_TOL:
        raise ReachError(f"row {row} cannot form a distribution")
    out = {}
    used = 0.0
    lo_after = lo_total
    for t in targets:
        lo_after -= row[t][0]
        z = min(row[t][1], 1.0 - used - lo_after)
        z = max(z, 0.0)
        out[t] = z
        used += z
    return out


@dataclass
class ReachSolution:
    values: np.ndarray
    policy: MemorylessPolicy
    action_table: dict[tuple[int, int], float]
    extreme_mc: MarkovChain
    iterations: int
    residual: float
    target: frozenset[int] = field(default_factory=frozenset)
    bound: str = "lower"


class _Compiled:
    """Flat arrays for all allowed (state, action) rows of a BMDP."""

    def __init__(self, model: BMDP, allowed: dict[int, list[int]]):
        rows_idx: list[tuple[int, int]] = []
        ent_row: list[int] = []
        ent_tgt: list[int] = []
        ent_lo: list[float] = []
        ent_hi: list[float] = []
        for q in range(model.n_states):
            acts = allowed[q]
            if not acts:
                raise ReachError(f"state {q} has no allowed actions")
            for a in sorted(acts):
                r = len(rows_idx)
                rows_idx.append((q, a))
                hi_sum = 0.0
                for t, (lo, hi) in model.rows[(q, a)].items():
                    if hi <= 0.0:
                        continue
                    ent_row.append(r)
                    ent_tgt.append(t)
                    ent_lo.append(lo)
                    ent_hi.append(hi)
                    hi_sum += hi
                if hi_sum < 1 - VALUE_TOL:
                    raise ReachError(f"row ({q},{a}) has Σhi={hi_sum:.6g} < 1; cannot sum to 1")
        self.n_states = model.n_states
        self.row_state = np.array([q for q, _ in rows_idx], dtype=np.int64)
        self.row_action = np.array([a for _, a in rows_idx], dtype=np.int64)
        self.n_rows = len(rows_idx)
        self.ent_row = np.array(ent_row, dtype=np.int64)
        self.ent_tgt = np.array(ent_tgt, dtype=np.int64)
        self.ent_lo = np.array(ent_lo, dtype=float)
        self.ent_hi = np.array(ent_hi, dtype=float)
        # entries were appended row-by-row, so ent_row is already sorted
        self.row_ptr = np.searchsorted(self.ent_row, np.arange(self.n_rows + 1))
        self.lo_row_total = np.zeros(self.n_rows)
        np.add.at(self.lo_row_total, self.ent_row, self.ent_lo)
        # an edge can carry positive mass only if the other entries' lower
        # bounds leave room for it
        self.ent_realizable = (self.ent_hi > VALUE_TOL) & \
            (self.lo_row_total[self.ent_row] - self.ent_lo < 1 - VALUE_TOL)

    def _alloc_order(self, W: np.ndarray, descending: bool, tie: np.ndarray | None = None) -> np.ndarray:
        key = -W[self.ent_tgt] if descending else W[self.ent_tgt]
        if tie is None:
            return np.lexsort((self.ent_tgt, key, self.ent_row))
        return np.lexsort((self.ent_tgt, tie[self.ent_tgt], key, self.ent_row))

    def sweep(self, W: np.ndarray, descending: bool) -> np.ndarray:
        """One Jacobi backup: extreme-row inner product, per row."""
        order = self._alloc_order(W, descending)
        z = self._allocate(order)
        vals = np.zeros(self.n_rows)
        np.add.at(vals, self.ent_row[order], z * W[self.ent_tgt[order]])
        return vals

    def _allocate(self, order: np.ndarray) -> np.ndarray:
        """Greedy interval allocation for every row, entries pre-ordered."""
        row_of = self.ent_row[order]
        lo = self.ent_lo[order]
        hi = self.ent_hi[order]
        start = self.row_ptr[:-1]
        cum_hi = np.cumsum(hi)
        cum_lo = np.cumsum(lo)
        base_hi = np.zeros_like(cum_hi)
        base_lo = np.zeros_like(cum_lo)
        if self.n_rows > 1:
            base_hi[start[1:]] = cum_hi[start[1:] - 1]
            base_lo[start[1:]] = cum_lo[start[1:] - 1]
            base_hi = np.maximum.accumulate(base_hi)
            base_lo = np.maximum.accumulate(base_lo)
        H = cum_hi - base_hi
        L = cum_lo - base_lo
        lo_after = self.lo_row_total[row_of] - L
        S = np.minimum(H, 1.0 - lo_after)
        z = np.diff(np.concatenate(([0.0], S)))
        z[start] = S[start]
        np.maximum(z, 0.0, out=z)
        return z

    def first_argmax_rows(self, vals: np.ndarray, best: np.ndarray) -> np.ndarray:
        """Per state, the lowest row index attaining the per-state maximum."""
        cand = np.nonzero(vals >= best[self.row_state])[0]
        first = np.full(self.n_states, self.n_rows, dtype=np.int64)
        np.minimum.at(first, self.row_state[cand], cand)
        return first

    def extreme_chain_rows(self, W: np.ndarray, rows: np.ndarray, descending: bool,
                           tie: np.ndarray | None = None) -> list[dict[int, float]]:
        """Order-extreme allocation of the given rows at the final values.

        `tie` refines equal-value ranking; the favorable chain passes the
        hop distance to the target so that value ties resolve toward
        progress and the chain actually realizes its value-1 states.
        """
        order = self._alloc_order(W, descending, tie)
        z = self._allocate(order)
        keep = np.zeros(self.n_rows, dtype=bool)
        keep[rows] = True
        mask = keep[self.ent_row[order]]
        out: list[dict[int, float]] = [dict() for _ in range(self.n_states)]
        for k in np.nonzero(mask)[0]:
            q = int(self.row_state[self.ent_row[order[k]]])
            t = int(self.ent_tgt[order[k]])
            if z[k] > 0.0:
                out[q][t] = out[q].get(t, 0.0) + float(z[k])
        return out

    def _row_mask(self, rows: np.ndarray | None) -> np.ndarray:
        if rows is None:
            return np.ones(len(self.ent_row), dtype=bool)
        keep = np.zeros(self.n_rows, dtype=bool)
        keep[rows] = True
        return keep[self.ent_row]

    def hi_matrix(self, rows: np.ndarray | None = None) -> sp.csr_matrix:
        mask = self._row_mask(rows)
        return sp.csr_matrix(
            (self.ent_hi[mask], (self.row_state[self.ent_row[mask]], self.ent_tgt[mask])),
            shape=(self.n_states, self.n_states),
        )

    def lo_matrix(self, rows: np.ndarray | None = None) -> sp.csr_matrix:
        mask = self._row_mask(rows)
        return sp.csr_matrix(
            (self.ent_lo[mask], (self.row_state[self.ent_row[mask]], self.ent_tgt[mask])),
            shape=(self.n_states, self.n_states),
        )

    def realizable_matrix(self, rows: np.ndarray | None = None) -> sp.csr_matrix:
        """Adjacency of edges that can carry positive mass under some adversary."""
        mask = self._row_mask(rows) & self.ent_realizable
        return sp.csr_matrix(
            (np.ones(int(mask.sum())), (self.row_state[self.ent_row[mask]], self.ent_tgt[mask])),
            shape=(self.n_states, self.n_states),
        )


def _hop_distance(compiled: _Compiled, chosen_rows: np.ndarray, target: np.ndarray) -> np.ndarray:
    """BFS hop count to the target through realizable edges of the chosen rows."""
    n = compiled.n_states
    adj_t = compiled.realizable_matrix(chosen_rows).T.tocsr()
    dist = np.full(n, n + 1, dtype=np.int64)
    dist[target] = 0
    frontier = target.copy()
    level = 0
    while frontier.any():
        level += 1
        hit = np.asarray(adj_t[frontier].sum(axis=0)).ravel() > 0
        frontier = hit & (dist > n)
        dist[frontier] = level
    return dist


def _backward_closure(adj: sp.csr_matrix, seed: np.ndarray, allowed_mask: np.ndarray | None = None) -> np.ndarray:
    """States with an `adj` path into `seed`, optionally through allowed states."""
    adj_t = adj.T.tocsr()
    reach = seed.copy()
    frontier = seed.copy()
    while frontier.any():
        hit = np.asarray(adj_t[frontier].sum(axis=0)).ravel() > 0
        if allowed_mask is not None:
            hit &= allowed_mask
        frontier = hit & ~reach
        reach |= frontier
    return reach


def _exact_one_lower(compiled: _Compiled, chosen_rows: np.ndarray, target: np.ndarray) -> np.ndarray:
    """States with min reach probability exactly 1 under the fixed policy.

    The adversary avoids the target with positive probability iff a realizable
    path leads into a target-free set it can keep closed (hi mass inside >= 1
    and no forced mass outside); everything that cannot possibly reach such a
    set has min reach probability 1.
    """
    HI = compiled.hi_matrix(chosen_rows).tocsc()
    LO = compiled.lo_matrix(chosen_rows).tocsc()
    lo_total = np.asarray(LO.sum(axis=1)).ravel()
    in_c = ~target
    while True:
        mass_in = np.asarray(HI[:, in_c].sum(axis=1)).ravel()
        forced_out = lo_total - np.asarray(LO[:, in_c].sum(axis=1)).ravel()
        drop = in_c & ((mass_in < 1 - VALUE_TOL) | (forced_out > VALUE_TOL))
        if not drop.any():
            break
        in_c &= ~drop
    risky = _backward_closure(compiled.realizable_matrix(chosen_rows), in_c, allowed_mask=~target)
    return ~risky


def _exact_one_upper(compiled: _Compiled, target: np.ndarray) -> np.ndarray:
    """States with max reach probability exactly 1 (adversary cooperates).

    Greatest fixpoint over candidate sets Y: a state stays when some action
    has no forced mass outside Y and hi mass >= 1 inside Y, and a hi>0 path to
    the target survives through such states.
    """
    n = compiled.n_states
    ent_state = compiled.row_state[compiled.ent_row]
    Y = np.ones(n, dtype=bool)
    while True:
        out_lo = np.zeros(compiled.n_rows)
        in_hi = np.zeros(compiled.n_rows)
        outside = ~Y[compiled.ent_tgt]
        np.add.at(out_lo, compiled.ent_row, np.where(outside, compiled.ent_lo, 0.0))
        np.add.at(in_hi, compiled.ent_row, np.where(outside, 0.0, compiled.ent_hi))
        row_ok = (out_lo <= VALUE_TOL) & (in_hi >= 1 - VALUE_TOL) & Y[compiled.row_state]
        ent_ok = row_ok[compiled.ent_row] & Y[compiled.ent_tgt] & compiled.ent_realizable
        adj = sp.csr_matrix(
            (np.ones(int(ent_ok.sum())), (ent_state[ent_ok], compiled.ent_tgt[ent_ok])),
            shape=(n, n),
        )
        stay_ok = np.zeros(n, dtype=bool)
        stay_ok[compiled.row_state[row_ok]] = True
        newY = _backward_closure(adj, target & Y, allowed_mask=stay_ok)
        if np.array_equal(newY, Y):
            return Y
        Y = newY


def maximize_reach(model, target, bound: str = "lower", eps_conv: float = DEFAULT_EPS_CONV,
                   frozen: dict[int, int] | None = None,
                   allowed_actions: dict[int, list[int]] | None = None,
                   max_sweeps: int = MAX_SWEEPS) -> ReachSolution:
    """Maximize the lower- or upper-bound probability of reaching `target`.

    Returns values, the maximizing memoryless policy, the per-(state, action)
    one-step backup table at the final values, and the order-induced extreme
    chain realizing them.  `frozen` pins the action at selected states;
    `allowed_actions` restricts the search space everywhere else.
    """
    if hasattr(model, "model"):  # ProductModel
        model = model.model
    if isinstance(model, IMC):
        model = model.as_bmdp()
    if bound not in ("lower", "upper"):
        raise ValueError(f"bound must be 'lower' or 'upper', got {bound!r}")
    target = frozenset(int(t) for t in target)
    if not target:
        raise ReachError("empty target set")
    n = model.n_states
    frozen = frozen or {}
    allowed = {}
    for q in range(n):
        if q in frozen:
            allowed[q] = [frozen[q]]
        elif allowed_actions is not None:
            allowed[q] = list(allowed_actions[q])
        else:
            allowed[q] = list(model.actions[q])
    compiled = _Compiled(model, allowed)
    descending = bound == "upper"

    tgt_mask = np.zeros(n, dtype=bool)
    tgt_mask[list(target)] = True
    can_reach = _backward_closure(compiled.realizable_matrix(), tgt_mask)

    W = tgt_mask.astype(float)
    improving_row = np.full(n, -1, dtype=np.int64)
    pinned = tgt_mask.copy()          # exact-1 states stay at 1 once certified
    pin_row = np.full(n, -1, dtype=np.int64)
    iterations = 0
    residual = np.inf

    def extract_rows(vals, best):
        rows = compiled.first_argmax_rows(vals, best)
        for q in range(n):
            r = improving_row[q]
            if r >= 0 and vals[r] >= best[q] - 1e-12:
                rows[q] = r
            if pin_row[q] >= 0:
                rows[q] = pin_row[q]
        return rows

    while True:
        while iterations < max_sweeps:
            vals = compiled.sweep(W, descending)
            best = np.full(n, -np.inf)
            np.maximum.at(best, compiled.row_state, vals)
            W_next = np.where(pinned, 1.0, best)
            W_next[~can_reach] = 0.0
            improved = W_next > W + 1e-15
            if improved.any():
                firsts = compiled.first_argmax_rows(vals, best)
                improving_row[improved] = firsts[improved]
            residual = float(np.max(np.abs(W_next - W)))
            W = W_next
            iterations += 1
            if residual < eps_conv:
                break
        vals = compiled.sweep(W, descending)
        best = np.full(n, -np.inf)
        np.maximum.at(best, compiled.row_state, vals)
        chosen = extract_rows(vals, best)
        if bound == "lower":
            ones = _exact_one_lower(compiled, chosen, tgt_mask)
        else:
            ones = _exact_one_upper(compiled, tgt_mask)
        ones &= can_reach
        newly = ones & ~pinned
        pinned |= ones
        pin_row[newly] = chosen[newly]
        W[pinned] = 1.0
        if not newly.any():
            break

    # final backup defines the reported values and the action table
    vals = compiled.sweep(W, descending)
    best = np.full(n, -np.inf)
    np.maximum.at(best, compiled.row_state, vals)
    chosen = extract_rows(vals, best)
    values = np.where(pinned, 1.0, best)
    values[~can_reach] = 0.0
    values = np.clip(values, 0.0, 1.0)

    table = {(int(compiled.row_state[r]), int(compiled.row_action[r])): float(vals[r])
             for r in range(compiled.n_rows)}
    tie = None
    if descending:
        tie = _hop_distance(compiled, chosen, tgt_mask).astype(float)
    mc_rows = _renormalize_rows(compiled.extreme_chain_rows(values, chosen, descending, tie))
    extreme_mc = MarkovChain(n, mc_rows, labels=list(model.labels), initial=set(model.initial))
    policy = MemorylessPolicy({q: int(compiled.row_action[chosen[q]]) for q in range(n)})
    return ReachSolution(values, policy, table, extreme_mc, iterations, residual,
                         target=target, bound=bound)


def _renormalize_rows(rows: list[dict[int, float]]) -> list[dict[int, float]]:
    out = []
    for row in rows:
        s = sum(row.values())
        if abs(s - 1.0) > 1e-13:
            row = {t: p / s for t, p in row.items()}
        out.append(row)
    return out


# -- exact Markov chain analysis ----------------------------------------------

def chain_matrix(chain: MarkovChain) -> sp.csr_matrix:
    data, ri, ci = [], [], []
    for q, row in enumerate(chain.rows):
        for t, p in row.items():
            if p > 0:
                ri.append(q)
                ci.append(t)
                data.append(p)
    return sp.csr_matrix((data, (ri, ci)), shape=(chain.n_states, chain.n_states))


def bsccs(chain: MarkovChain) -> list[frozenset[int]]:
    """Bottom strongly connected components of the >0 edge graph."""
    P = chain_matrix(chain)
    n_comp, labels = connected_components(P, directed=True, connection="strong")
    has_exit = np.zeros(n_comp, dtype=bool)
    for q in range(chain.n_states):
        for t, p in chain.rows[q].items():
            if p > 0 and labels[t] != labels[q]:
                has_exit[labels[q]] = True
    return [frozenset(int(q) for q in np.nonzero(labels == c)[0])
            for c in range(n_comp) if not has_exit[c]]


def reach_probability(chain: MarkovChain, target, residual_tol: float = 1e-10) -> np.ndarray:
    """P(eventually reach `target`) for every state, by absorbing linear solve."""
    n = chain.n_states
    tgt = np.zeros(n, dtype=bool)
    tgt[list(target)] = True
    P = chain_matrix(chain)
    reach = _backward_closure(P, tgt)
    x = np.zeros(n)
    x[tgt] = 1.0
    idx = np.nonzero(reach & ~tgt)[0]
    if len(idx):
        A = sp.identity(len(idx), format="csc") - P[idx][:, idx].tocsc()
        b = np.asarray(P[idx][:, tgt].sum(axis=1)).ravel()
        sol = sp.linalg.spsolve(A, b)
        sol = np.atleast_1d(sol)
        res = float(np.max(np.abs(A @ sol - b)))
        if res > residual_tol:
            raise ReachError(f"linear solve residual {res:.3g} exceeds {residual_tol}")
        x[idx] = np.clip(sol, 0.0, 1.0)
    return x


class ChainHitting:
    """All-pairs hitting probabilities of a Markov chain.

    Built on the absorbing-chain decomposition: with N the fundamental matrix
    over transient states, h(i->j) = N_ij / N_jj for transient j, and for j in
    a recurrent class, h(i->j) is the absorption probability into the class.
    h(i->i) is 1 (reach at time >= 0).
    """

    def __init__(self, chain: MarkovChain):
        self.chain = chain
        self.n = chain.n_states
        self.classes = bsccs(chain)
        self.class_of = np.full(self.n, -1, dtype=np.int64)
        for c, members in enumerate(self.classes):
            for q in members:
                self.class_of[q] = c
        self.transient = np.nonzero(self.class_of < 0)[0]
        self.t_index = {int(q): k for k, q in enumerate(self.transient)}
        P = chain_matrix(chain)
        nt = len(self.transient)
        self._nt = nt
        if nt:
            Q = P[self.transient][:, self.transient].tocsc()
            self._A = sp.identity(nt, format="csc") - Q
            self._lu = sp.linalg.splu(self._A.tocsc())
            self._absorb = np.zeros((nt, len(self.classes)))
            for c, members in enumerate(self.classes):
                b = np.asarray(P[self.transient][:, sorted(members)].sum(axis=1)).ravel()
                self._absorb[:, c] = self._lu.solve(b)
            self._diag: dict[int, float] = {}

    def _fundamental_diag(self, j_local: int) -> float:
        if j_local not in self._diag:
            e = np.zeros(self._nt)
            e[j_local] = 1.0
            self._diag[j_local] = float(self._lu.solve(e)[j_local])
        return self._diag[j_local]

    def from_source(self, source: int) -> np.ndarray:
        out = np.zeros(self.n)
        c_src = self.class_of[source]
        if c_src >= 0:
            for q in self.classes[c_src]:
                out[q] = 1.0
            return out
        k = self.t_index[source]
        e = np.zeros(self._nt)
        e[k] = 1.0
        n_row = self._lu.solve(e, trans="T")  # row k of the fundamental matrix
        for j, qj in enumerate(self.transient):
            if n_row[j] <= 0:
                continue
            d = self._fundamental_diag(j)
            out[qj] = min(1.0, n_row[j] / d) if d > 0 else 0.0
        out[source] = 1.0
        for c, members in enumerate(self.classes):
            p_abs = min(1.0, float(self._absorb[k, c]))
            for q in members:
                out[q] = p_abs
        return out

    def summed_from(self, sources) -> np.ndarray:
        """Sum over `sources` of the per-source hitting probability vectors."""
        out = np.zeros(self.n)
        src_mask = np.zeros(self.n, dtype=bool)
        src_mask[list(sources)] = True
        if self._nt:
            chi = src_mask[self.transient].astype(float)
            y = self._lu.solve(chi, trans="T")  # y_j = sum_src N[src, j]
            for j, qj in enumerate(self.transient):
                if y[j] <= 0:
                    continue
                d = self._fundamental_diag(j)
                out[qj] = y[j] / d if d > 0 else 0.0
            absorbed = chi @ self._absorb
        else:
            absorbed = np.zeros(len(self.classes))
        for c, members in enumerate(self.classes):
            w = float(absorbed[c]) + sum(1 for q in members if src_mask[q])
            for q in members:
                out[q] = w
        return out


def mc_reachability(chain: MarkovChain, source: int) -> np.ndarray:
    """Probability of ever reaching each state from `source` (time >= 0)."""
    return ChainHitting(chain).from_source(source)
