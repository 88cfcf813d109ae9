"""BMDP abstractions of additive-noise systems over rectangular partitions.

The transition-probability intervals come from a per-axis product formula:
the most favorable placement of the (symmetric, unimodal, truncated) noise
mode against the target box gives the upper bound, the least favorable
endpoint gives the lower bound.  Mass that would leave the domain is credited
to the boundary cell it clamps onto, implemented by extending the target
boxes of boundary cells outward before evaluating the bounds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, ndtri

from .geometry import Rect, subtract
from .models import BMDP, validate_bmdp

BOUND_DROP_TOL = 1e-12
SYMMETRY_TOL = 1e-9


class AbstractionError(ValueError):
    pass


class LabelingError(AbstractionError):
    """A partition cell straddles a labeling-region boundary."""


class UnsoundReachError(AbstractionError):
    """Sampling found an image point outside the reach over-approximation."""


# -- noise ---------------------------------------------------------------------


class AxisNoise:
    """One disturbance axis: bounded support, symmetric unimodal density."""

    def __init__(self, support, mode, cdf, ppf, name="custom"):
        self.support = (float(support[0]), float(support[1]))
        self.mode = float(mode)
        self._cdf = cdf
        self._ppf = ppf
        self.name = name

    def cdf(self, x):
        return np.clip(self._cdf(np.asarray(x, dtype=float)), 0.0, 1.0)

    def ppf(self, u):
        return self._ppf(np.asarray(u, dtype=float))

    def check_symmetry(self, n_samples: int = 64, tol: float = SYMMETRY_TOL):
        lo, hi = self.support
        half = max(self.mode - lo, hi - self.mode)
        t = np.linspace(0.0, half, n_samples)
        left = self.cdf(self.mode - t)
        right = self.cdf(self.mode + t)
        err = float(np.max(np.abs(right - (1.0 - left))))
        if err > tol:
            raise AbstractionError(f"noise axis is not symmetric about {self.mode}: error {err:.2e}")


def truncated_gaussian(mean: float, var: float, support) -> AxisNoise:
    a, b = float(support[0]), float(support[1])
    sigma = math.sqrt(var)
    phi = lambda x: 0.5 * (1.0 + erf((x - mean) / (sigma * math.sqrt(2.0))))
    za, zb = phi(a), phi(b)
    denom = zb - za
    if denom <= 0:
        raise AbstractionError(f"degenerate truncation [{a}, {b}] for N({mean}, {var})")

    def cdf(x):
        return np.where(x <= a, 0.0, np.where(x >= b, 1.0, (phi(x) - za) / denom))

    def ppf(u):
        return mean + sigma * ndtri(za + np.clip(u, 0.0, 1.0) * denom)

    return AxisNoise((a, b), mean, cdf, ppf, name="truncated-gaussian")


def uniform_noise(support) -> AxisNoise:
    a, b = float(support[0]), float(support[1])
    if b <= a:
        raise AbstractionError(f"empty uniform support [{a}, {b}]")

    def cdf(x):
        return np.clip((x - a) / (b - a), 0.0, 1.0)

    def ppf(u):
        return a + np.clip(u, 0.0, 1.0) * (b - a)

    return AxisNoise((a, b), 0.5 * (a + b), cdf, ppf, name="uniform")


@dataclass
class NoiseModel:
    axes: list[AxisNoise]

    def __post_init__(self):
        for ax in self.axes:
            ax.check_symmetry()

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def support_lo(self) -> np.ndarray:
        return np.array([ax.support[0] for ax in self.axes])

    @property
    def support_hi(self) -> np.ndarray:
        return np.array([ax.support[1] for ax in self.axes])

    @property
    def modes(self) -> np.ndarray:
        return np.array([ax.mode for ax in self.axes])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random((n, self.dim))
        return np.stack([self.axes[k].ppf(u[:, k]) for k in range(self.dim)], axis=1)


# -- reach-set over-approximation ------------------------------------------------


class AffineMap:
    """x' = M x + c with exact interval-arithmetic reach boxes."""

    def __init__(self, matrix, offset):
        self.M = np.asarray(matrix, dtype=float)
        self.c = np.asarray(offset, dtype=float)

    def __call__(self, x):
        return np.asarray(x) @ self.M.T + self.c

    def reach(self, rect: Rect) -> Rect:
        lo = np.asarray(rect.lo)
        hi = np.asarray(rect.hi)
        pos = np.maximum(self.M, 0.0)
        neg = np.minimum(self.M, 0.0)
        return Rect.of(pos @ lo + neg @ hi + self.c, pos @ hi + neg @ lo + self.c)


class MonotoneMap:
    """Componentwise-monotone map; reach boxes come from two corner evaluations
    per output component, following the sign pattern."""

    def __init__(self, fn, dim: int, signs=None):
        self.fn = fn
        self.dim = dim
        self.signs = np.ones((dim, dim)) if signs is None else np.asarray(signs, dtype=float)

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def reach(self, rect: Rect) -> Rect:
        lo = np.asarray(rect.lo)
        hi = np.asarray(rect.hi)
        out_lo = np.empty(self.dim)
        out_hi = np.empty(self.dim)
        for i in range(self.dim):
            cmin = np.where(self.signs[i] > 0, lo, hi)
            cmax = np.where(self.signs[i] > 0, hi, lo)
            out_lo[i] = self.fn(cmin[None, :])[0, i]
            out_hi[i] = self.fn(cmax[None, :])[0, i]
        return Rect.of(out_lo, out_hi)


class TabulatedReach:
    """User-supplied reach oracle next to a pointwise map."""

    def __init__(self, fn, reach_fn):
        self.fn = fn
        self.reach_fn = reach_fn

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def reach(self, rect: Rect) -> Rect:
        return self.reach_fn(rect)


def bistable_map(a: float, b: float, dt: float) -> MonotoneMap:
    def fn(x):
        x = np.atleast_2d(x)
        x1, x2 = x[:, 0], x[:, 1]
        y1 = x1 + (-a * x1 + x2) * dt
        y2 = x2 + (x1 * x1 / (x1 * x1 + 1.0) - b * x2) * dt
        return np.stack([y1, y2], axis=1)

    if a * dt >= 1 or b * dt >= 1:
        raise AbstractionError("time step too large for componentwise monotonicity")
    return MonotoneMap(fn, 2)


def reach_overapprox(cell: Rect, system: "SystemModel", samples_per_axis: int = 8) -> Rect:
    """Reach box of the deterministic map over `cell`, with a sampled
    containment check (the oracle must cover a grid of image points)."""
    box = system.dynamics.reach(cell)
    pts = cell.grid_points(samples_per_axis)
    img = np.atleast_2d(system.dynamics(pts))
    tol = 1e-9
    if np.any(img < np.asarray(box.lo) - tol) or np.any(img > np.asarray(box.hi) + tol):
        raise UnsoundReachError(f"reach box {box} misses sampled image points of {cell}")
    return box


def shift_reach(r: Rect, u) -> Rect:
    """Translate the reach box by an input offset."""
    return r.translate(u)


def split_rect(r: Rect) -> tuple[Rect, Rect]:
    """Bisect along the longest side (ties: lowest axis)."""
    return r.split_halves()


# -- interval transition bounds ---------------------------------------------------


def bounds_to_targets(reach: Rect, tg_lo: np.ndarray, tg_hi: np.ndarray,
                      noise: NoiseModel) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized probability bounds from a shifted reach box to many target
    boxes: per axis, the noise mode is pulled toward / pushed away from the
    target center within the reach interval, and the per-axis CDF masses
    multiply."""
    tg_lo = np.atleast_2d(tg_lo)
    tg_hi = np.atleast_2d(tg_hi)
    r_lo = np.asarray(reach.lo)
    r_hi = np.asarray(reach.hi)
    mid = 0.5 * (r_lo + r_hi)
    hi_f = np.ones(tg_lo.shape[0])
    lo_f = np.ones(tg_lo.shape[0])
    for k in range(noise.dim):
        a = tg_lo[:, k]
        b = tg_hi[:, k]
        s_ideal = 0.5 * (a + b) - noise.axes[k].mode
        s_max = np.clip(s_ideal, r_lo[k], r_hi[k])
        s_min = np.where(s_max > mid[k], r_lo[k], r_hi[k])
        F = noise.axes[k].cdf
        hi_f = hi_f * np.clip(F(b - s_max) - F(a - s_max), 0.0, 1.0)
        lo_f = lo_f * np.clip(F(b - s_min) - F(a - s_min), 0.0, 1.0)
    return lo_f, hi_f


def transition_bounds(reach: Rect, target: Rect, noise: NoiseModel) -> tuple[float, float]:
    """Probability interval for one (already input-shifted) reach box and one
    target box."""
    lo, hi = bounds_to_targets(reach, np.asarray([target.lo]), np.asarray([target.hi]), noise)
    return float(lo[0]), float(hi[0])


def bounds_grid(reach_lo: np.ndarray, reach_hi: np.ndarray, tg_lo: np.ndarray,
                tg_hi: np.ndarray, noise: NoiseModel) -> tuple[np.ndarray, np.ndarray]:
    """Transition bounds for many reach boxes against many targets at once.

    reach arrays are (m, dim), target arrays (k, dim); returns (m, k) bounds.
    """
    r_lo = np.asarray(reach_lo)[:, None, :]
    r_hi = np.asarray(reach_hi)[:, None, :]
    a = np.asarray(tg_lo)[None, :, :]
    b = np.asarray(tg_hi)[None, :, :]
    mid = 0.5 * (r_lo + r_hi)
    m, k = r_lo.shape[0], a.shape[1]
    hi_f = np.ones((m, k))
    lo_f = np.ones((m, k))
    for ax in range(noise.dim):
        s_ideal = 0.5 * (a[..., ax] + b[..., ax]) - noise.axes[ax].mode
        s_max = np.clip(s_ideal, r_lo[..., ax], r_hi[..., ax])
        s_min = np.where(s_max > mid[..., ax], r_lo[..., ax], r_hi[..., ax])
        F = noise.axes[ax].cdf
        hi_f *= np.clip(F(b[..., ax] - s_max) - F(a[..., ax] - s_max), 0.0, 1.0)
        lo_f *= np.clip(F(b[..., ax] - s_min) - F(a[..., ax] - s_min), 0.0, 1.0)
    return lo_f, hi_f


# -- partitions and systems -------------------------------------------------------


@dataclass
class Partition:
    cells: list[Rect]
    domain: Rect

    def __post_init__(self):
        self.los = np.array([c.lo for c in self.cells], dtype=float)
        self.his = np.array([c.hi for c in self.cells], dtype=float)

    def __len__(self):
        return len(self.cells)

    def locate(self, x) -> int:
        x = np.asarray(x, dtype=float)
        inside = np.all(x >= self.los - 1e-12, axis=1) & np.all(x <= self.his + 1e-12, axis=1)
        idx = np.nonzero(inside)[0]
        if len(idx) == 0:
            raise AbstractionError(f"point {x} is outside the partition")
        return int(idx[0])

    def validate(self, tol: float = 1e-9):
        vol = sum(c.volume() for c in self.cells)
        if abs(vol - self.domain.volume()) > tol * max(1.0, self.domain.volume()):
            raise AbstractionError(
                f"cells cover volume {vol}, domain has {self.domain.volume()}")
        for c in self.cells:
            if not self.domain.contains_rect(c):
                raise AbstractionError(f"cell {c} leaves the domain")
        n = len(self.cells)
        for i in range(n):
            o = (np.minimum(self.his[i], self.his[i + 1:]) -
                 np.maximum(self.los[i], self.los[i + 1:]))
            bad = np.nonzero(np.all(o > tol, axis=1))[0]
            if len(bad):
                raise AbstractionError(f"cells {i} and {i + 1 + bad[0]} overlap")

    @staticmethod
    def regular(domain: Rect, counts) -> "Partition":
        axes = []
        for k in range(domain.dim):
            n = int(counts[k]) if np.ndim(counts) else int(counts)
            axes.append(np.linspace(domain.lo[k], domain.hi[k], n + 1))
        cells = []
        for idx in np.ndindex(*[len(a) - 1 for a in axes]):
            lo = [axes[k][idx[k]] for k in range(domain.dim)]
            hi = [axes[k][idx[k] + 1] for k in range(domain.dim)]
            cells.append(Rect.of(lo, hi))
        return Partition(cells, domain)

    def refine(self, cell_ids) -> tuple["Partition", list[int]]:
        """Split the given cells in half along their longest side.

        Returns the refined partition and a child -> parent index map."""
        chosen = set(int(i) for i in cell_ids)
        new_cells: list[Rect] = []
        parents: list[int] = []
        for i, cell in enumerate(self.cells):
            if i in chosen:
                a, b = cell.split_halves()
                new_cells.extend((a, b))
                parents.extend((i, i))
            else:
                new_cells.append(cell)
                parents.append(i)
        return Partition(new_cells, self.domain), parents


@dataclass
class SystemModel:
    dim: int
    dynamics: object           # callable on (n, dim) arrays, with .reach(Rect)
    noise: NoiseModel
    domain: Rect
    modes: list[np.ndarray] = field(default_factory=list)
    input_box: Rect | None = None
    label_regions: dict[str, list[Rect]] = field(default_factory=dict)

    def reach(self, cell: Rect) -> Rect:
        return reach_overapprox(cell, self)

    def step(self, x: np.ndarray, u, w: np.ndarray) -> np.ndarray:
        """One closed-loop step with boundary clamping."""
        nxt = np.atleast_2d(self.dynamics(x)) + np.asarray(u) + w
        return np.clip(nxt, self.domain.lo, self.domain.hi)


def cell_labels(partition: Partition, label_regions: dict[str, list[Rect]],
                tol: float = 1e-9) -> list[frozenset[str]]:
    """Label of every cell; a cell straddling a region boundary is an error."""
    labels = [set() for _ in partition.cells]
    for prop, boxes in label_regions.items():
        for i, cell in enumerate(partition.cells):
            vol = cell.volume()
            leftover = sum(r.volume() for r in subtract([cell], list(boxes)))
            if leftover <= tol * max(vol, 1.0):
                labels[i].add(prop)
            elif vol - leftover > tol * max(vol, 1.0):
                raise LabelingError(
                    f"cell {i} {cell} straddles the boundary of region '{prop}'")
    return [frozenset(l) for l in labels]


def _extended_target_arrays(partition: Partition, domain: Rect):
    """Per-cell extended boxes: faces on the domain boundary reach outward so
    that clamped escape mass lands in the right boundary cell."""
    lo = partition.los.copy()
    hi = partition.his.copy()
    at_lo = np.abs(lo - np.asarray(domain.lo)) <= 1e-12
    at_hi = np.abs(hi - np.asarray(domain.hi)) <= 1e-12
    return lo, hi, at_lo, at_hi


def candidate_targets(partition: Partition, query_lo: np.ndarray, query_hi: np.ndarray,
                      at_lo: np.ndarray, at_hi: np.ndarray,
                      restrict=None) -> np.ndarray:
    """Indices of cells whose (boundary-extended) box meets the query box."""
    lo_eff = np.where(at_lo, -np.inf, partition.los)
    hi_eff = np.where(at_hi, np.inf, partition.his)
    ok = np.all(query_lo <= hi_eff + 1e-12, axis=1) & np.all(query_hi >= lo_eff - 1e-12, axis=1)
    idx = np.nonzero(ok)[0]
    if restrict is not None:
        idx = idx[np.isin(idx, restrict)]
    return idx


def row_for_input(partition: Partition, system: SystemModel, base_reach: Rect, u,
                  at_lo: np.ndarray, at_hi: np.ndarray, restrict=None,
                  drop_tol: float = BOUND_DROP_TOL):
    """Interval row of one source cell under one input offset."""
    reach = base_reach.translate(u)
    r_lo = np.asarray(reach.lo)
    r_hi = np.asarray(reach.hi)
    q_lo = r_lo + system.noise.support_lo
    q_hi = r_hi + system.noise.support_hi
    idx = candidate_targets(partition, q_lo, q_hi, at_lo, at_hi, restrict)
    if len(idx) == 0:
        return {}
    tg_lo = partition.los[idx].copy()
    tg_hi = partition.his[idx].copy()
    # boundary extension: pull the face out to the farthest attainable point
    tg_lo = np.where(at_lo[idx], np.minimum(tg_lo, q_lo), tg_lo)
    tg_hi = np.where(at_hi[idx], np.maximum(tg_hi, q_hi), tg_hi)
    lo_v, hi_v = bounds_to_targets(reach, tg_lo, tg_hi, system.noise)
    row = {}
    for j, t in enumerate(idx):
        if hi_v[j] > drop_tol:
            row[int(t)] = (float(min(lo_v[j], hi_v[j])), float(hi_v[j]))
    return row


def build_bmdp(partition: Partition, system: SystemModel, modes=None,
               target_cache: dict | None = None,
               reach_cache: dict | None = None,
               validate: bool = True):
    """Abstraction of the system over `partition` with one action per mode.

    `target_cache` maps (cell_id, mode_id) to an array of admissible target
    ids (used after refinement: children of unreachable cells stay
    unreachable).  Returns the model and the mode side table.
    """
    modes = [np.asarray(m, dtype=float) for m in (modes if modes is not None else system.modes)]
    if not modes:
        raise AbstractionError("no modes supplied")
    labels = cell_labels(partition, system.label_regions)
    lo_arr, hi_arr, at_lo, at_hi = _extended_target_arrays(partition, system.domain)
    n = len(partition)
    rows = {}
    actions = [list(range(len(modes))) for _ in range(n)]
    for j in range(n):
        key = partition.cells[j]
        if reach_cache is not None and key in reach_cache:
            base_reach = reach_cache[key]
        else:
            base_reach = system.reach(partition.cells[j])
            if reach_cache is not None:
                reach_cache[key] = base_reach
        for a, u in enumerate(modes):
            restrict = None if target_cache is None else target_cache.get((j, a))
            rows[(j, a)] = row_for_input(partition, system, base_reach, u, at_lo, at_hi,
                                         restrict=restrict)
    model = BMDP(n, actions, rows, labels=labels, initial=set(range(n)))
    if validate:
        report = validate_bmdp(model)
        if not report.ok():
            raise AbstractionError(f"constructed abstraction is invalid:\n{report}")
    return model, {a: modes[a] for a in range(len(modes))}


# -- configuration ----------------------------------------------------------------


def _rect_from_cfg(d) -> Rect:
    return Rect.of(d["lo"], d["hi"])


def load_system(cfg) -> SystemModel:
    """Build a system from a config dict or JSON path."""
    if isinstance(cfg, (str, bytes)) or hasattr(cfg, "read"):
        with open(cfg) as fh:
            cfg = json.load(fh)
    domain = _rect_from_cfg(cfg["domain"])
    dim = domain.dim
    dyn_cfg = cfg["dynamics"]
    kind = dyn_cfg["type"]
    if kind == "bistable":
        dynamics = bistable_map(dyn_cfg["a"], dyn_cfg["b"], dyn_cfg["dt"])
    elif kind == "affine":
        dynamics = AffineMap(dyn_cfg["matrix"], dyn_cfg.get("offset", np.zeros(dim)))
    elif kind == "monotone-table":
        raise AbstractionError("monotone-table dynamics require a Python-level oracle")
    else:
        raise AbstractionError(f"unknown dynamics type {kind!r}")
    axes = []
    for ax_cfg in cfg["noise"]:
        if ax_cfg["dist"] == "truncated-gaussian":
            axes.append(truncated_gaussian(ax_cfg["mean"], ax_cfg["var"], ax_cfg["support"]))
        elif ax_cfg["dist"] == "uniform":
            axes.append(uniform_noise(ax_cfg["support"]))
        else:
            raise AbstractionError(f"unknown noise dist {ax_cfg['dist']!r}")
    noise = NoiseModel(axes)
    modes = [np.asarray(m, dtype=float) for m in cfg.get("modes", [])]
    input_box = _rect_from_cfg(cfg["input_box"]) if "input_box" in cfg else None
    labels = {prop: [_rect_from_cfg(b) for b in boxes]
              for prop, boxes in cfg.get("labels", {}).items()}
    return SystemModel(dim, dynamics, noise, domain, modes=modes,
                       input_box=input_box, label_regions=labels)


def export_partition_csv(partition: Partition, path):
    with open(path, "w") as fh:
        dim = partition.domain.dim
        header = ["cell_id"] + [f"lo_{k}" for k in range(dim)] + [f"hi_{k}" for k in range(dim)]
        fh.write(",".join(header) + "\n")
        for i, c in enumerate(partition.cells):
            vals = [str(i)] + [f"{v:.17g}" for v in c.lo] + [f"{v:.17g}" for v in c.hi]
            fh.write(",".join(vals) + "\n")
