"""Axis-aligned box primitives shared by the abstraction and input-space code.

Everything here works on closed boxes [lo_1, hi_1] x ... x [lo_n, hi_n]
represented by a pair of float vectors.  Unions of boxes are kept as flat
lists; the only structural guarantee the algorithms need is pairwise
interior-disjointness, which the constructors below preserve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TOL = 1e-9


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    """Closed axis-aligned box.  `lo <= hi` componentwise."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise GeometryError(f"dimension mismatch: {self.lo} vs {self.hi}")
        if any(l > h + TOL for l, h in zip(self.lo, self.hi)):
            raise GeometryError(f"inverted box: lo={self.lo} hi={self.hi}")

    @staticmethod
    def of(lo, hi) -> "Rect":
        return Rect(tuple(float(x) for x in lo), tuple(float(x) for x in hi))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def sides(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def volume(self) -> float:
        return float(np.prod(self.sides)) if self.dim else 1.0

    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    def contains_point(self, x, tol: float = TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= np.asarray(self.lo) - tol) and np.all(x <= np.asarray(self.hi) + tol))

    def contains_rect(self, other: "Rect", tol: float = TOL) -> bool:
        return bool(
            np.all(np.asarray(other.lo) >= np.asarray(self.lo) - tol)
            and np.all(np.asarray(other.hi) <= np.asarray(self.hi) + tol)
        )

    def intersects(self, other: "Rect", tol: float = TOL) -> bool:
        """True when the closed boxes overlap on a set of positive measure."""
        return bool(
            np.all(np.asarray(self.lo) < np.asarray(other.hi) - tol)
            and np.all(np.asarray(other.lo) < np.asarray(self.hi) - tol)
        )

    def intersect(self, other: "Rect") -> "Rect | None":
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi + TOL):
            return None
        return Rect.of(lo, np.maximum(lo, hi))

    def translate(self, u) -> "Rect":
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise GeometryError(f"translation dim {u.shape} does not match box dim {self.dim}")
        return Rect.of(np.asarray(self.lo) + u, np.asarray(self.hi) + u)

    def split_halves(self) -> tuple["Rect", "Rect"]:
        """Bisect along the longest side; ties go to the lowest axis index."""
        sides = self.sides
        if np.all(sides <= TOL):
            raise GeometryError(f"cannot split degenerate box {self}")
        axis = int(np.argmax(sides))
        mid = 0.5 * (self.lo[axis] + self.hi[axis])
        hi1 = list(self.hi)
        hi1[axis] = mid
        lo2 = list(self.lo)
        lo2[axis] = mid
        return Rect.of(self.lo, hi1), Rect.of(lo2, self.hi)

    def grid_points(self, counts) -> np.ndarray:
        """Regular mesh including both endpoints; degenerate axes yield the midpoint."""
        axes = []
        for k in range(self.dim):
            n = int(counts[k]) if np.ndim(counts) else int(counts)
            if self.hi[k] - self.lo[k] <= TOL or n == 1:
                axes.append(np.array([0.5 * (self.lo[k] + self.hi[k])]))
            else:
                axes.append(np.linspace(self.lo[k], self.hi[k], n))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def project_point(rect: Rect, x) -> np.ndarray:
    """Closest point of `rect` to `x` (componentwise clamp)."""
    return np.clip(np.asarray(x, dtype=float), rect.lo, rect.hi)


@dataclass
class BoxUnion:
    """Finite union of interior-disjoint boxes; the working representation of
    input regions and trigger regions."""

    boxes: list[Rect] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.boxes[0].dim if self.boxes else 0

    def is_empty(self, tol: float = TOL) -> bool:
        return self.volume() <= tol

    def volume(self) -> float:
        return float(sum(b.volume() for b in self.boxes))

    def contains_point(self, x, tol: float = TOL) -> bool:
        return any(b.contains_point(x, tol) for b in self.boxes)

    def __iter__(self):
        return iter(self.boxes)


def _axis_breaks(boxes: list[Rect], dim: int) -> list[np.ndarray]:
    breaks = [set() for _ in range(dim)]
    for b in boxes:
        for k in range(dim):
            breaks[k].add(float(b.lo[k]))
            breaks[k].add(float(b.hi[k]))
    out = []
    for k in range(dim):
        vals = np.array(sorted(breaks[k]))
        # collapse numerically identical breakpoints
        keep = [vals[0]]
        for v in vals[1:]:
            if v - keep[-1] > TOL:
                keep.append(v)
        out.append(np.array(keep))
    return out


def arrangement_cells(domain_boxes: list[Rect], cut_boxes: list[Rect]) -> list[Rect]:
    """Tile `domain_boxes` into elementary boxes induced by every boundary of
    `domain_boxes` and `cut_boxes`.  Returned boxes have positive volume and
    interior-disjoint union equal to the domain."""
    if not domain_boxes:
        return []
    dim = domain_boxes[0].dim
    breaks = _axis_breaks(list(domain_boxes) + list(cut_boxes), dim)
    cells: list[Rect] = []
    for dom in domain_boxes:
        axes = []
        for k in range(dim):
            ax = breaks[k]
            inside = ax[(ax > dom.lo[k] + TOL) & (ax < dom.hi[k] - TOL)]
            pts = np.concatenate(([dom.lo[k]], inside, [dom.hi[k]]))
            axes.append(pts)
        for idx in np.ndindex(*[len(a) - 1 for a in axes]):
            lo = [axes[k][idx[k]] for k in range(dim)]
            hi = [axes[k][idx[k] + 1] for k in range(dim)]
            cell = Rect.of(lo, hi)
            if cell.volume() > TOL:
                cells.append(cell)
    return cells


def merge_boxes(boxes: list[Rect]) -> list[Rect]:
    """Greedy pairwise merge of boxes that share a full face, until stable.
    Produces maximal boxes for 1-D tilings and a compact cover in general."""
    boxes = list(boxes)
    changed = True
    while changed:
        changed = False
        out: list[Rect] = []
        used = [False] * len(boxes)
        for i, a in enumerate(boxes):
            if used[i]:
                continue
            for j in range(i + 1, len(boxes)):
                if used[j]:
                    continue
                b = boxes[j]
                m = _face_merge(a, b)
                if m is not None:
                    a = m
                    used[j] = True
                    changed = True
            out.append(a)
        boxes = out
    return boxes


def _face_merge(a: Rect, b: Rect) -> Rect | None:
    diff_axis = -1
    for k in range(a.dim):
        same = abs(a.lo[k] - b.lo[k]) <= TOL and abs(a.hi[k] - b.hi[k]) <= TOL
        if not same:
            if diff_axis >= 0:
                return None
            diff_axis = k
    if diff_axis < 0:
        return a  # identical boxes
    k = diff_axis
    if abs(a.hi[k] - b.lo[k]) <= TOL:
        lo, hi = list(a.lo), list(a.hi)
        hi[k] = b.hi[k]
        return Rect.of(lo, hi)
    if abs(b.hi[k] - a.lo[k]) <= TOL:
        lo, hi = list(b.lo), list(b.hi)
        hi[k] = a.hi[k]
        return Rect.of(lo, hi)
    return None


def subtract(domain: list[Rect], holes: list[Rect]) -> list[Rect]:
    """Union of `domain` minus union of `holes`, as interior-disjoint boxes."""
    cells = arrangement_cells(domain, holes)
    kept = [c for c in cells if not any(h.contains_point(c.center()) for h in holes)]
    return merge_boxes(kept)
