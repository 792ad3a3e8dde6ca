"""Uniform Cartesian discretisation of the closed unit disc.

Nodes live on ``[-1, 1]^2`` with spacing ``h = 2 / (n - 1)``.  A node is
*interior* when ``|x| < 1``; nodes outside the disc that touch an interior
node through one of the four axis neighbours are *boundary* nodes and carry the
polar angle of their position.  Everything else is *exterior*.

Quadrature is first order: a node contributes the area of its dual cell
clipped to the integration region, estimated with a 4x4 sub-sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXTERIOR, INTERIOR, BOUNDARY = 0, 1, 2
CLASS_NAMES = {EXTERIOR: "exterior", INTERIOR: "interior", BOUNDARY: "boundary"}

_SUB = 4
_SUB_OFFSETS = ((np.arange(_SUB) + 0.5) / _SUB - 0.5)


class GridError(ValueError):
    pass


class DiscUnresolved(GridError):
    pass


@dataclass(frozen=True)
class Disc:
    """The disc ``B_r(a)``."""

    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise GridError(f"disc radius must be positive, got {self.radius}")
        c = (float(self.center[0]), float(self.center[1]))
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))
        if math.hypot(*c) >= 1.0 + self.radius:
            raise GridError("disc does not meet the unit disc")

    def scaled(self, factor: float) -> "Disc":
        return Disc(self.center, self.radius * factor)

    def inside_unit_disc(self, tol: float = 0.0) -> bool:
        return math.hypot(*self.center) + self.radius <= 1.0 + tol


UNIT_DISC = Disc()


class DiscGrid:
    """Node set, node classes and quadrature weights for a given resolution."""

    def __init__(self, resolution: int):
        if int(resolution) != resolution or resolution < 17 or resolution % 2 == 0:
            raise GridError(f"resolution must be odd >= 17, got {resolution}")
        n = int(resolution)
        self.resolution = n
        self.h = 2.0 / (n - 1)
        # exact symmetric coordinates: node k sits at (k - (n-1)/2) * h
        self.x1d = (np.arange(n) - (n - 1) // 2) * self.h
        self.X, self.Y = np.meshgrid(self.x1d, self.x1d, indexing="ij")
        self.R = np.hypot(self.X, self.Y)

        interior = self.R < 1.0
        near = np.zeros_like(interior)
        near[1:, :] |= interior[:-1, :]
        near[:-1, :] |= interior[1:, :]
        near[:, 1:] |= interior[:, :-1]
        near[:, :-1] |= interior[:, 1:]
        cls = np.full((n, n), EXTERIOR, dtype=np.int8)
        cls[near & ~interior] = BOUNDARY
        cls[interior] = INTERIOR
        self.node_class = cls
        self.interior = interior
        self.boundary = cls == BOUNDARY
        self.theta = np.where(self.boundary, np.arctan2(self.Y, self.X), np.nan)

        frac = _clipped_fraction(self.X, self.Y, self.h, (0.0, 0.0), 1.0)
        self._unit_fraction = frac
        self.weights = np.where(interior, frac * self.h**2, 0.0)
        self._weight_cache: dict[tuple[float, float, float], np.ndarray] = {}

    def __repr__(self):
        return f"DiscGrid(resolution={self.resolution})"

    def __eq__(self, other):
        return isinstance(other, DiscGrid) and other.resolution == self.resolution

    def __hash__(self):
        return hash(("DiscGrid", self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.resolution, self.resolution)

    def boundary_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Boundary node indices sorted by angle."""
        ii, jj = np.nonzero(self.boundary)
        order = np.argsort(self.theta[ii, jj], kind="stable")
        return ii[order], jj[order]

    def members(self, disc: Disc) -> np.ndarray:
        """Node-centre membership in ``B_r(a) ∩ D^2`` (closed in ``B_r(a)``)."""
        a1, a2 = disc.center
        d = np.hypot(self.X - a1, self.Y - a2)
        return self.interior & (d <= disc.radius * (1.0 + 1e-12))

    def disc_weights(self, disc: Disc) -> np.ndarray:
        """Quadrature weights for ``B_r(a) ∩ D^2``.

        Every interior node whose dual cell meets the disc gets its cell area
        clipped to both the disc and the unit disc.  Clipping (rather than
        counting whole cells of member nodes) removes the systematic bias at
        the rim of ``B_r(a)``.
        """
        key = (disc.center[0], disc.center[1], disc.radius)
        w = self._weight_cache.get(key)
        if w is None:
            a1, a2 = disc.center
            reach = disc.radius + self.h
            near = self.interior & (np.hypot(self.X - a1, self.Y - a2) <= reach)
            w = np.zeros(self.shape)
            if near.any():
                ii, jj = np.nonzero(near)
                fb = _clipped_fraction(self.X[ii, jj], self.Y[ii, jj], self.h,
                                       disc.center, disc.radius, also_unit=True)
                w[ii, jj] = fb * self.h**2
            w.setflags(write=False)
            if len(self._weight_cache) < 512:
                self._weight_cache[key] = w
        return w

    def nearest_node(self, point) -> tuple[int, int]:
        k = np.rint(np.asarray(point, dtype=float) / self.h).astype(int) + (self.resolution - 1) // 2
        k = np.clip(k, 0, self.resolution - 1)
        return int(k[0]), int(k[1])

    def is_node(self, point, tol: float = 1e-9) -> bool:
        i, j = self.nearest_node(point)
        return abs(self.X[i, j] - point[0]) <= tol * self.h and abs(self.Y[i, j] - point[1]) <= tol * self.h


def _clipped_fraction(x, y, h, center, radius, also_unit=False):
    """Fraction of the dual cell around (x, y) inside ``B_radius(center)`` (and ``D²``)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ox, oy = np.meshgrid(_SUB_OFFSETS * h, _SUB_OFFSETS * h, indexing="ij")
    px = x[..., None, None] + ox - center[0]
    py = y[..., None, None] + oy - center[1]
    inside = px * px + py * py < radius * radius
    if also_unit:
        qx, qy = px + center[0], py + center[1]
        inside &= qx * qx + qy * qy < 1.0
    return inside.mean(axis=(-1, -2))


_GRID_CACHE: dict[int, DiscGrid] = {}


def build_grid(resolution: int) -> DiscGrid:
    """Build (or reuse) the grid with ``resolution`` nodes per axis."""
    if isinstance(resolution, bool) or int(resolution) != resolution or resolution < 17 or resolution % 2 == 0:
        raise GridError(f"resolution must be odd >= 17, got {resolution}")
    g = _GRID_CACHE.get(int(resolution))
    if g is None:
        g = DiscGrid(int(resolution))
        _GRID_CACHE[int(resolution)] = g
    return g


# ---------------------------------------------------------------------------
# Fields


@dataclass(frozen=True, eq=False)
class Field:
    """Samples of a scalar/vector/matrix valued map at every grid node.

    ``values`` has shape ``(n, n, rows, cols, spatial)``.  ``tag`` is one of
    ``"general"``, ``"skew"`` or ``"rotation"`` and is validated on creation.
    """

    grid: DiscGrid
    values: np.ndarray
    tag: str = "general"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        n = self.grid.resolution
        if v.ndim != 5 or v.shape[:2] != (n, n):
            raise GridError(f"field values must have shape (n, n, rows, cols, spatial), got {v.shape}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.tag == "skew":
            err = skew_defect(v)
            if err > 1e-12 * max(1.0, np.abs(v).max(initial=0.0)):
                raise GridError(f"field tagged skew violates A^T = -A by {err:.3e}")
        elif self.tag == "rotation":
            err = rotation_defect(v[..., 0])
            if err > 1e-8:
                raise GridError(f"field tagged rotation violates SO(m) by {err:.3e}")
        elif self.tag != "general":
            raise GridError(f"unknown field tag {self.tag!r}")

    @property
    def arity(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[2:])  # type: ignore[return-value]

    @property
    def ncomp(self) -> int:
        r, c, s = self.arity
        return r * c * s

    def flat(self) -> np.ndarray:
        """Values reshaped to ``(n, n, ncomp)``."""
        return self.values.reshape(self.grid.shape + (self.ncomp,))

    def with_values(self, values, tag: str | None = None) -> "Field":
        return Field(self.grid, values, self.tag if tag is None else tag)

    def __add__(self, other: "Field") -> "Field":
        _same_shape(self, other)
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        _same_shape(self, other)
        return Field(self.grid, self.values - other.values)

    def __mul__(self, s: float) -> "Field":
        return Field(self.grid, self.values * float(s), self.tag if self.tag == "skew" else "general")

    __rmul__ = __mul__

    @classmethod
    def scalar(cls, grid: DiscGrid, arr) -> "Field":
        return cls(grid, np.asarray(arr, dtype=float)[..., None, None, None])

    @classmethod
    def vector(cls, grid: DiscGrid, arr) -> "Field":
        """``arr`` of shape (n, n, m) -> arity (m, 1, 1)."""
        return cls(grid, np.asarray(arr, dtype=float)[..., :, None, None])

    @classmethod
    def vector_gradient(cls, grid: DiscGrid, arr) -> "Field":
        """``arr`` of shape (n, n, m, 2) -> arity (m, 1, 2)."""
        return cls(grid, np.asarray(arr, dtype=float)[..., :, None, :])

    @classmethod
    def matrix(cls, grid: DiscGrid, arr, tag: str = "general") -> "Field":
        """``arr`` of shape (n, n, m, m) -> arity (m, m, 1)."""
        return cls(grid, np.asarray(arr, dtype=float)[..., None], tag)

    @classmethod
    def from_function(cls, grid: DiscGrid, fn) -> "Field":
        """Sample ``fn(x1, x2)``; a scalar result gives a scalar field, shape (m,) a vector."""
        v = np.asarray(fn(grid.X, grid.Y), dtype=float)
        if v.shape == grid.shape:
            return cls.scalar(grid, v)
        v = np.moveaxis(v, 0, -1) if v.shape[1:] == grid.shape else v
        return cls.vector(grid, v)


def _same_shape(a: Field, b: Field):
    if a.grid != b.grid or a.values.shape != b.values.shape:
        raise GridError("fields live on different grids or have different arity")


def skew_defect(v: np.ndarray) -> float:
    """max |A + A^T| over nodes and spatial slots for values (..., m, m, s)."""
    if v.shape[-3] != v.shape[-2]:
        return math.inf
    return float(np.abs(v + np.swapaxes(v, -3, -2)).max(initial=0.0))


def rotation_defect(p: np.ndarray) -> float:
    m = p.shape[-1]
    ptp = np.einsum("...ki,...kj->...ij", p, p)
    orth = np.abs(ptp - np.eye(m)).max(initial=0.0)
    det = np.abs(np.linalg.det(p) - 1.0).max(initial=0.0)
    return float(max(orth, det))


# ---------------------------------------------------------------------------
# Disc-restricted integrals


def _resolved_weights(grid: DiscGrid, d: Disc) -> np.ndarray:
    count = int(np.count_nonzero(grid.members(d)))
    if count < 5:
        raise DiscUnresolved(f"disc unresolved: {count} nodes in B_{d.radius:g}{d.center}")
    return grid.disc_weights(d)


def integrate(u: Field | np.ndarray, d: Disc = UNIT_DISC, grid: DiscGrid | None = None):
    """Quadrature of ``u`` over ``B_r(a) ∩ D^2`` componentwise."""
    if isinstance(u, Field):
        grid, vals = u.grid, u.values
    else:
        vals = np.asarray(u, dtype=float)
    w = _resolved_weights(grid, d)
    return np.tensordot(w, vals, axes=([0, 1], [0, 1]))


def mean_value(u: Field, d: Disc):
    """Weighted average ``(u)_{a,r}``; scalars come back as floats."""
    w = _resolved_weights(u.grid, d)
    avg = np.tensordot(w, u.values, axes=([0, 1], [0, 1])) / w.sum()
    return float(avg.ravel()[0]) if avg.size == 1 else avg


def pointwise_norm(values: np.ndarray) -> np.ndarray:
    """Euclidean norm over all component axes of (n, n, ...) data."""
    n = values.shape[:2]
    return np.sqrt(np.sum(values.reshape(n + (-1,)) ** 2, axis=-1))


def lp_norm_on_disc(u: Field, d: Disc, p: float) -> float:
    if p < 1:
        raise GridError(f"p must be >= 1, got {p}")
    w = _resolved_weights(u.grid, d)
    a = pointwise_norm(u.values)
    if math.isinf(p):
        return float(a[w > 0].max())
    return float(np.sum(w * a**p) ** (1.0 / p))


# ---------------------------------------------------------------------------
# Cutoff


def quintic_ramp(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


def cutoff_profile(rho, r: float):
    """1 on [0, r], quintic ramp down to 0 on [r, 3r/2]; max slope 3.75/r."""
    return 1.0 - quintic_ramp((np.asarray(rho) - r) / (0.5 * r))


def cutoff(grid: DiscGrid, d: Disc) -> Field:
    """Radial cut-off ``eta`` for ``B_r(a)``, supported in ``B_{3r/2}(a)``."""
    if math.hypot(*d.center) + 2.0 * d.radius > 1.0 + grid.h:
        raise GridError("cutoff support: B_{2r}(a) must lie inside the unit disc")
    rho = np.hypot(grid.X - d.center[0], grid.Y - d.center[1])
    return Field.scalar(grid, cutoff_profile(rho, d.radius))


# ---------------------------------------------------------------------------
# Snapshot files


def write_field(path, u: Field) -> None:
    """Text table with one row per node; components in (row, col, spatial) order."""
    g = u.grid
    r, c, s = u.arity
    comp = [f"u_{i}_{j}_{k}" for i in range(r) for j in range(c) for k in range(s)]
    flat = u.flat().reshape(-1, u.ncomp)
    lines = [f"# resolution={g.resolution} arity={r},{c},{s} tag={u.tag}",
             "\t".join(["index", "x1", "x2", "class"] + comp)]
    xs, ys = g.X.ravel(), g.Y.ravel()
    cls = g.node_class.ravel()
    for k in range(flat.shape[0]):
        row = [str(k), repr(float(xs[k])), repr(float(ys[k])), CLASS_NAMES[int(cls[k])]]
        row += [repr(float(v)) for v in flat[k]]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_field(path) -> Field:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# "):
        raise GridError(f"{path}: missing metadata line")
    meta = dict(item.split("=", 1) for item in text[0][2:].split())
    grid = build_grid(int(meta["resolution"]))
    arity = tuple(int(a) for a in meta["arity"].split(","))
    data = np.array([[float(x) for x in line.split("\t")[4:]] for line in text[2:]])
    vals = data.reshape(grid.shape + arity)
    return Field(grid, vals, meta.get("tag", "general"))
