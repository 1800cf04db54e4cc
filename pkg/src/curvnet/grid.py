"""Uniform Cartesian grids and distance-refined quadtrees.

Both grid kinds expose the same small surface used by the rest of the
package: node coordinates, a 3x3 stencil lookup, and the set of nodes next
to the zero level set.  Node ids on a uniform grid are row-major from the
origin, ``id = j * nx + i`` with ``i`` along x.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# (di, dj) offsets in the order of the 9-point stencil: top row left to right,
# middle row, bottom row.
STENCIL_OFFSETS: tuple[tuple[int, int], ...] = (
    (-1, 1), (0, 1), (1, 1),
    (-1, 0), (0, 0), (1, 0),
    (-1, -1), (0, -1), (1, -1),
)


def _as_square(domain) -> tuple[float, float, float]:
    """Return (x_min, y_min, side) of a square ``((x0, x1), (y0, y1))`` domain."""
    (x0, x1), (y0, y1) = domain
    sx, sy = float(x1) - float(x0), float(y1) - float(y0)
    if sx <= 0 or sy <= 0:
        raise ValueError(f"degenerate domain {domain!r}")
    if not np.isclose(sx, sy, rtol=1e-12, atol=0.0):
        raise ValueError(f"domain must be square, got sides {sx} and {sy}")
    return float(x0), float(y0), sx


@dataclass(frozen=True)
class UniformGrid:
    origin: tuple[float, float]
    h: float
    nx: int
    ny: int

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape of node fields, ``(ny, nx)``."""
        return (self.ny, self.nx)

    def node_id(self, i: int, j: int) -> int:
        return j * self.nx + i

    def node_ij(self, node: int) -> tuple[int, int]:
        j, i = divmod(int(node), self.nx)
        return i, j

    def coords(self, node: int) -> np.ndarray:
        i, j = self.node_ij(node)
        return np.array([self.origin[0] + i * self.h, self.origin[1] + j * self.h])

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.origin[0] + self.h * np.arange(self.nx)
        y = self.origin[1] + self.h * np.arange(self.ny)
        return x, y

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinate arrays ``X, Y`` of shape ``(ny, nx)``."""
        x, y = self.axes()
        return np.meshgrid(x, y, indexing="xy")

    def sample(self, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
        X, Y = self.mesh()
        return np.asarray(func(X, Y), dtype=float)

    def interior_mask(self) -> np.ndarray:
        """Nodes owning a complete 3x3 neighbourhood."""
        mask = np.zeros(self.shape, dtype=bool)
        mask[1:-1, 1:-1] = True
        return mask


def build_uniform(domain, nodes_per_side: int) -> UniformGrid:
    """Square grid with ``nodes_per_side`` equally spaced nodes per axis."""
    if nodes_per_side < 3:
        raise ValueError("nodes_per_side must be >= 3")
    x0, y0, side = _as_square(domain)
    h = side / (nodes_per_side - 1)
    return UniformGrid(origin=(x0, y0), h=h, nx=nodes_per_side, ny=nodes_per_side)


# --------------------------------------------------------------------------
# quadtree


@dataclass(frozen=True)
class CellView:
    level: int
    bounds: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    vertex_ids: tuple[int, int, int, int]  # SW, SE, NW, NE

    @property
    def side(self) -> float:
        return self.bounds[2] - self.bounds[0]

    @property
    def diagonal(self) -> float:
        return self.side * np.sqrt(2.0)


@dataclass
class _Cell:
    level: int
    ix: int  # lower-left corner on the finest lattice
    iy: int
    children: Optional[tuple[int, int, int, int]] = None


@dataclass
class QuadtreeGrid:
    """Quadtree over a square root cell.

    Vertices live on the integer lattice of the finest level, so a vertex
    shared by several cells maps to a single slot of ``node_keys``.
    """

    origin: tuple[float, float]
    side: float
    max_level: int
    cells: list[_Cell] = field(default_factory=list)
    node_keys: list[tuple[int, int]] = field(default_factory=list)
    node_index: dict[tuple[int, int], int] = field(default_factory=dict)
    phi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def h_min(self) -> float:
        return self.side / (1 << self.max_level)

    @property
    def n_nodes(self) -> int:
        return len(self.node_keys)

    @property
    def lattice_size(self) -> int:
        return (1 << self.max_level) + 1

    def coords(self, node: int) -> np.ndarray:
        ix, iy = self.node_keys[node]
        return np.array([self.origin[0] + ix * self.h_min, self.origin[1] + iy * self.h_min])

    def node_coords(self) -> np.ndarray:
        keys = np.asarray(self.node_keys, dtype=float).reshape(-1, 2)
        return np.asarray(self.origin) + keys * self.h_min

    def leaves(self) -> list[_Cell]:
        return [c for c in self.cells if c.children is None]

    def cell_view(self, cell: _Cell) -> CellView:
        span = 1 << (self.max_level - cell.level)
        corners = (
            (cell.ix, cell.iy), (cell.ix + span, cell.iy),
            (cell.ix, cell.iy + span), (cell.ix + span, cell.iy + span),
        )
        x0 = self.origin[0] + cell.ix * self.h_min
        y0 = self.origin[1] + cell.iy * self.h_min
        s = span * self.h_min
        return CellView(
            level=cell.level,
            bounds=(x0, y0, x0 + s, y0 + s),
            vertex_ids=tuple(self.node_index[k] for k in corners),
        )

    def lattice_node(self, ix: int, iy: int) -> Optional[int]:
        return self.node_index.get((ix, iy))

    def to_lattice(self, values: Optional[np.ndarray] = None, fill: float = np.nan):
        """Scatter node values onto the finest lattice.

        Returns ``(array, mask)`` with arrays of shape ``(n, n)`` indexed
        ``[iy, ix]``; ``mask`` marks lattice points that are tree nodes.
        """
        values = self.phi if values is None else np.asarray(values, dtype=float)
        n = self.lattice_size
        arr = np.full((n, n), fill, dtype=float)
        mask = np.zeros((n, n), dtype=bool)
        keys = np.asarray(self.node_keys, dtype=np.int64).reshape(-1, 2)
        arr[keys[:, 1], keys[:, 0]] = values
        mask[keys[:, 1], keys[:, 0]] = True
        return arr, mask

    def lattice_grid(self) -> UniformGrid:
        """The uniform grid at finest spacing that contains every tree node."""
        n = self.lattice_size
        return UniformGrid(origin=self.origin, h=self.h_min, nx=n, ny=n)

    def ghost_operator(self):
        """Sparse map from node values to every finest-lattice point.

        Tree nodes map to themselves; other lattice points take the bilinear
        interpolant of the leaf cell that contains them.  Rows follow the
        flattened ``[iy, ix]`` lattice order.
        """
        from scipy import sparse

        n = self.lattice_size
        rows, cols, vals = [], [], []
        done = np.zeros(n * n, dtype=bool)
        for key, slot in self.node_index.items():
            r = key[1] * n + key[0]
            rows.append(r)
            cols.append(slot)
            vals.append(1.0)
            done[r] = True
        for cell in self.leaves():
            span = 1 << (self.max_level - cell.level)
            if span == 1:
                continue
            sw = self.node_index[(cell.ix, cell.iy)]
            se = self.node_index[(cell.ix + span, cell.iy)]
            nw = self.node_index[(cell.ix, cell.iy + span)]
            ne = self.node_index[(cell.ix + span, cell.iy + span)]
            for dy in range(span + 1):
                for dx in range(span + 1):
                    r = (cell.iy + dy) * n + cell.ix + dx
                    if done[r]:
                        continue
                    done[r] = True
                    tx, ty = dx / span, dy / span
                    for c, w in ((sw, (1 - tx) * (1 - ty)), (se, tx * (1 - ty)),
                                 (nw, (1 - tx) * ty), (ne, tx * ty)):
                        if w:
                            rows.append(r)
                            cols.append(c)
                            vals.append(w)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n * n, self.n_nodes))

    def axis_edges(self) -> list[tuple[int, int]]:
        """Axis-aligned leaf edges between consecutive nodes, hanging nodes included."""
        occupied = self.node_index
        edges: set[tuple[int, int]] = set()
        for cell in self.leaves():
            span = 1 << (self.max_level - cell.level)
            x0, y0 = cell.ix, cell.iy
            sides = (
                [(x0 + k, y0) for k in range(span + 1)],
                [(x0 + k, y0 + span) for k in range(span + 1)],
                [(x0, y0 + k) for k in range(span + 1)],
                [(x0 + span, y0 + k) for k in range(span + 1)],
            )
            for pts in sides:
                ids = [occupied[p] for p in pts if p in occupied]
                for a, b in zip(ids, ids[1:]):
                    edges.add((min(a, b), max(a, b)))
        return sorted(edges)


def build_quadtree(domain, max_level: int, phi: Callable[[float, float], float],
                   lipschitz: float = 1.2) -> QuadtreeGrid:
    """Refine every cell with ``min |phi(v)| <= lipschitz * diag`` down to ``max_level``.

    ``phi`` is evaluated at cell vertices; vertex values are cached so each
    lattice point is sampled once.  Node slots are assigned in row-major
    lattice order for reproducible numbering.
    """
    if not 0 <= max_level <= 31:
        raise ValueError("max_level must be in [0, 31]")
    if lipschitz <= 0:
        raise ValueError("lipschitz must be positive")
    x0, y0, side = _as_square(domain)
    h_min = side / (1 << max_level)
    cache: dict[tuple[int, int], float] = {}

    def value(ix: int, iy: int) -> float:
        key = (ix, iy)
        if key not in cache:
            cache[key] = float(phi(x0 + ix * h_min, y0 + iy * h_min))
        return cache[key]

    cells = [_Cell(level=0, ix=0, iy=0)]
    stack = [0]
    while stack:
        ci = stack.pop()
        cell = cells[ci]
        if cell.level >= max_level:
            continue
        span = 1 << (max_level - cell.level)
        corners = ((cell.ix, cell.iy), (cell.ix + span, cell.iy),
                   (cell.ix, cell.iy + span), (cell.ix + span, cell.iy + span))
        closest = min(abs(value(*c)) for c in corners)
        diag = span * h_min * np.sqrt(2.0)
        if closest > lipschitz * diag:
            continue
        half = span // 2
        kids = []
        for dy in (0, half):
            for dx in (0, half):
                kids.append(len(cells))
                cells.append(_Cell(level=cell.level + 1, ix=cell.ix + dx, iy=cell.iy + dy))
        cell.children = tuple(kids)
        stack.extend(reversed(kids))

    keys: set[tuple[int, int]] = set()
    for cell in cells:
        if cell.children is not None:
            continue
        span = 1 << (max_level - cell.level)
        keys.update(((cell.ix, cell.iy), (cell.ix + span, cell.iy),
                     (cell.ix, cell.iy + span), (cell.ix + span, cell.iy + span)))
    node_keys = sorted(keys, key=lambda k: (k[1], k[0]))
    node_index = {k: n for n, k in enumerate(node_keys)}
    values = np.array([value(*k) for k in node_keys], dtype=float)
    return QuadtreeGrid(origin=(x0, y0), side=side, max_level=max_level, cells=cells,
                        node_keys=node_keys, node_index=node_index, phi=values)


# --------------------------------------------------------------------------
# stencils and interface nodes


def stencil9_at(grid, node: int) -> Optional[tuple[int, ...]]:
    """Node ids of the 3x3 neighbourhood of ``node`` in stencil order, or None."""
    if isinstance(grid, QuadtreeGrid):
        ix, iy = grid.node_keys[node]
        ids = []
        for di, dj in STENCIL_OFFSETS:
            nb = grid.node_index.get((ix + di, iy + dj))
            if nb is None:
                return None
            ids.append(nb)
        return tuple(ids)
    i, j = grid.node_ij(node)
    if not (0 < i < grid.nx - 1 and 0 < j < grid.ny - 1):
        return None
    return tuple(grid.node_id(i + di, j + dj) for di, dj in STENCIL_OFFSETS)


def _crossed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b < 0) | (a == 0) | (b == 0)


def interface_adjacent_mask(phi: np.ndarray) -> np.ndarray:
    """Boolean ``(ny, nx)`` mask of nodes on, or with an axis edge across, the zero set."""
    phi = np.asarray(phi, dtype=float)
    mask = phi == 0
    hx = _crossed(phi[:, :-1], phi[:, 1:])
    vy = _crossed(phi[:-1, :], phi[1:, :])
    mask[:, :-1] |= hx
    mask[:, 1:] |= hx
    mask[:-1, :] |= vy
    mask[1:, :] |= vy
    return mask


def interface_adjacent_nodes(grid, phi: Sequence[float]) -> list[int]:
    """Ids of nodes that sit on the zero set or own an axis edge it crosses.

    An edge with one endpoint exactly zero counts as crossed.  The result is
    sorted ascending (row-major on uniform grids).
    """
    phi = np.asarray(phi, dtype=float)
    if isinstance(grid, QuadtreeGrid):
        flat = phi.ravel()
        hit = flat == 0
        edges = np.asarray(grid.axis_edges(), dtype=np.int64).reshape(-1, 2)
        if len(edges):
            crossed = _crossed(flat[edges[:, 0]], flat[edges[:, 1]])
            hit[edges[crossed, 0]] = True
            hit[edges[crossed, 1]] = True
        return np.flatnonzero(hit).tolist()
    mask = interface_adjacent_mask(phi.reshape(grid.shape))
    return np.flatnonzero(mask.ravel()).tolist()
