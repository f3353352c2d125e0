"""Staggered space-time meshes for the rectangle and the embedded graph, and
the sparse linear operator encoding the coupled continuity equations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import EmbeddedStarGraph

__all__ = [
    "BulkGrid",
    "TimeGrid",
    "GraphMesh",
    "BoundaryData",
    "DiscreteFlow",
    "FlowLayout",
    "CEOperator",
    "AssemblyError",
    "assemble_ce",
    "ce_residual",
    "total_mass",
    "deposit_graph_measure",
    "face_gradient",
    "power_iteration_norm",
]


class AssemblyError(ValueError):
    """Raised when meshes handed to the assembler are mutually inconsistent."""


def _locate(coord: float, lo: float, step: float, n: int) -> int:
    """Index of the grid interval containing ``coord``; points exactly on an
    interior boundary go to the lower cell."""
    t = (coord - lo) / step
    idx = int(np.floor(t))
    if idx >= 1 and t == idx:
        idx -= 1
    return min(max(idx, 0), n - 1)


@dataclass(frozen=True)
class BulkGrid:
    """Regular cell grid on an axis-aligned rectangle with a no-flow boundary.

    Cells are indexed c = iy * nx + ix. Interior faces come in two families:
    x-faces (between horizontally adjacent cells, carrying the x momentum
    component) followed by y-faces.
    """

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs nx, ny >= 2, got {self.nx} x {self.ny}")
        if not (self.x_hi > self.x_lo and self.y_hi > self.y_lo):
            raise ValueError("rectangle must have positive extent")

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.nx

    @property
    def dy(self) -> float:
        return (self.y_hi - self.y_lo) / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_faces_x(self) -> int:
        return (self.nx - 1) * self.ny

    @property
    def n_faces_y(self) -> int:
        return self.nx * (self.ny - 1)

    @property
    def n_faces(self) -> int:
        return self.n_faces_x + self.n_faces_y

    @property
    def rect(self) -> tuple[float, float, float, float]:
        return (self.x_lo, self.x_hi, self.y_lo, self.y_hi)

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.x_hi - self.x_lo, self.y_hi - self.y_lo))

    def cell_centers(self) -> np.ndarray:
        xs = self.x_lo + (np.arange(self.nx) + 0.5) * self.dx
        ys = self.y_lo + (np.arange(self.ny) + 0.5) * self.dy
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def cell_of_point(self, point) -> int:
        ix = _locate(float(point[0]), self.x_lo, self.dx, self.nx)
        iy = _locate(float(point[1]), self.y_lo, self.dy, self.ny)
        return iy * self.nx + ix

    # Per-cell face index arrays; -1 marks a boundary side (zero flux).
    @property
    def west_face(self) -> np.ndarray:
        return self._face_tables()[0]

    @property
    def east_face(self) -> np.ndarray:
        return self._face_tables()[1]

    @property
    def south_face(self) -> np.ndarray:
        return self._face_tables()[2]

    @property
    def north_face(self) -> np.ndarray:
        return self._face_tables()[3]

    def _face_tables(self):
        cached = getattr(self, "_faces_cache", None)
        if cached is not None:
            return cached
        nx, ny = self.nx, self.ny
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
        ix = ix.ravel()
        iy = iy.ravel()
        west = np.where(ix >= 1, iy * (nx - 1) + ix - 1, -1)
        east = np.where(ix <= nx - 2, iy * (nx - 1) + ix, -1)
        south = np.where(iy >= 1, self.n_faces_x + (iy - 1) * nx + ix, -1)
        north = np.where(iy <= ny - 2, self.n_faces_x + iy * nx + ix, -1)
        tables = (west, east, south, north)
        object.__setattr__(self, "_faces_cache", tables)
        return tables


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on [0, 1]: densities at k/n_steps, momenta and
    exchanges at midpoint times."""

    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("need at least one time step")

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) / self.n_steps


@dataclass(frozen=True)
class GraphMesh:
    """1D mesh of an embedded star graph, tied into the bulk grid.

    Segment arrays are flattened across edges; ``offsets[e]`` is the first
    global segment index of edge e. Per edge there are as many momentum
    interfaces as segments: interface i sits at the start (center side) of
    segment i, and the flux through the leaf end is carried by the vertex
    exchange variable.
    """

    graph: EmbeddedStarGraph
    segments_per_edge: np.ndarray       # (n_edges,)
    ds: np.ndarray                      # (n_edges,) segment length per edge
    offsets: np.ndarray                 # (n_edges + 1,)
    midpoints: np.ndarray               # (n_segments, d)
    segment_edge: np.ndarray            # (n_segments,) owning edge
    segment_cell: np.ndarray            # (n_segments,) containing bulk cell
    leaf_cell: np.ndarray               # (n_leaves,) cell containing each leaf
    lambda_seg: np.ndarray              # (n_segments,) reference mass per segment
    lambda_vertex: np.ndarray           # (n_leaves,) reference mass per leaf atom
    is_last_segment: np.ndarray         # (n_segments,) outermost segment flags
    n_cells: int                        # bulk cell count the mesh is tied to
    outer_sign: int = 1                 # orientation sign at every leaf
    center_sign: int = -1               # orientation sign at the center

    @property
    def n_segments(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_edges(self) -> int:
        return self.segments_per_edge.size

    @property
    def n_leaves(self) -> int:
        return self.n_edges

    @staticmethod
    def build(graph: EmbeddedStarGraph, grid: BulkGrid, segments_per_edge,
              lambda_vertex: float = 1.0) -> "GraphMesh":
        n_e = graph.graph.num_edges
        seg = np.asarray(segments_per_edge, dtype=int)
        if seg.ndim == 0:
            seg = np.full(n_e, int(seg))
        if seg.shape != (n_e,) or np.any(seg < 1):
            raise ValueError("need a positive segment count per edge")
        ds = graph.lengths / seg
        offsets = np.concatenate([[0], np.cumsum(seg)])
        n_s = int(offsets[-1])

        midpoints = np.empty((n_s, graph.dim))
        segment_edge = np.empty(n_s, dtype=int)
        is_last = np.zeros(n_s, dtype=bool)
        for e in range(n_e):
            s = np.arange(seg[e])
            mids = graph.positions[0] + ((s + 0.5) * ds[e])[:, None] * graph.tangents[e]
            midpoints[offsets[e]:offsets[e + 1]] = mids
            segment_edge[offsets[e]:offsets[e + 1]] = e
            is_last[offsets[e + 1] - 1] = True

        segment_cell = np.array([grid.cell_of_point(p) for p in midpoints], dtype=int)
        leaf_cell = np.array([grid.cell_of_point(graph.positions[1 + e]) for e in range(n_e)],
                             dtype=int)
        lambda_seg = ds[segment_edge]
        lam_v = np.full(n_e, float(lambda_vertex))
        return GraphMesh(graph, seg, ds, offsets, midpoints, segment_edge, segment_cell,
                         leaf_cell, lambda_seg, lam_v, is_last, grid.n_cells)

    def last_segment_index(self, edge: int) -> int:
        return int(self.offsets[edge + 1] - 1)

    def first_segment_index(self, edge: int) -> int:
        return int(self.offsets[edge])


@dataclass(frozen=True)
class BoundaryData:
    """Initial and final cell/segment masses; each pair totals one."""

    mu0: np.ndarray
    mu1: np.ndarray
    rho0: np.ndarray
    rho1: np.ndarray

    def __post_init__(self):
        for name in ("mu0", "mu1", "rho0", "rho1"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0):
                raise ValueError(f"{name} has negative entries")
            object.__setattr__(self, name, arr)
        for k, (m, r) in enumerate(((self.mu0, self.rho0), (self.mu1, self.rho1))):
            total = float(m.sum() + r.sum())
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"boundary pair {k} has total mass {total!r}, expected 1")


@dataclass
class DiscreteFlow:
    """All unknowns on the staggered space-time mesh.

    mu:  (n_steps + 1, n_cells) cell masses at density times.
    J:   (n_steps, n_faces) signed face momenta at midpoint times.
    rho: (n_steps + 1, n_segments) segment masses.
    V:   (n_steps, n_segments) signed scalar momenta at segment interfaces;
         per edge, entry i is the interface at the start of segment i (the
         leaf-end interface is tied to G).
    f:   (n_steps, n_segments) bulk->edge exchange rate per segment.
    G:   (n_steps, n_leaves) scalar exchange rate at each leaf.
    """

    mu: np.ndarray
    J: np.ndarray
    rho: np.ndarray
    V: np.ndarray
    f: np.ndarray
    G: np.ndarray

    @staticmethod
    def zeros(grid: BulkGrid, gmesh: GraphMesh, tgrid: TimeGrid) -> "DiscreteFlow":
        nt = tgrid.n_steps
        return DiscreteFlow(
            mu=np.zeros((nt + 1, grid.n_cells)),
            J=np.zeros((nt, grid.n_faces)),
            rho=np.zeros((nt + 1, gmesh.n_segments)),
            V=np.zeros((nt, gmesh.n_segments)),
            f=np.zeros((nt, gmesh.n_segments)),
            G=np.zeros((nt, gmesh.n_leaves)),
        )

    def copy(self) -> "DiscreteFlow":
        return DiscreteFlow(self.mu.copy(), self.J.copy(), self.rho.copy(),
                            self.V.copy(), self.f.copy(), self.G.copy())


_FIELDS = ("mu", "J", "rho", "V", "f", "G")


@dataclass(frozen=True)
class FlowLayout:
    """Positions of the flattened flow fields inside the unknown vector."""

    shapes: dict
    slices: dict
    size: int

    @staticmethod
    def build(grid: BulkGrid, gmesh: GraphMesh, tgrid: TimeGrid) -> "FlowLayout":
        nt = tgrid.n_steps
        shapes = {
            "mu": (nt + 1, grid.n_cells),
            "J": (nt, grid.n_faces),
            "rho": (nt + 1, gmesh.n_segments),
            "V": (nt, gmesh.n_segments),
            "f": (nt, gmesh.n_segments),
            "G": (nt, gmesh.n_leaves),
        }
        slices = {}
        start = 0
        for name in _FIELDS:
            n = int(np.prod(shapes[name]))
            slices[name] = slice(start, start + n)
            start += n
        return FlowLayout(shapes, slices, start)

    def start(self, name: str) -> int:
        return self.slices[name].start

    def to_vector(self, flow: DiscreteFlow) -> np.ndarray:
        vec = np.empty(self.size)
        for name in _FIELDS:
            arr = getattr(flow, name)
            if arr.shape != self.shapes[name]:
                raise AssemblyError(f"flow field {name} has shape {arr.shape}, "
                                    f"expected {self.shapes[name]}")
            vec[self.slices[name]] = arr.ravel()
        return vec

    def to_flow(self, vec: np.ndarray) -> DiscreteFlow:
        if vec.shape != (self.size,):
            raise AssemblyError(f"vector has shape {vec.shape}, expected ({self.size},)")
        return DiscreteFlow(**{
            name: vec[self.slices[name]].reshape(self.shapes[name]).copy()
            for name in _FIELDS
        })


@dataclass
class CEOperator:
    """Sparse operator A with A . flow = b iff the flow satisfies the discrete
    coupled continuity equations with the stored boundary data.

    Row blocks, in order: bulk cell balances, edge segment balances, the
    center Kirchhoff rows (one per time step), then the boundary pins.
    """

    A: sp.csr_matrix
    b: np.ndarray
    layout: FlowLayout
    grid: BulkGrid
    gmesh: GraphMesh
    tgrid: TimeGrid
    data: BoundaryData
    row_blocks: dict
    _norm: float | None = None

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.A @ vec

    def residual_vector(self, flow: DiscreteFlow) -> np.ndarray:
        return self.A @ self.layout.to_vector(flow) - self.b

    def norm_estimate(self, seed: int = 42, min_iters: int = 20, max_iters: int = 500,
                      rtol: float = 1e-12) -> float:
        if self._norm is None:
            self._norm = power_iteration_norm(self.A, seed, min_iters, max_iters, rtol)
        return self._norm


def power_iteration_norm(A, seed: int = 42, min_iters: int = 20, max_iters: int = 500,
                         rtol: float = 1e-12) -> float:
    """Operator 2-norm estimate by power iteration on A^T A with a seeded
    start vector; runs at least ``min_iters`` rounds, then until the estimate
    is Cauchy within ``rtol``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    At = A.T
    est = 0.0
    for it in range(max_iters):
        w = At @ (A @ v)
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            return 0.0
        new_est = float(np.sqrt(norm_w))
        v = w / norm_w
        if it + 1 >= min_iters and abs(new_est - est) <= rtol * max(new_est, 1e-300):
            return new_est
        est = new_est
    return est


def assemble_ce(grid: BulkGrid, gmesh: GraphMesh, tgrid: TimeGrid,
                data: BoundaryData) -> CEOperator:
    """Assemble the sparse constraint operator for the coupled system.

    Per interior time step: one row per bulk cell (time difference, face
    divergence, distributed exchange in, leaf exchange out), one row per edge
    segment (time difference, interface flux difference, exchange), and one
    Kirchhoff row balancing the center-interface fluxes. Boundary pins fix the
    masses at t = 0 and t = 1.
    """
    layout = FlowLayout.build(grid, gmesh, tgrid)
    nt = tgrid.n_steps
    n_c = grid.n_cells
    n_s = gmesh.n_segments
    n_e = gmesh.n_edges
    if data.mu0.shape != (n_c,) or data.rho0.shape != (n_s,):
        raise AssemblyError("boundary data shapes do not match the meshes")

    dt = tgrid.dt
    dx, dy = grid.dx, grid.dy
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    def add(r, c, v):
        r = np.asarray(r, dtype=int).ravel()
        c = np.asarray(c, dtype=int).ravel()
        v = np.broadcast_to(np.asarray(v, dtype=float), r.shape).ravel()
        rows.append(r)
        cols.append(c)
        vals.append(v)

    o_mu = layout.start("mu")
    o_J = layout.start("J")
    o_rho = layout.start("rho")
    o_V = layout.start("V")
    o_f = layout.start("f")
    o_G = layout.start("G")

    # --- bulk cell rows: rows k*n_c + c for k = 0..nt-1
    k = np.repeat(np.arange(nt), n_c)
    c = np.tile(np.arange(n_c), nt)
    r_bulk = k * n_c + c
    add(r_bulk, o_mu + (k + 1) * n_c + c, 1.0 / dt)
    add(r_bulk, o_mu + k * n_c + c, -1.0 / dt)
    for table, coef in ((grid.east_face, 1.0 / dx), (grid.west_face, -1.0 / dx),
                        (grid.north_face, 1.0 / dy), (grid.south_face, -1.0 / dy)):
        have = table[c] >= 0
        add(r_bulk[have], o_J + k[have] * grid.n_faces + table[c[have]], coef)
    ks = np.repeat(np.arange(nt), n_s)
    s = np.tile(np.arange(n_s), nt)
    add(ks * n_c + gmesh.segment_cell[s], o_f + ks * n_s + s, 1.0)
    kl = np.repeat(np.arange(nt), n_e)
    leaf = np.tile(np.arange(n_e), nt)
    add(kl * n_c + gmesh.leaf_cell[leaf], o_G + kl * n_e + leaf, -float(gmesh.outer_sign))

    # --- edge segment rows: rows nt*n_c + k*n_s + s
    base_edge = nt * n_c
    r_edge = base_edge + ks * n_s + s
    ds_s = gmesh.lambda_seg  # segment length of the owning edge
    add(r_edge, o_rho + (ks + 1) * n_s + s, 1.0 / dt)
    add(r_edge, o_rho + ks * n_s + s, -1.0 / dt)
    add(r_edge, o_f + ks * n_s + s, -1.0)
    add(r_edge, o_V + ks * n_s + s, -1.0 / ds_s[s])
    inner = ~gmesh.is_last_segment[s]
    add(r_edge[inner], o_V + ks[inner] * n_s + s[inner] + 1, 1.0 / ds_s[s[inner]])
    last = gmesh.is_last_segment[s]
    add(r_edge[last], o_G + ks[last] * n_e + gmesh.segment_edge[s[last]],
        float(gmesh.outer_sign))

    # --- Kirchhoff rows: net center-interface flux vanishes
    base_kirch = base_edge + nt * n_s
    r_k = base_kirch + kl
    add(r_k, o_V + kl * n_s + gmesh.offsets[:-1][leaf],
        float(gmesh.center_sign) / gmesh.ds[leaf])

    # --- boundary pins
    base_pin = base_kirch + nt
    cc = np.arange(n_c)
    sscol = np.arange(n_s)
    add(base_pin + cc, o_mu + cc, 1.0)
    add(base_pin + n_c + cc, o_mu + nt * n_c + cc, 1.0)
    add(base_pin + 2 * n_c + sscol, o_rho + sscol, 1.0)
    add(base_pin + 2 * n_c + n_s + sscol, o_rho + nt * n_s + sscol, 1.0)

    n_rows = base_pin + 2 * n_c + 2 * n_s
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, layout.size),
    ).tocsr()
    b = np.zeros(n_rows)
    b[base_pin:base_pin + n_c] = data.mu0
    b[base_pin + n_c:base_pin + 2 * n_c] = data.mu1
    b[base_pin + 2 * n_c:base_pin + 2 * n_c + n_s] = data.rho0
    b[base_pin + 2 * n_c + n_s:] = data.rho1

    row_blocks = {
        "bulk": slice(0, base_edge),
        "edge": slice(base_edge, base_kirch),
        "kirchhoff": slice(base_kirch, base_pin),
        "pins": slice(base_pin, n_rows),
    }
    return CEOperator(A, b, layout, grid, gmesh, tgrid, data, row_blocks)


def ce_residual(op: CEOperator, flow: DiscreteFlow) -> float:
    """Relative constraint residual ||A flow - b|| / max(1, ||b||)."""
    r = op.residual_vector(flow)
    return float(np.linalg.norm(r) / max(1.0, np.linalg.norm(op.b)))


def total_mass(flow: DiscreteFlow, k: int) -> float:
    """Mass of the whole coupled system at density time index k."""
    if not 0 <= k < flow.mu.shape[0]:
        raise IndexError(f"time index {k} out of range")
    return float(flow.mu[k].sum() + flow.rho[k].sum())


def deposit_graph_measure(gmesh: GraphMesh, rho_seg: np.ndarray) -> np.ndarray:
    """Push segment masses into their containing bulk cells (zero extension);
    the total is preserved exactly."""
    rho_seg = np.asarray(rho_seg, dtype=float)
    if rho_seg.shape != (gmesh.n_segments,):
        raise ValueError(f"expected {gmesh.n_segments} segment masses, got {rho_seg.shape}")
    out = np.zeros(gmesh.n_cells)
    np.add.at(out, gmesh.segment_cell, rho_seg)
    return out


def face_gradient(grid: BulkGrid) -> sp.csr_matrix:
    """Discrete gradient (cells -> interior faces); the bulk divergence block
    of the constraint operator is its negative transpose."""
    rows, cols, vals = [], [], []
    nx, ny = grid.nx, grid.ny
    for iy in range(ny):
        for ix in range(nx - 1):
            fidx = iy * (nx - 1) + ix
            c1 = iy * nx + ix
            rows += [fidx, fidx]
            cols += [c1, c1 + 1]
            vals += [-1.0 / grid.dx, 1.0 / grid.dx]
    for iy in range(ny - 1):
        for ix in range(nx):
            fidx = grid.n_faces_x + iy * nx + ix
            c1 = iy * nx + ix
            rows += [fidx, fidx]
            cols += [c1, c1 + nx]
            vals += [-1.0 / grid.dy, 1.0 / grid.dy]
    return sp.coo_matrix((vals, (rows, cols)), shape=(grid.n_faces, grid.n_cells)).tocsr()
