"""Star-shaped metric graphs, their straight-line embeddings, and the
overlap-preventing placement penalty with its analytic gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CombinatorialStarGraph",
    "EmbeddedStarGraph",
    "PenaltyValue",
    "EmbeddingReport",
    "DegenerateGeometryError",
    "edge_normal_sign",
    "unsigned_angle",
    "penalty_R",
    "penalty_from_positions",
    "penalty_R_gradient_check",
    "validate_embedding",
    "embed_star",
]


class DegenerateGeometryError(ValueError):
    """Raised when a geometric query is evaluated at a degenerate configuration."""


@dataclass(frozen=True)
class CombinatorialStarGraph:
    """Star graph: vertex 0 is the center, every edge is (0, i) for i >= 1."""

    num_vertices: int

    def __post_init__(self):
        if self.num_vertices < 2:
            raise ValueError(f"star graph needs at least 2 vertices, got {self.num_vertices}")

    @property
    def num_edges(self) -> int:
        return self.num_vertices - 1

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(0, i) for i in range(1, self.num_vertices)]

    @property
    def leaves(self) -> list[int]:
        return list(range(1, self.num_vertices))


def edge_normal_sign(graph: CombinatorialStarGraph, edge_index: int, vertex: int) -> int:
    """Orientation sign of ``vertex`` within the directed edge: -1 at the tail
    (first vertex), +1 at the head, 0 when the vertex is not part of the edge."""
    if not 0 <= edge_index < graph.num_edges:
        raise ValueError(f"unknown edge index {edge_index}")
    if not 0 <= vertex < graph.num_vertices:
        raise ValueError(f"unknown vertex {vertex}")
    tail, head = graph.edges[edge_index]
    if vertex == tail:
        return -1
    if vertex == head:
        return +1
    return 0


@dataclass(frozen=True)
class EmbeddedStarGraph:
    """Star graph with vertex coordinates in the plane (or R^d).

    Edge e = (0, i) is the straight segment from the center to leaf i; lengths
    and unit tangents are derived from the positions.
    """

    graph: CombinatorialStarGraph
    positions: np.ndarray            # (num_vertices, d)
    lengths: np.ndarray = field(init=False)   # (num_edges,)
    tangents: np.ndarray = field(init=False)  # (num_edges, d)

    def __post_init__(self):
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2 or pos.shape[0] != self.graph.num_vertices:
            raise ValueError(
                f"positions must have shape ({self.graph.num_vertices}, d), got {pos.shape}"
            )
        diffs = pos[1:] - pos[0]
        lengths = np.linalg.norm(diffs, axis=1)
        if np.any(lengths == 0.0):
            raise DegenerateGeometryError("leaf coincides with the center")
        tangents = diffs / lengths[:, None]
        for arr in (pos, lengths, tangents):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "tangents", tangents)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def with_positions(self, positions: np.ndarray) -> "EmbeddedStarGraph":
        return EmbeddedStarGraph(self.graph, positions)


def embed_star(positions) -> EmbeddedStarGraph:
    """Build an embedded star graph from a (num_vertices, d) coordinate array;
    vertex 0 is the center."""
    pos = np.asarray(positions, dtype=float)
    return EmbeddedStarGraph(CombinatorialStarGraph(pos.shape[0]), pos)


def unsigned_angle(x0, xa, xb) -> float:
    """Unsigned angle in [0, pi] between the rays x0->xa and x0->xb.

    The cosine is clamped to [-1, 1] so nearly-collinear inputs never produce
    NaN. Raises :class:`DegenerateGeometryError` if xa or xb coincides with x0.
    """
    x0 = np.asarray(x0, dtype=float)
    ua = np.asarray(xa, dtype=float) - x0
    ub = np.asarray(xb, dtype=float) - x0
    na = np.linalg.norm(ua)
    nb = np.linalg.norm(ub)
    if na == 0.0 or nb == 0.0:
        raise DegenerateGeometryError("angle endpoint coincides with the apex")
    c = float(np.dot(ua, ub) / (na * nb))
    return float(abs(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True)
class PenaltyValue:
    """Placement penalty: inverse center-leaf distances plus inverse pairwise
    edge angles. ``gradient`` is None exactly when the total is infinite."""

    total: float
    coulomb: np.ndarray                       # (num_leaves,) 1/|x_i - x_0|
    angle_pairs: list[tuple[int, int, float]]  # (i, j, 1/angle) per unordered leaf pair
    gradient: np.ndarray | None               # (num_vertices, d)


def penalty_from_positions(positions) -> PenaltyValue:
    """Evaluate the placement penalty on raw vertex coordinates.

    Returns total = +inf (with no gradient) when a leaf coincides with the
    center or a pair of edges has zero angle; otherwise also returns the exact
    analytic gradient with respect to every coordinate.
    """
    pos = np.asarray(positions, dtype=float)
    n_v, d = pos.shape
    if n_v < 2:
        raise ValueError("penalty needs at least two vertices")
    u = pos[1:] - pos[0]                      # (L, d) center-to-leaf vectors
    r = np.linalg.norm(u, axis=1)             # (L,)
    n_leaves = n_v - 1

    if np.any(r == 0.0):
        coul = np.where(r == 0.0, np.inf, np.divide(1.0, r, out=np.full_like(r, np.inf), where=r != 0))
        return PenaltyValue(np.inf, coul, [], None)

    coulomb = 1.0 / r
    grad = np.zeros((n_v, d))
    # d(1/r_i)/dx_i = -u_i / r_i^3, the center picks up the opposite sign
    gc = u / r[:, None] ** 3
    grad[1:] -= gc
    grad[0] += gc.sum(axis=0)

    angle_pairs: list[tuple[int, int, float]] = []
    total = float(coulomb.sum())
    for i in range(n_leaves):
        for j in range(i + 1, n_leaves):
            dot = float(np.dot(u[i], u[j]))
            c = dot / (r[i] * r[j])
            c = min(1.0, max(-1.0, c))
            alpha = abs(float(np.arccos(c)))
            if alpha == 0.0:
                return PenaltyValue(np.inf, coulomb, [], None)
            angle_pairs.append((i + 1, j + 1, 1.0 / alpha))
            total += 1.0 / alpha
            s_sq = 1.0 - c * c
            if s_sq > 0.0:
                # d(1/alpha) = (1 / (alpha^2 * sin(alpha))) * dc
                dci = u[j] / (r[i] * r[j]) - c * u[i] / r[i] ** 2
                dcj = u[i] / (r[i] * r[j]) - c * u[j] / r[j] ** 2
                coef = 1.0 / (alpha * alpha * np.sqrt(s_sq))
                grad[i + 1] += coef * dci
                grad[j + 1] += coef * dcj
                grad[0] -= coef * (dci + dcj)
            # s_sq == 0 with alpha == pi: antipodal edges; the unsigned angle has
            # a symmetric corner there, the zero subgradient matches central
            # differences.

    return PenaltyValue(total, coulomb, angle_pairs, grad)


def penalty_R(g: EmbeddedStarGraph) -> PenaltyValue:
    """Placement penalty of an embedded star graph (see
    :func:`penalty_from_positions`)."""
    return penalty_from_positions(g.positions)


def penalty_R_gradient_check(g: EmbeddedStarGraph, h: float) -> float:
    """Max relative deviation between the analytic penalty gradient and central
    finite differences with step ``h``. Requires a finite penalty."""
    if h <= 0:
        raise ValueError("step h must be positive")
    val = penalty_R(g)
    if not np.isfinite(val.total):
        raise ValueError("penalty is infinite; gradient undefined")
    pos = np.array(g.positions, dtype=float)
    err = 0.0
    for v in range(pos.shape[0]):
        for k in range(pos.shape[1]):
            pp = pos.copy()
            pp[v, k] += h
            fp = penalty_from_positions(pp).total
            pp[v, k] -= 2 * h
            fm = penalty_from_positions(pp).total
            fd = (fp - fm) / (2 * h)
            a = val.gradient[v, k]
            err = max(err, abs(a - fd) / max(1.0, abs(a)))
    return err


@dataclass
class EmbeddingReport:
    valid: bool
    violations: list[str]


def _segments_intersect_2d(p1, p2, p3, p4) -> bool:
    """True when closed segments [p1,p2] and [p3,p4] share at least one point."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0.0 else (1 if v > 0 else -1)

    def on_segment(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    o1 = orient(p1, p2, p3)
    o2 = orient(p1, p2, p4)
    o3 = orient(p3, p4, p1)
    o4 = orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_segment(p1, p2, p3):
        return True
    if o2 == 0 and on_segment(p1, p2, p4):
        return True
    if o3 == 0 and on_segment(p3, p4, p1):
        return True
    if o4 == 0 and on_segment(p3, p4, p2):
        return True
    return False


def _segment_distance(p1, p2, p3, p4) -> float:
    """Euclidean distance between two closed segments in R^d (d >= 2)."""
    d1 = p2 - p1
    d2 = p4 - p3
    r = p1 - p3
    a = float(np.dot(d1, d1))
    e = float(np.dot(d2, d2))
    fdot = float(np.dot(d2, r))
    if a == 0.0 and e == 0.0:
        return float(np.linalg.norm(r))
    if a == 0.0:
        t = np.clip(fdot / e, 0.0, 1.0)
        return float(np.linalg.norm(p1 - (p3 + t * d2)))
    c = float(np.dot(d1, r))
    if e == 0.0:
        s = np.clip(-c / a, 0.0, 1.0)
        return float(np.linalg.norm(p1 + s * d1 - p3))
    b = float(np.dot(d1, d2))
    denom = a * e - b * b
    s = np.clip((b * fdot - c * e) / denom, 0.0, 1.0) if denom > 0 else 0.0
    t = (b * s + fdot) / e
    if t < 0.0:
        t = 0.0
        s = np.clip(-c / a, 0.0, 1.0)
    elif t > 1.0:
        t = 1.0
        s = np.clip((b - c) / a, 0.0, 1.0)
    return float(np.linalg.norm(p1 + s * d1 - (p3 + t * d2)))


def validate_embedding(g: EmbeddedStarGraph, rect) -> EmbeddingReport:
    """Check that the embedding is admissible inside the rectangle.

    Checks: every vertex inside the rectangle, pairwise distinct vertices,
    stored edge lengths matching the coordinates, and no pair of edges
    intersecting away from their shared center. Violations are reported as
    data, never raised.
    """
    x_lo, x_hi, y_lo, y_hi = rect[0], rect[1], rect[2], rect[3]
    pos = g.positions
    n_v, d = pos.shape
    diam = float(np.hypot(x_hi - x_lo, y_hi - y_lo))
    tol = 1e-12 * max(diam, 1.0)
    violations: list[str] = []

    lo = np.array([x_lo, y_lo])
    hi = np.array([x_hi, y_hi])
    for v in range(n_v):
        p2 = pos[v, :2]
        if np.any(p2 < lo - tol) or np.any(p2 > hi + tol):
            violations.append(f"vertex {v} lies outside the domain rectangle")

    for i in range(n_v):
        for j in range(i + 1, n_v):
            if np.linalg.norm(pos[i] - pos[j]) <= tol:
                violations.append(f"vertices {i} and {j} coincide")

    for e, (_, leaf) in enumerate(g.graph.edges):
        actual = float(np.linalg.norm(pos[leaf] - pos[0]))
        if abs(actual - g.lengths[e]) > 1e-9 * max(1.0, actual):
            violations.append(f"edge {e} length {g.lengths[e]} != |x_{leaf} - x_0| = {actual}")

    # All edges share the center, so a forbidden overlap shows up either as a
    # zero angle (collinear same-direction edges) or, for numerically distinct
    # directions, as a genuine crossing caught by the pairwise test.
    n_e = g.graph.num_edges
    for a in range(n_e):
        for bidx in range(a + 1, n_e):
            la, lb = a + 1, bidx + 1
            if np.array_equal(pos[la], pos[lb]):
                violations.append(f"edges {a} and {bidx} overlap (zero angle)")
                continue
            try:
                ang = unsigned_angle(pos[0], pos[la], pos[lb])
            except DegenerateGeometryError:
                continue  # coincident vertices already reported
            if ang == 0.0:
                violations.append(f"edges {a} and {bidx} overlap (zero angle)")
                continue
            if d == 2:
                # shift the shared center off each segment before the generic test
                ta = pos[0] + (pos[la] - pos[0]) * 1e-9
                tb = pos[0] + (pos[lb] - pos[0]) * 1e-9
                if _segments_intersect_2d(ta, pos[la], tb, pos[lb]):
                    violations.append(f"edges {a} and {bidx} intersect away from the center")
            else:
                ta = pos[0] + (pos[la] - pos[0]) * 1e-6
                tb = pos[0] + (pos[lb] - pos[0]) * 1e-6
                if _segment_distance(ta, pos[la], tb, pos[lb]) < 1e-12 * max(diam, 1.0):
                    violations.append(f"edges {a} and {bidx} pass within tolerance of each other")

    return EmbeddingReport(valid=not violations, violations=violations)
