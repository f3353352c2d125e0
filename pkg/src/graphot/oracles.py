"""Independent brute-force and closed-form references used by the tests and
the acceptance suite. Deliberately simple; they re-derive everything from the
domain types instead of sharing code with the modules they validate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .meshes import BoundaryData, BulkGrid, GraphMesh, TimeGrid
from .mobility import Mobility

__all__ = [
    "OracleResult",
    "w2_squared_1d",
    "prox_grid_search",
    "center_grid_search",
    "dense_ce_matrix",
]


@dataclass
class OracleResult:
    value: object
    method: str
    params: dict = field(default_factory=dict)


def w2_squared_1d(mu_positions, mu_weights, nu_positions, nu_weights) -> float:
    """Quadratic transport cost between two 1D histograms via exact piecewise
    integration of the step quantile functions."""
    xm = np.asarray(mu_positions, dtype=float)
    wm = np.asarray(mu_weights, dtype=float)
    xn = np.asarray(nu_positions, dtype=float)
    wn = np.asarray(nu_weights, dtype=float)
    if np.any(wm < 0) or np.any(wn < 0):
        raise ValueError("histogram weights must be nonnegative")
    total_m, total_n = float(wm.sum()), float(wn.sum())
    if abs(total_m - total_n) > 1e-12:
        raise ValueError(f"total masses differ: {total_m} vs {total_n}")
    if total_m == 0.0:
        return 0.0

    om = np.argsort(xm, kind="stable")
    on = np.argsort(xn, kind="stable")
    xm, wm = xm[om], wm[om]
    xn, wn = xn[on], wn[on]
    cm = np.cumsum(wm)
    cn = np.cumsum(wn)
    # integrate over mass quantiles q in [0, total]
    qs = np.unique(np.concatenate([[0.0], cm, cn, [total_m]]))
    qs = qs[(qs >= 0.0) & (qs <= total_m)]
    q_lo, q_hi = qs[:-1], qs[1:]
    q_mid = 0.5 * (q_lo + q_hi)
    xi = xm[np.minimum(np.searchsorted(cm, q_mid, side="right"), xm.size - 1)]
    yi = xn[np.minimum(np.searchsorted(cn, q_mid, side="right"), xn.size - 1)]
    return float(np.sum((q_hi - q_lo) * (xi - yi) ** 2))


def prox_grid_search(m: Mobility, tau: float, ubar: float, vbar: float,
                     bounds=None, resolution: float = 1e-4) -> OracleResult:
    """Minimize the prox objective 0.5 (u-ubar)^2 + 0.5 (v-vbar)^2
    + tau * |v|^2 / m(u) on a grid, refining the window around the coarse
    argmin tenfold per level until the target resolution is reached. The
    objective is jointly convex, so the refinement window always contains the
    minimizer."""
    if bounds is None:
        u_hi = m.b if np.isfinite(m.b) else 5.0
        bounds = ((m.a, u_hi), (-5.0, 5.0))
    (u_lo, u_hi), (v_lo, v_hi) = bounds
    step = max((u_hi - u_lo), (v_hi - v_lo)) / 50.0
    levels = 0

    def objective(u, v):
        mv = m.value(u)
        pos = mv > 0.0
        psi_val = np.where(pos, np.divide(v * v, np.where(pos, mv, 1.0)),
                           np.where((mv == 0.0) & (v == 0.0), 0.0, np.inf))
        return 0.5 * (u - ubar) ** 2 + 0.5 * (v - vbar) ** 2 + tau * psi_val

    cu_lo, cu_hi, cv_lo, cv_hi = u_lo, u_hi, v_lo, v_hi
    best_u, best_v = ubar, vbar
    while True:
        us = np.arange(cu_lo, cu_hi + 0.5 * step, step)
        vs = np.arange(cv_lo, cv_hi + 0.5 * step, step)
        us = np.clip(us, u_lo, u_hi)
        obj = objective(us[:, None], vs[None, :])
        iu, iv = np.unravel_index(np.argmin(obj), obj.shape)
        best_u, best_v = float(us[iu]), float(vs[iv])
        levels += 1
        if step <= resolution:
            break
        window = 2.0 * step
        cu_lo, cu_hi = max(u_lo, best_u - window), min(u_hi, best_u + window)
        cv_lo, cv_hi = best_v - window, best_v + window
        step = max(step / 10.0, resolution)
    return OracleResult(
        (best_u, best_v), "zooming grid search",
        {"resolution": resolution, "levels": levels, "bounds": bounds},
    )


def center_grid_search(scenario, centers) -> OracleResult:
    """Evaluate the outer objective for every candidate center position
    (leaves fixed) and return the argmin together with the full value map.
    Candidates are scanned in a fixed order with warm starts carried along."""
    from .outer import outer_objective

    centers = np.asarray(centers, dtype=float)
    values = np.empty(centers.shape[0])
    warm = None
    base = np.array(scenario.graph_positions, dtype=float)
    for i, center in enumerate(centers):
        pos = base.copy()
        pos[0] = center
        value, iterate = outer_objective(pos, scenario, warm=warm)
        values[i] = value
        if iterate.flow is not None:
            warm = iterate
    best = int(np.argmin(values))
    return OracleResult(
        {"best_center": centers[best].copy(), "best_value": float(values[best]),
         "values": values, "centers": centers},
        "center grid search",
        {"n_candidates": int(centers.shape[0])},
    )


def dense_ce_matrix(grid: BulkGrid, gmesh: GraphMesh, tgrid: TimeGrid,
                    data: BoundaryData):
    """Dense re-derivation of the continuity constraint matrix with plain
    loops, used to validate the sparse assembler. Returns (A, b) with the same
    row and column conventions."""
    nt = tgrid.n_steps
    n_c = grid.n_cells
    n_f = grid.n_faces
    n_s = gmesh.n_segments
    n_e = gmesh.n_edges
    sizes = [(nt + 1) * n_c, nt * n_f, (nt + 1) * n_s, nt * n_s, nt * n_s, nt * n_e]
    starts = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    o_mu, o_J, o_rho, o_V, o_f, o_G = (int(x) for x in starts[:6])
    n_cols = int(starts[-1])
    n_rows = nt * n_c + nt * n_s + nt + 2 * n_c + 2 * n_s
    A = np.zeros((n_rows, n_cols))
    b = np.zeros(n_rows)
    dt = tgrid.dt

    for k in range(nt):
        for iy in range(grid.ny):
            for ix in range(grid.nx):
                c = iy * grid.nx + ix
                r = k * n_c + c
                A[r, o_mu + (k + 1) * n_c + c] += 1.0 / dt
                A[r, o_mu + k * n_c + c] -= 1.0 / dt
                if ix <= grid.nx - 2:
                    A[r, o_J + k * n_f + iy * (grid.nx - 1) + ix] += 1.0 / grid.dx
                if ix >= 1:
                    A[r, o_J + k * n_f + iy * (grid.nx - 1) + ix - 1] -= 1.0 / grid.dx
                if iy <= grid.ny - 2:
                    A[r, o_J + k * n_f + grid.n_faces_x + iy * grid.nx + ix] += 1.0 / grid.dy
                if iy >= 1:
                    A[r, o_J + k * n_f + grid.n_faces_x + (iy - 1) * grid.nx + ix] -= 1.0 / grid.dy
        for s in range(n_s):
            A[k * n_c + gmesh.segment_cell[s], o_f + k * n_s + s] += 1.0
        for e in range(n_e):
            A[k * n_c + gmesh.leaf_cell[e], o_G + k * n_e + e] -= gmesh.outer_sign

        for e in range(n_e):
            ds = gmesh.ds[e]
            first = gmesh.first_segment_index(e)
            count = gmesh.segments_per_edge[e]
            for i in range(count):
                s = first + i
                r = nt * n_c + k * n_s + s
                A[r, o_rho + (k + 1) * n_s + s] += 1.0 / dt
                A[r, o_rho + k * n_s + s] -= 1.0 / dt
                A[r, o_V + k * n_s + s] -= 1.0 / ds
                if i < count - 1:
                    A[r, o_V + k * n_s + s + 1] += 1.0 / ds
                else:
                    A[r, o_G + k * n_e + e] += gmesh.outer_sign
                A[r, o_f + k * n_s + s] -= 1.0

        r = nt * n_c + nt * n_s + k
        for e in range(n_e):
            A[r, o_V + k * n_s + gmesh.first_segment_index(e)] += gmesh.center_sign / gmesh.ds[e]

    base = nt * n_c + nt * n_s + nt
    for c in range(n_c):
        A[base + c, o_mu + c] = 1.0
        b[base + c] = data.mu0[c]
        A[base + n_c + c, o_mu + nt * n_c + c] = 1.0
        b[base + n_c + c] = data.mu1[c]
    for s in range(n_s):
        A[base + 2 * n_c + s, o_rho + s] = 1.0
        b[base + 2 * n_c + s] = data.rho0[s]
        A[base + 2 * n_c + n_s + s, o_rho + nt * n_s + s] = 1.0
        b[base + 2 * n_c + n_s + s] = data.rho1[s]
    return A, b
