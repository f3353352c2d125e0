"""First-order primal-dual solver for the fixed-graph transport problem, plus
runtime diagnostics (time-regularity table, density bounds)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .meshes import (
    BulkGrid,
    CEOperator,
    DiscreteFlow,
    GraphMesh,
    TimeGrid,
    ce_residual,
    power_iteration_norm,
    total_mass,
)
from .mobility import ActionBreakdown, ActionWeights, Mobility, action, density_bounds_check, prox_batch

__all__ = [
    "SolverConfig",
    "SolveReport",
    "solve_fixed_graph",
    "initial_flow",
    "holder_diagnostic",
    "holder_dictionary",
]


@dataclass
class SolverConfig:
    """Primal-dual iteration settings; step sizes are derived from a seeded
    power-iteration estimate of the operator norm unless given explicitly."""

    max_iterations: int = 20000
    ce_tolerance: float = 1e-5
    action_tolerance: float = 1e-6
    theta: float = 1.0
    step_safety: float = 0.95
    step_ratio: float = 1.0     # sigma / tau
    check_every: int = 25
    stagnation_window: int = 100
    power_seed: int = 42
    preconditioned: bool = True  # diagonal row/column step scaling
    relaxation: float = 1.0      # averaging of the iterate pair, in (0, 2)
    sigma: float | None = None
    tau: float | None = None
    verbose: bool = False

    def __post_init__(self):
        if self.ce_tolerance <= 0 or self.action_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.step_safety < 1:
            raise ValueError("step_safety must be in (0, 1)")


@dataclass
class SolveReport:
    action: ActionBreakdown
    ce_residual: float
    iterations: int
    converged: bool
    wall_time: float
    holder_table: np.ndarray
    holder_max: float
    bound_violations: int
    infeasible: bool
    mass_error: float
    norm_estimate: float
    history: list = field(default_factory=list)   # (iteration, ce_residual, mass_error, action)


def initial_flow(op: CEOperator) -> DiscreteFlow:
    """Linear interpolation of the boundary masses with zero momenta and
    exchanges; feasible only when the data are static."""
    flow = DiscreteFlow.zeros(op.grid, op.gmesh, op.tgrid)
    t = op.tgrid.times[:, None]
    flow.mu[:] = (1.0 - t) * op.data.mu0[None, :] + t * op.data.mu1[None, :]
    flow.rho[:] = (1.0 - t) * op.data.rho0[None, :] + t * op.data.rho1[None, :]
    return flow


@dataclass
class _CollocatedBlock:
    """One family of kinetic collocation points inside the extended unknown
    vector: a density copy, p momentum copies, and the prox scalings."""

    u_slice: slice
    w_slices: list[slice]
    lam: np.ndarray            # reference mass per point
    weight: np.ndarray         # action weight per point (already times dt)
    mobility: Mobility


class _PdhgSystem:
    """Extended operator [[A, 0], [C, -I]] linking the staggered flow to the
    collocated copies the action is evaluated at."""

    def __init__(self, op: CEOperator, bulk_mobility: Mobility, graph_mobility: Mobility,
                 weights: ActionWeights):
        grid, gmesh, tgrid = op.grid, op.gmesh, op.tgrid
        layout = op.layout
        nt = tgrid.n_steps
        n_c, n_f = grid.n_cells, grid.n_faces
        n_s, n_e = gmesh.n_segments, gmesh.n_edges
        dt = tgrid.dt

        sizes = {
            "Ub": nt * n_c, "Wbx": nt * n_c, "Wby": nt * n_c,
            "Ug1": nt * n_s, "Wg1": nt * n_s,
            "Ug2": nt * n_s, "Wg2": nt * n_s,
            "Uv": nt * n_e, "Wv": nt * n_e,
        }
        coll_slices = {}
        start = layout.size
        for name, n in sizes.items():
            coll_slices[name] = slice(start, start + n)
            start += n
        self.n_total = start
        self.n_staggered = layout.size
        self.layout = layout
        self.op = op

        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        n_coll = self.n_total - layout.size

        def add(r, c, v):
            r = np.asarray(r, dtype=int).ravel()
            c = np.asarray(c, dtype=int).ravel()
            v = np.broadcast_to(np.asarray(v, dtype=float), r.shape).ravel()
            rows.append(r)
            cols.append(c)
            vals.append(v)

        def coll_row(name, idx):
            return coll_slices[name].start - layout.size + idx

        o_mu = layout.start("mu")
        o_J = layout.start("J")
        o_rho = layout.start("rho")
        o_V = layout.start("V")
        o_f = layout.start("f")
        o_G = layout.start("G")

        k = np.repeat(np.arange(nt), n_c)
        c = np.tile(np.arange(n_c), nt)
        pt = k * n_c + c
        add(coll_row("Ub", pt), o_mu + k * n_c + c, 0.5)
        add(coll_row("Ub", pt), o_mu + (k + 1) * n_c + c, 0.5)
        for name, tables in (("Wbx", (grid.west_face, grid.east_face)),
                             ("Wby", (grid.south_face, grid.north_face))):
            for table in tables:
                have = table[c] >= 0
                add(coll_row(name, pt[have]), o_J + k[have] * n_f + table[c[have]], 0.5)

        ks = np.repeat(np.arange(nt), n_s)
        s = np.tile(np.arange(n_s), nt)
        ps = ks * n_s + s
        for name in ("Ug1", "Ug2"):
            add(coll_row(name, ps), o_rho + ks * n_s + s, 0.5)
            add(coll_row(name, ps), o_rho + (ks + 1) * n_s + s, 0.5)
        add(coll_row("Wg1", ps), o_V + ks * n_s + s, 0.5)
        inner = ~gmesh.is_last_segment[s]
        add(coll_row("Wg1", ps[inner]), o_V + ks[inner] * n_s + s[inner] + 1, 0.5)
        last = gmesh.is_last_segment[s]
        add(coll_row("Wg1", ps[last]), o_G + ks[last] * n_e + gmesh.segment_edge[s[last]],
            0.5 * gmesh.outer_sign * gmesh.lambda_seg[s[last]])
        add(coll_row("Wg2", ps), o_f + ks * n_s + s, 1.0)

        kl = np.repeat(np.arange(nt), n_e)
        leaf = np.tile(np.arange(n_e), nt)
        pv = kl * n_e + leaf
        last_seg = gmesh.offsets[1:] - 1
        coef = gmesh.lambda_vertex[leaf] / (2.0 * gmesh.lambda_seg[last_seg[leaf]])
        add(coll_row("Uv", pv), o_rho + kl * n_s + last_seg[leaf], coef)
        add(coll_row("Uv", pv), o_rho + (kl + 1) * n_s + last_seg[leaf], coef)
        add(coll_row("Wv", pv), o_G + kl * n_e + leaf, 1.0)

        C = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_coll, layout.size),
        )
        self.K = sp.bmat(
            [[op.A, None], [C, -sp.identity(n_coll, format="coo")]], format="csr"
        )
        self.Kt = self.K.T.tocsr()
        self.b = np.concatenate([op.b, np.zeros(n_coll)])
        self.n_rows = self.K.shape[0]
        self.coll_slices = coll_slices

        lam_c = np.full(nt * n_c, grid.cell_area)
        lam_s = np.tile(gmesh.lambda_seg, nt)
        lam_v = np.tile(gmesh.lambda_vertex, nt)
        self.blocks = [
            _CollocatedBlock(coll_slices["Ub"], [coll_slices["Wbx"], coll_slices["Wby"]],
                             lam_c, dt * lam_c, bulk_mobility),
            _CollocatedBlock(coll_slices["Ug1"], [coll_slices["Wg1"]],
                             lam_s, dt * lam_s * weights.alpha1, graph_mobility),
            _CollocatedBlock(coll_slices["Ug2"], [coll_slices["Wg2"]],
                             lam_s, dt * lam_s * weights.alpha2, graph_mobility),
            _CollocatedBlock(coll_slices["Uv"], [coll_slices["Wv"]],
                             lam_v, dt * lam_v * weights.alpha3, graph_mobility),
        ]

        # box bounds for the staggered masses (mobility domains per control volume)
        lo = np.full(layout.size, -np.inf)
        hi = np.full(layout.size, np.inf)
        mu_lam = np.full(layout.shapes["mu"], grid.cell_area).ravel()
        lo[layout.slices["mu"]] = bulk_mobility.a * mu_lam
        hi[layout.slices["mu"]] = bulk_mobility.b * mu_lam
        rho_lam = np.tile(gmesh.lambda_seg, nt + 1)
        lo[layout.slices["rho"]] = graph_mobility.a * rho_lam
        hi[layout.slices["rho"]] = graph_mobility.b * rho_lam
        self.mass_lo, self.mass_hi = lo, hi
        self.mass_mask = np.isfinite(lo) | np.isfinite(hi)

    def lift(self, flow: DiscreteFlow) -> np.ndarray:
        """Staggered flow -> extended vector with consistent collocated copies."""
        xs = self.layout.to_vector(flow)
        full = np.concatenate([xs, np.zeros(self.n_total - self.n_staggered)])
        # the collocated rows of K read C @ xs when the -I block sees zeros
        coll = (self.K @ full)[self.op.A.shape[0]:]
        full[self.n_staggered:] = coll
        return full

    def unify_momentum_steps(self, tau_vec: np.ndarray) -> np.ndarray:
        """Make the primal metric constant across the momentum components of
        each collocation point (taking the min keeps the step condition
        valid), so the joint kinetic prox is exact in that metric."""
        out = tau_vec.copy()
        for blk in self.blocks:
            if len(blk.w_slices) > 1:
                merged = out[blk.w_slices[0]]
                for ws in blk.w_slices[1:]:
                    merged = np.minimum(merged, out[ws])
                for ws in blk.w_slices:
                    out[ws] = merged
        return out

    def prox_primal(self, x: np.ndarray, tau) -> None:
        """In-place prox of the separable objective under the (possibly
        diagonal) primal metric: box projection of the staggered masses, then
        the kinetic prox at every collocation point."""
        np.clip(x[:self.n_staggered], self.mass_lo, self.mass_hi,
                out=x[:self.n_staggered])
        scalar = np.ndim(tau) == 0
        for blk in self.blocks:
            lam = blk.lam
            if scalar:
                tau_u = tau_w = tau * blk.weight / (lam * lam)
            else:
                tau_u = tau[blk.u_slice] * blk.weight / (lam * lam)
                tau_w = tau[blk.w_slices[0]] * blk.weight / (lam * lam)
            ubar = x[blk.u_slice] / lam
            vsq = np.zeros_like(ubar)
            for ws in blk.w_slices:
                w = x[ws] / lam
                vsq += w * w
            u, scale = prox_batch(blk.mobility, tau_u, ubar, vsq, tau_w)
            x[blk.u_slice] = lam * u
            for ws in blk.w_slices:
                x[ws] *= scale


def holder_dictionary(grid: BulkGrid, size: int) -> list[np.ndarray]:
    """Fixed dictionary of smooth test functions with C1 norm at most one,
    sampled at the cell centers: normalized products cos(pi p x) cos(pi q y)
    in domain-normalized coordinates, enumerated by total degree."""
    centers = grid.cell_centers()
    xh = (centers[:, 0] - grid.x_lo) / (grid.x_hi - grid.x_lo)
    yh = (centers[:, 1] - grid.y_lo) / (grid.y_hi - grid.y_lo)
    orders = sorted(
        ((p, q) for p in range(6) for q in range(6) if (p, q) != (0, 0)),
        key=lambda pq: (pq[0] + pq[1], pq[0], pq[1]),
    )
    out = []
    for p, q in orders[:size]:
        grad_bound = np.hypot(np.pi * p / (grid.x_hi - grid.x_lo),
                              np.pi * q / (grid.y_hi - grid.y_lo))
        phi = np.cos(np.pi * p * xh) * np.cos(np.pi * q * yh) / (1.0 + grad_bound)
        out.append(phi)
    return out


def holder_diagnostic(flow: DiscreteFlow, grid: BulkGrid, tgrid: TimeGrid,
                      dictionary_size: int = 16, functions=None) -> np.ndarray:
    """Empirical time-regularity table: for every pair of density times, a
    dictionary lower bound on the dual C1 norm of the bulk mass difference,
    divided by sqrt(|t - s|). Columns: t, s, ratio."""
    if functions is None:
        functions = holder_dictionary(grid, dictionary_size)
    phi = np.asarray(functions)                      # (D, n_cells)
    pairings = phi @ flow.mu.T                       # (D, nt + 1)
    times = tgrid.times
    rows = []
    for k in range(times.size):
        for l in range(k + 1, times.size):
            bound = float(np.abs(pairings[:, l] - pairings[:, k]).max())
            rows.append((times[l], times[k], bound / np.sqrt(times[l] - times[k])))
    return np.array(rows)


def solve_fixed_graph(op: CEOperator, bulk_mobility: Mobility, graph_mobility: Mobility,
                      weights: ActionWeights, cfg: SolverConfig | None = None,
                      warm_start: DiscreteFlow | None = None,
                      ) -> tuple[DiscreteFlow, SolveReport]:
    """Minimize the discrete action over flows satisfying the assembled
    continuity constraints, by a primal-dual hybrid gradient iteration with
    the pointwise kinetic prox as the primal step and plain dual ascent on the
    affine constraint.

    Returns the final flow and a report; ``converged`` requires the relative
    constraint residual to be at or below tolerance, the mass drift below ten
    times the tolerance, and the action to have stagnated.
    """
    cfg = cfg or SolverConfig()
    t_start = time.perf_counter()
    grid, gmesh, tgrid = op.grid, op.gmesh, op.tgrid
    system = _PdhgSystem(op, bulk_mobility, graph_mobility, weights)

    norm_K = power_iteration_norm(system.K, seed=cfg.power_seed)
    if cfg.sigma is not None and cfg.tau is not None:
        sigma, tau = cfg.sigma, cfg.tau
    elif cfg.preconditioned:
        # diagonal steps from the absolute row/column sums; the product
        # condition sigma_i tau_j |K|^2 <= safety holds in the scaled metric
        absK = abs(system.K)
        row_sums = np.asarray(absK.sum(axis=1)).ravel()
        col_sums = np.asarray(absK.sum(axis=0)).ravel()
        s = np.sqrt(cfg.step_safety)
        sigma = s * np.sqrt(cfg.step_ratio) / np.maximum(row_sums, 1e-300)
        tau = s / np.sqrt(cfg.step_ratio) / np.maximum(col_sums, 1e-300)
        tau = system.unify_momentum_steps(tau)
    else:
        # round so relabeled-but-equivalent instances share bitwise step sizes
        norm_rounded = float(np.format_float_positional(
            norm_K * 1.0000001, precision=6, unique=False, fractional=False))
        base = np.sqrt(cfg.step_safety) / max(norm_rounded, 1e-300)
        sigma = base * np.sqrt(cfg.step_ratio)
        tau = base / np.sqrt(cfg.step_ratio)

    start_flow = warm_start if warm_start is not None else initial_flow(op)
    x = system.lift(start_flow)
    warm_dual = getattr(warm_start, "_dual", None) if warm_start is not None else None
    y = (warm_dual.copy() if isinstance(warm_dual, np.ndarray)
         and warm_dual.shape == (system.n_rows,) else np.zeros(system.n_rows))
    xbar = x.copy()

    def evaluate(vec):
        flow = system.layout.to_flow(vec[:system.n_staggered])
        ce = ce_residual(op, flow)
        masses = flow.mu.sum(axis=1) + flow.rho.sum(axis=1)
        mass_err = float(np.abs(masses - 1.0).max())
        act = action(flow, grid, gmesh, tgrid, bulk_mobility, graph_mobility, weights)
        return flow, ce, mass_err, act

    history: list[tuple[int, float, float, float]] = []
    best = None  # (ce, action_total, x copy, y copy)
    converged = False
    iterations = 0
    disp = np.inf
    mass_tol = 10.0 * cfg.ce_tolerance

    def record(it, vec):
        nonlocal best
        flow, ce, mass_err, act = evaluate(vec)
        history.append((it, ce, mass_err, act.total))
        key = (ce, act.total if np.isfinite(act.total) else np.inf)
        if best is None or key < best[0]:
            best = (key, vec.copy(), y.copy())
        return flow, ce, mass_err, act

    def stagnated(it, act_total):
        if act_total == 0.0:
            return True
        if disp <= 1e-9:
            return True
        for it_prev, _, _, act_prev in reversed(history[:-1]):
            if it - it_prev >= cfg.stagnation_window:
                if not (np.isfinite(act_prev) and np.isfinite(act_total)):
                    return False
                return abs(act_total - act_prev) <= cfg.action_tolerance * max(1.0, abs(act_total))
        return False

    _, ce, mass_err, act = record(0, x)
    if ce <= cfg.ce_tolerance and mass_err <= mass_tol and act.total == 0.0:
        converged = True

    check_points = set(range(1, 4)) | set(
        range(cfg.check_every, cfg.max_iterations + 1, cfg.check_every))
    check_points.add(cfg.max_iterations)

    rho = cfg.relaxation
    it = 0
    while not converged and it < cfg.max_iterations:
        it += 1
        x_old = x
        y_new = y + sigma * (system.K @ xbar - system.b)
        x = x_old - tau * (system.Kt @ y_new)
        system.prox_primal(x, tau)
        if rho != 1.0:
            x = rho * x + (1.0 - rho) * x_old
            y = rho * y_new + (1.0 - rho) * y
        else:
            y = y_new
        xbar = x + cfg.theta * (x - x_old)

        if it in check_points:
            disp = float(np.linalg.norm(x - x_old) / max(1.0, np.linalg.norm(x)))
            _, ce, mass_err, act = record(it, x)
            if cfg.verbose:
                print(f"  iter {it:6d}  ce {ce:.3e}  mass {mass_err:.3e}  "
                      f"action {act.total:.8f}  disp {disp:.2e}")
            if ce <= cfg.ce_tolerance and mass_err <= mass_tol and stagnated(it, act.total):
                converged = True
    iterations = it

    if converged:
        final_x, final_y = x, y
    else:
        final_x, final_y = (best[1], best[2]) if best is not None else (x, y)
    flow, ce, mass_err, act = evaluate(final_x)
    flow._dual = final_y.copy()

    bounds = density_bounds_check(flow, grid, gmesh, bulk_mobility, graph_mobility, 1e-6)
    table = holder_diagnostic(flow, grid, tgrid)
    infeasible = all(not np.isfinite(h[3]) for h in history)
    report = SolveReport(
        action=act,
        ce_residual=ce,
        iterations=iterations,
        converged=converged,
        wall_time=time.perf_counter() - t_start,
        holder_table=table,
        holder_max=float(table[:, 2].max()) if table.size else 0.0,
        bound_violations=len(bounds.violations),
        infeasible=infeasible,
        mass_error=mass_err,
        norm_estimate=norm_K,
        history=history,
    )
    return flow, report
