"""Mobility functions, the kinetic integrand with extended-value conventions,
the discrete action, and the proximal map that powers the inner solver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mobility",
    "ActionWeights",
    "ActionBreakdown",
    "NumericalError",
    "psi",
    "psi_prox",
    "psi_prox_residual",
    "action",
    "density_bounds_check",
    "BoundsReport",
]


class NumericalError(RuntimeError):
    """Raised when an iterative numerical routine fails to converge."""


@dataclass(frozen=True)
class Mobility:
    """Concave mobility m on a domain [a, b] (b may be +inf).

    Kinds: ``linear`` m(z) = z on [0, inf), ``volume_filling`` m(z) = z (b - z)
    on [0, b], and ``piecewise`` for a tabulated concave piecewise-linear
    function. Outside the domain m is -inf, which makes the kinetic integrand
    +inf there.
    """

    kind: str
    a: float
    b: float
    knots_z: np.ndarray | None = None
    knots_m: np.ndarray | None = None
    slopes: np.ndarray | None = field(default=None, repr=False)

    @staticmethod
    def linear() -> "Mobility":
        return Mobility("linear", 0.0, np.inf)

    @staticmethod
    def volume_filling(b: float) -> "Mobility":
        if not (b > 0):
            raise ValueError(f"volume-filling upper bound must be positive, got {b}")
        return Mobility("volume_filling", 0.0, float(b))

    @staticmethod
    def piecewise(knots_z, knots_m) -> "Mobility":
        z = np.asarray(knots_z, dtype=float)
        m = np.asarray(knots_m, dtype=float)
        if z.ndim != 1 or z.shape != m.shape or z.size < 2:
            raise ValueError("piecewise mobility needs matching 1D knot arrays of length >= 2")
        if np.any(np.diff(z) <= 0):
            raise ValueError("piecewise mobility knots must be strictly increasing")
        if z[0] < 0:
            raise ValueError("mobility domain must start at a >= 0")
        if np.any(m < 0):
            raise ValueError("piecewise mobility values must be nonnegative")
        if np.any(m[1:-1] <= 0):
            raise ValueError("piecewise mobility must be positive on the interior")
        slopes = np.diff(m) / np.diff(z)
        if np.any(np.diff(slopes) > 1e-12 * max(1.0, float(np.abs(slopes).max()))):
            raise ValueError("piecewise mobility is not concave (slopes increase)")
        mob = Mobility("piecewise", float(z[0]), float(z[-1]), z, m)
        object.__setattr__(mob, "slopes", slopes)
        return mob

    def value(self, u):
        """m(u), with -inf outside [a, b]. Vectorized."""
        u = np.asarray(u, dtype=float)
        if self.kind == "linear":
            out = np.where(u >= 0.0, u, -np.inf)
        elif self.kind == "volume_filling":
            out = np.where((u >= 0.0) & (u <= self.b), u * (self.b - u), -np.inf)
        else:
            inside = (u >= self.a) & (u <= self.b)
            out = np.where(inside, np.interp(u, self.knots_z, self.knots_m), -np.inf)
        return out if out.ndim else float(out)

    def derivs(self, u):
        """(m, m', m'') on the clipped domain, for the prox Newton iteration.

        At piecewise kinks the right slope is used; the caller's bisection
        safeguard absorbs the discontinuity.
        """
        u = np.asarray(u, dtype=float)
        if self.kind == "linear":
            m = np.maximum(u, 0.0)
            return m, np.ones_like(u), np.zeros_like(u)
        if self.kind == "volume_filling":
            uc = np.clip(u, 0.0, self.b)
            return uc * (self.b - uc), self.b - 2.0 * uc, np.full_like(u, -2.0)
        uc = np.clip(u, self.a, self.b)
        m = np.interp(uc, self.knots_z, self.knots_m)
        idx = np.clip(np.searchsorted(self.knots_z, uc, side="right") - 1, 0, self.slopes.size - 1)
        return m, self.slopes[idx], np.zeros_like(u)

    def one_sided_slopes(self, u: float) -> tuple[float, float]:
        """(left, right) derivative of m at a scalar point of the domain."""
        if self.kind == "linear":
            return 1.0, 1.0
        if self.kind == "volume_filling":
            s = self.b - 2.0 * u
            return s, s
        i_right = int(np.clip(np.searchsorted(self.knots_z, u, side="right") - 1,
                              0, self.slopes.size - 1))
        i_left = int(np.clip(np.searchsorted(self.knots_z, u, side="left") - 1,
                             0, self.slopes.size - 1))
        return float(self.slopes[i_left]), float(self.slopes[i_right])


def psi(m: Mobility, u: float, v) -> float:
    """Kinetic integrand |v|^2 / m(u) with the extended-value conventions:
    0 when m(u) = 0 and v = 0, +inf when m(u) <= 0 or is undefined while
    v != 0, and +inf off the mobility domain."""
    vsq = float(np.dot(v, v)) if np.ndim(v) else float(v) * float(v)
    mu = m.value(u)
    if mu > 0.0:
        return vsq / mu
    if mu == 0.0 and vsq == 0.0:
        return 0.0
    return np.inf


def _psi_sum(m: Mobility, lam, u_mass, vsq_mass):
    """Sum of lam * Psi(u_mass/lam, w/lam) over collocation points, where
    vsq_mass = |w|^2. Returns +inf if any point is infinite; never NaN."""
    lam = np.asarray(lam, dtype=float)
    dens = np.asarray(u_mass, dtype=float) / lam
    mval = m.value(dens)
    vsq = np.asarray(vsq_mass, dtype=float)
    pos = mval > 0.0
    zero_ok = (mval == 0.0) & (vsq == 0.0)
    if not np.all(pos | zero_ok):
        return np.inf
    out = np.zeros_like(vsq)
    np.divide(vsq, lam * mval, out=out, where=pos)
    return float(out.sum())


@dataclass(frozen=True)
class ActionWeights:
    """Cost weights: alpha1 edge transport, alpha2 distributed exchange,
    alpha3 vertex exchange. All strictly positive."""

    alpha1: float
    alpha2: float
    alpha3: float

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class ActionBreakdown:
    """Unweighted action parts; ``total`` carries the alpha weights."""

    bulk: float
    edge_transport: float
    edge_exchange: float
    vertex_exchange: float
    total: float

    @staticmethod
    def combine(bulk, edge_transport, edge_exchange, vertex_exchange,
                weights: ActionWeights) -> "ActionBreakdown":
        parts = (bulk, weights.alpha1 * edge_transport, weights.alpha2 * edge_exchange,
                 weights.alpha3 * vertex_exchange)
        total = np.inf if any(np.isinf(p) for p in parts) else float(sum(parts))
        return ActionBreakdown(bulk, edge_transport, edge_exchange, vertex_exchange, total)


def action(flow, grid, gmesh, tgrid, bulk_mobility: Mobility, graph_mobility: Mobility,
           weights: ActionWeights) -> ActionBreakdown:
    """Time-integrated discrete action of a flow.

    Face/interface momenta are averaged to cell/segment centers, masses are
    averaged to the midpoint times, and the leaf term uses the density of the
    outermost segment of the adjacent edge.
    """
    dt = tgrid.dt
    lam_c = grid.cell_area

    mu_mid = 0.5 * (flow.mu[:-1] + flow.mu[1:])          # (Nt, n_cells)
    jx = np.zeros_like(mu_mid)
    jy = np.zeros_like(mu_mid)
    wf = grid.west_face
    ef = grid.east_face
    sf = grid.south_face
    nf = grid.north_face
    has_w, has_e = wf >= 0, ef >= 0
    has_s, has_n = sf >= 0, nf >= 0
    jx[:, has_w] += flow.J[:, wf[has_w]]
    jx[:, has_e] += flow.J[:, ef[has_e]]
    jy[:, has_s] += flow.J[:, sf[has_s]]
    jy[:, has_n] += flow.J[:, nf[has_n]]
    jx *= 0.5
    jy *= 0.5
    bulk = _psi_sum(bulk_mobility, lam_c, mu_mid, jx * jx + jy * jy)

    rho_mid = 0.5 * (flow.rho[:-1] + flow.rho[1:])        # (Nt, n_seg)
    lam_s = gmesh.lambda_seg
    v_mid = np.array(flow.V)
    inner = ~gmesh.is_last_segment
    v_mid[:, inner] += flow.V[:, np.flatnonzero(inner) + 1]
    last = np.flatnonzero(gmesh.is_last_segment)
    v_mid[:, last] += (gmesh.lambda_seg[last] * gmesh.outer_sign)[None, :] * flow.G
    v_mid *= 0.5
    edge_transport = _psi_sum(graph_mobility, np.broadcast_to(lam_s, rho_mid.shape),
                              rho_mid, v_mid * v_mid)
    edge_exchange = _psi_sum(graph_mobility, np.broadcast_to(lam_s, rho_mid.shape),
                             rho_mid, flow.f * flow.f)

    lam_v = gmesh.lambda_vertex
    rho_v = rho_mid[:, last] / gmesh.lambda_seg[last][None, :] * lam_v[None, :]
    vertex_exchange = _psi_sum(graph_mobility, np.broadcast_to(lam_v, rho_v.shape),
                               rho_v, flow.G * flow.G)

    return ActionBreakdown.combine(dt * bulk, dt * edge_transport, dt * edge_exchange,
                                   dt * vertex_exchange, weights)


# --- proximal map -----------------------------------------------------------

def _prox_density(m: Mobility, ubar, cgrad, moff, max_iter=200, tol=1e-13):
    """Solve g(u) = (u - ubar) - cgrad * m'(u) / (m(u) + moff)^2 = 0 on the
    mobility domain, vectorized. g is nondecreasing (the reduced prox objective
    is convex), so Newton with bracket projection is safe."""
    ubar = np.asarray(ubar, dtype=float)
    cgrad = np.broadcast_to(np.asarray(cgrad, dtype=float), ubar.shape)
    moff = np.broadcast_to(np.asarray(moff, dtype=float), ubar.shape)

    lo = np.full_like(ubar, m.a)
    if np.isfinite(m.b):
        hi = np.full_like(ubar, m.b)
    else:
        # only the linear kind has an unbounded domain: m' = 1, m >= m(a)
        m_a = m.value(np.full_like(ubar, m.a))
        hi = np.maximum(ubar, m.a) + cgrad / (m_a + moff) ** 2 + 1e-30

    def g_of(u):
        mv, mp, _ = m.derivs(u)
        return (u - ubar) - cgrad * mp / (mv + moff) ** 2

    u = np.clip(ubar, lo, hi)
    g_lo = g_of(lo)
    at_lo = g_lo >= 0.0
    at_hi = np.zeros_like(at_lo)
    if np.isfinite(m.b):
        g_hi = g_of(hi)
        at_hi = (~at_lo) & (g_hi <= 0.0)
    free = ~(at_lo | at_hi)

    scale = max(1.0, float(np.abs(ubar).max(initial=0.0)), float(np.abs(cgrad).max(initial=0.0)))
    for _ in range(max_iter):
        mv, mp, mpp = m.derivs(u)
        q = mv + moff
        g = (u - ubar) - cgrad * mp / (q * q)
        above = g > 0.0
        np.minimum(hi, np.where(above, u, hi), out=hi)
        np.maximum(lo, np.where(above, lo, u), out=lo)
        # a collapsed bracket marks a root sitting on a kink of m'
        settled = (np.abs(g) <= tol * scale) | (hi - lo <= 4e-16 * scale)
        if bool(np.all(settled | ~free)):
            break
        # gp >= 1 because m is concave (mpp <= 0) and cgrad >= 0
        gp = 1.0 - cgrad * (mpp * q - 2.0 * mp * mp) / (q * q * q)
        step = g / gp
        u_new = u - step
        outside = (u_new <= lo) | (u_new >= hi)
        u = np.where(free & ~settled, np.where(outside, 0.5 * (lo + hi), u_new), u)
    else:
        mv, mp, _ = m.derivs(u)
        g = (u - ubar) - cgrad * mp / ((mv + moff) ** 2)
        bad = free & (np.abs(g) > 1e-9 * scale) & (hi - lo > 4e-16 * scale)
        if np.any(bad):
            raise NumericalError(
                f"prox density solve did not converge for {int(bad.sum())} points; "
                f"max residual {float(np.abs(g[bad]).max())}"
            )

    u = np.where(at_lo, lo, np.where(at_hi, hi, u))
    if m.kind == "piecewise":
        # snap near-kink roots onto the knot so one-sided slope queries see it
        near = np.argmin(np.abs(u[..., None] - m.knots_z), axis=-1)
        knot = m.knots_z[near]
        u = np.where(np.abs(u - knot) <= 1e-12 * scale, knot, u)
    return u


def prox_batch(m: Mobility, tau_u, ubar, vsq, tau_v=None):
    """Vectorized prox of (u, v) -> Psi(u, v) under a diagonal metric with
    density step ``tau_u`` and momentum step ``tau_v`` (defaults to ``tau_u``).
    Returns (u, v_scale); the momentum minimizer is vbar * v_scale
    componentwise. The steps already contain any weight and reference-measure
    scaling."""
    tau_u = np.asarray(tau_u, dtype=float)
    tau_v = tau_u if tau_v is None else np.asarray(tau_v, dtype=float)
    cgrad = tau_u * np.asarray(vsq, dtype=float)
    moff = 2.0 * tau_v
    u = _prox_density(m, ubar, cgrad, moff)
    mv = m.value(u)
    mv = np.where(mv > 0.0, mv, 0.0)
    return u, mv / (mv + moff)


def psi_prox(m: Mobility, tau: float, ubar: float, vbar):
    """Unique minimizer (u, v) of 0.5 (u - ubar)^2 + 0.5 |v - vbar|^2
    + tau * Psi(u, v) over the mobility domain, by safeguarded Newton on the
    reduced scalar equation. ``vbar`` may be a scalar or a vector."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    vec = np.ndim(vbar) > 0
    vb = np.atleast_1d(np.asarray(vbar, dtype=float))
    vsq = float(np.dot(vb, vb))
    u, scale = prox_batch(m, np.array([tau]), np.array([float(ubar)]), np.array([vsq]))
    v = vb * float(scale[0])
    return float(u[0]), (v if vec else float(v[0]))


def psi_prox_residual(m: Mobility, tau: float, ubar: float, vbar, u: float, v) -> float:
    """Subgradient-inclusion residual of a claimed prox output (0 at the exact
    minimizer, including boundary and kink cases)."""
    vb = np.atleast_1d(np.asarray(vbar, dtype=float))
    vv = np.atleast_1d(np.asarray(v, dtype=float))
    mu = m.value(u)
    if mu > 0.0:
        r_v = float(np.linalg.norm((vv - vb) + 2.0 * tau * vv / mu))
    else:
        r_v = float(np.linalg.norm(vv))  # momentum must vanish where m = 0
    vsq = float(np.dot(vb, vb))
    c = tau * vsq
    sl, sr = m.one_sided_slopes(u)
    q = (mu if mu > 0.0 else 0.0) + 2.0 * tau
    g_left = (u - ubar) - c * sl / (q * q)
    g_right = (u - ubar) - c * sr / (q * q)
    lo, hi = min(g_left, g_right), max(g_left, g_right)
    if u <= m.a:
        r_u = max(0.0, -hi)
    elif np.isfinite(m.b) and u >= m.b:
        r_u = max(0.0, lo)
    else:
        r_u = 0.0 if lo <= 0.0 <= hi else min(abs(lo), abs(hi))
    return max(r_u, r_v)


# --- density bounds ---------------------------------------------------------

@dataclass
class BoundsReport:
    violations: list[tuple[str, int, int, float]]  # (field, time, index, density)

    @property
    def ok(self) -> bool:
        return not self.violations


def density_bounds_check(flow, grid, gmesh, bulk_mobility: Mobility,
                         graph_mobility: Mobility, eps: float) -> BoundsReport:
    """List every (cell/segment, time) whose density with respect to the
    reference measure leaves [a - eps, b + eps]. Infinite bounds are skipped."""
    violations: list[tuple[str, int, int, float]] = []

    def scan(name, masses, lam, mob):
        dens = masses / lam
        bad = dens < mob.a - eps
        if np.isfinite(mob.b):
            bad |= dens > mob.b + eps
        for k, i in zip(*np.nonzero(bad)):
            violations.append((name, int(k), int(i), float(dens[k, i])))

    scan("mu", flow.mu, grid.cell_area, bulk_mobility)
    scan("rho", flow.rho, gmesh.lambda_seg[None, :], graph_mobility)
    return BoundsReport(violations)
