import numpy as np
import pytest

from graphot.meshes import BulkGrid, DiscreteFlow, GraphMesh, TimeGrid
from graphot.geometry import embed_star
from graphot.mobility import (
    ActionBreakdown,
    ActionWeights,
    Mobility,
    action,
    density_bounds_check,
    psi,
    psi_prox,
    psi_prox_residual,
)
from graphot.oracles import prox_grid_search


def small_instance(nx=4, ny=4, nt=2, n_seg=3):
    grid = BulkGrid(0.0, 1.0, 0.0, 1.0, nx, ny)
    graph = embed_star([[0.3, 0.5], [0.8, 0.5]])
    gmesh = GraphMesh.build(graph, grid, n_seg)
    tgrid = TimeGrid(nt)
    return grid, gmesh, tgrid


class TestPsi:
    def test_linear_values(self):
        m = Mobility.linear()
        assert psi(m, 2.0, 4.0) == pytest.approx(8.0)
        assert psi(m, 0.0, 0.0) == 0.0
        assert psi(m, 0.0, 1.0) == np.inf
        assert psi(m, -0.1, 0.0) == np.inf  # outside the domain

    def test_volume_filling(self):
        m = Mobility.volume_filling(1.0)
        assert psi(m, 0.5, 1.0) == pytest.approx(4.0)
        assert psi(m, 1.0, 0.0) == 0.0
        assert psi(m, 1.2, 0.0) == np.inf

    def test_vector_momentum_uses_euclidean_norm(self):
        m = Mobility.linear()
        assert psi(m, 2.0, np.array([3.0, 4.0])) == pytest.approx(25.0 / 2.0)

    def test_two_homogeneity(self):
        m = Mobility.volume_filling(2.0)
        rng = np.random.default_rng(5)
        for _ in range(100):
            u = rng.uniform(0.05, 1.95)
            v = rng.uniform(-3, 3)
            c = rng.uniform(0, 4)
            assert psi(m, u, c * v) == pytest.approx(c * c * psi(m, u, v), rel=1e-12)

    def test_joint_convexity(self):
        rng = np.random.default_rng(8)
        for m in (Mobility.linear(), Mobility.volume_filling(2.0)):
            hi = 1.9 if np.isfinite(m.b) else 5.0
            for _ in range(200):
                u1, u2 = rng.uniform(0.01, hi, size=2)
                v1, v2 = rng.uniform(-3, 3, size=2)
                t = rng.uniform(0.05, 0.95)
                lhs = psi(m, t * u1 + (1 - t) * u2, t * v1 + (1 - t) * v2)
                rhs = t * psi(m, u1, v1) + (1 - t) * psi(m, u2, v2)
                assert lhs <= rhs + 1e-12

    def test_piecewise_requires_concavity(self):
        Mobility.piecewise([0.0, 1.0, 2.0], [0.0, 1.0, 1.5])
        with pytest.raises(ValueError):
            Mobility.piecewise([0.0, 1.0, 2.0], [0.0, 1.0, 3.0])

    def test_midpoint_concavity_and_positivity_sampled(self):
        for m in (Mobility.linear(), Mobility.volume_filling(2.0),
                  Mobility.piecewise([0.0, 0.5, 1.5, 2.0], [0.0, 0.8, 1.2, 0.9])):
            hi = min(m.b, 10.0)
            z = np.linspace(m.a, hi, 1000)
            vals = m.value(z)
            assert np.all(vals[1:-1] > 0)
            mid = m.value(0.5 * (z[:-1] + z[1:]))
            assert np.all(mid >= 0.5 * (vals[:-1] + vals[1:]) - 1e-12)


class TestPsiProx:
    def test_zero_momentum_fixed_point(self):
        u, v = psi_prox(Mobility.linear(), 1.0, 0.7, 0.0)
        assert u == pytest.approx(0.7, abs=1e-12)
        assert v == 0.0

    def test_small_tau_limit(self):
        u, v = psi_prox(Mobility.linear(), 1e-8, 1.0, 2.0)
        assert u == pytest.approx(1.0, abs=1e-6)
        assert v == pytest.approx(2.0, abs=1e-6)

    def test_against_grid_oracle_single(self):
        m = Mobility.linear()
        res = prox_grid_search(m, 1.0, 1.0, 2.0, resolution=1e-4)
        u, v = psi_prox(m, 1.0, 1.0, 2.0)
        gu, gv = res.value
        assert abs(u - gu) <= 1e-3 and abs(v - gv) <= 1e-3

    def test_against_grid_oracle_random(self):
        rng = np.random.default_rng(21)
        for m in (Mobility.linear(), Mobility.volume_filling(2.0)):
            u_hi = m.b if np.isfinite(m.b) else 5.0
            for _ in range(60):
                tau = rng.uniform(0.1, 3.0)
                ubar = rng.uniform(0.0, min(3.0, u_hi))
                vbar = rng.uniform(-3.0, 3.0)
                u, v = psi_prox(m, tau, ubar, vbar)
                gu, gv = prox_grid_search(m, tau, ubar, vbar,
                                          bounds=((m.a, u_hi), (-5, 5)),
                                          resolution=1e-4).value
                assert abs(u - gu) <= 1e-3, (m.kind, tau, ubar, vbar)
                assert abs(v - gv) <= 1e-3, (m.kind, tau, ubar, vbar)

    def test_subgradient_residual(self):
        rng = np.random.default_rng(33)
        for m in (Mobility.linear(), Mobility.volume_filling(2.0),
                  Mobility.piecewise([0.0, 0.5, 1.5, 2.0], [0.0, 0.8, 1.2, 0.9])):
            u_hi = m.b if np.isfinite(m.b) else 4.0
            for _ in range(200):
                tau = rng.uniform(0.05, 3.0)
                ubar = rng.uniform(-0.5, u_hi + 0.5)
                vbar = rng.uniform(-3.0, 3.0)
                u, v = psi_prox(m, tau, ubar, vbar)
                assert psi_prox_residual(m, tau, ubar, vbar, u, v) <= 1e-10

    def test_prox_objective_not_beaten_by_perturbations(self):
        m = Mobility.volume_filling(1.5)
        tau, ubar, vbar = 0.8, 0.9, -1.7
        u, v = psi_prox(m, tau, ubar, vbar)

        def objective(uu, vv):
            return 0.5 * (uu - ubar) ** 2 + 0.5 * (vv - vbar) ** 2 + tau * psi(m, uu, vv)

        base = objective(u, v)
        rng = np.random.default_rng(44)
        for _ in range(1000):
            du, dv = rng.standard_normal(2) * 10 ** rng.uniform(-6, -1)
            assert objective(u + du, v + dv) >= base - 1e-12

    def test_vector_momentum(self):
        m = Mobility.linear()
        u, v = psi_prox(m, 0.5, 1.0, np.array([1.0, -2.0]))
        assert v.shape == (2,)
        # componentwise shrink by the same factor
        assert v[0] / 1.0 == pytest.approx(v[1] / -2.0)
        assert psi_prox_residual(m, 0.5, 1.0, np.array([1.0, -2.0]), u, v) <= 1e-10

    def test_invalid_tau(self):
        with pytest.raises(ValueError):
            psi_prox(Mobility.linear(), 0.0, 1.0, 1.0)


class TestAction:
    def test_zero_momenta_zero_action(self):
        grid, gmesh, tgrid = small_instance()
        flow = DiscreteFlow.zeros(grid, gmesh, tgrid)
        flow.mu[:] = grid.cell_area * 0.5   # interior density 0.5
        flow.rho[:] = gmesh.lambda_seg * 0.2
        out = action(flow, grid, gmesh, tgrid, Mobility.linear(), Mobility.linear(),
                     ActionWeights(1, 1, 1))
        assert out.total == 0.0

    def test_doubling_momenta_quadruples(self):
        grid, gmesh, tgrid = small_instance()
        rng = np.random.default_rng(3)
        flow = DiscreteFlow.zeros(grid, gmesh, tgrid)
        flow.mu[:] = grid.cell_area * rng.uniform(0.5, 1.5, flow.mu.shape)
        flow.rho[:] = gmesh.lambda_seg * rng.uniform(0.5, 1.5, flow.rho.shape)
        flow.J[:] = rng.standard_normal(flow.J.shape) * 0.1
        flow.V[:] = rng.standard_normal(flow.V.shape) * 0.1
        flow.f[:] = rng.standard_normal(flow.f.shape) * 0.1
        flow.G[:] = rng.standard_normal(flow.G.shape) * 0.1
        w = ActionWeights(0.7, 1.3, 2.1)
        m = Mobility.linear()
        a1 = action(flow, grid, gmesh, tgrid, m, m, w)
        flow2 = flow.copy()
        for name in ("J", "V", "f", "G"):
            setattr(flow2, name, 2.0 * getattr(flow2, name))
        a2 = action(flow2, grid, gmesh, tgrid, m, m, w)
        assert a2.total == pytest.approx(4.0 * a1.total, rel=1e-12)

    def test_infinite_when_momentum_without_mass(self):
        grid, gmesh, tgrid = small_instance()
        flow = DiscreteFlow.zeros(grid, gmesh, tgrid)
        flow.J[0, 0] = 1.0
        out = action(flow, grid, gmesh, tgrid, Mobility.linear(), Mobility.linear(),
                     ActionWeights(1, 1, 1))
        assert out.total == np.inf and out.bulk == np.inf
        assert not np.isnan(out.total)

    def test_graph_terms_vanish_for_pure_bulk(self):
        grid, gmesh, tgrid = small_instance()
        rng = np.random.default_rng(9)
        flow = DiscreteFlow.zeros(grid, gmesh, tgrid)
        flow.mu[:] = grid.cell_area * rng.uniform(0.5, 1.5, flow.mu.shape)
        flow.J[:] = rng.standard_normal(flow.J.shape) * 0.05
        out = action(flow, grid, gmesh, tgrid, Mobility.linear(), Mobility.linear(),
                     ActionWeights(1, 1, 1))
        assert out.edge_transport == 0.0
        assert out.edge_exchange == 0.0
        assert out.vertex_exchange == 0.0
        assert out.total == pytest.approx(out.bulk)

    def test_total_is_weighted_sum(self):
        breakdown = ActionBreakdown.combine(1.0, 2.0, 3.0, 4.0, ActionWeights(2, 3, 4))
        assert breakdown.total == pytest.approx(1 + 4 + 9 + 16)

    def test_translate_matches_squared_displacement(self):
        # mollified bump translated at constant speed; kinetic cost ~ distance^2
        grid = BulkGrid(0.0, 1.0, 0.0, 1.0, 64, 2)
        graph = embed_star([[0.1, 0.1], [0.2, 0.1]])
        gmesh = GraphMesh.build(graph, grid, 2)
        tgrid = TimeGrid(32)
        shift = 0.25
        sigma = 0.06
        xs = grid.cell_centers()[:, 0].reshape(grid.ny, grid.nx)[0]

        def bump(center):
            w = np.exp(-0.5 * ((xs - center) / sigma) ** 2)
            return w / w.sum()

        flow = DiscreteFlow.zeros(grid, gmesh, tgrid)
        for k, t in enumerate(tgrid.times):
            col = bump(0.3 + shift * t) / grid.ny
            flow.mu[k] = np.tile(col, grid.ny)
        # translation momentum: flux through a face = speed * density there
        for k in range(tgrid.n_steps):
            t_mid = (k + 0.5) * tgrid.dt
            col = bump(0.3 + shift * t_mid) / grid.ny
            for iy in range(grid.ny):
                for ix in range(grid.nx - 1):
                    face = iy * (grid.nx - 1) + ix
                    mass_face = 0.5 * (col[ix] + col[ix + 1])
                    flow.J[k, face] = shift * mass_face  # momentum of one dual cell
        out = action(flow, grid, gmesh, tgrid, Mobility.linear(), Mobility.linear(),
                     ActionWeights(1, 1, 1))
        assert out.total == pytest.approx(shift ** 2, rel=0.05)


class TestDensityBounds:
    def test_clean_flow_passes(self):
        grid, gmesh, tgrid = small_instance()
        flow = DiscreteFlow.zeros(grid, gmesh, tgrid)
        flow.mu[:] = grid.cell_area * 1.0
        flow.rho[:] = gmesh.lambda_seg * 1.0
        rep = density_bounds_check(flow, grid, gmesh, Mobility.volume_filling(2.0),
                                   Mobility.volume_filling(2.0), 1e-6)
        assert rep.ok

    def test_violation_reported(self):
        grid, gmesh, tgrid = small_instance()
        flow = DiscreteFlow.zeros(grid, gmesh, tgrid)
        flow.mu[:] = grid.cell_area * 1.0
        flow.mu[1, 3] = grid.cell_area * 3.0   # density b + 1
        rep = density_bounds_check(flow, grid, gmesh, Mobility.volume_filling(2.0),
                                   Mobility.linear(), 1e-6)
        assert len(rep.violations) == 1
        field, k, idx, dens = rep.violations[0]
        assert (field, k, idx) == ("mu", 1, 3)
        assert dens == pytest.approx(3.0)

    def test_linear_checks_lower_bound_only(self):
        grid, gmesh, tgrid = small_instance()
        flow = DiscreteFlow.zeros(grid, gmesh, tgrid)
        flow.mu[:] = grid.cell_area * 100.0   # huge density is fine for b = inf
        rep = density_bounds_check(flow, grid, gmesh, Mobility.linear(),
                                   Mobility.linear(), 1e-6)
        assert rep.ok
        flow.mu[0, 0] = -grid.cell_area
        rep = density_bounds_check(flow, grid, gmesh, Mobility.linear(),
                                   Mobility.linear(), 1e-6)
        assert not rep.ok
