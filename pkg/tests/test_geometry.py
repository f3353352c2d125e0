import numpy as np
import pytest

from graphot.geometry import (
    CombinatorialStarGraph,
    DegenerateGeometryError,
    edge_normal_sign,
    embed_star,
    penalty_R,
    penalty_R_gradient_check,
    penalty_from_positions,
    unsigned_angle,
    validate_embedding,
)


def random_star(rng, n_leaves, d=2, max_penalty=1e6):
    """Random embedded star inside [0,1]^d with a finite, moderate penalty."""
    while True:
        pos = rng.uniform(0.05, 0.95, size=(n_leaves + 1, d))
        val = penalty_from_positions(pos)
        if np.isfinite(val.total) and val.total <= max_penalty:
            return embed_star(pos)


class TestEdgeNormalSign:
    def test_tail_head_absent(self):
        g = CombinatorialStarGraph(4)
        assert edge_normal_sign(g, 0, 0) == -1   # e = (v, w), query v
        assert edge_normal_sign(g, 0, 1) == +1   # e = (v, w), query w
        assert edge_normal_sign(g, 0, 2) == 0    # u not in e

    def test_signs_cancel_per_edge(self):
        g = CombinatorialStarGraph(5)
        for e, (v, w) in enumerate(g.edges):
            assert edge_normal_sign(g, e, v) + edge_normal_sign(g, e, w) == 0

    def test_unknown_ids(self):
        g = CombinatorialStarGraph(3)
        with pytest.raises(ValueError):
            edge_normal_sign(g, 5, 0)
        with pytest.raises(ValueError):
            edge_normal_sign(g, 0, 9)


class TestUnsignedAngle:
    def test_orthogonal(self):
        assert unsigned_angle((0, 0), (1, 0), (0, 1)) == pytest.approx(np.pi / 2, abs=1e-15)

    def test_antipodal(self):
        assert unsigned_angle((0, 0), (1, 0), (-2, 0)) == pytest.approx(np.pi, abs=1e-15)

    def test_clamped_no_nan(self):
        ang = unsigned_angle((0, 0), (1, 0), (1, 1e-18))
        assert ang == 0.0 and not np.isnan(ang)

    def test_coincident_raises(self):
        with pytest.raises(DegenerateGeometryError):
            unsigned_angle((0, 0), (0, 0), (1, 0))


class TestPenalty:
    def test_symmetric_two_leaves(self):
        g = embed_star([[0, 0], [1, 0], [-1, 0]])
        val = penalty_R(g)
        assert val.total == pytest.approx(2 + 1 / np.pi, abs=1e-12)

    def test_single_leaf(self):
        g = embed_star([[0, 0], [0.5, 0]])
        val = penalty_R(g)
        assert val.total == pytest.approx(2.0, abs=1e-15)
        assert val.angle_pairs == []

    def test_third_leaf_at_pi_over_3(self):
        # independent scalar evaluation of the same formula
        theta = np.pi / 3
        pos = np.array([[0, 0], [1, 0], [np.cos(theta), np.sin(theta)]])
        expected = 1.0 / np.linalg.norm(pos[1]) + 1.0 / np.linalg.norm(pos[2])
        expected += 1.0 / theta
        val = penalty_from_positions(pos)
        assert val.total == pytest.approx(expected, abs=1e-12)
        assert val.total == pytest.approx(2 + 3 / np.pi, abs=1e-12)

    def test_breakdown_sums_to_total(self):
        rng = np.random.default_rng(3)
        g = random_star(rng, 4)
        val = penalty_R(g)
        total = val.coulomb.sum() + sum(t for _, _, t in val.angle_pairs)
        assert val.total == pytest.approx(total, rel=1e-14)

    def test_degenerate_positions_infinite(self):
        val = penalty_from_positions(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]))
        assert val.total == np.inf and val.gradient is None
        # zero angle between identical directions
        val = penalty_from_positions(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
        assert val.total == np.inf and val.gradient is None

    def test_gradient_matches_central_differences(self):
        g = embed_star([[0, 0], [1, 0], [-1, 0]])
        assert penalty_R_gradient_check(g, 1e-6) <= 1e-5

        rng = np.random.default_rng(11)
        g = random_star(rng, 5)
        assert penalty_R_gradient_check(g, 1e-6) <= 1e-5

    def test_gradient_check_requires_finite(self):
        with pytest.raises(ValueError):
            penalty_R_gradient_check(embed_star([[0, 0], [1, 0], [2, 0]]), 1e-6)

    def test_translation_invariance_directional_derivative(self):
        rng = np.random.default_rng(7)
        g = random_star(rng, 4)
        val = penalty_R(g)
        shift = np.tile(rng.standard_normal(2), (g.positions.shape[0], 1))
        assert abs(np.sum(val.gradient * shift)) <= 1e-8 * np.linalg.norm(shift)

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(19)
        for _ in range(25):
            g = random_star(rng, 4, max_penalty=60)
            theta = rng.uniform(0, 2 * np.pi)
            rot = np.array([[np.cos(theta), -np.sin(theta)],
                            [np.sin(theta), np.cos(theta)]])
            shift = rng.standard_normal(2)
            moved = g.positions @ rot.T + shift
            assert penalty_from_positions(moved).total == pytest.approx(
                penalty_R(g).total, abs=1e-12 * max(1.0, penalty_R(g).total))

    def test_continuity_under_vanishing_perturbations(self):
        rng = np.random.default_rng(23)
        g = random_star(rng, 3)
        base = penalty_R(g).total
        noise = rng.standard_normal(g.positions.shape)
        values = [penalty_from_positions(g.positions + eps * noise).total
                  for eps in (1e-3, 1e-5, 1e-7, 1e-9)]
        errors = [abs(v - base) for v in values]
        assert errors[-1] <= 1e-6 * max(1.0, base)
        assert errors == sorted(errors, reverse=True) or errors[-1] < errors[0]


class TestValidateEmbedding:
    def test_opposite_leaves_valid(self):
        g = embed_star([[0.5, 0.5], [0.9, 0.5], [0.1, 0.5]])
        report = validate_embedding(g, (0, 1, 0, 1))
        assert report.valid, report.violations

    def test_duplicate_leaves_invalid(self):
        g = embed_star([[0.5, 0.5], [0.9, 0.5], [0.9, 0.5]])
        report = validate_embedding(g, (0, 1, 0, 1))
        assert not report.valid
        text = " ".join(report.violations)
        assert "coincide" in text and "zero angle" in text

    def test_vertex_outside_domain(self):
        g = embed_star([[0.5, 0.5], [1.5, 0.5]])
        report = validate_embedding(g, (0, 1, 0, 1))
        assert not report.valid

    def test_finite_penalty_implies_valid(self):
        rng = np.random.default_rng(101)
        checked = 0
        while checked < 1000:
            pos = rng.uniform(0.0, 1.0, size=(rng.integers(2, 7), 2))
            val = penalty_from_positions(pos)
            if not np.isfinite(val.total):
                continue
            report = validate_embedding(embed_star(pos), (0, 1, 0, 1))
            assert report.valid, (pos, report.violations)
            checked += 1

    def test_three_dimensional_embedding(self):
        g = embed_star([[0.5, 0.5, 0.5], [0.9, 0.5, 0.5], [0.5, 0.9, 0.6]])
        report = validate_embedding(g, (0, 1, 0, 1))
        assert report.valid
        g_bad = embed_star([[0.5, 0.5, 0.5], [0.9, 0.5, 0.5], [0.8, 0.5, 0.5]])
        report = validate_embedding(g_bad, (0, 1, 0, 1))
        assert not report.valid
