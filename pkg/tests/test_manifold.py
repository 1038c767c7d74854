"""Tests for the Poincaré-ball operations against closed-form oracles."""

import numpy as np
import pytest

from i2ploc.errors import DataError
from i2ploc.manifold import (
    conformal_factor,
    exp_map,
    hyp_dist,
    mobius_add,
    project_to_ball,
)
from i2ploc.nncore import Tensor, grad_check


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def mobius_oracle(q, p, c):
    """Direct extended-precision evaluation of the addition formula."""
    q = np.asarray(q, dtype=np.longdouble)
    p = np.asarray(p, dtype=np.longdouble)
    qp = float((q * p).sum())
    qq = float((q * q).sum())
    pp = float((p * p).sum())
    num = (1 + 2 * c * qp + c * pp) * q + (1 - c * qq) * p
    den = 1 + 2 * c * qp + c * c * qq * pp
    return (num / den).astype(np.float64)


class TestConformalFactor:
    def test_origin_gives_two(self):
        out = conformal_factor(t64([0.0, 0.0]), c=1.0)
        np.testing.assert_allclose(out.data, [2.0], atol=1e-12)

    def test_closed_form_at_half_radius(self):
        out = conformal_factor(t64([0.5, 0.0]), c=1.0)
        np.testing.assert_allclose(out.data, [8.0 / 3.0], atol=1e-12)

    def test_finite_at_boundary(self):
        out = conformal_factor(t64([5.0, 0.0]), c=1.0)
        assert np.isfinite(out.data).all()
        assert out.data[0] >= 2.0


class TestMobiusAdd:
    def test_right_identity(self):
        q = t64([0.3, -0.2, 0.1])
        out = mobius_add(q, t64([0.0, 0.0, 0.0]), c=1.0)
        np.testing.assert_allclose(out.data, q.data, atol=1e-12)

    def test_left_identity(self):
        p = t64([0.15, 0.4, -0.3])
        out = mobius_add(t64([0.0, 0.0, 0.0]), p, c=1.0)
        np.testing.assert_allclose(out.data, p.data, atol=1e-12)

    def test_matches_extended_precision_formula(self):
        q, p = [0.3, 0.0], [0.4, 0.0]
        out = mobius_add(t64(q), t64(p), c=1.0)
        np.testing.assert_allclose(out.data, mobius_oracle(q, p, 1.0), atol=1e-12)

    def test_random_pairs_match_oracle(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            q = rng.uniform(-0.4, 0.4, 3)
            p = rng.uniform(-0.4, 0.4, 3)
            c = float(rng.uniform(0.3, 2.0))
            out = mobius_add(t64(q), t64(p), c=c)
            np.testing.assert_allclose(out.data, mobius_oracle(q, p, c), atol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            mobius_add(t64([0.1, 0.1]), t64([0.1, 0.1, 0.1]), c=1.0)

    def test_result_stays_in_ball(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            q = t64(rng.uniform(-0.9, 0.9, 4))
            p = t64(rng.uniform(-0.9, 0.9, 4))
            out = mobius_add(q, p, c=1.0)
            assert (out.data ** 2).sum() < 1.0


class TestHypDist:
    def test_self_distance_zero(self):
        q = t64([0.3, 0.2, -0.4])
        assert abs(hyp_dist(q, q, c=1.0).item()) < 1e-9

    def test_origin_to_half_is_log3(self):
        out = hyp_dist(t64([0.0, 0.0]), t64([0.5, 0.0]), c=1.0)
        np.testing.assert_allclose(out.item(), np.log(3.0), atol=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(43)
        for _ in range(20):
            q = t64(rng.uniform(-0.6, 0.6, 3))
            p = t64(rng.uniform(-0.6, 0.6, 3))
            assert abs(hyp_dist(q, p, 1.0).item() - hyp_dist(p, q, 1.0).item()) < 1e-9

    def test_nonnegative(self):
        rng = np.random.default_rng(44)
        for _ in range(30):
            q = t64(rng.uniform(-0.7, 0.7, 3))
            p = t64(rng.uniform(-0.7, 0.7, 3))
            assert hyp_dist(q, p, 1.0).item() >= 0.0

    def test_triangle_inequality_statistical(self):
        rng = np.random.default_rng(45)
        for _ in range(100):
            a, b, c3 = (t64(rng.uniform(-0.6, 0.6, 3)) for _ in range(3))
            ab = hyp_dist(a, b, 1.0).item()
            bc = hyp_dist(b, c3, 1.0).item()
            ac = hyp_dist(a, c3, 1.0).item()
            assert ac <= ab + bc + 1e-7

    def test_euclidean_limit(self):
        rng = np.random.default_rng(46)
        c = 1e-6
        for _ in range(20):
            q = rng.uniform(-0.5, 0.5, 4)
            p = rng.uniform(-0.5, 0.5, 4)
            d = hyp_dist(t64(q), t64(p), c=c).item()
            expected = 2.0 * np.linalg.norm(q - p)
            assert abs(d - expected) / max(expected, 1e-9) < 1e-3

    def test_broadcast_pairwise(self):
        rng = np.random.default_rng(47)
        x = rng.uniform(-0.5, 0.5, (4, 3))
        d = hyp_dist(Tensor(x[:, None, :]), Tensor(x[None, :, :]), c=1.0)
        assert d.shape == (4, 4)
        for i in range(4):
            for j in range(4):
                expected = hyp_dist(t64(x[i]), t64(x[j]), c=1.0).item()
                assert abs(d.data[i, j] - expected) < 1e-6


class TestExpMap:
    def test_zero_tangent_returns_base(self):
        u = t64([0.2, -0.1])
        out = exp_map(t64([0.0, 0.0]), c=1.0, base=u)
        np.testing.assert_allclose(out.data, u.data, atol=1e-9)

    def test_unit_tangent_closed_form(self):
        out = exp_map(t64([1.0, 0.0]), c=1.0)
        np.testing.assert_allclose(out.data, [np.tanh(1.0), 0.0], atol=1e-6)
        assert abs(out.data[0] - 0.761594) < 1e-6

    def test_distance_round_trip(self):
        rng = np.random.default_rng(48)
        for _ in range(10):
            v = rng.uniform(-0.4, 0.4, 3)
            mapped = exp_map(t64(v), c=1.0)
            d = hyp_dist(t64(np.zeros(3)), mapped, c=1.0).item()
            np.testing.assert_allclose(d, 2.0 * np.linalg.norm(v), atol=1e-9)

    def test_ball_closure_under_huge_tangents(self):
        out = exp_map(t64([50.0, -80.0]), c=1.0)
        assert (out.data ** 2).sum() < 1.0


class TestManifoldGradients:
    def test_hyp_dist_differentiable(self):
        rng = np.random.default_rng(49)
        q = rng.uniform(-0.4, 0.4, 3)
        p = rng.uniform(-0.4, 0.4, 3)
        err = grad_check(
            lambda d: hyp_dist(d["q"], d["p"], c=1.0).sum(),
            {"q": Tensor(q), "p": Tensor(p)},
            h=1e-6,
        )
        assert err < 1e-6

    def test_exp_map_then_dist_differentiable(self):
        rng = np.random.default_rng(50)
        a = rng.uniform(-0.5, 0.5, 4)
        b = rng.uniform(-0.5, 0.5, 4)

        def f(d):
            return hyp_dist(exp_map(d["a"], c=1.0), exp_map(d["b"], c=1.0), c=1.0).sum()

        err = grad_check(f, {"a": Tensor(a), "b": Tensor(b)}, h=1e-6)
        assert err < 1e-6


class TestProjection:
    def test_identity_inside_ball(self):
        x = t64([0.3, 0.4])
        out = project_to_ball(x, c=1.0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_clamps_outside(self):
        out = project_to_ball(t64([3.0, 4.0]), c=1.0)
        norm = np.linalg.norm(out.data)
        np.testing.assert_allclose(norm, 1.0 - 1e-5, rtol=1e-10)

    def test_bad_curvature(self):
        with pytest.raises(DataError):
            project_to_ball(t64([0.1]), c=0.0)
