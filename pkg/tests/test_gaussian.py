import math

import numpy as np
import pytest
from scipy import integrate

from loopcalc.bp import BPConfig
from loopcalc.errors import DegenerateError, InputError
from loopcalc.gaussian import (
    GaussianBelief,
    GaussianModel,
    gaussian_bp_run,
    gaussian_exact,
    gaussian_simple_loop_weight,
    gaussian_single_cycle,
    loop_correlation,
    walk_sum_check,
)

TIGHT = BPConfig(tolerance=1e-14)


def test_identity_model():
    ex = gaussian_exact(GaussianModel(np.eye(4), np.zeros(4)))
    np.testing.assert_array_equal(ex.cov, np.eye(4))
    assert ex.log_z == pytest.approx(2 * math.log(2 * math.pi))


def test_two_by_two_closed_form():
    J = np.array([[2.0, 1.0], [1.0, 2.0]])
    ex = gaussian_exact(GaussianModel(J, [1.0, -1.0]))
    np.testing.assert_allclose(ex.cov, np.array([[2, -1], [-1, 2]]) / 3, atol=1e-15)
    np.testing.assert_allclose(ex.mean, ex.cov @ [1.0, -1.0], atol=1e-15)


def test_normalizer_against_quadrature():
    J = np.array([[1.5, 0.4], [0.4, 1.0]])
    h = np.array([0.3, -0.2])
    dens = lambda y, x: math.exp(-0.5 * (J[0, 0] * x * x + 2 * J[0, 1] * x * y + J[1, 1] * y * y) + h[0] * x + h[1] * y)
    z, _ = integrate.dblquad(dens, -12, 12, -12, 12, epsabs=1e-12, epsrel=1e-12)
    assert gaussian_exact(GaussianModel(J, h)).log_z == pytest.approx(math.log(z), abs=1e-6)


@pytest.mark.parametrize(
    "J",
    [np.array([[1.0, 0.5], [0.4, 1.0]]), np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones((2, 3))],
    ids=["asymmetric", "indefinite", "shape"],
)
def test_model_validation(J):
    with pytest.raises(InputError):
        GaussianModel(J, np.zeros(J.shape[0]))


class TestBP:
    def test_tree_exact(self, rng):
        n = 6
        J = np.eye(n) * 2
        for i in range(1, n):
            p = int(rng.integers(0, i))
            J[i, p] = J[p, i] = rng.uniform(-0.8, 0.8)
        model = GaussianModel(J, rng.normal(size=n))
        res = gaussian_bp_run(model, TIGHT)
        ex = gaussian_exact(model)
        assert res.converged
        np.testing.assert_allclose(res.beliefs.var, np.diag(ex.cov), rtol=1e-9)
        np.testing.assert_allclose(res.beliefs.mean, ex.mean, atol=1e-9)
        assert res.log_z_bethe == pytest.approx(ex.log_z, abs=1e-9)

    @pytest.mark.parametrize("off", [0.3, -0.3])
    def test_three_cycle_means_exact(self, off):
        model = GaussianModel.cycle(3, 1.0, off, h=[0.5, -1.0, 0.2])
        res = gaussian_bp_run(model, TIGHT)
        ex = gaussian_exact(model)
        np.testing.assert_allclose(res.beliefs.mean, ex.mean, atol=1e-8)
        # the Bethe variance errs in the direction of the loop correlation's sign:
        # c = -1/27 for +0.3 (Bethe 1.25 above exact 1.1607), c > 0 for -0.3 (below)
        c = loop_correlation(res.beliefs, [0, 1, 2])
        assert np.sign(c) == -np.sign(off)
        if off > 0:
            assert c == pytest.approx(-1 / 27)
            np.testing.assert_allclose(res.beliefs.var, 1.25)
            assert np.all(res.beliefs.var > np.diag(ex.cov))
        else:
            assert np.all(res.beliefs.var < np.diag(ex.cov))

    def test_diagonal(self):
        model = GaussianModel(np.diag([1.0, 2.0, 4.0]), [1.0, 1.0, 1.0])
        res = gaussian_bp_run(model)
        np.testing.assert_allclose(res.beliefs.var, [1.0, 0.5, 0.25])
        np.testing.assert_allclose(res.beliefs.mean, [1.0, 0.5, 0.25])
        assert res.log_z_bethe == pytest.approx(gaussian_exact(model).log_z)

    def test_means_exact_on_loopy_walk_summable(self, rng):
        n = 6
        J = np.eye(n)
        for i, j in [(0, 1), (1, 2), (2, 3), (3, 0), (1, 4), (4, 5), (5, 2)]:
            J[i, j] = J[j, i] = rng.uniform(-0.25, 0.25)
        model = GaussianModel(J, rng.normal(size=n))
        res = gaussian_bp_run(model, TIGHT)
        assert res.converged and not res.negative_cavity_seen
        np.testing.assert_allclose(res.beliefs.mean, gaussian_exact(model).mean, atol=1e-8)

    def test_damped_and_sequential_agree(self):
        model = GaussianModel.cycle(5, 1.0, 0.4, h=np.arange(5.0))
        a = gaussian_bp_run(model, TIGHT)
        b = gaussian_bp_run(model, BPConfig(1e-14, 10_000, 0.5, "sequential"))
        np.testing.assert_allclose(a.beliefs.var, b.beliefs.var, rtol=1e-10)


class TestLoopWeight:
    def test_independent_is_zero(self):
        b = GaussianBelief(np.zeros(3), np.ones(3), {(0, 1): 0.0, (1, 2): 0.0, (0, 2): 0.0}, {})
        assert gaussian_simple_loop_weight(b, [0, 1, 2]) == 0.0

    def test_half_gives_one(self):
        cov = 0.5 ** (1 / 3)
        b = GaussianBelief(np.zeros(3), np.ones(3), {(0, 1): cov, (1, 2): cov, (0, 2): cov}, {})
        assert gaussian_simple_loop_weight(b, [0, 1, 2]) == pytest.approx(1.0)

    def test_divergent(self):
        b = GaussianBelief(np.zeros(3), np.ones(3), {(0, 1): 1.0, (1, 2): 1.0, (0, 2): 1.0}, {})
        with pytest.raises(DegenerateError):
            gaussian_simple_loop_weight(b, [0, 1, 2])

    def test_three_cycle_partition(self):
        model = GaussianModel.cycle(3, 1.0, 0.3, h=[0.5, -1.0, 0.2])
        res = gaussian_bp_run(model, TIGHT)
        w = gaussian_simple_loop_weight(res.beliefs, [0, 1, 2])
        assert res.log_z_bethe + math.log1p(w) == pytest.approx(gaussian_exact(model).log_z, abs=1e-8)

    def test_anchor_invariance(self):
        model = GaussianModel.cycle(5, 1.0, -0.35)
        b = gaussian_bp_run(model, TIGHT).beliefs
        ref = loop_correlation(b, [0, 1, 2, 3, 4])
        for k in range(5):
            rot = [(i + k) % 5 for i in range(5)]
            assert loop_correlation(b, rot) == pytest.approx(ref, rel=1e-12)
            assert loop_correlation(b, rot[::-1]) == pytest.approx(ref, rel=1e-12)


class TestSingleCycle:
    def test_three_cycle(self):
        model = GaussianModel.cycle(3, 1.0, 0.3, h=[0.5, -1.0, 0.2])
        sc = gaussian_single_cycle(model, TIGHT)
        ex = gaussian_exact(model)
        assert sc.log_z == pytest.approx(ex.log_z, abs=1e-8)
        np.testing.assert_allclose(sc.var, np.diag(ex.cov), rtol=1e-8)
        assert sc.cycle[0] == 0

    def test_weak_coupling_limit(self):
        sc = gaussian_single_cycle(GaussianModel.cycle(4, 1.0, 1e-6), TIGHT)
        assert abs(sc.c) < 1e-20
        assert sc.log_z == pytest.approx(sc.log_z_bethe, abs=1e-15)

    def test_not_a_cycle(self):
        J = np.eye(4)
        J[0, 1] = J[1, 0] = J[1, 2] = J[2, 1] = 0.2
        with pytest.raises(InputError, match="single cycle"):
            gaussian_single_cycle(GaussianModel(J, np.zeros(4)))


class TestWalkSum:
    def test_three_cycle_within_tail_bound(self):
        for L in (5, 10, 20, 40):
            r = walk_sum_check(GaussianModel.cycle(3, 1.0, 0.3), 0, L)
            assert r.series_within_bound
            assert r.closed_form_residual < 1e-8
            assert r.tail_bound == pytest.approx(r.rho ** (L + 1) / (1 - r.rho))

    def test_uncoupled(self):
        r = walk_sum_check(GaussianModel(np.diag([2.0, 4.0, 5.0]), np.zeros(3)), 1, 10)
        assert r.series == r.exact == 0.25
        assert r.closed_form is None

    def test_near_critical(self):
        r = walk_sum_check(GaussianModel.cycle(3, 1.0, 0.49), 0, 200)
        assert r.rho < 1
        assert r.closed_form_residual < 1e-5
        assert r.series_within_bound

    def test_monotone_for_nonnegative_walks(self):
        model = GaussianModel.cycle(4, 1.0, -0.3)  # W >= 0 entrywise
        series = [walk_sum_check(model, 2, L).series for L in range(0, 30)]
        assert all(b >= a for a, b in zip(series, series[1:]))
        residuals = [walk_sum_check(GaussianModel.cycle(4, 1.0, 0.3), 2, L).series_residual for L in range(0, 30, 2)]
        assert all(b <= a for a, b in zip(residuals, residuals[1:]))

    def test_not_walk_summable(self):
        with pytest.raises(InputError, match="walk-summable"):
            walk_sum_check(GaussianModel.cycle(3, 1.0, 0.6), 0, 10)

    def test_bad_index(self):
        with pytest.raises(InputError):
            walk_sum_check(GaussianModel.cycle(3), 5, 10)


def test_json_round_trip(tmp_path):
    model = GaussianModel.cycle(4, 2.0, 0.5, h=[1, 2, 3, 4])
    path = tmp_path / "g.json"
    import json

    path.write_text(json.dumps(model.to_dict()))
    back = GaussianModel.load(path)
    np.testing.assert_array_equal(back.J, model.J)
    path.write_text("[1, 2")
    with pytest.raises(InputError):
        GaussianModel.load(path)
