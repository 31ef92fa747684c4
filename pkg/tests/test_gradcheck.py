import numpy as np
import pytest

from flowweld import gradcheck as gc
from flowweld import losses as ls
from flowweld.errors import AllPointsExcluded, NonFiniteValue


def sum_squares():
    return gc.ScalarFunction(lambda x: float(np.sum(x * x)), lambda x: 2 * x, name="sumsq")


class TestFD:
    def test_square(self):
        assert abs(gc.fd_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), 0, 1e-4) - 6.0) <= 1e-7

    def test_linear_is_exact(self):
        assert gc.fd_gradient(lambda x: 5.0 * float(x[0]) + 1.0, np.array([0.7]), 0) == 5.0

    def test_constant(self):
        assert gc.fd_gradient(lambda x: 4.0, np.array([1.3]), 0) == 0.0

    def test_non_finite(self):
        with pytest.raises(NonFiniteValue):
            gc.fd_gradient(lambda x: float("inf"), np.array([1.0]), 0)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            gc.fd_gradient(lambda x: 0.0, np.zeros(1), 0, h=0)

    def test_symmetric_in_direction(self):
        # the central scheme evaluates both sides, so mirroring the function negates the slope
        f = lambda x: float(np.sin(x[0]))
        g = lambda x: float(np.sin(-x[0]))
        assert gc.fd_gradient(f, np.array([0.4]), 0) == -gc.fd_gradient(g, np.array([-0.4]), 0)


class TestGradCheck:
    def test_correct_gradient_passes(self):
        x = np.random.default_rng(0).uniform(-2, 2, size=200)
        rep = gc.grad_check(sum_squares(), x, sample_count=100)
        assert rep.passed and rep.checked == 100 and rep.max_rel_error < 1e-7

    def test_doubled_gradient_fails(self):
        x = np.random.default_rng(0).uniform(0.5, 2, size=50)
        rep = gc.grad_check(sum_squares(), x, sample_count=20, gradient=4 * x)
        assert not rep.passed
        # |2x - 4x| / max(|2x|, |4x|)
        assert abs(rep.max_rel_error - 0.5) < 1e-6
        assert len(rep.failures) == 20
        assert "FAIL" in rep.summary()

    def test_relative_error_formula(self):
        assert gc.relative_error(1.0, 3.0) == 2.0 / 3.0
        assert gc.relative_error(0.0, 0.0) == 0.0
        assert gc.relative_error(1e-9, 0.0) == 1e-9 / 1e-8

    def test_everything_on_the_kink_is_excluded(self):
        # zero flow with r = 1: every neighbour gap equals r
        f = np.zeros((2, 4, 4))
        r = ls.RatioPair(1.0, 1.0)
        fn = gc.ScalarFunction(lambda x: ls.nipr_preserve(x.reshape(f.shape), r).value,
                               lambda x: ls.nipr_preserve(x.reshape(f.shape), r).grad.ravel())
        rule = lambda p, i: ("D near r" if gc._preserve_near_kink(p.reshape(f.shape), r,
                                                                   *gc._unflat(i, f.shape)) else None)
        with pytest.raises(AllPointsExcluded):
            gc.grad_check(fn, f.ravel(), exclusion=rule)

    def test_deterministic(self):
        a = gc.run_suite(seed=3, sample_count=20, ops=("warp", "nipr"))
        b = gc.run_suite(seed=3, sample_count=20, ops=("warp", "nipr"))
        assert [r.summary() for r in a] == [r.summary() for r in b]


class TestSuite:
    @pytest.mark.parametrize("seed", [0, 1, 7])
    def test_all_ops_pass(self, seed):
        reports = gc.run_suite(seed=seed)
        for rep in reports:
            assert rep.passed, rep.summary()
            assert rep.checked == 100

    @pytest.mark.parametrize("op", gc.CHECKED_OPS)
    def test_fault_injection_is_caught(self, op):
        reports = {r.name: r for r in gc.run_suite(seed=0, sample_count=30, fault=op)}
        assert not reports[op].passed
        assert all(r.passed for name, r in reports.items() if name != op)
