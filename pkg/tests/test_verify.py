import numpy as np
import pytest

from dmrank.objective import finite_difference_check
from dmrank.verify import roundoff_floor, run_all


def test_roundoff_floor_scales_with_value_and_step():
    assert roundoff_floor(0.0, 1e-5, 1e-2) == 1e-6
    big = roundoff_floor(50.0, 1e-5, 1e-6)
    assert big == pytest.approx(10 * np.finfo(float).eps * 50 / 1e-5 / 1e-6)
    assert roundoff_floor(50.0, 1e-4, 1e-6) == pytest.approx(big / 10)


def test_floor_absorbs_difference_noise_but_not_real_errors():
    # a large constant offset makes the quotient noisy for the tiny component
    f = lambda x: 1e3 + 3e-4 * x[0] + 2.0 * x[1] ** 2
    x = np.array([0.1, 1.0])
    exact = np.array([3e-4, 4.0])
    floor = roundoff_floor(f(x), 1e-5, 1e-6)
    assert finite_difference_check(f, x, exact, floor=floor) <= 1e-6
    assert finite_difference_check(f, x, exact * [1.0, 1.01], floor=floor) > 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_quick_suites_pass(seed):
    results = run_all(seed, n_quad=20, n_grad=10, n_metric=100)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_injected_bug_fails_every_gradient_group():
    results = run_all(0, inject_bug=True, n_quad=5, n_grad=3, n_metric=10)
    failed = {r.name for r in results if not r.passed}
    assert {f"grad_{g}" for g in ("dhat", "U", "V_i", "V_j", "W", "L_u", "L_i", "L_j", "NIW")} <= failed
    assert "closed_form_vs_quad" not in failed
