import numpy as np
import pytest

from skelhead import tensor as T
from skelhead.gradcheck import NonDeterministicError, finite_diff_check, gradcheck_report, numeric_grad, relative_error
from skelhead.oracle import CASES, run_suite
from skelhead.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_linear_function_is_exact():
    x = leaf(np.random.default_rng(0).standard_normal((3, 4)))
    assert finite_diff_check(lambda: T.sum_axis(x), x) <= 1e-10


def test_sigmoid_self_test():
    x = leaf(np.random.default_rng(1).standard_normal((3, 4)))
    assert finite_diff_check(lambda: T.sum_axis(T.sigmoid(x)), x) <= 1e-7


def test_max_with_near_ties_separated_by_more_than_10h():
    base = np.array([[1.0, 1.0 + 2e-4, 0.3], [0.5, 0.5 - 2e-4, -1.0]])
    x = leaf(base)
    assert finite_diff_check(lambda: T.sum_axis(T.reduce_max_axis(x, 1)), x) <= 1e-4


def test_relative_error_denominator():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(0.1)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == pytest.approx(0.5)


def test_numeric_grad_restores_input():
    data = np.random.default_rng(0).standard_normal(5)
    x = leaf(data)
    g = numeric_grad(lambda: T.sum_axis(T.mul(x, x)), x)
    assert np.array_equal(x.data, data)
    assert np.allclose(g, 2 * data, atol=1e-8)


def test_non_deterministic_function_is_detected():
    x = leaf([1.0, 2.0])
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        finite_diff_check(lambda: T.sum_axis(T.mul(x, float(rng.uniform()))), x)


def test_requires_64_bit():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        finite_diff_check(lambda: T.sum_axis(x), x)


def test_detects_a_wrong_gradient():
    x = leaf(np.random.default_rng(0).standard_normal(4))

    def bad_square(a):
        return Tensor._result(a.data**2, (a,), lambda g: (g * a.data,), "bad_square")  # missing factor 2

    assert finite_diff_check(lambda: T.sum_axis(bad_square(x)), x) > 0.4


def test_kink_inside_window_is_skipped_not_hidden_elsewhere():
    # relu kink 3e-6 from the evaluation point: inside the +-1e-5 window
    x = leaf([3e-6, 0.7, -0.4])
    plain = gradcheck_report(lambda: T.sum_axis(T.relu(x)), x)
    guarded = gradcheck_report(lambda: T.sum_axis(T.relu(x)), x, kink_tol=1e-5)
    assert plain.max_rel_error > 0.1
    assert guarded.skipped == 1 and guarded.checked == 2 and guarded.max_rel_error <= 1e-9


def test_smooth_curvature_is_not_mistaken_for_a_kink():
    x = leaf(np.random.default_rng(3).uniform(0.5, 3.0, 50))
    rep = gradcheck_report(lambda: T.sum_axis(T.exp(T.mul(x, 4.0))), x, kink_tol=1e-5)
    assert rep.skipped == 0


def test_max_coords_samples_a_subset():
    x = leaf(np.random.default_rng(0).standard_normal(100))
    rep = gradcheck_report(lambda: T.sum_axis(T.mul(x, x)), x, max_coords=7)
    assert rep.checked == 7


def test_suite_covers_every_differentiable_op():
    core = {
        "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "sqrt", "power", "relu", "sigmoid", "where",
        "sum_axis", "reduce_mean_axis", "reduce_max_axis", "logsumexp_lastdim", "softmax_lastdim",
        "log_softmax_lastdim", "l2_norm", "permute", "reshape", "concat_axis", "split_slice", "conv2d",
        "group_norm", "batch_norm_train", "batch_norm_eval",
    }
    model = {
        "gcn_forward", "tcn_forward", "sste_forward", "acda_forward", "atda_forward", "asda_forward",
        "cfa_aggregate", "sfhead_forward", "modified_cosine_distance", "feature_redundancy_loss",
        "feature_consistency_loss", "cross_entropy", "total_loss", "composite",
    }
    assert core | model <= set(CASES)


def test_suite_subset_reproduces_full_run_streams():
    a = run_suite(instances=2, ops=["sigmoid", "conv2d"])
    b = run_suite(instances=2, ops=["conv2d"])
    assert a[1].max_rel_error == b[0].max_rel_error


def test_suite_rejects_unknown_op():
    with pytest.raises(KeyError):
        run_suite(instances=1, ops=["nope"])
