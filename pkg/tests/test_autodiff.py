"""Tensor-engine tests: hand oracles, finite differences, tape semantics."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlcgcn import autodiff as ad
from mlcgcn.autodiff import Tensor
from mlcgcn.errors import ConfigError, ContractError, OracleError, ShapeError


def tensor(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    m = np.arange(9.0).reshape(3, 3)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(m))
    np.testing.assert_array_equal(out.data, m)


def test_matmul_hand_case():
    out = ad.matmul(tensor([[1.0, 2.0], [3.0, 4.0]]), tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    b = Tensor(rng.normal(size=(5, 3)))
    a = tensor(rng.normal(size=(4, 5)))
    err = ad.finite_diff_check(lambda p: ad.sum_all(ad.matmul(p, b)), a, eps=1e-5)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# conv1d_same


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 9))
    out = ad.conv1d_same(Tensor(x), Tensor([[0.0, 1.0, 0.0]]), Tensor([0.0]))
    np.testing.assert_allclose(out.data[:, 0, :], x)


def test_conv_sliding_sum_with_zero_padding():
    out = ad.conv1d_same(Tensor([[1.0, 2.0, 3.0]]), Tensor([[1.0, 1.0, 1.0]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data[0, 0], [3.0, 6.0, 5.0])


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        ad.conv1d_same(Tensor(np.ones((2, 5))), Tensor(np.ones((1, 4))), Tensor([0.0]))


def test_conv_empty_series_rejected():
    with pytest.raises(ShapeError):
        ad.conv1d_same(Tensor(np.ones((0, 5))), Tensor(np.ones((1, 3))), Tensor([0.0]))


def test_conv_kernel_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 8)))
    bias = Tensor(rng.normal(size=2))
    kernels = tensor(rng.normal(size=(2, 3)))
    err = ad.finite_diff_check(
        lambda p: ad.sum_all(ad.mul(c := ad.conv1d_same(x, p, bias), c)), kernels, eps=1e-5
    )
    assert err < 1e-4


# ---------------------------------------------------------------------------
# avgpool1d_same


def test_avgpool_window_one_is_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6))
    out = ad.avgpool1d_same(Tensor(x), 1)
    np.testing.assert_array_equal(out.data, x)


def test_avgpool_replicate_padding_hand_case():
    out = ad.avgpool1d_same(Tensor([0.0, 3.0, 6.0]), 3)
    np.testing.assert_allclose(out.data, [1.0, 3.0, 5.0])


@given(st.integers(min_value=1, max_value=9), st.floats(-5, 5))
def test_avgpool_constant_series_fixed_point(window, value):
    out = ad.avgpool1d_same(Tensor(np.full(7, value)), window)
    np.testing.assert_allclose(out.data, np.full(7, value))


def test_avgpool_window_below_one_rejected():
    with pytest.raises(ConfigError):
        ad.avgpool1d_same(Tensor(np.ones(4)), 0)


def test_avgpool_gradient_even_and_odd_windows():
    rng = np.random.default_rng(4)
    for window in (2, 3, 4):
        x = tensor(rng.normal(size=(2, 7)))
        err = ad.finite_diff_check(
            lambda p: ad.sum_all(ad.mul(o := ad.avgpool1d_same(p, window), o)), x, eps=1e-5
        )
        assert err < 1e-4, f"window={window}"


# ---------------------------------------------------------------------------
# softmax / layer norm


def test_softmax_uniform_on_equal_inputs():
    out = ad.softmax_rows(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.floats(-50, 50))
def test_softmax_shift_invariance(row, k):
    base = ad.softmax_rows(Tensor(row)).data
    shifted = ad.softmax_rows(Tensor(np.asarray(row) + k)).data
    np.testing.assert_allclose(shifted, base, atol=1e-12)


def test_softmax_hand_case():
    out = ad.softmax_rows(Tensor(np.log([1.0, 2.0, 3.0])))
    np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-14)


@given(st.lists(st.lists(st.floats(-40, 40), min_size=3, max_size=3), min_size=1, max_size=5))
def test_softmax_rows_sum_to_one(rows):
    out = ad.softmax_rows(Tensor(rows))
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_standardizes():
    out = ad.layer_norm(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert abs(out.data.mean()) < 1e-12
    assert abs(out.data.var() - 1.0) < 1e-4  # epsilon shrinks the variance slightly


def test_layer_norm_constant_row_is_zeroed():
    out = ad.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    gain = Tensor(rng.normal(size=5))
    shift = Tensor(rng.normal(size=5))
    x = tensor(rng.normal(size=(3, 5)))
    err = ad.finite_diff_check(
        lambda p: ad.sum_all(ad.mul(o := ad.layer_norm(p, gain, shift), o)), x, eps=1e-5
    )
    assert err < 1e-4


# ---------------------------------------------------------------------------
# dropout


def test_dropout_rate_zero_identity():
    x = Tensor(np.arange(5.0))
    assert ad.dropout(x, 0.0, True, np.random.default_rng(0)) is x


def test_dropout_inference_identity():
    x = Tensor(np.arange(5.0))
    assert ad.dropout(x, 0.9, False) is x


def test_dropout_rate_out_of_range():
    with pytest.raises(ConfigError):
        ad.dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


def test_dropout_statistics():
    rng = np.random.default_rng(6)
    x = Tensor(np.ones(100_000))
    out = ad.dropout(x, 0.5, True, rng)
    kept = np.count_nonzero(out.data) / x.size
    assert abs(kept - 0.5) < 0.01
    assert abs(out.data.mean() - 1.0) < 0.02  # survivor scaling preserves the mean


# ---------------------------------------------------------------------------
# backward / tape


def test_backward_sum_gives_ones():
    w = tensor(np.arange(6.0).reshape(2, 3))
    with ad.recording():
        ad.backward(ad.sum_all(w))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_backward_quadratic_gives_two_w():
    w = tensor([1.0, -2.0, 3.0])
    with ad.recording():
        ad.backward(ad.sum_all(ad.mul(w, w)))
    np.testing.assert_allclose(w.grad, 2 * w.data)


def test_backward_rejects_non_scalar():
    w = tensor(np.ones(3))
    with ad.recording():
        out = ad.mul(w, w)
        with pytest.raises(ContractError):
            ad.backward(out)


def test_backward_twice_accumulates_additively():
    w = tensor([1.0, 2.0])
    with ad.recording() as tape:
        loss = ad.sum_all(ad.mul(w, w))
        ad.backward(loss)
        once = w.grad.copy()
        ad.backward(loss, tape)
    np.testing.assert_allclose(w.grad, 2 * once)


def test_backward_zero_fills_unused_leaves():
    used = tensor([1.0, 2.0])
    unused = tensor([3.0, 4.0])
    with ad.recording():
        ad.mul(unused, unused)  # on the tape but not feeding the loss
        ad.backward(ad.sum_all(used))
    np.testing.assert_array_equal(unused.grad, np.zeros(2))


def test_tape_clear_empties_records():
    w = tensor(np.ones(3))
    with ad.recording() as tape:
        ad.sum_all(ad.mul(w, w))
        assert len(tape) > 0
        tape.clear()
        assert len(tape) == 0


def test_no_recording_outside_tape():
    w = tensor(np.ones(3))
    out = ad.mul(w, w)  # no active tape: nothing recorded, forward still works
    np.testing.assert_array_equal(out.data, np.ones(3))


def test_deterministic_forward_given_seed():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(np.linspace(-1, 1, 12).reshape(3, 4))
        out = ad.dropout(ad.softmax_rows(x), 0.3, True, rng)
        return out.data.copy()

    np.testing.assert_array_equal(run(), run())


# ---------------------------------------------------------------------------
# finite_diff_check oracle


def test_finite_diff_exact_quadratic():
    x = tensor(np.array([1.0, -0.5, 2.0]))
    err = ad.finite_diff_check(lambda p: ad.sum_all(ad.mul(p, p)), x, eps=1e-5)
    assert err < 1e-8


def test_finite_diff_softmax_cross_entropy():
    rng = np.random.default_rng(7)
    target = rng.dirichlet(np.ones(4), size=3)
    logits = tensor(rng.normal(size=(3, 4)))

    def f(p):
        logp = ad.log(ad.clamp_min(ad.softmax_rows(p), 1e-12))
        return ad.scale(ad.sum_all(ad.mul(logp, Tensor(target))), -1.0)

    assert ad.finite_diff_check(f, logits, eps=1e-5) < 1e-5


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ConfigError):
        ad.finite_diff_check(lambda p: ad.sum_all(p), tensor(np.ones(2)), eps=0.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_nonfinite_objective_raises():
    x = tensor(np.array([0.0]))
    with pytest.raises(OracleError):
        ad.finite_diff_check(lambda p: ad.log(ad.reshape(p, ())), x, eps=1.0)


# ---------------------------------------------------------------------------
# every registered adjoint agrees with finite differences


def _rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


OP_CASES = [
    ("add", lambda p: ad.add(p, Tensor(_rand((3, 4), 10))), (3, 4)),
    ("add_broadcast", lambda p: ad.add(Tensor(_rand((3, 4), 11)), p), (4,)),
    ("sub", lambda p: ad.sub(p, Tensor(_rand((3, 4), 12))), (3, 4)),
    ("mul", lambda p: ad.mul(p, Tensor(_rand((3, 4), 13))), (3, 4)),
    ("div", lambda p: ad.div(p, Tensor(np.abs(_rand((3, 4), 14)) + 1.0)), (3, 4)),
    ("div_denom", lambda p: ad.div(Tensor(_rand((3, 4), 15)), p), (3, 4)),
    ("neg", ad.neg, (3, 4)),
    ("scale", lambda p: ad.scale(p, -1.7), (3, 4)),
    ("relu", lambda p: ad.relu(p), (3, 4)),
    ("log", lambda p: ad.log(ad.add(ad.mul(p, p), Tensor(np.full((3, 4), 0.5)))), (3, 4)),
    ("clamp", lambda p: ad.clamp(p, -0.5, 0.5), (3, 4)),
    ("clamp_min", lambda p: ad.clamp_min(p, 0.1), (3, 4)),
    ("matmul_left", lambda p: ad.matmul(p, Tensor(_rand((4, 2), 16))), (3, 4)),
    ("matmul_right", lambda p: ad.matmul(Tensor(_rand((2, 3), 17)), p), (3, 4)),
    ("transpose", ad.transpose, (3, 4)),
    ("reshape", lambda p: ad.reshape(p, (4, 3)), (3, 4)),
    ("concat", lambda p: ad.concat([p, Tensor(_rand((3, 4), 18))], axis=1), (3, 4)),
    ("slice_axis", lambda p: ad.slice_axis(p, 1, 3, axis=1), (3, 4)),
    ("sum_axis", lambda p: ad.sum_axis(p, axis=0), (3, 4)),
    ("mean_axis", lambda p: ad.mean_axis(p, axis=1, keepdims=True), (3, 4)),
    ("softmax_rows", ad.softmax_rows, (3, 4)),
    ("avgpool", lambda p: ad.avgpool1d_same(p, 3), (3, 5)),
    (
        "conv_input",
        lambda p: ad.conv1d_same(p, Tensor(_rand((2, 3), 19)), Tensor(_rand(2, 20))),
        (2, 6),
    ),
    ("l2_normalize", ad.l2_normalize_rows, (3, 4)),
    (
        "layer_norm_x",
        lambda p: ad.layer_norm(p, Tensor(_rand(4, 21)), Tensor(_rand(4, 22))),
        (3, 4),
    ),
    # rebuilding the rng per call keeps the dropout mask fixed across the
    # repeated evaluations the finite-difference oracle performs
    ("dropout", lambda p: ad.dropout(p, 0.3, True, np.random.default_rng(7)), (3, 4)),
]


@pytest.mark.parametrize("name,op,shape", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_adjoint_matches_finite_differences(name, op, shape):
    p = tensor(_rand(shape, 99))

    def f(q):
        out = op(q)
        return ad.sum_all(ad.mul(out, out))

    assert ad.finite_diff_check(f, p, eps=1e-4) < 1e-4


def test_stack_rows_gradient():
    rows = [tensor(_rand(4, s)) for s in range(3)]

    def f(p):
        out = ad.stack_rows([rows[0], p, rows[2]])
        return ad.sum_all(ad.mul(out, out))

    assert ad.finite_diff_check(f, rows[1], eps=1e-5) < 1e-4


def test_l2_normalize_zero_row_warns_and_stays_zero():
    x = tensor(np.array([[0.0, 0.0], [3.0, 4.0]]))
    with pytest.warns(UserWarning, match="zero-norm"):
        out = ad.l2_normalize_rows(x)
    np.testing.assert_array_equal(out.data[0], [0.0, 0.0])
    np.testing.assert_allclose(out.data[1], [0.6, 0.8])
