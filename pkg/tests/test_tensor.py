import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fadsr import tensor as T
from fadsr.tensor import Tape, Tensor, backward

from _grad_cases import GRAD_CASES
from _oracles import check_op_gradient, naive_conv2d

GRAD_TOL = 1e-6


# ---------------------------------------------------------------------------
# im2col / GEMM convolution against a direct loop


@pytest.mark.parametrize("k", [1, 3])
def test_conv2d_matches_direct_loop(rng, k):
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, naive_conv2d(x, w, b), rtol=1e-12, atol=1e-12)


def test_im2col_gemm_equals_direct_on_5x5_3x3_kernel(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    cols = T.im2col(x, 3)
    assert cols.shape == (25, 18)
    out = T.gemm(cols, T.weight_matrix(w)).reshape(1, 5, 5, 3).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(out, naive_conv2d(x, w), atol=1e-12)


def test_im2col_column_order_is_kh_kw_c():
    x = np.arange(2 * 3 * 3, dtype=np.float64).reshape(1, 2, 3, 3)
    centre = T.im2col(x, 3)[4]  # position (1, 1)
    expected = [x[0, c, i, j] for i in range(3) for j in range(3) for c in range(2)]
    np.testing.assert_array_equal(centre, expected)


def test_im2col_border_taps_are_zero():
    x = np.ones((1, 1, 2, 2))
    cols = T.im2col(x, 3)
    assert cols[0].tolist() == [0, 0, 0, 0, 1, 1, 0, 1, 1]


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    y = rng.standard_normal((2 * 4 * 5, 27))
    lhs = np.sum(T.im2col(x, 3) * y)
    rhs = np.sum(x * T.col2im(y, x.shape, 3))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv_identity_kernel_returns_input(rng):
    x = rng.standard_normal((1, 4, 6, 6))
    w = np.zeros((4, 4, 3, 3))
    w[np.arange(4), np.arange(4), 1, 1] = 1.0
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w)).data, x, atol=1e-14)


def test_kernel_and_shape_errors(rng):
    with pytest.raises(ValueError):
        T.im2col(np.zeros((1, 1, 4, 4)), 2)
    with pytest.raises(ValueError):
        T.im2col(np.zeros((1, 1, 4, 4)), 3, pad=0)
    with pytest.raises(ValueError):
        T.gemm(np.zeros((3, 4)), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 3, 5, 5))))


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3]))
def test_conv_output_finite_and_shaped(n, c, h, w, k):
    rng = np.random.default_rng(n * 100 + c * 10 + h + w)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    wt = rng.standard_normal((2, c, k, k)).astype(np.float32)
    y = T.conv2d(Tensor(x), Tensor(wt)).data
    assert y.shape == (n, 2, h, w)
    assert np.all(np.isfinite(y))


# ---------------------------------------------------------------------------
# tape semantics


def test_backward_on_empty_tape_raises():
    with Tape() as tape:
        pass
    with pytest.raises(RuntimeError):
        backward(tape, Tensor(np.zeros(())))


def test_unused_parameter_gets_zero_gradient(rng):
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    unused = Tensor(rng.standard_normal((4,)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.square(a))
    g = backward(tape, loss, [a, unused])
    np.testing.assert_allclose(g[a], 2 * a.data)
    assert np.array_equal(g[unused], np.zeros(4))


def test_gradients_accumulate_over_reuse(rng):
    a = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.add(T.mul(a, a), a))
    g = backward(tape, loss, [a])[a]
    np.testing.assert_allclose(g, 2 * a.data + 1)


def test_no_recording_outside_tape(rng):
    a = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    y = T.relu(a)
    assert not y.requires_grad


def test_tensor_hash_is_identity():
    a, b = Tensor(np.zeros(3)), Tensor(np.zeros(3))
    assert len({a, b}) == 2


def test_broadcast_rules(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    T.add(x, Tensor(np.ones((1, 3, 1, 1))))
    T.mul(x, Tensor(np.ones((2, 1, 4, 4))))
    T.add(x, Tensor(np.float64(2.0)))
    with pytest.raises(ValueError):
        T.add(x, Tensor(np.ones((1, 2, 1, 1))))
    with pytest.raises(ValueError):
        T.mul(x, Tensor(np.ones((3, 4, 4))))


# ---------------------------------------------------------------------------
# finite-difference gradient checks in double precision


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradient_matches_finite_differences(name):
    op, make = GRAD_CASES[name]
    err = check_op_gradient(op, make(np.random.default_rng(7)))
    assert err < GRAD_TOL, f"{name}: relative error {err:.3e}"


def test_straight_through_passes_gradient_to_soft_input(rng):
    soft = Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True)
    hard = np.zeros((1, 3, 2, 2))
    hard[:, 0] = 1
    r = rng.standard_normal((1, 3, 2, 2))
    with Tape() as tape:
        y = T.straight_through(soft, hard)
        loss = T.sum_all(T.mul(y, Tensor(r)))
    assert np.array_equal(y.data, hard)
    np.testing.assert_allclose(backward(tape, loss, [soft])[soft], r)


def test_single_precision_gradient_within_loose_bound(rng):
    x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    w = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    wt = Tensor(w, requires_grad=True)
    with Tape() as tape:
        loss = T.mean_all(T.square(T.conv2d(Tensor(x), wt)))
    g = backward(tape, loss, [wt])[wt]
    # float64 reference through the same graph
    w64 = Tensor(w.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        loss = T.mean_all(T.square(T.conv2d(Tensor(x.astype(np.float64)), w64)))
    ref = backward(tape, loss, [w64])[w64]
    assert np.abs(g - ref).max() / np.abs(ref).max() < 1e-3


# ---------------------------------------------------------------------------
# properties


@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from([2, 3]))
def test_pixel_shuffle_roundtrip(n, c, h, w, r):
    x = np.random.default_rng(h * w).standard_normal((n, c * r * r, h, w))
    y = T.pixel_shuffle_array(x, r)
    assert y.shape == (n, c, h * r, w * r)
    np.testing.assert_array_equal(T.pixel_unshuffle_array(y, r), x)


def test_pixel_shuffle_layout():
    x = np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1)
    assert T.pixel_shuffle_array(x, 2)[0, 0].tolist() == [[0, 1], [2, 3]]


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=5))
def test_softmax_is_distribution(vals):
    x = Tensor(np.array(vals, dtype=np.float64).reshape(1, -1, 1, 1))
    p = T.softmax(x).data
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0)


def test_log_floor_keeps_values_finite():
    y = T.log(Tensor(np.array([0.0, 1e-30, 1.0]))).data
    assert np.all(np.isfinite(y))


def test_configure_threads_reads_env(monkeypatch):
    monkeypatch.setenv("FADSR_THREADS", "1")
    T.configure_threads()
    monkeypatch.delenv("FADSR_THREADS")
    T.configure_threads()
