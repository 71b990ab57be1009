"""Autodiff unit tests: FD agreement, op semantics, taxonomy, optimizer."""

import numpy as np
import pytest

from epgstage import autodiff as ad
from epgstage.autodiff import (
    AdamState,
    BatchNormState,
    DimensionError,
    GraphError,
    Tensor,
)

from gradcheck import TOLERANCE, run_suite


# ---------------------------------------------------------------------------
# the finite-difference suite, op by op
# ---------------------------------------------------------------------------

_RESULTS = run_suite()
_OPS = sorted({r.op for r in _RESULTS})


@pytest.mark.parametrize("op", _OPS)
def test_gradcheck_per_op(op):
    rows = [r for r in _RESULTS if r.op == op]
    assert rows
    bad = [r for r in rows if not r.passed]
    detail = "; ".join(f"{r.config}: {r.rel_err:.2e}" for r in bad)
    assert not bad, f"{op} failed finite differences: {detail}"


def test_gradcheck_suite_is_large_enough():
    assert len(_RESULTS) >= 100
    assert max(r.rel_err for r in _RESULTS) < TOLERANCE


# ---------------------------------------------------------------------------
# float32 FFT conv path agrees with the float64 reference path
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_fft_path_matches_reference(stride, padding):
    rng = np.random.default_rng(5)
    x64 = rng.standard_normal((4, 8, 1024))
    w64 = rng.standard_normal((8, 8, 16)) * 0.2
    b64 = rng.standard_normal(8) * 0.1

    p64 = rng.standard_normal((8, 3)) * 0.3

    def run(dtype):
        x = Tensor(x64.astype(dtype), requires_grad=True)
        w = Tensor(w64.astype(dtype), requires_grad=True)
        b = Tensor(b64.astype(dtype), requires_grad=True)
        y = ad.conv1d(x, w, b, stride=stride, padding=padding)
        logits = ad.dense(ad.gap(y), Tensor(p64.astype(dtype)))
        loss, _ = ad.softmax_xent(logits, np.zeros(4, np.int64))
        ad.backward(loss)
        return y.data, x.grad, w.grad, b.grad

    # float32 engages the spectral path (4*8*1024*16 MACs is over threshold)
    assert x64.astype(np.float32).size * 16 >= ad._FFT_CONV_MIN_WORK
    fast = run(np.float32)
    ref = run(np.float64)
    for name, a, b in zip(("y", "gx", "gw", "gb"), fast, ref):
        err = np.abs(a.astype(np.float64) - b).max() / max(np.abs(b).max(), 1e-8)
        assert err < 2e-4, f"{name}: {err:.2e}"


def test_conv_path_selection(monkeypatch):
    calls = []
    real = ad._conv1d_fft

    def spy(*args, **kwargs):
        calls.append(args[0].shape)
        return real(*args, **kwargs)

    monkeypatch.setattr(ad, "_conv1d_fft", spy)
    rng = np.random.default_rng(0)

    # small float32: stays on the windowed-tensordot path
    ad.conv1d(
        Tensor(rng.standard_normal((2, 3, 40)).astype(np.float32)),
        Tensor(rng.standard_normal((4, 3, 5)).astype(np.float32)),
        padding="valid",
    )
    assert calls == []
    # float64 never rides the spectral path, whatever the size
    ad.conv1d(
        Tensor(rng.standard_normal((4, 8, 2560))),
        Tensor(rng.standard_normal((8, 8, 16))),
        padding="same",
    )
    assert calls == []
    # big float32 does
    ad.conv1d(
        Tensor(rng.standard_normal((4, 8, 2560)).astype(np.float32)),
        Tensor(rng.standard_normal((8, 8, 16)).astype(np.float32)),
        padding="same",
    )
    assert len(calls) == 1


def test_conv_values_against_windowed_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 40)).astype(np.float32)
    w = rng.standard_normal((4, 3, 5)).astype(np.float32)
    y = ad.conv1d(Tensor(x), Tensor(w), padding="valid")
    win = np.lib.stride_tricks.sliding_window_view(x.astype(np.float64), 5, axis=2)
    want = np.einsum("bclk,ock->bol", win, w.astype(np.float64))
    np.testing.assert_allclose(y.data, want, rtol=1e-5, atol=1e-5)


# ---------------------------------------------------------------------------
# forward semantics worth pinning
# ---------------------------------------------------------------------------


def test_conv_same_padding_lengths():
    x = Tensor(np.zeros((1, 1, 10)))
    w = Tensor(np.zeros((1, 1, 3)))
    assert ad.conv1d(x, w, stride=1, padding="same").shape == (1, 1, 10)
    assert ad.conv1d(x, w, stride=2, padding="same").shape == (1, 1, 5)
    assert ad.conv1d(x, w, stride=3, padding="same").shape == (1, 1, 4)
    assert ad.conv1d(x, w, stride=1, padding="valid").shape == (1, 1, 8)


def test_conv_is_cross_correlation():
    x = Tensor(np.arange(5.0).reshape(1, 1, 5))
    w = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    y = ad.conv1d(x, w, padding="valid")
    # y[l] = x[l]*w[0] + x[l+1]*w[1] + x[l+2]*w[2], no kernel flip
    np.testing.assert_allclose(y.data.ravel(), [8.0, 14.0, 20.0])


def test_maxpool_and_avgpool_values():
    x = Tensor(np.array([[[1.0, 4.0, 2.0, 8.0, 5.0, 3.0]]]))
    np.testing.assert_allclose(
        ad.maxpool1d(x, 2, 2).data.ravel(), [4.0, 8.0, 5.0]
    )
    np.testing.assert_allclose(
        ad.avgpool1d(x, 2, 2).data.ravel(), [2.5, 5.0, 4.0]
    )


def test_gap_matches_mean():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4, 7))
    np.testing.assert_allclose(ad.gap(Tensor(x)).data, x.mean(axis=2))


def test_batchnorm_eval_uses_running_stats_and_is_pure():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 5)).astype(np.float32)
    state = BatchNormState(np.array([1.0, -1.0, 0.0], np.float32), np.array([4.0, 1.0, 9.0], np.float32))
    gamma = Tensor(np.ones(3, np.float32))
    beta = Tensor(np.zeros(3, np.float32))
    before = (state.running_mean.copy(), state.running_var.copy())
    y1 = ad.batchnorm(Tensor(x), gamma, beta, state, training=False)
    y2 = ad.batchnorm(Tensor(x), gamma, beta, state, training=False)
    assert y1.data.tobytes() == y2.data.tobytes()  # bitwise repeatable
    np.testing.assert_array_equal(state.running_mean, before[0])
    np.testing.assert_array_equal(state.running_var, before[1])
    want = (x - before[0].reshape(1, 3, 1)) / np.sqrt(before[1].reshape(1, 3, 1) + 1e-5)
    np.testing.assert_allclose(y1.data, want, rtol=1e-6)


def test_batchnorm_training_updates_running_stats():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8, 2, 6))
    state = BatchNormState.for_channels(2, dtype=np.float64)
    ad.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=True, momentum=0.1)
    want_mean = 0.1 * x.mean(axis=(0, 2))
    want_var = 0.9 * 1.0 + 0.1 * x.var(axis=(0, 2))
    np.testing.assert_allclose(state.running_mean, want_mean, rtol=1e-12)
    np.testing.assert_allclose(state.running_var, want_var, rtol=1e-12)


def test_dropout_eval_is_identity_object():
    x = Tensor(np.ones((2, 3)))
    assert ad.dropout(x, 0.5, training=False) is x
    assert ad.dropout(x, 0.0, training=True) is x


def test_dropout_scales_surviving_units():
    rng = ad.dropout_rng(1, 2, 3)
    x = Tensor(np.ones((200, 50), np.float32))
    y = ad.dropout(x, 0.25, training=True, rng=rng)
    vals = np.unique(y.data)
    np.testing.assert_allclose(sorted(vals), [0.0, 1.0 / 0.75], rtol=1e-6)
    keep_rate = (y.data != 0).mean()
    assert abs(keep_rate - 0.75) < 0.02
    # expectation preserved
    assert abs(y.data.mean() - 1.0) < 0.02


def test_dropout_stream_is_replayable():
    a = ad.dropout(Tensor(np.ones((4, 4))), 0.5, True, ad.dropout_rng(9, 1, 5))
    b = ad.dropout(Tensor(np.ones((4, 4))), 0.5, True, ad.dropout_rng(9, 1, 5))
    c = ad.dropout(Tensor(np.ones((4, 4))), 0.5, True, ad.dropout_rng(9, 1, 6))
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.tobytes() != c.data.tobytes()


def test_dropout_requires_rng_in_training():
    with pytest.raises(ValueError, match="rng"):
        ad.dropout(Tensor(np.ones(3)), 0.5, training=True)
    with pytest.raises(ValueError, match="rate"):
        ad.dropout(Tensor(np.ones(3)), 1.0, training=True, rng=ad.dropout_rng(0, 0, 0))


def test_softmax_xent_values_and_probs():
    logits = Tensor(np.zeros((2, 3)))
    loss, probs = ad.softmax_xent(logits, np.array([0, 2]))
    np.testing.assert_allclose(probs, np.full((2, 3), 1 / 3), rtol=1e-12)
    assert float(loss.data) == pytest.approx(np.log(3.0))
    np.testing.assert_allclose(probs.sum(axis=1), [1.0, 1.0], rtol=1e-12)


def test_softmax_xent_is_shift_invariant_and_stable():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((5, 4))
    labels = np.array([0, 1, 2, 3, 0])
    l1, p1 = ad.softmax_xent(Tensor(z), labels)
    l2, p2 = ad.softmax_xent(Tensor(z + 1000.0), labels)
    np.testing.assert_allclose(p1, p2, atol=1e-12)
    assert float(l1.data) == pytest.approx(float(l2.data), rel=1e-9)
    # extreme logits stay finite
    l3, p3 = ad.softmax_xent(Tensor(np.array([[1e30, -1e30]])), np.array([0]))
    assert np.isfinite(float(l3.data)) and np.isfinite(p3).all()


def test_l2_penalty_value():
    a = Tensor(np.array([1.0, 2.0]))
    b = Tensor(np.array([[3.0]]))
    assert float(ad.l2_penalty([a, b], 0.01).data) == pytest.approx(0.01 * 14.0)


# ---------------------------------------------------------------------------
# graph mechanics
# ---------------------------------------------------------------------------


def test_no_grad_builds_no_closures():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with ad.no_grad():
        y = ad.relu(x)
    assert y._backward is None
    assert not y.requires_grad


def test_grad_accumulates_across_reuse():
    x = Tensor(np.array([[2.0, 3.0]]), requires_grad=True)
    y = ad.add(x, x)  # dy/dx = 2
    loss = ad.l2_penalty([y], 0.5)  # sum(y^2)/2... factor*sum = 0.5*sum(y^2)
    ad.backward(loss)
    # d/dx 0.5*sum((2x)^2) = 4x
    np.testing.assert_allclose(x.grad, 4.0 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.relu(x)
    with pytest.raises(GraphError, match="scalar"):
        ad.backward(y)


def test_backward_rejects_detached_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=False)
    loss = ad.l2_penalty([x], 1.0)
    with pytest.raises(GraphError, match="does not depend"):
        ad.backward(loss)


def test_zero_grad_clears():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ad.l2_penalty([x], 1.0)
    ad.backward(loss)
    assert x.grad is not None
    ad.zero_grad([x])
    assert x.grad is None


def test_deep_graph_iterative_traversal():
    # a graph deeper than CPython's default recursion limit
    x = Tensor(np.ones((1, 4)), requires_grad=True)
    node = x
    for _ in range(3000):
        node = ad.relu(node)
    loss = ad.l2_penalty([node], 0.5)
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, np.ones((1, 4)))


# ---------------------------------------------------------------------------
# error taxonomy
# ---------------------------------------------------------------------------


def test_conv_shape_errors_name_shapes():
    x = Tensor(np.zeros((2, 3, 8)))
    w_bad = Tensor(np.zeros((4, 5, 3)))
    with pytest.raises(DimensionError, match=r"\(2, 3, 8\)"):
        ad.conv1d(x, w_bad)
    with pytest.raises(DimensionError, match="stride"):
        ad.conv1d(x, Tensor(np.zeros((4, 3, 3))), stride=0)
    with pytest.raises(DimensionError, match="padding"):
        ad.conv1d(x, Tensor(np.zeros((4, 3, 3))), padding="reflect")
    with pytest.raises(DimensionError, match="width <= length"):
        ad.conv1d(x, Tensor(np.zeros((4, 3, 9))), padding="valid")
    with pytest.raises(DimensionError, match="bias"):
        ad.conv1d(x, Tensor(np.zeros((4, 3, 3))), Tensor(np.zeros(5)))


def test_dense_and_pool_errors():
    with pytest.raises(DimensionError, match="matching D"):
        ad.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(DimensionError, match="exceeds signal length"):
        ad.maxpool1d(Tensor(np.zeros((1, 1, 3))), width=4)
    with pytest.raises(DimensionError, match=r"\[B,C,L\]"):
        ad.gap(Tensor(np.zeros((2, 3))))
    with pytest.raises(DimensionError, match="matching shapes"):
        ad.add(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))))
    with pytest.raises(DimensionError, match="gamma/beta"):
        ad.batchnorm(
            Tensor(np.zeros((2, 3, 4))),
            Tensor(np.zeros(2)),
            Tensor(np.zeros(3)),
            BatchNormState.for_channels(3),
            True,
        )


def test_softmax_xent_label_errors():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError, match=r"\[0, 3\)"):
        ad.softmax_xent(logits, np.array([0, 3]))
    with pytest.raises(ValueError, match="shape"):
        ad.softmax_xent(logits, np.array([0]))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_first_step_is_signed_lr():
    # with bias correction the very first update is lr * sign(g) (up to eps)
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3])
    st = AdamState.for_params([p])
    before = p.data.copy()
    ad.adam_step([p], st, lr=0.01)
    np.testing.assert_allclose(
        before - p.data, 0.01 * np.sign(p.grad), rtol=1e-4
    )
    assert st.t == 1


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    st = AdamState.for_params([p])
    target = np.array([1.0, 2.0])
    for _ in range(800):
        p.grad = 2 * (p.data - target)
        ad.adam_step([p], st, lr=0.05)
    np.testing.assert_allclose(p.data, target, atol=1e-3)


def test_adam_missing_grad_means_zero():
    p = Tensor(np.array([1.0]), requires_grad=True)
    st = AdamState.for_params([p])
    p.grad = None
    ad.adam_step([p], st, lr=0.1)
    np.testing.assert_allclose(p.data, [1.0])


def test_adam_slot_mismatch():
    p = Tensor(np.array([1.0]), requires_grad=True)
    st = AdamState.for_params([p, Tensor(np.zeros(2))])
    with pytest.raises(ValueError, match="2 slots for 1 params"):
        ad.adam_step([p], st)


# ---------------------------------------------------------------------------
# the FD harness itself
# ---------------------------------------------------------------------------


def test_numeric_gradient_on_known_function():
    got = ad.numeric_gradient(lambda v: float((v**3).sum()), np.array([1.0, 2.0]))
    np.testing.assert_allclose(got, [3.0, 12.0], rtol=1e-8)
