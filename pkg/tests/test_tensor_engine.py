import numpy as np
import pytest
from hypothesis import given, strategies as st

from geoincidence import tensor_engine as te
from geoincidence.tensor_engine import (AdaModState, ConvSpec, Tensor, adamod_step, conv3d,
                                        load_checkpoint, locally_connected, save_checkpoint)

from gradcheck import check_grads


def param(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def naive_conv3d(x, w, b, causal):
    """Six nested loops over output positions and kernel offsets, zero padding by bounds checks."""
    B, C, T, H, W = x.shape
    O, _, kt, kh, kw = w.shape
    t_off = kt - 1 if causal else (kt - 1) // 2
    h_off, w_off = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((B, O, T, H, W))
    for n in range(B):
        for o in range(O):
            for t in range(T):
                for i in range(H):
                    for j in range(W):
                        acc = b[o] if b is not None else 0.0
                        for c in range(C):
                            for a in range(kt):
                                for p in range(kh):
                                    for q in range(kw):
                                        tt, ii, jj = t + a - t_off, i + p - h_off, j + q - w_off
                                        if 0 <= tt < T and 0 <= ii < H and 0 <= jj < W:
                                            acc += w[o, c, a, p, q] * x[n, c, tt, ii, jj]
                        out[n, o, t, i, j] = acc
    return out


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 3, 4, 4))
    out = conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_causal_impulse_response():
    x = np.zeros((1, 1, 7, 1, 1))
    x[0, 0, 2] = 1.0
    out = conv3d(Tensor(x), Tensor(np.ones((1, 1, 3, 1, 1))), causal=True).data.ravel()
    assert np.flatnonzero(out).tolist() == [2, 3, 4]


@pytest.mark.parametrize("kernel,causal", [((1, 3, 3), True), ((3, 1, 1), True),
                                           ((2, 2, 3), False), ((3, 2, 2), True)])
def test_conv_matches_loop_oracle(rng, kernel, causal):
    x = rng.standard_normal((1, 2, 4, 5, 5))
    w = rng.standard_normal((3, 2) + kernel)
    b = rng.standard_normal(3)
    out = conv3d(Tensor(x), Tensor(w), Tensor(b), causal=causal).data
    np.testing.assert_allclose(out, naive_conv3d(x, w, b, causal), atol=1e-12)


def test_conv_shape_errors_name_axes(rng):
    with pytest.raises(ValueError, match="channel"):
        conv3d(Tensor(np.zeros((1, 2, 3, 3, 3))), Tensor(np.zeros((1, 3, 1, 1, 1))))
    with pytest.raises(ValueError, match="bias"):
        conv3d(Tensor(np.zeros((1, 1, 3, 3, 3))), Tensor(np.zeros((2, 1, 1, 1, 1))),
               Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        ConvSpec(1, 1, (0, 1, 1))


@given(st.integers(0, 5), st.integers(0, 2 ** 32 - 1))
def test_causal_conv_ignores_future(tau, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 6, 3, 3))
    w = Tensor(rng.standard_normal((2, 2, 3, 1, 1)))
    y = x.copy()
    y[:, :, tau + 1:] += rng.standard_normal(y[:, :, tau + 1:].shape)
    a = conv3d(Tensor(x), w).data[:, :, :tau + 1]
    b = conv3d(Tensor(y), w).data[:, :, :tau + 1]
    assert a.tobytes() == b.tobytes()


def test_locally_connected_identity_and_weight_map():
    x = np.ones((1, 1, 2, 3, 3))
    ones = Tensor(np.ones((1, 1, 2, 3, 3, 1, 1, 1)))
    np.testing.assert_array_equal(locally_connected(Tensor(x), ones).data, x)
    pattern = np.arange(18, dtype=float).reshape(1, 1, 2, 3, 3, 1, 1, 1)
    out = locally_connected(Tensor(x), Tensor(pattern)).data
    np.testing.assert_array_equal(out, pattern[..., 0, 0, 0])


def test_locally_connected_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 1, 1, 3, 3))
    w = rng.standard_normal((2, 1, 1, 3, 3, 1, 2, 2))
    out = locally_connected(Tensor(x), Tensor(w)).data
    expected = np.zeros((2, 2, 1, 3, 3))
    for n in range(2):
        for o in range(2):
            for i in range(3):
                for j in range(3):
                    acc = 0.0
                    for p in range(2):
                        for q in range(2):
                            ii, jj = i + p, j + q      # kernel 2 pads one row/column after
                            if ii < 3 and jj < 3:
                                acc += w[o, 0, 0, i, j, 0, p, q] * x[n, 0, 0, ii, jj]
                    expected[n, o, 0, i, j] = acc
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_locally_connected_shape_error():
    with pytest.raises(ValueError, match="does not match"):
        locally_connected(Tensor(np.zeros((1, 1, 2, 3, 3))), Tensor(np.zeros((1, 1, 2, 3, 4, 1, 1, 1))))


def test_backward_of_weighted_sum(rng):
    x = rng.standard_normal((2, 3))
    w = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    te.backward((w * x).sum())
    np.testing.assert_array_equal(w.grad, x)


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        te.backward(w * 2.0)


def test_zero_grad_makes_backward_repeatable(rng):
    w = param(rng, 1, 1, 2, 1, 1)
    x = Tensor(rng.standard_normal((2, 1, 4, 3, 3)))

    def loss():
        return te.mse(conv3d(x, w), Tensor(np.zeros((2, 1, 4, 3, 3))))
    te.backward(loss())
    first = w.grad.copy()
    w.zero_grad()
    te.backward(loss())
    np.testing.assert_array_equal(w.grad, first)


def test_shared_leaf_gets_summed_gradient():
    a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    te.backward((a * a + a).sum())
    np.testing.assert_allclose(a.grad, [5.0, 7.0])


@given(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3))
def test_gradient_linear_in_loss_scale(a):
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((1, 2, 2, 1, 1)), requires_grad=True)
    x = Tensor(rng.standard_normal((1, 2, 3, 2, 2)))
    te.backward(te.mse(conv3d(x, w), Tensor(np.ones((1, 1, 3, 2, 2)))))
    g1 = w.grad.copy()
    w.zero_grad()
    te.backward(te.mse(conv3d(x, w), Tensor(np.ones((1, 1, 3, 2, 2)))) * a)
    np.testing.assert_allclose(w.grad, a * g1, rtol=1e-13, atol=1e-15)


# --- finite-difference checks, one per differentiable op ---------------------

def _fd_cases(rng):
    x5 = param(rng, 2, 2, 3, 3, 3)
    w = param(rng, 2, 2, 2, 2, 2, scale=0.5)
    b = param(rng, 2)
    lw = param(rng, 1, 2, 3, 3, 3, 1, 2, 2, scale=0.5)
    a = param(rng, 3, 4)
    c = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    tgt = Tensor(rng.standard_normal((2, 2, 3, 3, 3)))
    return {
        "add_mul_neg": (lambda: ((a * c - a) + 2.0).sum() * 0.5, [a, c]),
        "div": (lambda: (a / c).sum(), [a, c]),
        "square_sqrt": (lambda: te.sqrt(te.square(a) + 1.0).sum(), [a]),
        "maximum": (lambda: te.maximum(a, c * 0.3).sum(), [a, c]),
        "sum_mean_axis": (lambda: te.square(a.mean(axis=1)).sum() + a.sum(axis=0).sum(), [a]),
        "variance": (lambda: te.variance(x5, axis=(0, 3, 4)).sum(), [x5]),
        "reshape_slice": (lambda: te.square(te.slice_axis(a.reshape(4, 3), 0, 1, 3)).sum(), [a]),
        "concat": (lambda: te.square(te.concat([x5, x5 * 2.0], axis=1)).mean(), [x5]),
        "broadcast": (lambda: te.square(te.broadcast_to(b.reshape(1, 2, 1, 1, 1),
                                                        (2, 2, 3, 3, 3)) * x5).mean(), [b, x5]),
        "conv3d_causal": (lambda: te.mse(conv3d(x5, w, b, causal=True), tgt), [x5, w, b]),
        "conv3d_centred": (lambda: te.mse(conv3d(x5, w, b, causal=False), tgt), [x5, w, b]),
        "locally_connected": (lambda: te.mse(locally_connected(x5, lw),
                                             Tensor(np.zeros((2, 1, 3, 3, 3)))), [x5, lw]),
    }


@pytest.mark.parametrize("name", list(_fd_cases(np.random.default_rng(0))))
def test_finite_differences(name):
    fn, tensors = _fd_cases(np.random.default_rng(21))[name]
    assert check_grads(fn, tensors) <= 1e-4


# --- AdaMod --------------------------------------------------------------------

def test_adamod_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adamod_step(AdaModState(), [p])
    assert p.data.tolist() == [1.0, -2.0]


def test_adamod_first_step_by_hand():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0])
    st_ = AdaModState(lr=1e-3)
    adamod_step(st_, [p])
    m_hat = 0.1 / (1 - 0.9)
    v_hat = 0.001 / (1 - 0.999)
    eta = 1e-3 / (np.sqrt(v_hat) + 1e-8)
    s = (1 - 0.9999) * eta
    assert p.data[0] == pytest.approx(0.5 - min(eta, s) * m_hat, abs=1e-18)


def test_adamod_without_memory_is_adam(rng):
    p1 = Tensor(rng.standard_normal(4), requires_grad=True)
    p2 = Tensor(p1.data.copy(), requires_grad=True)
    st1 = AdaModState(beta3=0.0)
    m = v = np.zeros(4)
    for k in range(1, 6):
        g = rng.standard_normal(4)
        p1.grad = g
        adamod_step(st1, [p1])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat, v_hat = m / (1 - 0.9 ** k), v / (1 - 0.999 ** k)
        p2.data = p2.data - 1e-3 / (np.sqrt(v_hat) + 1e-8) * m_hat
    np.testing.assert_allclose(p1.data, p2.data, rtol=1e-14)


def test_adamod_skips_non_finite():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([np.nan])
    st_ = AdaModState()
    assert adamod_step(st_, [p]) is False
    assert st_.skipped == 1 and st_.step == 0 and p.data[0] == 1.0
    with pytest.raises(ValueError):
        AdaModState(beta3=1.0)


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"w": rng.standard_normal((2, 3, 1)), "bias": np.array([1.5]), "s": np.array(2.0)}
    save_checkpoint(tmp_path / "m.bin", arrays, tmp_path / "m.csv")
    back = load_checkpoint(tmp_path / "m.bin")
    for k, v in arrays.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "name,shape,offset,count" and rows[1].startswith("w,2x3x1,")
    raw = (tmp_path / "m.bin").read_bytes()
    off = int(rows[1].split(",")[2])
    assert np.frombuffer(raw, "<f8", 6, off).tolist() == arrays["w"].ravel().tolist()
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")
