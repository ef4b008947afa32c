import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motok import blocks as B
from motok import tensor as T
from motok.errors import ConfigError, ShapeError

from fd import max_rel_error, numeric_grad


def t64(x):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# --- rms_norm -------------------------------------------------------------

def test_rms_norm_of_ones_is_ones():
    x = T.Tensor(np.ones((3, 4)))
    g = T.Tensor(np.ones(4))
    y = B.rms_norm(x, g)
    assert np.allclose(y.data, 1.0, atol=1e-5)


def test_rms_norm_scale_invariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6)).astype(np.float32)
    g = T.Tensor(rng.normal(size=6).astype(np.float32))
    y1 = B.rms_norm(T.Tensor(x), g)
    y2 = B.rms_norm(T.Tensor(3.7 * x), g)
    assert np.max(np.abs(y1.data - y2.data)) < 1e-5


def test_rms_norm_empty_axis_raises():
    with pytest.raises(ShapeError):
        B.rms_norm(T.Tensor(np.ones((2, 0))), T.Tensor(np.ones(0)))


def test_rms_norm_grad_matches_fd():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(4,))
    g0 = rng.normal(size=(4,))
    w = rng.normal(size=(4,))

    def fx(x):
        return float((B.rms_norm(T.Tensor(x, dtype=np.float64), T.Tensor(g0, dtype=np.float64)).data * w).sum())

    def fg(g):
        return float((B.rms_norm(T.Tensor(x0, dtype=np.float64), T.Tensor(g, dtype=np.float64)).data * w).sum())

    xt, gt = t64(x0), t64(g0)
    T.backward(T.sum_(T.mul(B.rms_norm(xt, gt), T.Tensor(w, dtype=np.float64))))
    assert max_rel_error(xt.grad, numeric_grad(fx, x0.copy())) < 1e-3
    assert max_rel_error(gt.grad, numeric_grad(fg, g0.copy())) < 1e-3


def test_layer_norm_grad_matches_fd():
    rng = np.random.default_rng(11)
    x0 = rng.normal(size=(3, 5))
    g0 = rng.normal(size=(5,))
    b0 = rng.normal(size=(5,))

    def fx(x):
        return float(np.square(B.layer_norm(T.Tensor(x, dtype=np.float64), T.Tensor(g0, dtype=np.float64), T.Tensor(b0, dtype=np.float64)).data).sum())

    xt, gt, bt = t64(x0), t64(g0), t64(b0)
    T.backward(T.sum_(T.square(B.layer_norm(xt, gt, bt))))
    assert max_rel_error(xt.grad, numeric_grad(fx, x0.copy())) < 1e-3


# --- swiglu ---------------------------------------------------------------

def test_swiglu_zero_input_gives_zero():
    rng = np.random.default_rng(2)
    d, h = 4, 8
    wg, wu, wd = (T.Tensor(rng.normal(size=s).astype(np.float32)) for s in [(d, h), (d, h), (h, d)])
    y = B.swiglu_ffn(T.Tensor(np.zeros((3, d))), wg, wu, wd)
    assert np.allclose(y.data, 0.0)


def test_swiglu_grad_matches_fd():
    rng = np.random.default_rng(3)
    d, h = 4, 6
    x0 = rng.normal(size=(3, 4))
    wg0, wu0, wd0 = rng.normal(size=(d, h)), rng.normal(size=(d, h)), rng.normal(size=(h, d))

    def fx(x):
        y = B.swiglu_ffn(T.Tensor(x, dtype=np.float64), T.Tensor(wg0, dtype=np.float64),
                         T.Tensor(wu0, dtype=np.float64), T.Tensor(wd0, dtype=np.float64))
        return float(np.square(y.data).sum())

    xt = t64(x0)
    wg, wu, wd = t64(wg0), t64(wu0), t64(wd0)
    T.backward(T.sum_(T.square(B.swiglu_ffn(xt, wg, wu, wd))))
    assert max_rel_error(xt.grad, numeric_grad(fx, x0.copy())) < 1e-3

    def fwg(w):
        y = B.swiglu_ffn(T.Tensor(x0, dtype=np.float64), T.Tensor(w, dtype=np.float64),
                         T.Tensor(wu0, dtype=np.float64), T.Tensor(wd0, dtype=np.float64))
        return float(np.square(y.data).sum())

    assert max_rel_error(wg.grad, numeric_grad(fwg, wg0.copy())) < 1e-3


def test_swiglu_shape_mismatch():
    with pytest.raises(ShapeError):
        B.swiglu_ffn(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 8))),
                     T.Tensor(np.ones((4, 8))), T.Tensor(np.ones((8, 4))))


# --- rope -----------------------------------------------------------------

def test_rope_position_zero_is_identity():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 8)).astype(np.float32)
    y = B.rope_rotate(T.Tensor(x), [0])
    assert np.allclose(y.data, x, atol=1e-7)


def test_rope_preserves_norms():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 2, 8)).astype(np.float32)
    y = B.rope_rotate(T.Tensor(x), np.arange(6), base=100.0)
    assert np.allclose(np.linalg.norm(y.data, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-5)


def test_rope_relative_position_identity():
    # <rope(q, p), rope(k, q)> == <rope(q, p-q), k> for p=5, q=2
    rng = np.random.default_rng(6)
    q = rng.normal(size=8)
    k = rng.normal(size=8)

    def rot(v, pos):
        return B.rope_rotate(T.Tensor(v.reshape(1, 1, 8), dtype=np.float64), [pos], base=100.0).data.reshape(8)

    lhs = float(np.dot(rot(q, 5), rot(k, 2)))
    rhs = float(np.dot(rot(q, 3), k))
    assert abs(lhs - rhs) < 1e-5


def test_rope_odd_head_dim_rejected():
    with pytest.raises(ConfigError):
        B.rope_rotate(T.Tensor(np.ones((2, 1, 5))), [0, 1])


def test_rope_grad_matches_fd():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(3, 2, 4))
    w = rng.normal(size=(3, 2, 4))

    def f(x):
        return float((B.rope_rotate(T.Tensor(x, dtype=np.float64), [0, 3, 9]).data * w).sum())

    xt = t64(x0)
    T.backward(T.sum_(T.mul(B.rope_rotate(xt, [0, 3, 9]), T.Tensor(w, dtype=np.float64))))
    assert max_rel_error(xt.grad, numeric_grad(f, x0.copy())) < 1e-3


# --- attention ------------------------------------------------------------

def test_single_key_value_attention_returns_v():
    rng = np.random.default_rng(8)
    q = T.Tensor(rng.normal(size=(5, 4)).astype(np.float32))
    k = T.Tensor(rng.normal(size=(1, 4)).astype(np.float32))
    v = T.Tensor(rng.normal(size=(1, 4)).astype(np.float32))
    out = B.attention(q, k, v, mask=None, heads=2)
    assert np.allclose(out.data, np.broadcast_to(v.data, (5, 4)), atol=1e-6)


def test_scale_causal_mask_blocks_bitwise_independence():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 8)).astype(np.float32)
    mask = B.AttentionMask("scale_causal", blocks=[(0, 2), (2, 5)])

    def run(inp):
        t = T.Tensor(inp)
        return B.attention(t, t, t, mask=mask, heads=2).data

    base = run(x)
    x2 = x.copy()
    x2[2:5] += rng.normal(size=(3, 8)).astype(np.float32)
    pert = run(x2)
    assert np.array_equal(base[:2], pert[:2])
    assert not np.array_equal(base[2:], pert[2:])


def test_attention_zero_permitted_keys_is_config_error():
    x = T.Tensor(np.ones((3, 4), dtype=np.float32))
    allow = np.zeros((3, 3), dtype=bool)
    allow[0, 0] = allow[1, 1] = True  # row 2 has no keys
    with pytest.raises(ConfigError):
        B.attention(x, x, x, mask=allow, heads=1)


def test_attention_rows_sum_to_one_debug_capture():
    rng = np.random.default_rng(10)
    x = T.Tensor(rng.normal(size=(4, 8)).astype(np.float32))
    mask = B.AttentionMask("scale_causal", blocks=[(0, 1), (1, 4)])
    B.CAPTURE_ATTENTION = True
    B.LAST_ATTENTION.clear()
    try:
        B.attention(x, x, x, mask=mask, heads=2)
    finally:
        B.CAPTURE_ATTENTION = False
    w = B.LAST_ATTENTION[-1]
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_grad_matches_fd():
    rng = np.random.default_rng(12)
    q0 = rng.normal(size=(3, 4))
    k0 = rng.normal(size=(5, 4))
    v0 = rng.normal(size=(5, 4))

    def f(q):
        out = B.attention(T.Tensor(q, dtype=np.float64), T.Tensor(k0, dtype=np.float64),
                          T.Tensor(v0, dtype=np.float64), heads=2)
        return float(np.square(out.data).sum())

    qt, kt, vt = t64(q0), t64(k0), t64(v0)
    T.backward(T.sum_(T.square(B.attention(qt, kt, vt, heads=2))))
    assert max_rel_error(qt.grad, numeric_grad(f, q0.copy())) < 1e-3

    def fk(k):
        out = B.attention(T.Tensor(q0, dtype=np.float64), T.Tensor(k, dtype=np.float64),
                          T.Tensor(v0, dtype=np.float64), heads=2)
        return float(np.square(out.data).sum())

    assert max_rel_error(kt.grad, numeric_grad(fk, k0.copy())) < 1e-3


# --- long skip ------------------------------------------------------------

def test_skip_identity_at_init():
    rng = np.random.default_rng(13)
    s = T.Tensor(rng.normal(size=(4, 6)).astype(np.float32))
    d = T.Tensor(rng.normal(size=(4, 6)).astype(np.float32))
    w = T.Tensor(B.skip_init(6))
    out = B.long_skip_fuse(s, d, w)
    assert np.array_equal(out.data, d.data)


def test_skip_pairs_nine_layers():
    assert B.skip_pairs(9) == {5: 3, 6: 2, 7: 1, 8: 0}
    assert B.skip_pairs(2) == {1: 0}
    assert B.skip_pairs(3) == {2: 0}


def test_skip_fuse_grad_matches_fd():
    rng = np.random.default_rng(14)
    s0 = rng.normal(size=(2, 3))
    d0 = rng.normal(size=(2, 3))
    w0 = rng.normal(size=(6, 3))

    def f(w):
        y = B.long_skip_fuse(T.Tensor(s0, dtype=np.float64), T.Tensor(d0, dtype=np.float64),
                             T.Tensor(w, dtype=np.float64))
        return float(np.square(y.data).sum())

    st_, dt_, wt = t64(s0), t64(d0), t64(w0)
    T.backward(T.sum_(T.square(B.long_skip_fuse(st_, dt_, wt))))
    assert max_rel_error(wt.grad, numeric_grad(f, w0.copy())) < 1e-3


def test_skip_shape_mismatch():
    with pytest.raises(ShapeError):
        B.long_skip_fuse(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 4))),
                         T.Tensor(np.ones((8, 4))))


# --- masks ----------------------------------------------------------------

def test_scale_causal_requires_covering_blocks():
    with pytest.raises(ConfigError):
        B.AttentionMask("scale_causal", blocks=[(0, 2), (3, 5)])


def test_frame_edit_mask_from_intervals():
    m = B.AttentionMask.from_intervals([(2, 5)], frames=8)
    allow = m.allow_matrix(8, 4)  # null + 3 text keys
    assert allow[0, 0] and not allow[0, 1:].any()
    assert not allow[3, 0] and allow[3, 1:].all()


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 60))
def test_rope_norm_preservation_property(half_dim, pos):
    rng = np.random.default_rng(half_dim * 61 + pos)
    x = rng.normal(size=(1, 1, 2 * half_dim)).astype(np.float32)
    y = B.rope_rotate(T.Tensor(x), [pos], base=100.0)
    assert abs(np.linalg.norm(y.data) - np.linalg.norm(x)) < 1e-5
