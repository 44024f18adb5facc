import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from v2v.denoiser import (AttentionState, Conditioning, DenoiserError, ToyDenoiser, attention, edge_map,
                          prompt_embedding, softmax)
from v2v.sampler import NoiseSchedule

GOLDEN = Path(__file__).parent / "golden"
SCHED = NoiseSchedule.scaled_linear()


@pytest.fixture(scope="module")
def den():
    return ToyDenoiser(SCHED)


def random_inputs(seed, h=6, w=6):
    r = np.random.default_rng(seed)
    return r.standard_normal((4, h, w)), Conditioning(prompt_embedding(f"p{seed}"), r.random((h, w)), 0.7)


def test_deterministic(den):
    x, cond = random_inputs(0)
    assert np.array_equal(den.predict_noise(x, 400, cond), den.predict_noise(x, 400, cond))
    assert np.array_equal(ToyDenoiser(SCHED).predict_noise(x, 400, cond), den.predict_noise(x, 400, cond))


def test_weights_read_only(den):
    with pytest.raises(ValueError):
        den.w_q[0, 0] = 1.0


def test_zero_input_golden(den):
    eps = den.predict_noise(np.zeros((4, 8, 8)), 500, Conditioning.empty((8, 8)))
    assert np.array_equal(eps, np.load(GOLDEN / "denoiser_zero.npy"))


def test_output_range_golden(den):
    rng = np.random.default_rng(99)
    lo, hi = np.inf, -np.inf
    for t in (1, 100, 500, 900, 1000):
        for _ in range(10):
            x = rng.uniform(-3, 3, (4, 8, 8))
            cond = Conditioning(rng.standard_normal(32), rng.random((8, 8)), 1.0)
            eps = den.predict_noise(x, t, cond)
            lo, hi = min(lo, eps.min()), max(hi, eps.max())
    assert np.array_equal([lo, hi], np.load(GOLDEN / "denoiser_range.npy"))


@given(st.integers(0, 2**31), st.integers(1, 1000))
def test_output_bounded(seed, t):
    # |mu| <= 1 (tanh), |x| <= 3 give a closed-form bound on the posterior noise estimate
    den = ToyDenoiser(SCHED)
    r = np.random.default_rng(seed)
    x = r.uniform(-3, 3, (4, 4, 4))
    eps = den.predict_noise(x, t, Conditioning(r.standard_normal(32), r.random((4, 4)), 2.0))
    ab = SCHED.alpha_bar(t)
    bound = math.sqrt(1 - ab) * (3 + math.sqrt(ab)) / (ab * 0.25 + 1 - ab)
    assert np.abs(eps).max() <= bound + 1e-12


def test_own_state_matches_self_attention(den):
    x, cond = random_inputs(1)
    eps, toks = den.forward(x, 300, cond)
    assert np.array_equal(den.predict_noise(x, 300, cond, den.attention_state(toks)), eps)


def test_errors(den):
    x, cond = random_inputs(2)
    with pytest.raises(DenoiserError):
        den.predict_noise(x[:3], 10, cond)
    with pytest.raises(DenoiserError):
        den.predict_noise(x, 0, cond)
    with pytest.raises(DenoiserError):
        den.predict_noise(x, 1001, cond)
    with pytest.raises(DenoiserError):
        den.predict_noise(x, 10, Conditioning.empty((3, 3)))
    with pytest.raises(DenoiserError):
        AttentionState(np.zeros((3, 16)), np.zeros((4, 16)))


# -- attention -------------------------------------------------------------------

def test_single_key_value(rng):
    v = rng.random((1, 5))
    out = attention(rng.random((7, 3)), rng.random((1, 3)), v)
    assert np.allclose(out, np.repeat(v, 7, axis=0), atol=1e-15)


def test_one_hot_limit(rng):
    q = np.eye(4) * 100
    k = np.eye(4) * 100
    v = rng.random((4, 6))
    assert np.abs(attention(q, k, v) - v).max() < 1e-3


def test_three_token_hand_softmax():
    q = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    k = np.array([[0.5, 0.5], [1.0, -1.0], [0.0, 1.0]])
    v = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    out, w = attention(q, k, v, return_weights=True)
    for i in range(3):
        s = [sum(q[i, c] * k[j, c] for c in range(2)) / math.sqrt(2) for j in range(3)]
        e = [math.exp(x) for x in s]
        ref = [x / sum(e) for x in e]
        assert np.allclose(w[i], ref, atol=1e-15)
        assert np.allclose(out[i], sum(ref[j] * v[j] for j in range(3)), atol=1e-15)


def test_attention_dimension_errors():
    with pytest.raises(DenoiserError):
        attention(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros((5, 2)))
    with pytest.raises(DenoiserError):
        attention(np.zeros((2, 2)), np.zeros((4, 3)), np.zeros((4, 2)))


@given(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 12), st.floats(0.1, 50))
def test_softmax_rows_sum_to_one(seed, n, m, scale):
    s = np.random.default_rng(seed).standard_normal((n, m)) * scale
    assert np.allclose(softmax(s).sum(axis=-1), 1.0, atol=1e-6)


# -- cross-frame state --------------------------------------------------------------

def test_duplicated_anchor_equals_single_frame(den):
    x, cond = random_inputs(3)
    _, toks_a = den.forward(x, 200, cond)
    y, _ = random_inputs(4)
    dup = den.make_cross_frame_state(toks_a, toks_a)
    single = den.attention_state(toks_a)
    assert dup.keys.shape[0] == 2 * single.keys.shape[0]
    assert np.allclose(den.predict_noise(y, 200, cond, dup), den.predict_noise(y, 200, cond, single), atol=1e-12)


def test_cross_frame_rows_anchor_first(den):
    (xa, cond), (xp, _) = random_inputs(5, 2, 2), random_inputs(6, 2, 2)
    ta, tp = den.tokens(xa, 50, cond), den.tokens(xp, 50, cond)
    st_ = den.make_cross_frame_state(ta, tp, source_frames=(0, 3))
    assert st_.keys.shape == (8, 16) and st_.source_frames == (0, 3)
    assert np.array_equal(st_.keys[:4], ta @ den.w_k) and np.array_equal(st_.values[4:], tp @ den.w_v)
    q, _ = random_inputs(7, 2, 2)
    full = den.predict_noise(q, 50, cond, st_)
    anchor_only = den.predict_noise(q, 50, cond, den.attention_state(ta))
    assert not np.allclose(full, anchor_only)


def test_cross_frame_shape_mismatch(den):
    with pytest.raises(DenoiserError):
        den.make_cross_frame_state(np.zeros((4, 16)), np.zeros((9, 16)))


# -- conditioning ------------------------------------------------------------------

def test_prompt_embedding_stable():
    a = prompt_embedding("ink wash")
    assert np.array_equal(a, prompt_embedding("ink wash")) and a.shape == (32,)
    assert not np.allclose(a, prompt_embedding("oil paint"))


def test_edge_map_constant():
    assert not edge_map(np.full((8, 8, 3), 0.4)).any()


def test_edge_map_vertical_step():
    img = np.zeros((8, 8, 3))
    img[:, 4:] = 1.0
    e = edge_map(img)
    assert np.all(e[:, 3] == 1.0) and np.all(e[:, 4] == 1.0)
    assert np.all(e[:, [0, 1, 6, 7]] == 0.0)


def test_edge_map_checkerboard_brute_force():
    img = np.indices((8, 8)).sum(axis=0) % 2 * 1.0
    frame = np.repeat(img[..., None], 3, axis=2)
    gray = frame @ np.array([0.299, 0.587, 0.114])

    def d(a, i, n, axis):
        take = (lambda k: a[k, :]) if axis == 0 else (lambda k: a[:, k])
        if i == 0:
            return take(1) - take(0)
        if i == n - 1:
            return take(n - 1) - take(n - 2)
        return (take(i + 1) - take(i - 1)) / 2

    mag = np.zeros((8, 8))
    for y in range(8):
        for x in range(8):
            gy = d(gray, y, 8, 0)[x]
            gx = d(gray, x, 8, 1)[y]
            mag[y, x] = math.hypot(gx, gy)
    assert np.allclose(edge_map(frame), mag / mag.max(), atol=1e-12)


def test_edge_map_downsampled():
    img = np.zeros((8, 8, 3))
    img[:, 4:] = 1.0
    e = edge_map(img, 2)
    assert e.shape == (4, 4) and e.min() >= 0 and e.max() <= 1
    with pytest.raises(DenoiserError):
        edge_map(np.zeros((7, 8, 3)), 2)
