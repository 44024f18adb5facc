import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from v2v.codec import (CodecError, FidelityConfig, IdentityCodec, ToyLossyCodec, compensation_mask,
                       fidelity_encode, mse, roundtrip_error_curve)
from v2v.synthetic import image_corpus

TOY = ToyLossyCodec()


@pytest.fixture(scope="module")
def corpus():
    return image_corpus(10, 32)


def test_toy_shapes_and_range(corpus):
    lat = TOY.encode(corpus[0])
    assert lat.shape == (4, 16, 16)
    assert lat.min() >= -1 and lat.max() <= 1
    out = TOY.decode(lat)
    assert out.shape == corpus[0].shape and out.min() >= 0 and out.max() <= 1


def test_toy_quantisation_levels(corpus):
    lat = TOY.encode(corpus[1])
    q = (lat + 1) / 2 * 63
    assert np.allclose(q, np.round(q), atol=1e-9)


def test_toy_encode_closed_form():
    img = np.zeros((2, 2, 3))
    img[0, 0] = [1.0, 0.0, 0.0]
    lat = TOY.encode(img)
    # block mean is (0.25, 0, 0), luma 0.07475; 6-bit rounding
    expect = np.array([round(0.25 * 63), 0, 0, round(0.07475 * 63)]) / 63 * 2 - 1
    assert np.allclose(lat[:, 0, 0], expect)


def test_toy_is_lossy_and_deterministic(corpus):
    img = corpus[2]
    assert np.array_equal(TOY.decode(TOY.encode(img)), TOY.decode(TOY.encode(img)))
    assert mse(img, TOY.decode(TOY.encode(img))) > 1e-5


def test_divisibility_error():
    with pytest.raises(CodecError):
        TOY.encode(np.zeros((5, 6, 3)))
    with pytest.raises(CodecError):
        fidelity_encode(TOY, np.zeros((6, 5, 3)))


def test_config_validation():
    with pytest.raises(CodecError):
        FidelityConfig(lambda_e=-1)
    with pytest.raises(CodecError):
        FidelityConfig(artifact_threshold=0)


def test_lossless_codec_plain_encode(corpus):
    codec = IdentityCodec()
    assert np.array_equal(fidelity_encode(codec, corpus[0]), codec.encode(corpus[0]))


def test_lambda_zero_plain_encode(corpus):
    assert np.array_equal(fidelity_encode(TOY, corpus[0], FidelityConfig(lambda_e=0.0)), TOY.encode(corpus[0]))


def test_fidelity_encode_formula(corpus):
    img = corpus[3]
    cfg = FidelityConfig(1.0, 0.1)
    out, mask = fidelity_encode(TOY, img, cfg, return_mask=True)
    x_r = TOY.encode(img)
    x_rr = TOY.encode(TOY.decode(x_r))
    cand = 2 * x_r - x_rr
    err = np.abs(TOY.decode(cand) - img).max(axis=-1)
    cells = np.array([[err[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for j in range(16)] for i in range(16)])
    assert np.array_equal(mask, (cells < 0.1).astype(float))
    assert np.allclose(out, x_r + mask * (x_r - x_rr), atol=1e-15)


@given(st.floats(0.01, 0.5), st.floats(0.01, 0.5), st.integers(0, 9))
def test_mask_monotone_in_threshold(t1, t2, k):
    lo, hi = sorted((t1, t2))
    img = image_corpus(10, 16)[k]
    x_r = TOY.encode(img)
    cand = 2 * x_r - TOY.encode(TOY.decode(x_r))
    m_lo = compensation_mask(TOY, img, cand, lo)
    m_hi = compensation_mask(TOY, img, cand, hi)
    assert np.all(m_hi >= m_lo)


def test_identity_codec_zero_curve(corpus):
    assert roundtrip_error_curve(IdentityCodec(), corpus[0], 5, True) == [0.0] * 5
    assert roundtrip_error_curve(IdentityCodec(), corpus[0], 5, False) == [0.0] * 5


def test_curve_first_value_lambda_zero(corpus):
    a = roundtrip_error_curve(TOY, corpus[4], 1, False)
    b = roundtrip_error_curve(TOY, corpus[4], 1, True, FidelityConfig(lambda_e=0.0))
    assert a == b


def test_curve_iterations_error(corpus):
    with pytest.raises(CodecError):
        roundtrip_error_curve(TOY, corpus[0], 0, False)


def test_plain_curve_non_decreasing_and_fidelity_dominated(corpus):
    for img in corpus:
        plain = roundtrip_error_curve(TOY, img, 10, False)
        fid = roundtrip_error_curve(TOY, img, 10, True)
        assert np.all(np.diff(plain) >= -1e-12)
        assert all(f <= p for f, p in zip(fid[1:], plain[1:]))


def test_fidelity_beats_plain_after_ten(corpus):
    img = corpus[5]
    assert roundtrip_error_curve(TOY, img, 10, True)[-1] < roundtrip_error_curve(TOY, img, 10, False)[-1]
