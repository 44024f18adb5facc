import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from v2v.flow import (FlowError, FlowPair, compose_flows, downsample_guidance, estimate_flow,
                      occlusion_mask, read_flo, upsample_flow, warp, write_flo)
from v2v.synthetic import smooth_texture


def shifted(img, dx, dy):
    """Content moved by (+dx, +dy): out(p) = img(p - d), sampled with wrap-free nearest edge."""
    return np.stack([ndimage.shift(img[..., c], (dy, dx), order=3, mode="nearest")
                     for c in range(img.shape[2])], axis=-1)


def smooth_flow(seed, h, w, amp=2.0):
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.standard_normal((h, w, 2)), (2, 2, 0), mode="wrap") * amp * 3


# -- oracle: scalar bilinear lookup with border clamp ------------------------

def lookup(image, x, y):
    h, w = image.shape[:2]
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = min(math.floor(x), max(w - 2, 0))
    y0 = min(math.floor(y), max(h - 2, 0))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = image[y0, x0] * (1.0 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1.0 - fx) + image[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def occlusion_oracle(fw, bw, threshold=1.0, relative=0.01):
    h, w = fw.shape[:2]
    out = np.zeros((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            u, v = fw[y, x]
            tx, ty = x + u, y + v
            if not (0 <= tx <= w - 1 and 0 <= ty <= h - 1):
                continue
            bu, bv = lookup(bw, tx, ty)
            res = math.sqrt((u + bu) ** 2 + (v + bv) ** 2)
            bound = threshold + relative * (math.sqrt(u * u + v * v) + math.sqrt(bu * bu + bv * bv))
            out[y, x] = res <= bound
    return out


# -- estimate_flow -------------------------------------------------------------

def test_identical_frames_zero_flow():
    img = smooth_texture(0)
    assert np.abs(estimate_flow(img, img)).max() < 0.1


def test_constant_frames_zero_flow():
    a = np.full((32, 32, 3), 0.3)
    assert np.abs(estimate_flow(a, a * 0 + 0.7)).max() < 1e-12


def test_shift_three_right():
    img = smooth_texture(1)
    flow = estimate_flow(img, shifted(img, 3, 0))
    inner = flow[8:-8, 8:-8]
    assert 2.5 <= np.median(inner[..., 0]) <= 3.5
    assert abs(np.median(inner[..., 1])) < 0.5


@pytest.mark.parametrize("d", [(-4, 0), (2, -3), (4, 4), (1.5, 0.5)])
def test_translation_consistency(d):
    img = smooth_texture(7)
    flow = estimate_flow(img, shifted(img, *d))
    err = np.hypot(flow[..., 0] - d[0], flow[..., 1] - d[1])[8:-8, 8:-8]
    assert err.mean() < 0.5


def test_estimate_flow_is_deterministic():
    a, b = smooth_texture(2, 32, 32), smooth_texture(3, 32, 32)
    assert np.array_equal(estimate_flow(a, b), estimate_flow(a, b))


def test_estimate_flow_errors():
    a = smooth_texture(0, 32, 32)
    with pytest.raises(FlowError):
        estimate_flow(a, smooth_texture(0, 32, 48))
    with pytest.raises(FlowError):
        estimate_flow(a[:8, :8], a[:8, :8])
    with pytest.raises(FlowError):
        estimate_flow(a, a, levels=4)
    with pytest.raises(FlowError):
        estimate_flow(a, a, levels=0)


# -- occlusion -----------------------------------------------------------------

def test_inverse_fields_visible_wherever_in_bounds():
    assert occlusion_mask(np.zeros((8, 8, 2)), np.zeros((8, 8, 2))).all()
    fw = np.zeros((8, 8, 2))
    fw[..., 0] = 0.4
    fw[..., 1] = -0.3
    inside = np.ones((8, 8), np.uint8)
    inside[0, :] = 0  # y - 0.3 < 0
    inside[:, -1] = 0  # x + 0.4 > 7
    assert np.array_equal(occlusion_mask(fw, -fw), inside)


def test_inconsistent_fields_all_occluded():
    fw = np.zeros((8, 8, 2))
    fw[..., 0] = 5.0
    assert not occlusion_mask(fw, np.zeros_like(fw), threshold=1.0).any()


@pytest.mark.parametrize("seed", range(10))
def test_occlusion_matches_oracle(seed):
    fw = smooth_flow(seed, 8, 8)
    bw = -fw + np.random.default_rng(seed + 100).normal(0, 0.8, fw.shape)
    assert np.array_equal(occlusion_mask(fw, bw), occlusion_oracle(fw, bw))


def test_occlusion_out_of_bounds_lookup():
    fw = np.zeros((8, 8, 2))
    fw[:, -1, 0] = 1.0
    mask = occlusion_mask(fw, -fw)
    assert not mask[:, -1].any() and mask[:, :-1].all()


def test_occlusion_symmetric_rule():
    fw, bw = smooth_flow(3, 8, 8), smooth_flow(4, 8, 8)
    assert np.array_equal(occlusion_mask(bw, fw), occlusion_oracle(bw, fw))


def test_occlusion_errors():
    with pytest.raises(FlowError):
        occlusion_mask(np.zeros((4, 4, 2)), np.zeros((4, 5, 2)))
    with pytest.raises(FlowError):
        occlusion_mask(np.zeros((4, 4, 2)), np.zeros((4, 4, 2)), threshold=0)


def test_flowpair_from_fields():
    fw = smooth_flow(1, 8, 8)
    pair = FlowPair.from_fields(fw, -fw, threshold=0.5)
    assert pair.consistency_threshold == 0.5
    assert np.array_equal(pair.mask, occlusion_mask(fw, -fw, 0.5))


# -- warp ----------------------------------------------------------------------

def test_zero_flow_identity(rng):
    img = rng.random((6, 7, 3))
    assert np.array_equal(warp(img, np.zeros((6, 7, 2))), img)


def test_ramp_shift():
    ramp = np.tile(np.arange(10.0), (5, 1))
    flow = np.zeros((5, 10, 2))
    flow[..., 0] = 1.0
    out = warp(ramp, flow)
    assert np.allclose(out[:, :-1], ramp[:, 1:], atol=1e-12)
    assert np.allclose(out[:, -1], 9.0)


def test_constant_image_any_flow(rng):
    img = np.full((8, 8, 2), 0.25)
    assert np.allclose(warp(img, rng.normal(0, 5, (8, 8, 2))), 0.25, atol=1e-15)


def test_warp_channels_first(rng):
    lat = rng.random((4, 6, 6))
    flow = rng.normal(0, 1, (6, 6, 2))
    assert np.array_equal(warp(lat, flow, channels_first=True),
                          np.moveaxis(warp(np.moveaxis(lat, 0, -1), flow), -1, 0))


def test_warp_matches_oracle(rng):
    img = rng.random((5, 6, 3))
    flow = rng.normal(0, 2, (5, 6, 2))
    out = warp(img, flow)
    for y in range(5):
        for x in range(6):
            assert np.array_equal(out[y, x], lookup(img, x + flow[y, x, 0], y + flow[y, x, 1]))


def test_warp_dimension_mismatch():
    with pytest.raises(FlowError):
        warp(np.zeros((4, 4)), np.zeros((4, 5, 2)))


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_warp_linear(a, b, seed):
    r = np.random.default_rng(seed)
    A, B = r.random((6, 6, 3)), r.random((6, 6, 3))
    flow = r.normal(0, 2, (6, 6, 2))
    assert np.allclose(warp(a * A + b * B, flow), a * warp(A, flow) + b * warp(B, flow), atol=1e-12)


# -- downsampling and composition ----------------------------------------------

def test_downsample_factor_one(rng):
    flow, mask = rng.random((6, 6, 2)), rng.integers(0, 2, (6, 6))
    f, m = downsample_guidance(flow, mask, 1)
    assert np.array_equal(f, flow) and np.array_equal(m, mask)


def test_downsample_constant_flow():
    flow = np.zeros((16, 16, 2))
    flow[..., 0] = 8.0
    f, _ = downsample_guidance(flow, np.ones((16, 16)), 8)
    assert f.shape == (2, 2, 2) and np.all(f[..., 0] == 1.0) and np.all(f[..., 1] == 0.0)


def test_downsample_mask_footprint_rule():
    mask = np.zeros((16, 16), np.uint8)
    mask[:, :8] = 1
    mask[3, 9] = mask[4, 9] = 1  # quarter coverage in two blocks
    mask[2, 10] = mask[2, 11] = 1  # exactly half of one block
    _, small = downsample_guidance(np.zeros((16, 16, 2)), mask, 2)
    expect = np.zeros((8, 8), np.uint8)
    for by in range(8):
        for bx in range(8):
            count = sum(mask[2 * by + i, 2 * bx + j] for i in range(2) for j in range(2))
            expect[by, bx] = count >= 2
    assert np.array_equal(small, expect)


def test_downsample_not_divisible():
    with pytest.raises(FlowError):
        downsample_guidance(np.zeros((6, 6, 2)), np.ones((6, 6)), 4)


@given(st.floats(-20, 20), st.floats(-20, 20), st.sampled_from([1, 2, 4]))
def test_downsample_upsample_constant(u, v, factor):
    flow = np.empty((8, 8, 2))
    flow[..., 0], flow[..., 1] = u, v
    f, _ = downsample_guidance(flow, np.ones((8, 8)), factor)
    assert np.allclose(upsample_flow(f, factor), flow, atol=1e-12)


def test_compose_constant_flows():
    a = np.zeros((8, 8, 2))
    a[..., 0] = 1.0
    b = np.zeros((8, 8, 2))
    b[..., 1] = 2.0
    c, mask = compose_flows(a, b, np.ones((8, 8)), np.ones((8, 8)))
    assert np.allclose(c[..., 0], 1.0) and np.allclose(c[..., 1], 2.0)
    assert not mask[:, -1].any() and mask[:, :-1].all()


def test_compose_accumulates_occlusion():
    zero = np.zeros((6, 6, 2))
    m2 = np.ones((6, 6), np.uint8)
    m2[2, 3] = 0
    _, mask = compose_flows(zero, zero, np.ones((6, 6)), m2)
    assert np.array_equal(mask, m2)


# -- .flo ------------------------------------------------------------------------

def test_flo_roundtrip(tmp_path, rng):
    flow = rng.normal(0, 3, (5, 7, 2)).astype(np.float32).astype(np.float64)
    path = tmp_path / "a.flo"
    write_flo(path, flow)
    raw = path.read_bytes()
    assert raw[:4] == b"PIEH"
    assert int.from_bytes(raw[4:8], "little") == 7 and int.from_bytes(raw[8:12], "little") == 5
    assert np.frombuffer(raw[12:20], "<f4").tolist() == [flow[0, 0, 0], flow[0, 0, 1]]
    assert np.array_equal(read_flo(path), flow)


def test_flo_bad_files(tmp_path):
    bad = tmp_path / "bad.flo"
    bad.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(FlowError):
        read_flo(bad)
    trunc = tmp_path / "trunc.flo"
    trunc.write_bytes(b"PIEH" + (4).to_bytes(4, "little") + (4).to_bytes(4, "little") + bytes(10))
    with pytest.raises(FlowError):
        read_flo(trunc)
