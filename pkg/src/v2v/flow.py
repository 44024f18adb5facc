"""Optical flow, occlusion masks and flow-based warping.

Flow fields are ``(H, W, 2)`` float arrays holding ``(dx, dy)`` per pixel.
A field ``w`` stored on the grid of frame ``a`` points into frame ``b``:
``a(p) ~ b(p + w(p))``, so ``warp(b, w)`` brings ``b`` into ``a``'s frame.
Masks are ``(H, W)`` uint8 arrays, 1 = visible, 0 = occluded.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

FLO_MAGIC = b"PIEH"
DEFAULT_THRESHOLD = 1.0
DEFAULT_RELATIVE = 0.01

_HS_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                       [1 / 6, 0.0, 1 / 6],
                       [1 / 12, 1 / 6, 1 / 12]])


class FlowError(ValueError):
    """Raised for malformed flow fields, masks or shape mismatches."""


@dataclass(frozen=True)
class FlowPair:
    forward: np.ndarray
    backward: np.ndarray
    mask: np.ndarray
    consistency_threshold: float = DEFAULT_THRESHOLD

    @classmethod
    def from_fields(cls, forward, backward, threshold=DEFAULT_THRESHOLD, relative=DEFAULT_RELATIVE):
        return cls(forward, backward, occlusion_mask(forward, backward, threshold, relative), threshold)


def _check_flow(flow, name="flow"):
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FlowError(f"{name} must have shape (H, W, 2), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise FlowError(f"{name} contains non-finite values")
    return flow


def to_gray(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.shape[2] == 1:
        return frame[..., 0]
    return frame[..., :3] @ np.array([0.299, 0.587, 0.114])


def bilinear_sample(image, xs, ys):
    """Sample a channels-last (or 2-D) image at real coordinates, clamping to the border."""
    h, w = image.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = image[y0, x0] * (1.0 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1.0 - fx) + image[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def _grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp(image, flow, channels_first=False):
    """Backward-warp ``image`` by ``flow``: ``out(p) = image(p + flow(p))``.

    Bilinear sampling, border clamped. ``image`` is ``(H, W)``, ``(H, W, C)``
    or, with ``channels_first=True``, a ``(C, H, W)`` latent.
    """
    flow = _check_flow(flow)
    image = np.asarray(image, dtype=np.float64)
    if channels_first:
        if image.ndim != 3:
            raise FlowError(f"channels-first image must be 3-D, got {image.shape}")
        return np.moveaxis(warp(np.moveaxis(image, 0, -1), flow), -1, 0)
    if image.shape[:2] != flow.shape[:2]:
        raise FlowError(f"flow {flow.shape[:2]} does not match image {image.shape[:2]}")
    xs, ys = _grid(*flow.shape[:2])
    return bilinear_sample(image, xs + flow[..., 0], ys + flow[..., 1])


def occlusion_mask(forward, backward, threshold=DEFAULT_THRESHOLD, relative=DEFAULT_RELATIVE):
    """Forward-backward consistency check.

    Pixel ``p`` is visible iff ``p + forward(p)`` lands inside the frame and
    ``|forward(p) + backward(p + forward(p))| <= threshold + relative * (|fw| + |bw|)``,
    with the backward field looked up bilinearly.
    """
    forward = _check_flow(forward, "forward")
    backward = _check_flow(backward, "backward")
    if forward.shape != backward.shape:
        raise FlowError(f"forward {forward.shape} and backward {backward.shape} differ")
    if threshold <= 0:
        raise FlowError("threshold must be positive")
    h, w = forward.shape[:2]
    xs, ys = _grid(h, w)
    tx = xs + forward[..., 0]
    ty = ys + forward[..., 1]
    inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    bw = bilinear_sample(backward, tx, ty)
    residual = np.hypot(forward[..., 0] + bw[..., 0], forward[..., 1] + bw[..., 1])
    bound = threshold + relative * (np.hypot(forward[..., 0], forward[..., 1])
                                    + np.hypot(bw[..., 0], bw[..., 1]))
    return (inside & (residual <= bound)).astype(np.uint8)


def downsample_guidance(flow, mask, factor):
    """Reduce a flow field and its mask to ``1/factor`` resolution.

    Flow is block-averaged and rescaled by ``1/factor``; a low-res mask cell
    is visible only if at least half of its footprint is visible.
    """
    flow = _check_flow(flow)
    mask = np.asarray(mask)
    h, w = flow.shape[:2]
    if mask.shape != (h, w):
        raise FlowError(f"mask {mask.shape} does not match flow {(h, w)}")
    if factor < 1 or h % factor or w % factor:
        raise FlowError(f"factor {factor} does not divide {(h, w)}")
    if factor == 1:
        return flow.copy(), mask.astype(np.uint8)
    hl, wl = h // factor, w // factor
    small = flow.reshape(hl, factor, wl, factor, 2).mean(axis=(1, 3)) / factor
    visible = mask.astype(np.int64).reshape(hl, factor, wl, factor).sum(axis=(1, 3))
    return small, (2 * visible >= factor * factor).astype(np.uint8)


def upsample_flow(flow, factor):
    """Nearest-neighbour upsampling with displacement rescaling."""
    flow = _check_flow(flow)
    return np.repeat(np.repeat(flow, factor, axis=0), factor, axis=1) * factor


def compose_flows(first, second, first_mask=None, second_mask=None):
    """Chain ``a -> b`` and ``b -> c`` fields into an ``a -> c`` field.

    Masks accumulate: a pixel stays visible only if it is visible in the
    first mask and the second mask is visible at the landing position.
    """
    first = _check_flow(first, "first")
    second = _check_flow(second, "second")
    h, w = first.shape[:2]
    xs, ys = _grid(h, w)
    tx = xs + first[..., 0]
    ty = ys + first[..., 1]
    composed = first + bilinear_sample(second, tx, ty)
    if first_mask is None and second_mask is None:
        return composed, None
    inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    m1 = np.ones((h, w), bool) if first_mask is None else np.asarray(first_mask).astype(bool)
    m2 = np.ones((h, w), bool) if second_mask is None else np.asarray(second_mask).astype(bool)
    ix = np.clip(np.rint(tx).astype(np.intp), 0, w - 1)
    iy = np.clip(np.rint(ty).astype(np.intp), 0, h - 1)
    return composed, (m1 & inside & m2[iy, ix]).astype(np.uint8)


# -- estimation -------------------------------------------------------------

def _resize(image, shape):
    h, w = image.shape[:2]
    ys = (np.arange(shape[0]) + 0.5) * (h / shape[0]) - 0.5
    xs = (np.arange(shape[1]) + 0.5) * (w / shape[1]) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(image, gx, gy)


def _pyramid(gray, levels):
    pyr = [gray]
    for _ in range(levels - 1):
        blurred = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        h, w = blurred.shape
        pyr.append(_resize(blurred, ((h + 1) // 2, (w + 1) // 2)))
    return pyr


def estimate_flow(src, dst, levels=3, iterations=60, alpha=0.02, warps=3):
    """Coarse-to-fine Horn-Schunck flow with iterative warping.

    Returns a field on ``src``'s grid pointing into ``dst``, so that
    ``warp(dst, flow)`` approximates ``src``.

    Parameters
    ----------
    src, dst : ndarray
        Frames of identical shape, at least 16x16.
    levels : int
        Pyramid depth; the coarsest level must keep at least 8 pixels per side.
    iterations : int
        Jacobi iterations per warp.
    alpha : float
        Smoothness weight (squared in the update denominator).
    warps : int
        Re-linearisations per pyramid level.
    """
    a = to_gray(src)
    b = to_gray(dst)
    if a.shape != b.shape:
        raise FlowError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < 16:
        raise FlowError(f"frames must be at least 16x16, got {a.shape}")
    if levels < 1:
        raise FlowError("levels must be >= 1")
    if min(a.shape) >> (levels - 1) < 8:
        raise FlowError(f"{a.shape} too small for a {levels}-level pyramid")

    alpha2 = alpha * alpha
    pa, pb = _pyramid(a, levels), _pyramid(b, levels)
    flow = np.zeros(pa[-1].shape + (2,))
    for la, lb in zip(reversed(pa), reversed(pb)):
        if flow.shape[:2] != la.shape:
            flow = _resize(flow, la.shape) * (la.shape[1] / flow.shape[1])
        gy_a, gx_a = np.gradient(la)
        for _ in range(warps):
            wb = warp(lb, flow)
            gy_b, gx_b = np.gradient(wb)
            ix = 0.5 * (gx_a + gx_b)
            iy = 0.5 * (gy_a + gy_b)
            it = wb - la
            den = alpha2 + ix * ix + iy * iy
            u0, v0 = flow[..., 0], flow[..., 1]
            u, v = u0.copy(), v0.copy()
            for _ in range(iterations):
                ub = ndimage.convolve(u, _HS_KERNEL, mode="nearest")
                vb = ndimage.convolve(v, _HS_KERNEL, mode="nearest")
                t = (it + ix * (ub - u0) + iy * (vb - v0)) / den
                u = ub - ix * t
                v = vb - iy * t
            flow = np.stack([ndimage.median_filter(u, 3, mode="nearest"),
                             ndimage.median_filter(v, 3, mode="nearest")], axis=-1)
    return flow


def flow_pair(frame_a, frame_b, threshold=DEFAULT_THRESHOLD, relative=DEFAULT_RELATIVE, **kwargs):
    """Estimate both directions between two frames and their consistency mask on ``a``'s grid."""
    fwd = estimate_flow(frame_a, frame_b, **kwargs)
    bwd = estimate_flow(frame_b, frame_a, **kwargs)
    return FlowPair.from_fields(fwd, bwd, threshold, relative)


# -- Middlebury .flo --------------------------------------------------------

def write_flo(path, flow):
    flow = _check_flow(flow)
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(flow.astype("<f4").tobytes())


def read_flo(path):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise FlowError(f"{path}: not a .flo file (bad magic)")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0 or len(data) != 12 + 8 * w * h:
        raise FlowError(f"{path}: corrupt header or truncated payload")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float64)
