"""Deterministic synthetic images and videos for tests, benchmarks and demos."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def smooth_texture(seed, height=64, width=64, sigma=2.0):
    """Band-limited colour noise normalised to [0, 1]."""
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((height, width, 3)), (sigma, sigma, 0), mode="wrap")
    img -= img.min(axis=(0, 1))
    img /= np.maximum(img.max(axis=(0, 1)), 1e-12)
    return img


def image_corpus(n=10, size=64, seed=0):
    """``n`` images mixing gradients, sinusoids, blobs and a little texture."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    out = []
    for k in range(n):
        img = np.empty((size, size, 3))
        for c in range(3):
            fx, fy = rng.uniform(0.5, 3.0, 2)
            phase = rng.uniform(0, 2 * np.pi)
            gx, gy = rng.uniform(-0.5, 0.5, 2)
            img[..., c] = 0.5 + 0.25 * np.sin(2 * np.pi * (fx * xs + fy * ys) + phase) + gx * (xs - 0.5) + gy * (ys - 0.5)
        for _ in range(3):
            cx, cy = rng.uniform(0.2, 0.8, 2)
            r = rng.uniform(0.05, 0.2)
            blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r))
            img += blob[..., None] * rng.uniform(-0.3, 0.3, 3)
        img += 0.15 * (smooth_texture(seed * 1000 + k, size, size, sigma=2.0) - 0.5)
        out.append(np.clip(img, 0.0, 1.0))
    return out


def translating_video(n_frames=21, size=64, velocity=(1.0, 0.5), seed=3, sigma=2.0):
    """A textured canvas panned by ``velocity`` pixels per frame.

    Frame ``i`` shows the canvas at offset ``-i * velocity``, so content moves
    by ``+velocity`` each frame. Sub-pixel offsets are sampled bilinearly.
    """
    vx, vy = velocity
    margin = int(np.ceil(max(abs(vx), abs(vy)) * n_frames)) + 4
    canvas = smooth_texture(seed, size + 2 * margin, size + 2 * margin, sigma=sigma)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = []
    for i in range(n_frames):
        coords = [ys + margin - i * vy, xs + margin - i * vx]
        frame = np.stack([ndimage.map_coordinates(canvas[..., c], coords, order=1, mode="nearest")
                          for c in range(3)], axis=-1)
        frames.append(frame)
    return frames
