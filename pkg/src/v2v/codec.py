"""Lossy encoder/decoder pairs and fidelity-oriented encoding.

Frames are ``(H, W, 3)`` arrays in [0, 1]; latents are ``(C, h, w)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


class CodecError(ValueError):
    pass


class LossyCodec(Protocol):
    latent_channels: int
    spatial_factor: int

    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...


def _check_divisible(image, factor):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise CodecError(f"expected an (H, W, 3) frame, got {image.shape}")
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise CodecError(f"frame {h}x{w} not divisible by spatial factor {factor}")
    return image


def upsample2x(plane):
    """Bilinear 2x upsampling of a channels-last array (half-pixel centres, edge clamp)."""
    h, w = plane.shape[:2]
    # Output pixel centres map to input coordinates (i - 0.5) / 2.
    def axis_weights(n):
        src = (np.arange(2 * n) + 0.5) / 2 - 0.5
        lo = np.clip(np.floor(src).astype(np.intp), 0, n - 1)
        hi = np.clip(lo + 1, 0, n - 1)
        frac = np.clip(src - np.floor(src), 0.0, 1.0)
        frac = np.where(src < 0, 0.0, frac)
        return lo, hi, frac

    ylo, yhi, fy = axis_weights(h)
    xlo, xhi, fx = axis_weights(w)
    shape = (-1, 1) + (1,) * (plane.ndim - 2)
    rows = plane[ylo] * (1 - fy.reshape(shape)) + plane[yhi] * fy.reshape(shape)
    shape = (1, -1) + (1,) * (plane.ndim - 2)
    return rows[:, xlo] * (1 - fx.reshape(shape)) + rows[:, xhi] * fx.reshape(shape)


@dataclass(frozen=True)
class IdentityCodec:
    """Lossless codec: the latent is the frame in channels-first layout."""

    latent_channels: int = 3
    spatial_factor: int = 1

    def encode(self, image):
        image = _check_divisible(image, 1)
        return np.ascontiguousarray(np.moveaxis(image, -1, 0))

    def decode(self, latent):
        return np.ascontiguousarray(np.moveaxis(np.asarray(latent, dtype=np.float64), 0, -1))


@dataclass(frozen=True)
class ToyLossyCodec:
    """2x box downsample to RGB + luma, uniform quantisation, bilinear decode.

    Latent values live in [-1, 1]. Every round trip blurs a little more,
    which is the compounding loss fidelity encoding is designed to cancel.
    """

    bits: int = 6
    latent_channels: int = 4
    spatial_factor: int = 2

    def encode(self, image):
        image = _check_divisible(image, 2)
        h, w = image.shape[:2]
        small = image.reshape(h // 2, 2, w // 2, 2, 3).mean(axis=(1, 3))
        planes = np.concatenate([small, (small @ LUMA)[..., None]], axis=-1)
        levels = (1 << self.bits) - 1
        q = np.floor(np.clip(planes, 0.0, 1.0) * levels + 0.5) / levels
        return np.ascontiguousarray(np.moveaxis(2.0 * q - 1.0, -1, 0))

    def decode(self, latent):
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 3 or latent.shape[0] != self.latent_channels:
            raise CodecError(f"expected a ({self.latent_channels}, h, w) latent, got {latent.shape}")
        v = np.moveaxis((latent + 1.0) / 2.0, 0, -1)
        rgb = v[..., :3] + 0.5 * (v[..., 3:] - (v[..., :3] @ LUMA)[..., None])
        return np.clip(upsample2x(rgb), 0.0, 1.0)


@dataclass(frozen=True)
class FidelityConfig:
    lambda_e: float = 1.0
    artifact_threshold: float = 0.1

    def __post_init__(self):
        if self.lambda_e < 0:
            raise CodecError("lambda_e must be >= 0")
        if self.artifact_threshold <= 0:
            raise CodecError("artifact_threshold must be > 0")


def compensation_mask(codec, image, candidate, threshold):
    """Binary latent-resolution mask of cells where ``decode(candidate)`` stays close to ``image``.

    Per-pixel error is the largest absolute channel difference; it is
    averaged over each latent cell's footprint and compared to ``threshold``.
    """
    f = codec.spatial_factor
    err = np.abs(codec.decode(candidate) - image).max(axis=-1)
    h, w = err.shape
    cell = err.reshape(h // f, f, w // f, f).mean(axis=(1, 3))
    return (cell < threshold).astype(np.float64)


def fidelity_encode(codec, image, cfg=None, return_mask=False):
    """Encode with a linear estimate of the codec's own round-trip loss added back.

    ``x_r = E(I)``, ``x_rr = E(D(x_r))`` and the result is
    ``x_r + M * lambda_e * (x_r - x_rr)`` where ``M`` masks out cells whose
    compensated reconstruction drifts past ``cfg.artifact_threshold``.
    """
    cfg = cfg or FidelityConfig()
    image = _check_divisible(image, codec.spatial_factor)
    x_r = codec.encode(image)
    if cfg.lambda_e == 0:
        return (x_r, np.zeros(x_r.shape[1:])) if return_mask else x_r
    x_rr = codec.encode(codec.decode(x_r))
    comp = cfg.lambda_e * (x_r - x_rr)
    mask = compensation_mask(codec, image, x_r + comp, cfg.artifact_threshold)
    out = x_r + mask[None] * comp
    return (out, mask) if return_mask else out


def mse(a, b):
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def roundtrip_error_curve(codec, image, iterations, use_fidelity, cfg=None):
    """MSE against the original after each of ``iterations`` encode/decode round trips."""
    if iterations < 1:
        raise CodecError("iterations must be >= 1")
    image = _check_divisible(image, codec.spatial_factor)
    recon = image
    curve = []
    for _ in range(iterations):
        latent = fidelity_encode(codec, recon, cfg) if use_fidelity else codec.encode(recon)
        recon = codec.decode(latent)
        curve.append(mse(image, recon))
    return curve
