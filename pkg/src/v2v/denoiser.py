"""Fixed-weight toy noise predictor with a real attention block.

The network maps a noisy latent to a prior mean ``mu`` through
``conv3x3 -> attention -> conv3x3``; the returned noise estimate is the exact
posterior-mean prediction for a Gaussian prior ``N(mu, prior_std**2)``. That
keeps sampling numerically tame while every call goes through the attention
layer, so cross-frame keys/values change the output the same way they would
in a U-Net.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WEIGHT_SEED = 20230529
EMBED_DIM = 32
HIDDEN = 16


class DenoiserError(ValueError):
    pass


def prompt_embedding(prompt, dim=EMBED_DIM):
    """Stable 32-d unit vector derived from a SHA-256 of the prompt."""
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def edge_map(frame, factor=1):
    """Gradient magnitude of the luma channel, scaled to [0, 1] and block-averaged by ``factor``.

    Central differences inside, one-sided at the border.
    """
    frame = np.asarray(frame, dtype=np.float64)
    gray = frame if frame.ndim == 2 else frame[..., :3] @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    if factor > 1:
        h, w = mag.shape
        if h % factor or w % factor:
            raise DenoiserError(f"frame {h}x{w} not divisible by {factor}")
        mag = mag.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return mag


@dataclass(frozen=True)
class Conditioning:
    prompt_embedding: np.ndarray
    structure_map: np.ndarray
    control_weight: float = 1.0

    @classmethod
    def from_frame(cls, prompt, frame, factor, control_weight=1.0):
        return cls(prompt_embedding(prompt), edge_map(frame, factor), control_weight)

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(EMBED_DIM), np.zeros(shape), 0.0)


@dataclass(frozen=True)
class AttentionState:
    keys: np.ndarray
    values: np.ndarray
    source_frames: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.keys.shape[0] != self.values.shape[0]:
            raise DenoiserError("keys and values must have equal row counts")


def softmax(scores):
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def attention(query, key, value, return_weights=False):
    """``softmax(Q K^T / sqrt(d)) V`` with ``d`` the key width."""
    query = np.asarray(query, dtype=np.float64)
    key = np.asarray(key, dtype=np.float64)
    value = np.asarray(value, dtype=np.float64)
    if key.shape[0] != value.shape[0]:
        raise DenoiserError(f"key rows {key.shape[0]} != value rows {value.shape[0]}")
    if query.shape[1] != key.shape[1]:
        raise DenoiserError(f"query width {query.shape[1]} != key width {key.shape[1]}")
    weights = softmax(query @ key.T / np.sqrt(key.shape[1]))
    out = weights @ value
    return (out, weights) if return_weights else out


def conv3x3(x, weight, bias):
    """Zero-padded 3x3 convolution, ``x`` is (C_in, h, w), ``weight`` is (C_out, C_in, 3, 3)."""
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # (C_in, h, w, 3, 3)
    return np.einsum("ihwab,oiab->ohw", windows, weight, optimize=True) + bias[:, None, None]


def timestep_embedding(t, dim=EMBED_DIM):
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


class ToyDenoiser:
    """Deterministic stand-in for a conditioned noise-prediction U-Net.

    ``schedule`` only needs ``alpha_bar(t)`` and ``t_max``.
    """

    def __init__(self, schedule, latent_channels=4, hidden=HIDDEN, prior_std=0.5, seed=WEIGHT_SEED):
        self.schedule = schedule
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.prior_std = prior_std
        rng = np.random.default_rng(seed)
        c, d = latent_channels, hidden
        self.w_in = rng.standard_normal((d, c, 3, 3)) / np.sqrt(9 * c)
        self.b_in = 0.1 * rng.standard_normal(d)
        self.w_prompt = rng.standard_normal((d, EMBED_DIM)) / np.sqrt(EMBED_DIM)
        self.w_time = rng.standard_normal((d, EMBED_DIM)) / np.sqrt(EMBED_DIM) * 0.5
        self.w_control = rng.standard_normal(d)
        self.w_q = rng.standard_normal((d, d)) / np.sqrt(d)
        self.w_k = rng.standard_normal((d, d)) / np.sqrt(d)
        self.w_v = rng.standard_normal((d, d)) / np.sqrt(d)
        self.w_o = rng.standard_normal((d, d)) / np.sqrt(d)
        self.w_out = rng.standard_normal((c, d, 3, 3)) / np.sqrt(9 * d)
        self.b_out = 0.1 * rng.standard_normal(c)
        for name in vars(self):
            arr = getattr(self, name)
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)

    # -- pieces ------------------------------------------------------------

    def _check(self, latent, t):
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 3 or latent.shape[0] != self.latent_channels:
            raise DenoiserError(f"expected a ({self.latent_channels}, h, w) latent, got {latent.shape}")
        if not 0 < t <= self.schedule.t_max:
            raise DenoiserError(f"timestep {t} outside (0, {self.schedule.t_max}]")
        return latent

    def tokens(self, latent, t, cond):
        """Attention-layer input features of ``latent``: an ``(h*w, hidden)`` matrix."""
        latent = self._check(latent, t)
        if cond.structure_map.shape != latent.shape[1:]:
            raise DenoiserError(f"structure map {cond.structure_map.shape} != latent {latent.shape[1:]}")
        h = conv3x3(latent, self.w_in, self.b_in)
        h += (self.w_prompt @ cond.prompt_embedding + self.w_time @ timestep_embedding(t))[:, None, None]
        h += cond.control_weight * self.w_control[:, None, None] * cond.structure_map[None]
        h = h / (1.0 + np.exp(-h))  # SiLU
        return np.ascontiguousarray(h.reshape(self.hidden, -1).T)

    def attention_state(self, *token_sets, source_frames=()):
        """Project one or more frames' tokens into a shared key/value bank."""
        bank = np.concatenate(token_sets, axis=0) if len(token_sets) > 1 else token_sets[0]
        return AttentionState(bank @ self.w_k, bank @ self.w_v, tuple(source_frames))

    def make_cross_frame_state(self, anchor_tokens, previous_tokens, source_frames=(0, None)):
        """Keys/values from ``[anchor; previous]``, anchor rows first."""
        anchor_tokens = np.asarray(anchor_tokens)
        previous_tokens = np.asarray(previous_tokens)
        if anchor_tokens.shape != previous_tokens.shape:
            raise DenoiserError(f"token shapes differ: {anchor_tokens.shape} vs {previous_tokens.shape}")
        return self.attention_state(anchor_tokens, previous_tokens, source_frames=source_frames)

    def _attend(self, tokens, attn):
        query = tokens @ self.w_q
        if attn is None:
            key, value = tokens @ self.w_k, tokens @ self.w_v
        else:
            if attn.keys.shape[1] != self.hidden:
                raise DenoiserError("attention state width does not match the network")
            key, value = attn.keys, attn.values
        return tokens + attention(query, key, value) @ self.w_o

    def prior_mean(self, tokens, shape, attn=None):
        mixed = self._attend(tokens, attn)
        h = mixed.T.reshape(self.hidden, *shape)
        return np.tanh(conv3x3(h, self.w_out, self.b_out))

    # -- interface ---------------------------------------------------------

    def forward(self, latent, t, cond, attn=None):
        """Return ``(eps, tokens)``; the tokens are what other frames attend to."""
        latent = self._check(latent, t)
        toks = self.tokens(latent, t, cond)
        mu = self.prior_mean(toks, latent.shape[1:], attn)
        abar = self.schedule.alpha_bar(t)
        var = self.prior_std ** 2
        eps = np.sqrt(1.0 - abar) * (latent - np.sqrt(abar) * mu) / (abar * var + 1.0 - abar)
        return eps, toks

    def predict_noise(self, latent, t, cond, attn=None):
        return self.forward(latent, t, cond, attn)[0]
