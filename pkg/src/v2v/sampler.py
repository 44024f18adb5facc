"""DDIM key-frame sampling with cross-frame constraints.

Timesteps run from ``strength_T`` down to 0 (``alpha_bar(0) == 1``). At each
step the sampler may apply, depending on the current timestep ``t``:

* cross-frame attention (every step, keys/values from anchor + previous frame),
* shape-aware fusion of the predicted ``x0`` with the warped anchor prediction
  (``t > t_p0``),
* AdaIN of the predicted ``x0`` towards the anchor prediction (``t <= t_a``),
* pixel-aware fusion: blend ``x_{t_prev}`` with a re-noised encoding of the
  warped anchor/previous outputs outside the occlusion mask
  (``t_s < t <= t_p1``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import FidelityConfig, fidelity_encode
from .flow import FlowPair, downsample_guidance, warp


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: np.ndarray
    ddim_steps: int = 20
    strength_T: int | None = None

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", alphas)
        if alphas.ndim != 1 or alphas.size == 0:
            raise SamplerError("alphas must be a non-empty 1-D sequence")
        if np.any(alphas < 0) or np.any(alphas >= 1):
            raise SamplerError("alphas must lie in [0, 1)")
        if self.ddim_steps < 1:
            raise SamplerError("ddim_steps must be >= 1")
        if self.strength_T is None:
            object.__setattr__(self, "strength_T", alphas.size)
        if not 0 <= self.strength_T <= alphas.size:
            raise SamplerError(f"strength_T {self.strength_T} outside [0, {alphas.size}]")
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    @classmethod
    def scaled_linear(cls, t_max=1000, beta_start=0.00085, beta_end=0.012, ddim_steps=20, strength=1.0):
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, t_max) ** 2
        return cls(1.0 - betas, ddim_steps, int(round(strength * t_max)))

    @classmethod
    def from_alpha_bars(cls, alpha_bars, ddim_steps=20, strength_T=None):
        ab = np.asarray(alpha_bars, dtype=np.float64)
        if np.any(np.diff(ab) >= 0) or ab[0] >= 1:
            raise SamplerError("alpha_bars must be strictly decreasing and below 1")
        alphas = np.concatenate([ab[:1], ab[1:] / ab[:-1]])
        return cls(alphas, ddim_steps, strength_T)

    @property
    def t_max(self):
        return self.alphas.size

    def with_strength(self, strength_T):
        return NoiseSchedule(self.alphas, self.ddim_steps, strength_T)

    def alpha_bar(self, t):
        if not 0 <= t <= self.t_max:
            raise SamplerError(f"timestep {t} outside [0, {self.t_max}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def timesteps(self):
        """Descending ``(t, t_prev)`` pairs from ``strength_T`` to 0."""
        ts = np.round(np.linspace(self.strength_T, 0, self.ddim_steps + 1)).astype(int)
        ts = list(dict.fromkeys(ts.tolist()))
        return list(zip(ts[:-1], ts[1:]))

    # -- closed forms ------------------------------------------------------

    def q_sample(self, x0, t, noise):
        x0 = np.asarray(x0, dtype=np.float64)
        noise = np.asarray(noise, dtype=np.float64)
        if x0.shape != noise.shape:
            raise SamplerError(f"x0 {x0.shape} and noise {noise.shape} differ")
        ab = self.alpha_bar(t)
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise

    def predicted_x0(self, x_t, t, eps):
        ab = self.alpha_bar(t)
        if ab == 0:
            raise SamplerError(f"alpha_bar({t}) is zero; x0 is unrecoverable")
        return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps)) / np.sqrt(ab)

    def ddim_update(self, x0_pred, t_prev, eps):
        ab = self.alpha_bar(t_prev)
        return np.sqrt(ab) * x0_pred + np.sqrt(1.0 - ab) * eps

    def ddim_step(self, x_t, t, t_prev, eps):
        """Deterministic DDIM step ``x_t -> x_{t_prev}``."""
        if not t_prev < t:
            raise SamplerError(f"t_prev {t_prev} must be below t {t}")
        return self.ddim_update(self.predicted_x0(x_t, t, eps), t_prev, eps)


@dataclass(frozen=True)
class StageSchedule:
    t_s: float
    t_p0: float
    t_p1: float
    t_a: float

    @classmethod
    def from_fractions(cls, t_max, s=0.1, p0=0.5, p1=0.8, a=0.8):
        for name, v in (("t_s", s), ("t_p0", p0), ("t_p1", p1), ("t_a", a)):
            if not 0 <= v <= 1:
                raise SamplerError(f"{name} fraction {v} outside [0, 1]")
        return cls(s * t_max, p0 * t_max, p1 * t_max, a * t_max)

    def shape_active(self, t):
        return t > self.t_p0

    def pixel_active(self, t):
        return self.t_s < t <= self.t_p1

    def adain_active(self, t):
        return t <= self.t_a


@dataclass(frozen=True)
class SamplerConfig:
    cross_frame_attention: bool = True
    shape_fusion: bool = True
    pixel_fusion: bool = True
    adain: bool = True
    fidelity: FidelityConfig = field(default_factory=FidelityConfig)
    seed: int = 0


@dataclass
class KeyframeTrace:
    """Per-step record of one key-frame run, reused as context by later frames."""

    frame_index: int
    timesteps: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    x0_preds: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    output: np.ndarray | None = None
    latent: np.ndarray | None = None


@dataclass
class FrameContext:
    """What frame ``i`` needs from the anchor and previous key frames.

    ``anchor_flow.forward`` lives on frame ``i``'s grid and points into the
    anchor (``w^i_0``); ``anchor_flow.mask`` is ``M^i_0``. Same for ``previous_flow``.
    """

    anchor: KeyframeTrace
    previous: KeyframeTrace
    anchor_flow: FlowPair
    previous_flow: FlowPair


def init_noise(seed, shape):
    return np.random.default_rng([seed, 0x5D]).standard_normal(shape)


def step_noise(seed, frame_index, step, shape):
    return np.random.default_rng([seed, 0x1B, frame_index, step]).standard_normal(shape)


def init_latent(input_frame, schedule, codec, seed, fidelity=None):
    """SDEdit start: the fidelity-encoded frame noised to ``schedule.strength_T``."""
    x0 = fidelity_encode(codec, input_frame, fidelity)
    if schedule.strength_T == 0:
        return x0
    return schedule.q_sample(x0, schedule.strength_T, init_noise(seed, x0.shape))


def shape_fusion(xhat, xhat_ref, flow_lowres, mask_lowres):
    """``M * xhat + (1 - M) * warp(xhat_ref)`` on latent tensors.

    ``M`` is the fusion mask of the update rule: 1 keeps the frame's own
    prediction. Callers pass the occlusion indicator (``1 - visibility``).
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    m = np.asarray(mask_lowres, dtype=np.float64)
    if m.shape != xhat.shape[1:] or np.shape(xhat_ref) != xhat.shape:
        raise SamplerError("shape_fusion operands disagree in shape")
    return m * xhat + (1.0 - m) * warp(xhat_ref, flow_lowres, channels_first=True)


def pixel_fusion_reference(rough, anchor_out, prev_out, anchor_flow, anchor_mask, prev_flow, prev_mask):
    """Overlay warped anchor and previous outputs on a rough render.

    ``M0 * (Mp * rough + (1 - Mp) * warp(prev)) + (1 - M0) * warp(anchor)``.
    Masks are occlusion indicators (1 = no usable correspondence), so the
    returned intersection ``M0 & Mp`` marks pixels neither reference covers.
    """
    rough = np.asarray(rough, dtype=np.float64)
    if not (rough.shape == np.shape(anchor_out) == np.shape(prev_out)):
        raise SamplerError("pixel fusion frames differ in shape")
    m0 = np.asarray(anchor_mask, dtype=np.float64)[..., None]
    mp = np.asarray(prev_mask, dtype=np.float64)[..., None]
    inner = mp * rough + (1.0 - mp) * warp(prev_out, prev_flow)
    fused = m0 * inner + (1.0 - m0) * warp(anchor_out, anchor_flow)
    combined = (np.asarray(anchor_mask).astype(bool) & np.asarray(prev_mask).astype(bool)).astype(np.uint8)
    return fused, combined


def inpaint_merge(x_next, t_prev, reference_latent, mask_lowres, schedule, noise):
    """Keep ``x_next`` inside the mask, re-noised reference outside it."""
    m = np.asarray(mask_lowres, dtype=np.float64)
    x_next = np.asarray(x_next, dtype=np.float64)
    if m.shape != x_next.shape[1:]:
        raise SamplerError(f"mask {m.shape} does not match latent {x_next.shape}")
    return m * x_next + (1.0 - m) * schedule.q_sample(reference_latent, t_prev, noise)


ADAIN_STD_FLOOR = 1e-5


def adain_adjust(xhat, anchor_xhat):
    """Per-channel standardise ``xhat`` and rescale to the anchor's mean and std."""
    xhat = np.asarray(xhat, dtype=np.float64)
    anchor_xhat = np.asarray(anchor_xhat, dtype=np.float64)
    if xhat.shape[0] != anchor_xhat.shape[0]:
        raise SamplerError("channel counts differ")
    axes = tuple(range(1, xhat.ndim))
    mu = xhat.mean(axis=axes, keepdims=True)
    sd = np.maximum(xhat.std(axis=axes, keepdims=True), ADAIN_STD_FLOOR)
    mu_a = anchor_xhat.mean(axis=axes, keepdims=True)
    sd_a = anchor_xhat.std(axis=axes, keepdims=True)
    return (xhat - mu) / sd * sd_a + mu_a


def _occlusion(visibility):
    return 1 - np.asarray(visibility, dtype=np.uint8)


def _lowres(pair, factor):
    """Latent-scale flow and occlusion indicator of a full-resolution FlowPair."""
    flow, visible = downsample_guidance(pair.forward, pair.mask, factor)
    return flow, _occlusion(visible)


def translate_keyframe(input_frame, cond, schedule, stages, codec, denoiser,
                       ctx=None, config=None, frame_index=0):
    """Render one key frame; returns ``(frame, trace)``.

    ``ctx`` is ``None`` only for the anchor frame, which then runs plain
    SDEdit sampling (self-attention, no fusion).
    """
    config = config or SamplerConfig()
    steps = schedule.timesteps()
    if ctx is not None:
        for ref in (ctx.anchor, ctx.previous):
            if len(ref.tokens) != len(steps):
                raise SamplerError(f"reference frame {ref.frame_index} was sampled with a different schedule")
    trace = KeyframeTrace(frame_index)
    x = init_latent(input_frame, schedule, codec, config.seed, config.fidelity)
    factor = codec.spatial_factor
    if ctx is not None:
        flow0_lr, occ0_lr = _lowres(ctx.anchor_flow, factor)
    ref_latent = occ_lr = None

    for s, (t, t_prev) in enumerate(steps):
        fired = set()
        attn = None
        if ctx is not None and config.cross_frame_attention:
            attn = denoiser.make_cross_frame_state(
                ctx.anchor.tokens[s], ctx.previous.tokens[s],
                source_frames=(ctx.anchor.frame_index, ctx.previous.frame_index))
            fired.add("cross_attention")
        eps, toks = denoiser.forward(x, t, cond, attn)
        xhat = schedule.predicted_x0(x, t, eps)
        if ctx is not None and config.shape_fusion and stages.shape_active(t):
            xhat = shape_fusion(xhat, ctx.anchor.x0_preds[s], flow0_lr, occ0_lr)
            fired.add("shape_fusion")
        if ctx is not None and config.adain and stages.adain_active(t):
            xhat = adain_adjust(xhat, ctx.anchor.x0_preds[s])
            fired.add("adain")
        x_next = schedule.ddim_update(xhat, t_prev, eps)
        if ctx is not None and config.pixel_fusion and stages.pixel_active(t):
            if ref_latent is None:
                # rough render taken before any pixel-level fusion has touched the latent
                rough = codec.decode(xhat)
                fused, occ = pixel_fusion_reference(
                    rough, ctx.anchor.output, ctx.previous.output,
                    ctx.anchor_flow.forward, _occlusion(ctx.anchor_flow.mask),
                    ctx.previous_flow.forward, _occlusion(ctx.previous_flow.mask))
                ref_latent = fidelity_encode(codec, fused, config.fidelity)
                _, visible_lr = downsample_guidance(ctx.anchor_flow.forward, 1 - occ, factor)
                occ_lr = _occlusion(visible_lr)
            noise = step_noise(config.seed, frame_index, s, x.shape)
            x_next = inpaint_merge(x_next, t_prev, ref_latent, occ_lr, schedule, noise)
            fired.add("pixel_fusion")
        trace.timesteps.append((t, t_prev))
        trace.tokens.append(toks)
        trace.x0_preds.append(xhat)
        trace.gates.append(fired)
        x = x_next

    trace.latent = x
    trace.output = codec.decode(x)
    return trace.output, trace
