"""End-to-end orchestration: key frames, propagation, blending, metrics, I/O."""
from __future__ import annotations

import csv
import dataclasses
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .codec import FidelityConfig, ToyLossyCodec
from .denoiser import Conditioning, ToyDenoiser
from .flow import FlowPair, compose_flows, estimate_flow, occlusion_mask, read_flo, warp
from .propagate import BlendCandidate, blend, build_guides, match_histograms, patch_match, synthesize
from .sampler import (FrameContext, NoiseSchedule, SamplerConfig, StageSchedule,
                      translate_keyframe)

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    # diffusion
    t_max: int = 1000
    ddim_steps: int = 20
    strength: float = 0.7
    t_s: float = 0.1
    t_p0: float = 0.5
    t_p1: float = 0.8
    t_a: float = 0.8
    adain_enabled: bool = True
    cross_frame_attention: bool = True
    shape_fusion: bool = True
    pixel_fusion: bool = True
    control_weight: float = 1.0
    prompt: str = ""
    seed: int = 0
    # codec
    lambda_e: float = 1.0
    artifact_threshold: float = 0.1
    # flow
    flow_levels: int = 3
    flow_iterations: int = 60
    occlusion_threshold: float = 1.0
    occlusion_relative: float = 0.01
    anchor_flow: str = "chain"
    # propagation
    key_interval: int = 10
    patch_size: int = 5
    pm_iterations: int = 6
    weight_color: float = 6.0
    weight_positional: float = 2.0
    weight_edge: float = 0.5
    weight_temporal: float = 0.5
    color_correct: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.key_interval < 1:
            raise PipelineError("key_interval must be >= 1")
        if self.anchor_flow not in ("chain", "direct"):
            raise PipelineError("anchor_flow must be 'chain' or 'direct'")

    @classmethod
    def from_file(cls, path, **overrides):
        values = parse_config(Path(path).read_text())
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise PipelineError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, types[key])
        return cls(**kwargs)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def guide_weights(self):
        return {"color": self.weight_color, "positional": self.weight_positional,
                "edge": self.weight_edge, "temporal": self.weight_temporal}


def parse_config(text):
    """``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PipelineError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(raw, typ):
    if not isinstance(raw, str):
        return raw
    if typ in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise PipelineError(f"not a boolean: {raw!r}")
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    return raw


@dataclass
class VideoJob:
    frames: list
    key_interval: int = 10
    prompt: str = ""
    config: PipelineConfig = field(default_factory=PipelineConfig)
    output_dir: Path | None = None

    def __post_init__(self):
        if not self.frames:
            raise PipelineError("job has no frames")
        shapes = {np.shape(f) for f in self.frames}
        if len(shapes) != 1:
            raise PipelineError(f"frames differ in shape: {sorted(shapes)}")
        if not 1 <= self.key_interval <= len(self.frames):
            raise PipelineError(f"key_interval must be in [1, {len(self.frames)}], got {self.key_interval}")


@dataclass
class MetricsReport:
    pixel_mse: float
    per_frame: list

    def write_csv(self, fh):
        writer = csv.writer(fh)
        writer.writerow(["pair", "pixel_mse"])
        for i, v in enumerate(self.per_frame):
            writer.writerow([f"{i}-{i + 1}", f"{v:.8g}"])
        writer.writerow(["mean", f"{self.pixel_mse:.8g}"])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            self.write_csv(fh)


@dataclass
class RunResult:
    frames: list
    metrics: MetricsReport | None
    key_indices: list
    provenance: dict
    traces: dict = field(default_factory=dict)


def key_indices(n_frames, key_interval):
    return list(range(0, n_frames, key_interval))


# -- flow graph ---------------------------------------------------------------

class FlowGraph:
    """Consecutive-frame flows with on-demand chaining.

    ``field(a, b)`` is a flow on frame ``a``'s grid pointing into frame ``b``
    together with its visibility mask. Adjacent pairs come from a
    forward-backward consistency check; longer spans chain adjacent fields
    and accumulate occlusions.
    """

    def __init__(self, frames, config=None, external=None):
        self.frames = frames
        self.config = config or PipelineConfig()
        self._adjacent = dict(external or {})
        self._cache = {}

    def _estimate(self, a, b):
        cfg = self.config
        return estimate_flow(self.frames[a], self.frames[b], cfg.flow_levels, cfg.flow_iterations)

    def adjacent(self, a, b):
        if abs(a - b) != 1:
            raise PipelineError(f"frames {a} and {b} are not adjacent")
        if (a, b) not in self._cache:
            fwd = self._adjacent.get((a, b))
            bwd = self._adjacent.get((b, a))
            fwd = self._estimate(a, b) if fwd is None else fwd
            bwd = self._estimate(b, a) if bwd is None else bwd
            self._adjacent[(a, b)], self._adjacent[(b, a)] = fwd, bwd
            mask = occlusion_mask(fwd, bwd, self.config.occlusion_threshold, self.config.occlusion_relative)
            self._cache[(a, b)] = (fwd, mask)
        return self._cache[(a, b)]

    def field(self, a, b):
        if a == b:
            h, w = np.shape(self.frames[a])[:2]
            return np.zeros((h, w, 2)), np.ones((h, w), np.uint8)
        if (a, b) in self._cache:
            return self._cache[(a, b)]
        step = 1 if b > a else -1
        flow, mask = self.adjacent(a, a + step)
        for k in range(a + step, b, step):
            nxt, nmask = self.adjacent(k, k + step)
            flow, mask = compose_flows(flow, nxt, mask, nmask)
        self._cache[(a, b)] = (flow, mask)
        return flow, mask

    def direct(self, a, b):
        fwd, bwd = self._estimate(a, b), self._estimate(b, a)
        return fwd, occlusion_mask(fwd, bwd, self.config.occlusion_threshold, self.config.occlusion_relative)

    def pair(self, a, b, mode="chain"):
        """FlowPair with ``forward`` on ``a``'s grid into ``b``."""
        fwd, mask = self.field(a, b) if mode == "chain" else self.direct(a, b)
        bwd, _ = self.field(b, a) if mode == "chain" else (self._estimate(b, a), None)
        return FlowPair(fwd, bwd, mask, self.config.occlusion_threshold)

    def consecutive_pairs(self):
        """For each ``i``: flow on frame ``i+1``'s grid into ``i`` plus its mask."""
        return [self.pair(i + 1, i) for i in range(len(self.frames) - 1)]


# -- stages ------------------------------------------------------------------

def build_engine(config):
    schedule = NoiseSchedule.scaled_linear(config.t_max, ddim_steps=config.ddim_steps, strength=config.strength)
    stages = StageSchedule.from_fractions(config.t_max, config.t_s, config.t_p0, config.t_p1, config.t_a)
    codec = ToyLossyCodec()
    denoiser = ToyDenoiser(schedule, latent_channels=codec.latent_channels)
    sampler_cfg = SamplerConfig(config.cross_frame_attention, config.shape_fusion, config.pixel_fusion,
                                config.adain_enabled, FidelityConfig(config.lambda_e, config.artifact_threshold),
                                config.seed)
    return schedule, stages, codec, denoiser, sampler_cfg


def color_correct(frame, reference):
    """Match ``frame``'s per-channel histogram to ``reference``."""
    if np.shape(frame) != np.shape(reference):
        raise PipelineError("color_correct needs frames of equal shape")
    return match_histograms(frame, reference)


def translate_keyframes(frames, config, graph=None, keys=None):
    """Render key frames in order; returns ``({index: frame}, {index: trace})``."""
    schedule, stages, codec, denoiser, sampler_cfg = build_engine(config)
    graph = graph or FlowGraph(frames, config)
    keys = key_indices(len(frames), config.key_interval) if keys is None else keys
    factor = codec.spatial_factor

    def cond(i):
        return Conditioning.from_frame(config.prompt, frames[i], factor, config.control_weight)

    outputs, traces = {}, {}
    anchor = previous = None
    for k in keys:
        try:
            ctx = None
            if anchor is not None:
                ctx = FrameContext(anchor, previous,
                                   graph.pair(k, anchor.frame_index, config.anchor_flow),
                                   graph.pair(k, previous.frame_index, config.anchor_flow))
            out, trace = translate_keyframe(frames[k], cond(k), schedule, stages, codec, denoiser,
                                            ctx, sampler_cfg, frame_index=k)
        except (ValueError, ArithmeticError) as exc:
            raise PipelineError(f"key frame {k}: {exc}") from exc
        outputs[k] = out
        traces[k] = trace
        anchor = anchor or trace
        previous = trace
        log.info("key frame %d done", k)
    return outputs, traces


def _propagate_run(frames, stylized, key, targets, graph, config):
    """Propagate one key along ``targets`` (ordered away from the key)."""
    results = {}
    prev_index, prev_out = key, stylized
    for i in targets:
        flow_to_key, _ = graph.field(i, key)
        flow_to_prev, _ = graph.field(i, prev_index)
        guides = build_guides(frames[key], frames[i], flow_to_key,
                              temporal_target=warp(prev_out, flow_to_prev),
                              weights=config.guide_weights)
        nnf = patch_match(stylized, guides, config.patch_size, config.pm_iterations,
                          seed=[config.seed, key, i])
        image = synthesize(stylized, nnf)
        results[i] = BlendCandidate(image, nnf.errors, key)
        prev_index, prev_out = i, image
    return results


def propagate_keyframes(frames, keyframes, config, graph=None):
    """Fill non-key frames from the stylized keys.

    Returns ``(frames, provenance, error_maps)``; ``error_maps`` holds the
    per-pixel patch error of the chosen candidate for every non-key frame.
    """
    graph = graph or FlowGraph(frames, config)
    keys = sorted(keyframes)
    if not keys:
        raise PipelineError("no key frames to propagate")
    n = len(frames)
    for k in keys:
        if not 0 <= k < n:
            raise PipelineError(f"key frame index {k} outside 0..{n - 1}")
        if np.shape(keyframes[k]) != np.shape(frames[k]):
            raise PipelineError(f"key frame {k} has shape {np.shape(keyframes[k])}, frames have {np.shape(frames[k])}")
    tasks = []
    for j, k in enumerate(keys):
        lo = keys[j - 1] + 1 if j > 0 else 0
        hi = keys[j + 1] - 1 if j + 1 < len(keys) else n - 1
        tasks.append((k, list(range(k + 1, hi + 1))))
        tasks.append((k, list(range(k - 1, lo - 1, -1))))
    tasks = [t for t in tasks if t[1]]
    # adjacent flows are computed up front so worker threads only read the graph
    for i in range(n - 1):
        graph.adjacent(i, i + 1)
        graph.adjacent(i + 1, i)

    def work(task):
        k, targets = task
        try:
            return k, _propagate_run(frames, keyframes[k], k, targets, graph, config)
        except ValueError as exc:
            raise PipelineError(f"propagating key frame {k} to frames {targets}: {exc}") from exc

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            runs = list(pool.map(work, tasks))
    else:
        runs = [work(t) for t in tasks]

    candidates = {}
    for k, res in runs:
        for i, cand in res.items():
            candidates.setdefault(i, []).append(cand)

    out, provenance, errors = [None] * n, {}, {}
    for i in range(n):
        if i in keyframes:
            out[i] = np.asarray(keyframes[i], dtype=np.float64)
            provenance[i] = ("key", i)
            continue
        cands = sorted(candidates.get(i, []), key=lambda c: c.source_key_index)
        if len(cands) == 2:
            out[i] = blend(cands[0], cands[1])
            errors[i] = np.minimum(cands[0].error_map, cands[1].error_map)
            provenance[i] = ("blend", cands[0].source_key_index, cands[1].source_key_index)
        elif len(cands) == 1:
            out[i] = cands[0].image
            errors[i] = cands[0].error_map
            provenance[i] = ("single", cands[0].source_key_index)
        else:
            raise PipelineError(f"frame {i} has {len(cands)} propagation candidates")
    return out, provenance, errors


def pixel_mse(outputs, pairs):
    """Mean over consecutive pairs of the visible-pixel MSE after flow alignment.

    ``pairs[i]`` carries a flow on frame ``i+1``'s grid pointing into frame
    ``i`` and its visibility mask.
    """
    if len(outputs) < 2:
        raise PipelineError("pixel_mse needs at least two frames")
    if len(pairs) != len(outputs) - 1:
        raise PipelineError(f"expected {len(outputs) - 1} flows, got {len(pairs)}")
    per = []
    for i, pair in enumerate(pairs):
        if pair is None:
            raise PipelineError(f"missing flow for pair {i}-{i + 1}")
        aligned = warp(outputs[i], pair.forward)
        visible = np.asarray(pair.mask).astype(bool)
        if not visible.any():
            per.append(0.0)
            continue
        diff = (aligned - np.asarray(outputs[i + 1], dtype=np.float64))[visible]
        per.append(float(np.mean(diff * diff)))
    return MetricsReport(float(np.mean(per)), per)


def run(job, flows=None):
    """Translate a whole video; returns a :class:`RunResult`.

    ``flows`` optionally maps ``(a, b)`` to precomputed adjacent fields on
    frame ``a``'s grid pointing into frame ``b``; missing ones are estimated.
    """
    config = job.config.replace(key_interval=job.key_interval, prompt=job.prompt or job.config.prompt)
    frames = [np.asarray(f, dtype=np.float64) for f in job.frames]
    if config.color_correct:
        schedule, stages, codec, denoiser, sampler_cfg = build_engine(config)
        reference, _ = translate_keyframe(
            frames[0], Conditioning.from_frame(config.prompt, frames[0], codec.spatial_factor,
                                               config.control_weight),
            schedule.with_strength(schedule.t_max), stages, codec, denoiser, None, sampler_cfg)
        frames = [color_correct(f, reference) for f in frames]
    graph = FlowGraph(frames, config, flows)
    keys = key_indices(len(frames), config.key_interval)
    keyframes, traces = translate_keyframes(frames, config, graph, keys)
    outputs, provenance, _ = propagate_keyframes(frames, keyframes, config, graph)
    metrics = pixel_mse(outputs, graph.consecutive_pairs()) if len(outputs) > 1 else None
    if job.output_dir is not None:
        save_frames(job.output_dir, outputs)
        if metrics is not None:
            metrics.to_csv(Path(job.output_dir) / "metrics.csv")
    return RunResult(outputs, metrics, keys, provenance, traces)


# -- frame I/O ----------------------------------------------------------------

_NUMBER = re.compile(r"(\d+)")


def frame_number(path):
    nums = _NUMBER.findall(Path(path).stem)
    if not nums:
        raise PipelineError(f"{path}: no frame number in file name")
    return int(nums[-1])


def to_uint8(frame):
    return np.floor(np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_frame(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise PipelineError(f"{path}: unreadable image ({exc})") from exc


def load_frames(path, with_names=False):
    """Load ``*.png`` frames of a directory in lexicographic order."""
    paths = sorted(Path(path).glob("*.png"))
    if not paths:
        raise PipelineError(f"{path}: no PNG frames found")
    frames = []
    for p in paths:
        frame = load_frame(p)
        if frames and frame.shape != frames[0].shape:
            raise PipelineError(f"{p.name}: dimensions {frame.shape[:2]} differ from {frames[0].shape[:2]}")
        frames.append(frame)
    return (frames, paths) if with_names else frames


def save_frames(path, frames, indices=None, prefix="frame_"):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    indices = range(len(frames)) if indices is None else indices
    written = []
    for i, frame in zip(indices, frames):
        target = path / f"{prefix}{i:04d}.png"
        Image.fromarray(to_uint8(frame)).save(target)
        written.append(target)
    return written


def save_error_map(path, error):
    error = np.asarray(error, dtype=np.float64)
    peak = error.max()
    norm = error / peak if peak > 0 else error
    Image.fromarray(to_uint8(norm)).save(path)


def load_flow_dir(path):
    """``flow_AAAA_BBBB.flo`` files: field on frame A's grid pointing into frame B."""
    flows = {}
    for p in sorted(Path(path).glob("flow_*_*.flo")):
        m = re.fullmatch(r"flow_(\d+)_(\d+)", p.stem)
        if m:
            flows[(int(m.group(1)), int(m.group(2)))] = read_flo(p)
    return flows
