"""Guided PatchMatch propagation of stylized key frames and two-candidate blending."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import kernels
from .denoiser import edge_map

DEFAULT_WEIGHTS = {"color": 6.0, "positional": 2.0, "edge": 0.5, "temporal": 0.5}
HIST_BINS = 256


class PropagationError(ValueError):
    pass


@dataclass
class GuideStack:
    """Paired source/target guide channels and their weights.

    ``source`` and ``target`` map guide names to ``(H, W, C)`` arrays. The
    temporal guide's source side is the stylized key itself, supplied to
    :func:`patch_match`, so only its target side appears here.
    """

    source: dict
    target: dict
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))

    def features(self, stylized_key=None):
        src, tgt = [], []
        for name, tg in self.target.items():
            w = float(self.weights.get(name, 0.0))
            if w < 0:
                raise PropagationError(f"guide weight {name} is negative")
            if w == 0:
                continue
            sg = stylized_key if name == "temporal" else self.source[name]
            sg, tg = _channels_last(sg), _channels_last(tg)
            if sg.shape[2] != tg.shape[2]:
                raise PropagationError(f"guide {name} channel counts differ")
            src.append(np.sqrt(w) * sg)
            tgt.append(np.sqrt(w) * tg)
        if not src:
            raise PropagationError("guide weights must sum to a positive value")
        shapes = {a.shape[:2] for a in src} | {a.shape[:2] for a in tgt}
        if len({a.shape[:2] for a in src}) != 1 or len({a.shape[:2] for a in tgt}) != 1:
            raise PropagationError(f"guide dimensions disagree: {sorted(shapes)}")
        return (np.ascontiguousarray(np.concatenate(src, axis=2)),
                np.ascontiguousarray(np.concatenate(tgt, axis=2)))


def _channels_last(a):
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def coordinate_map(height, width):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs / max(width - 1, 1), ys / max(height - 1, 1)], axis=-1)


def build_guides(source_frame, target_frame, flow=None, temporal_target=None, weights=None):
    """Colour, positional, edge and (optionally) temporal guides for one key -> target pair.

    ``flow`` lives on the target grid and points into the source frame; it
    makes the target's positional guide predict where each pixel came from.
    ``temporal_target`` is the previous propagated frame warped to the target.
    """
    source_frame = np.asarray(source_frame, dtype=np.float64)
    target_frame = np.asarray(target_frame, dtype=np.float64)
    if source_frame.shape != target_frame.shape:
        raise PropagationError("source and target frames differ in shape")
    h, w = source_frame.shape[:2]
    src_pos = coordinate_map(h, w)
    tgt_pos = src_pos.copy()
    if flow is not None:
        tgt_pos = tgt_pos + np.asarray(flow) / np.array([max(w - 1, 1), max(h - 1, 1)])
    source = {"color": source_frame, "positional": src_pos, "edge": edge_map(source_frame)}
    target = {"color": target_frame, "positional": tgt_pos, "edge": edge_map(target_frame)}
    if temporal_target is not None:
        target["temporal"] = np.asarray(temporal_target, dtype=np.float64)
    return GuideStack(source, target, dict(weights or DEFAULT_WEIGHTS))


@dataclass
class NNField:
    """Target-pixel -> source-centre correspondences (``offsets[..., 0] = x``)."""

    offsets: np.ndarray
    errors: np.ndarray
    patch_size: int
    energies: list = field(default_factory=list)

    @property
    def height(self):
        return self.offsets.shape[0]

    @property
    def width(self):
        return self.offsets.shape[1]

    @property
    def energy(self):
        return float(self.errors.sum())


def feasible_bounds(target_len, source_len, r):
    """Per-coordinate ``(lo, hi)`` of source centres whose window fits the clipped target window."""
    t = np.arange(target_len)
    return np.minimum(r, t), source_len - 1 - np.minimum(r, target_len - 1 - t)


def _radii(height, width):
    return int(np.floor(np.log2(max(height, width)))) + 1


def nnf_costs(src_feat, tgt_feat, offsets, patch_size):
    return kernels.compute_costs(src_feat, tgt_feat, np.ascontiguousarray(offsets, dtype=np.int64),
                                 patch_size // 2)


def patch_match_features(src_feat, tgt_feat, patch_size=5, iterations=6, seed=0, backend=None):
    """PatchMatch on pre-weighted feature stacks.

    Random init, then per iteration a scanline pass (direction alternating)
    of neighbour propagation followed by random search with halving radius.
    ``energies[k]`` is the total cost after ``k`` iterations.
    """
    impl = backend or kernels
    if patch_size < 1 or patch_size % 2 == 0:
        raise PropagationError("patch_size must be odd and positive")
    if iterations < 0:
        raise PropagationError("iterations must be >= 0")
    r = patch_size // 2
    hs, ws = src_feat.shape[:2]
    ht, wt = tgt_feat.shape[:2]
    if hs < patch_size or ws < patch_size:
        raise PropagationError("source smaller than one patch")
    rng = np.random.default_rng(seed)
    offsets = np.empty((ht, wt, 2), dtype=np.int64)
    lo_x, hi_x = feasible_bounds(wt, ws, r)
    lo_y, hi_y = feasible_bounds(ht, hs, r)
    offsets[..., 0] = rng.integers(lo_x[None, :], hi_x[None, :] + 1, size=(ht, wt))
    offsets[..., 1] = rng.integers(lo_y[:, None], hi_y[:, None] + 1, size=(ht, wt))
    cost = impl.compute_costs(src_feat, tgt_feat, offsets, r)
    energies = [float(cost.sum())]
    nrad = _radii(hs, ws)
    for it in range(iterations):
        rand = rng.random(size=(ht, wt, nrad, 2))
        impl.pm_iteration(src_feat, tgt_feat, offsets, cost, r, it % 2 == 1, rand)
        energies.append(float(cost.sum()))
    return NNField(offsets, cost, patch_size, energies)


def patch_match(stylized_key, guides, patch_size=5, iterations=6, seed=0):
    """Nearest-neighbour field from target pixels into the stylized key frame."""
    src_feat, tgt_feat = guides.features(stylized_key)
    return patch_match_features(src_feat, tgt_feat, patch_size, iterations, seed)


def synthesize(stylized_key, nnf, patch_size=None):
    """Average of all overlapping patch votes from ``stylized_key``."""
    patch_size = nnf.patch_size if patch_size is None else patch_size
    image = np.ascontiguousarray(_channels_last(stylized_key))
    offsets = np.ascontiguousarray(nnf.offsets, dtype=np.int64)
    h, w = image.shape[:2]
    if (offsets[..., 0].min() < 0 or offsets[..., 0].max() >= w
            or offsets[..., 1].min() < 0 or offsets[..., 1].max() >= h):
        raise PropagationError("NNF points outside the stylized key")
    acc, cnt = kernels.vote(image, offsets, patch_size // 2)
    out = image[offsets[..., 1], offsets[..., 0]] + acc / cnt[..., None]
    return out if np.ndim(stylized_key) == 3 else out[..., 0]


# -- blending ---------------------------------------------------------------

@dataclass
class BlendCandidate:
    image: np.ndarray
    error_map: np.ndarray
    source_key_index: int


def _inverse_cdf(q, cdf, edges):
    """Invert a piecewise-linear CDF given at bin edges.

    ``q`` falls in the first bin whose upper CDF value reaches it; empty
    bins are never selected (``q == 0`` goes to the first populated bin).
    """
    upper = cdf[1:]
    k = np.where(q > 0, np.searchsorted(upper, q, side="left"), np.searchsorted(upper, 0.0, side="right"))
    k = np.clip(k, 0, upper.size - 1)
    count = cdf[k + 1] - cdf[k]
    frac = np.clip((q - cdf[k]) / np.where(count > 0, count, 1.0), 0.0, 1.0)
    return edges[k] + frac * (edges[k + 1] - edges[k])


def match_histograms(source, reference, bins=HIST_BINS):
    """Per-channel histogram transfer on [0, 1].

    Source values are placed by mid-rank (ties share their average rank, so
    a constant lands on the median) and mapped through the inverse of the
    reference's ``bins``-bin piecewise-linear CDF. Channels whose histograms
    already agree are returned unchanged.
    """
    source = np.asarray(source, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if source.shape[-1] != reference.shape[-1]:
        raise PropagationError("channel counts differ")
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = np.empty_like(source)
    for c in range(source.shape[-1]):
        s = np.clip(source[..., c], 0.0, 1.0)
        hs, _ = np.histogram(s, bins=bins, range=(0.0, 1.0))
        hr, _ = np.histogram(np.clip(reference[..., c], 0.0, 1.0), bins=bins, range=(0.0, 1.0))
        if np.array_equal(hs, hr):
            out[..., c] = s
            continue
        q = (rankdata(s, method="average") - 0.5) / s.size
        cdf_r = np.concatenate([[0.0], np.cumsum(hr)]) / hr.sum()
        out[..., c] = _inverse_cdf(q.reshape(s.shape), cdf_r, edges)
    return out


def selection_mask(a, b):
    """True where candidate ``a`` wins: strictly lower error, ties to the lower key index."""
    ea, eb = np.asarray(a.error_map), np.asarray(b.error_map)
    if ea.shape != eb.shape:
        raise PropagationError("error maps differ in shape")
    a_first = a.source_key_index <= b.source_key_index
    return (ea < eb) | ((ea == eb) & a_first)


def blend(a, b, return_combined=False):
    """Lower-error selection, then histogram-match the average to the selection."""
    ia, ib = np.asarray(a.image, dtype=np.float64), np.asarray(b.image, dtype=np.float64)
    if ia.shape != ib.shape:
        raise PropagationError(f"candidates differ in shape: {ia.shape} vs {ib.shape}")
    pick = selection_mask(a, b)
    combined = np.where(pick[..., None], ia, ib)
    out = match_histograms(0.5 * (ia + ib), combined)
    return (out, combined) if return_combined else out
