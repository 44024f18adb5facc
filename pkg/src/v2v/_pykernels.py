"""Pure-Python PatchMatch and patch-voting kernels (fallback for ``_ckernels``).

Shapes: ``src`` is ``(Hs, Ws, C)``, ``tgt`` is ``(Ht, Wt, C)``, ``nnf`` is
``(Ht, Wt, 2)`` int64 holding source centres ``(x, y)``. A patch cost sums
squared differences over the ``(2r+1)^2`` window around the target pixel,
skipping target pixels outside the frame. A source centre is feasible for a
target pixel when the clipped window fits inside the source, so every
candidate for one target pixel is scored over the same pixel count and
the identity map is feasible up to the border.
"""
import math

import numpy as np


def bounds(t, nt, ns, r):
    """Feasible source-centre range ``[lo, hi]`` for target coordinate ``t``."""
    return min(r, t), ns - 1 - min(r, nt - 1 - t)


def patch_cost(src, tgt, tx, ty, sx, sy, r):
    ht, wt = tgt.shape[:2]
    y0, y1 = max(ty - r, 0), min(ty + r + 1, ht)
    x0, x1 = max(tx - r, 0), min(tx + r + 1, wt)
    d = tgt[y0:y1, x0:x1] - src[sy - ty + y0:sy - ty + y1, sx - tx + x0:sx - tx + x1]
    return float(np.sum(d * d))


def compute_costs(src, tgt, nnf, r):
    ht, wt = tgt.shape[:2]
    out = np.empty((ht, wt))
    for y in range(ht):
        for x in range(wt):
            out[y, x] = patch_cost(src, tgt, x, y, int(nnf[y, x, 0]), int(nnf[y, x, 1]), r)
    return out


def _try(src, tgt, nnf, cost, x, y, cx, cy, r):
    if cx == nnf[y, x, 0] and cy == nnf[y, x, 1]:
        return
    c = patch_cost(src, tgt, x, y, cx, cy, r)
    if c < cost[y, x]:
        cost[y, x] = c
        nnf[y, x, 0] = cx
        nnf[y, x, 1] = cy


def pm_iteration(src, tgt, nnf, cost, r, reverse, rand):
    ht, wt = tgt.shape[:2]
    hs, ws = src.shape[:2]
    nrad = rand.shape[2]
    rad0 = float(max(ws, hs))
    step = -1 if reverse else 1
    for i in range(ht):
        y = ht - 1 - i if reverse else i
        for j in range(wt):
            x = wt - 1 - j if reverse else j
            lo_x, hi_x = bounds(x, wt, ws, r)
            lo_y, hi_y = bounds(y, ht, hs, r)
            if 0 <= x - step < wt:
                cx = int(nnf[y, x - step, 0]) + step
                cy = int(nnf[y, x - step, 1])
                if lo_x <= cx <= hi_x and lo_y <= cy <= hi_y:
                    _try(src, tgt, nnf, cost, x, y, cx, cy, r)
            if 0 <= y - step < ht:
                cx = int(nnf[y - step, x, 0])
                cy = int(nnf[y - step, x, 1]) + step
                if lo_x <= cx <= hi_x and lo_y <= cy <= hi_y:
                    _try(src, tgt, nnf, cost, x, y, cx, cy, r)
            radius = rad0
            k = 0
            while radius >= 1.0 and k < nrad:
                rad = int(radius)
                a = max(int(nnf[y, x, 0]) - rad, lo_x)
                b = min(int(nnf[y, x, 0]) + rad, hi_x)
                cx = a + math.floor(rand[y, x, k, 0] * (b - a + 1))
                a = max(int(nnf[y, x, 1]) - rad, lo_y)
                b = min(int(nnf[y, x, 1]) + rad, hi_y)
                cy = a + math.floor(rand[y, x, k, 1] * (b - a + 1))
                _try(src, tgt, nnf, cost, x, y, cx, cy, r)
                radius *= 0.5
                k += 1


def vote(image, nnf, r):
    """Sum of votes relative to each pixel's own centre vote, and vote counts.

    Accumulating deviations keeps agreeing votes exact: the mean is
    ``image[nnf] + acc / cnt`` and that is bitwise ``image[nnf]`` when all
    votes coincide.
    """
    ht, wt = nnf.shape[:2]
    hs, ws, nc = image.shape
    acc = np.zeros((ht, wt, nc))
    cnt = np.zeros((ht, wt))
    for y in range(ht):
        for x in range(wt):
            sx0, sy0 = int(nnf[y, x, 0]), int(nnf[y, x, 1])
            for dy in range(-r, r + 1):
                py, sy = y + dy, sy0 + dy
                if py < 0 or py >= ht or sy < 0 or sy >= hs:
                    continue
                for dx in range(-r, r + 1):
                    px, sx = x + dx, sx0 + dx
                    if px < 0 or px >= wt or sx < 0 or sx >= ws:
                        continue
                    acc[py, px] += image[sy, sx] - image[nnf[py, px, 1], nnf[py, px, 0]]
                    cnt[py, px] += 1.0
    return acc, cnt
