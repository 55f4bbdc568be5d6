"""Independent reference implementations used as test oracles.

These are written for obviousness, not speed: plain loops, an IoU matrix
from numpy, per-prefix re-matching, and AP from the interpolated
precision at each recall step m / G.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def iou_matrix(dets, gts):
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    d = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in dets], dtype=np.float64)
    g = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in gts], dtype=np.float64)
    ix = np.minimum(d[:, None, 2], g[None, :, 2]) - np.maximum(d[:, None, 0], g[None, :, 0])
    iy = np.minimum(d[:, None, 3], g[None, :, 3]) - np.maximum(d[:, None, 1], g[None, :, 1])
    inter = np.where((ix > 0) & (iy > 0), ix * iy, 0.0)
    area_d = (d[:, 2] - d[:, 0]) * (d[:, 3] - d[:, 1])
    area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    union = area_d[:, None] + area_g[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def greedy_tp(dets, gts, order, thr):
    """True-positive flags for detections visited in ``order``."""
    m = iou_matrix(dets, gts)
    free = [True] * len(gts)
    flags = []
    for i in order:
        cands = [(m[i, j], -j) for j in range(len(gts))
                 if free[j] and gts[j].cls == dets[i].cls and m[i, j] >= thr]
        if cands:
            _, neg_j = max(cands)
            free[-neg_j] = False
        flags.append(bool(cands))
    return flags


def sweep_ap(images, thr=0.5):
    """Pooled AP over ``[(dets, gts), ...]`` by brute force.

    For every prefix of the global score ranking the images are re-matched
    from scratch, giving TP counts per prefix; AP is then the mean of the
    interpolated precision at recall 1/G, 2/G, ..., 1.
    """
    ranked = sorted(((-d.score, img, i) for img, (dets, _) in enumerate(images) for i, d in enumerate(dets)))
    n_gt = sum(len(g) for _, g in images)
    if n_gt == 0:
        return 1.0 if not ranked else 0.0
    points = []
    for k in range(1, len(ranked) + 1):
        prefix = ranked[:k]
        tp = 0
        for img, (dets, gts) in enumerate(images):
            mine = sorted((s, i) for s, im, i in prefix if im == img)
            tp += sum(greedy_tp(dets, gts, [i for _, i in mine], thr))
        points.append((Fraction(tp, n_gt), Fraction(tp, k)))
    total = Fraction(0)
    for m in range(1, n_gt + 1):
        level = Fraction(m, n_gt)
        total += max((p for r, p in points if r >= level), default=Fraction(0))
    return float(total / n_gt)


def bin_ap(dets, gts, edges, thr=0.5):
    """Distance-binned AP by re-running the sweep on each bin's subset.

    A detection belongs to the bin of the ground truth it matched, else of
    the ground truth it overlaps most (lowest index on ties); detections
    overlapping nothing belong nowhere.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    m = iou_matrix(dets, gts)
    free = [True] * len(gts)
    owner = {}
    for i in order:
        cands = [(m[i, j], -j) for j in range(len(gts))
                 if free[j] and gts[j].cls == dets[i].cls and m[i, j] >= thr]
        if cands:
            j = -max(cands)[1]
            free[j] = False
            owner[i] = j
        elif len(gts) and m[i].max() > 0:
            owner[i] = int(np.argmax(m[i]))
    out = {}
    for b in range(len(edges) - 1):
        in_bin = [j for j, g in enumerate(gts) if edges[b] <= g.distance_m < edges[b + 1]]
        if not in_bin:
            continue
        sub_g = [gts[j] for j in in_bin]
        sub_d = [dets[i] for i in range(len(dets)) if owner.get(i) in in_bin]
        out[(edges[b], edges[b + 1])] = (sweep_ap([(sub_d, sub_g)], thr), len(sub_g), len(sub_d))
    unassignable = sum(1 for i in range(len(dets)) if i not in owner)
    return out, unassignable


def kid_one_block(x, y):
    """Unbiased MMD^2 with k(a, b) = (a.b / d + 1)^3, double loops."""
    m, d = len(x), len(x[0])

    def k(a, b):
        return (sum(p * q for p, q in zip(a, b)) / d + 1.0) ** 3

    xx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    yy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    xy = sum(k(x[i], y[j]) for i in range(m) for j in range(m)) / (m * m)
    return xx + yy - 2 * xy
