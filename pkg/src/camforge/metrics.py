"""Detection metrics: IoU, greedy matching, AP@0.5IOU, distance bins, generalization matrices.

Matching sorts detections by descending score (ties keep input order) and
lets each take the unmatched same-class ground truth with the highest IoU,
provided IoU >= threshold.  AP uses all-points interpolation and is
accumulated in exact rational arithmetic, so identical inputs give
identical floats regardless of platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .scene_io import BoundingBox, LabelSet


class EvalError(ValueError):
    pass


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class DetectionRecord:
    det_index: int
    score: float
    is_tp: bool
    matched_gt: Optional[int] = None
    image: int = 0


@dataclass
class MatchResult:
    """Per-detection outcomes in sweep order plus tp/fp/fn counts."""

    records: list[DetectionRecord]
    num_gt: int
    iou_threshold: float = 0.5

    @property
    def tp(self) -> int:
        return sum(r.is_tp for r in self.records)

    @property
    def fp(self) -> int:
        return len(self.records) - self.tp

    @property
    def fn(self) -> int:
        return self.num_gt - self.tp


def _sweep_order(dets: Sequence[BoundingBox]) -> list[int]:
    for i, d in enumerate(dets):
        if d.score is None:
            raise EvalError(f"detection {i} has no score")
    # sorted() is stable: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match(dets: LabelSet, gts: LabelSet, threshold: float = 0.5, image: int = 0) -> MatchResult:
    det_boxes = list(dets)
    gt_boxes = list(gts)
    taken = [False] * len(gt_boxes)
    records = []
    for i in _sweep_order(det_boxes):
        d = det_boxes[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gt_boxes):
            if taken[j] or g.cls != d.cls:
                continue
            o = iou(d, g)
            if o >= threshold and o > best_iou:
                best, best_iou = j, o
        if best is not None:
            taken[best] = True
        records.append(DetectionRecord(i, d.score, best is not None, best, image))
    return MatchResult(records, len(gt_boxes), threshold)


def merge_matches(results: Iterable[MatchResult]) -> MatchResult:
    """Pool per-image results; the AP sweep re-sorts by score (stable)."""
    results = list(results)
    records = [r for res in results for r in res.records]
    thr = results[0].iou_threshold if results else 0.5
    return MatchResult(records, sum(r.num_gt for r in results), thr)


@dataclass
class PrCurve:
    points: list[tuple[float, float]] = field(default_factory=list)
    ap: float = 0.0


def average_precision(result: MatchResult) -> PrCurve:
    """All-points interpolated AP over a score-descending sweep.

    AP = sum_i (r_i - r_{i-1}) * max_{j >= i} p_j.  No ground truth and
    no detections gives 1.0; no ground truth with detections gives 0.0.
    """
    n_gt = result.num_gt
    recs = sorted(result.records, key=lambda r: -r.score)
    if n_gt == 0:
        return PrCurve([], 1.0 if not recs else 0.0)
    recall, precision = [], []
    tp = 0
    for k, r in enumerate(recs, 1):
        tp += r.is_tp
        recall.append(Fraction(tp, n_gt))
        precision.append(Fraction(tp, k))
    # precision envelope, right to left
    env = precision[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = Fraction(0)
    prev = Fraction(0)
    for r, p in zip(recall, env):
        ap += (r - prev) * p
        prev = r
    return PrCurve([(float(r), float(p)) for r, p in zip(recall, precision)], float(ap))


@dataclass
class DistanceBinAp:
    lo: float
    hi: float
    ap: float
    num_gt: int
    num_det: int


def _bin_of(d: float, edges: Sequence[float]) -> Optional[int]:
    for b in range(len(edges) - 1):
        if edges[b] <= d < edges[b + 1]:
            return b
    return None


def _check_edges(edges: Sequence[float]) -> list[float]:
    edges = list(edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise EvalError("distance bin edges must be ascending with at least two entries")
    return edges


def assign_bins(dets: LabelSet, gts: LabelSet, edges: Sequence[float], threshold: float = 0.5,
                image: int = 0) -> tuple[dict[int, list[DetectionRecord]], list[Optional[int]], int]:
    """Match one image and attribute every detection to a distance bin.

    Matched detections go to their ground truth's bin.  Unmatched ones go to
    the bin of the ground truth they overlap most (ties: lowest index);
    those overlapping nothing are unassignable and only counted.

    Returns:
        (records per bin, bin of each ground truth, unassignable count)
    """
    gt_boxes = list(gts)
    for j, g in enumerate(gt_boxes):
        if g.distance_m is None:
            raise EvalError(f"ground truth {j} in {gts.scene_id!r} has no distance")
    gt_bin = [_bin_of(g.distance_m, edges) for g in gt_boxes]
    res = match(dets, gts, threshold, image)
    det_boxes = list(dets)
    per_bin: dict[int, list[DetectionRecord]] = {}
    unassignable = 0
    for rec in res.records:
        if rec.matched_gt is not None:
            target = rec.matched_gt
        else:
            overlaps = [iou(det_boxes[rec.det_index], g) for g in gt_boxes]
            if not overlaps or max(overlaps) <= 0.0:
                unassignable += 1
                continue
            target = overlaps.index(max(overlaps))
        b = gt_bin[target]
        if b is not None:
            per_bin.setdefault(b, []).append(rec)
    return per_bin, gt_bin, unassignable


def ap_by_distance_pooled(pairs: Iterable[tuple[LabelSet, LabelSet]], bin_edges_m: Sequence[float],
                          threshold: float = 0.5) -> tuple[list[DistanceBinAp], int]:
    """Distance-binned AP over many (detections, ground truth) image pairs."""
    edges = _check_edges(bin_edges_m)
    recs: dict[int, list[DetectionRecord]] = {}
    n_gt: dict[int, int] = {}
    unassignable = 0
    for image, (dets, gts) in enumerate(pairs):
        per_bin, gt_bin, lost = assign_bins(dets, gts, edges, threshold, image)
        unassignable += lost
        for b, rs in per_bin.items():
            recs.setdefault(b, []).extend(rs)
        for b in gt_bin:
            if b is not None:
                n_gt[b] = n_gt.get(b, 0) + 1
    out = []
    for b in range(len(edges) - 1):
        if not n_gt.get(b):
            continue
        rs = recs.get(b, [])
        curve = average_precision(MatchResult(rs, n_gt[b], threshold))
        out.append(DistanceBinAp(edges[b], edges[b + 1], curve.ap, n_gt[b], len(rs)))
    return out, unassignable


def ap_by_distance(dets: LabelSet, gts: LabelSet, bin_edges_m: Sequence[float], threshold: float = 0.5,
                   ) -> tuple[list[DistanceBinAp], int]:
    """AP per distance bin ``[edge_k, edge_k+1)`` for one image.

    Bins without ground truth are omitted.  Returns the bins and the number
    of unassignable detections (no overlap with any ground truth).
    """
    return ap_by_distance_pooled([(dets, gts)], bin_edges_m, threshold)


# ---------------------------------------------------------------------------
# generalization matrices


@dataclass
class GeneralizationMatrix:
    """AP for every (eval, train) pair; ``None`` marks an unreported cell."""

    train_sets: list[str]
    eval_sets: list[str]
    ap: dict[tuple[str, str], Optional[float]]
    object_counts: dict[str, int]
    asymmetries: list[tuple[str, str, float]] = field(default_factory=list)

    def cell(self, eval_set: str, train_set: str) -> Optional[float]:
        return self.ap[(eval_set, train_set)]


def build_matrix(cells: Iterable[dict], threshold: float = 0.05) -> GeneralizationMatrix:
    """Assemble cells ``{train, eval, ap, count}`` into a complete grid.

    ``count`` is the object count of the training set (the column header).
    A pair is reported as asymmetric when both directions are present and
    differ by more than ``threshold``.  Each report ``(A, B, gap)`` is
    oriented so that A -> B is the stronger direction:
    ``gap = ap(train A -> eval B) - ap(train B -> eval A) >= 0``.
    """
    train_sets: list[str] = []
    eval_sets: list[str] = []
    ap: dict[tuple[str, str], Optional[float]] = {}
    counts: dict[str, int] = {}
    for c in cells:
        tr, ev = c["train"], c["eval"]
        if (ev, tr) in ap:
            raise EvalError(f"duplicate cell train={tr} eval={ev}")
        val = c.get("ap")
        if val is not None and not (0.0 <= val <= 1.0 and math.isfinite(val)):
            raise EvalError(f"cell train={tr} eval={ev}: AP {val} outside [0, 1]")
        ap[(ev, tr)] = val
        if tr not in train_sets:
            train_sets.append(tr)
        if ev not in eval_sets:
            eval_sets.append(ev)
        cnt = c.get("count")
        if cnt is not None:
            if counts.get(tr, cnt) != cnt:
                raise EvalError(f"conflicting object counts for {tr}: {counts[tr]} vs {cnt}")
            counts[tr] = int(cnt)
    # rows follow the column order where the sets coincide
    eval_sets.sort(key=lambda e: (train_sets.index(e) if e in train_sets else len(train_sets)))
    missing = [(tr, ev) for ev in eval_sets for tr in train_sets if (ev, tr) not in ap]
    if missing:
        raise EvalError("missing cells: " + ", ".join(f"train={t} eval={e}" for t, e in missing))
    both = [s for s in train_sets if s in eval_sets]
    asym = []
    for i, a in enumerate(both):
        for b in both[i + 1:]:
            ab, ba = ap[(b, a)], ap[(a, b)]
            if ab is None or ba is None:
                continue
            if abs(ab - ba) > threshold:
                asym.append((a, b, ab - ba) if ab >= ba else (b, a, ba - ab))
    return GeneralizationMatrix(train_sets, eval_sets, ap, counts, asym)


def render_matrix(m: GeneralizationMatrix) -> str:
    """Plain-text table: columns are training sets, rows evaluation sets."""
    def head(name):
        return f"{name} ({m.object_counts[name]})" if name in m.object_counts else name

    cols = [head(t) for t in m.train_sets]
    rows = [head(e) for e in m.eval_sets]
    corner = "Eval \\ Train"
    w0 = max(len(corner), *(len(r) for r in rows))
    widths = [max(len(c), 6) for c in cols]
    lines = [" | ".join([corner.ljust(w0)] + [c.rjust(w) for c, w in zip(cols, widths)])]
    lines.append("-+-".join(["-" * w0] + ["-" * w for w in widths]))
    for ev, label in zip(m.eval_sets, rows):
        vals = []
        for tr, w in zip(m.train_sets, widths):
            v = m.ap[(ev, tr)]
            vals.append(("--" if v is None else f"{v:.4f}").rjust(w))
        lines.append(" | ".join([label.ljust(w0)] + vals))
    return "\n".join(lines) + "\n"


def render_asymmetries(m: GeneralizationMatrix) -> str:
    lines = []
    for a, b, gap in m.asymmetries:
        lines.append(f"asymmetry {a}->{b}={m.ap[(b, a)]:.4f} {b}->{a}={m.ap[(a, b)]:.4f} gap={gap:+.4f}")
    return "\n".join(lines) + ("\n" if lines else "")
