"""Contest-style scoring of mitosis detections.

A detection is correct when its centroid lies within 32 native-resolution
pixels (inclusive) of an unmatched ground-truth centroid. Matching is
greedy in descending score order; precision, recall, and F-measure follow
from the pooled TP/FP/FN counts. For small frames an exhaustive maximum
matching is computed alongside the greedy count so any shortfall of the
greedy strategy is visible in the report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

MATCH_RADIUS = 32.0

# Frames up to this many detections x gts also get an exhaustive
# maximum-matching TP count as a cross-check on the greedy matcher.
EXHAUSTIVE_LIMIT = 10


@dataclass
class FrameEval:
    """Matching outcome for a single frame."""

    frame_id: str
    tp: int
    fp: int
    fn: int
    matches: List[Tuple[int, int]]  # (detection index, gt index)
    exhaustive_tp: Optional[int] = None  # only for small frames

    @property
    def precision(self) -> float:
        return precision(self.tp, self.fp)

    @property
    def recall(self) -> float:
        return recall(self.tp, self.fn)

    @property
    def f_measure(self) -> float:
        return f_measure(self.precision, self.recall)


@dataclass
class EvalReport:
    """Pooled counts and metrics with the per-frame breakdown attached."""

    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_measure: float
    frames: List[FrameEval] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall,
            "f_measure": self.f_measure,
            "frames": [{
                "frame_id": f.frame_id, "tp": f.tp, "fp": f.fp, "fn": f.fn,
                "precision": f.precision, "recall": f.recall,
                "f_measure": f.f_measure,
                "matches": [[int(d), int(g)] for d, g in f.matches],
                "exhaustive_tp": f.exhaustive_tp,
            } for f in self.frames],
        }


def precision(tp: int, fp: int) -> float:
    """TP / (TP + FP); 0 when there are no detections."""
    if tp < 0 or fp < 0:
        raise ValueError("counts must be non-negative")
    return tp / (tp + fp) if tp + fp > 0 else 0.0


def recall(tp: int, fn: int) -> float:
    """TP / (TP + FN); 0 when there are no ground truths."""
    if tp < 0 or fn < 0:
        raise ValueError("counts must be non-negative")
    return tp / (tp + fn) if tp + fn > 0 else 0.0


def f_measure(p: float, r: float) -> float:
    """Harmonic mean 2PR / (P + R); 0 when both rates vanish."""
    if p + r == 0:
        return 0.0
    return 2.0 * p * r / (p + r)


def match_detections(centroids: Sequence[Tuple[float, float]],
                     scores: Sequence[float],
                     gt_centroids: Sequence[Tuple[float, float]],
                     radius: float = MATCH_RADIUS,
                     inclusive: bool = True
                     ) -> Tuple[List[Tuple[int, int]], int, int, int]:
    """Greedy centroid matching; returns (matches, tp, fp, fn).

    Detections are processed in descending score order (ties keep input
    order); each claims the nearest ground truth not already matched
    within `radius` pixels, distance ties resolved toward the lower gt
    index. Indices in the match pairs refer to the input sequences.
    """
    det = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    sc = np.asarray(scores, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_centroids, dtype=np.float64).reshape(-1, 2)
    if det.shape[0] != sc.shape[0]:
        raise ValueError("one score per detection required")

    matches: List[Tuple[int, int]] = []
    taken = np.zeros(len(gt), dtype=bool)
    order = np.argsort(-sc, kind="stable")
    for di in order:
        if not len(gt):
            break
        dist = np.hypot(gt[:, 0] - det[di, 0], gt[:, 1] - det[di, 1])
        dist[taken] = np.inf
        gi = int(dist.argmin())  # argmin takes the lowest index on ties
        hit = dist[gi] <= radius if inclusive else dist[gi] < radius
        if hit:
            taken[gi] = True
            matches.append((int(di), gi))
    tp = len(matches)
    return matches, tp, len(det) - tp, len(gt) - tp


def max_matching_tp(centroids: Sequence[Tuple[float, float]],
                    gt_centroids: Sequence[Tuple[float, float]],
                    radius: float = MATCH_RADIUS,
                    inclusive: bool = True) -> int:
    """Maximum-cardinality matching within the radius (order-free optimum)."""
    det = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt_centroids, dtype=np.float64).reshape(-1, 2)
    if len(det) == 0 or len(gt) == 0:
        return 0
    dist = np.hypot(det[:, None, 0] - gt[None, :, 0],
                    det[:, None, 1] - gt[None, :, 1])
    feasible = (dist <= radius) if inclusive else (dist < radius)
    rows, cols = linear_sum_assignment(feasible.astype(np.float64),
                                       maximize=True)
    return int(feasible[rows, cols].sum())


def evaluate_frame(frame_id: str,
                   centroids: Sequence[Tuple[float, float]],
                   scores: Sequence[float],
                   gt_centroids: Sequence[Tuple[float, float]],
                   radius: float = MATCH_RADIUS,
                   inclusive: bool = True) -> FrameEval:
    matches, tp, fp, fn = match_detections(centroids, scores, gt_centroids,
                                           radius, inclusive)
    exhaustive = None
    if len(centroids) <= EXHAUSTIVE_LIMIT and len(gt_centroids) <= EXHAUSTIVE_LIMIT:
        exhaustive = max_matching_tp(centroids, gt_centroids, radius,
                                     inclusive)
    return FrameEval(frame_id=frame_id, tp=tp, fp=fp, fn=fn,
                     matches=matches, exhaustive_tp=exhaustive)


def evaluate_frames(detections_by_frame: Dict[str, Tuple[Sequence, Sequence]],
                    gt_by_frame: Dict[str, Sequence],
                    radius: float = MATCH_RADIUS,
                    inclusive: bool = True) -> EvalReport:
    """Score every frame present in either mapping and pool the counts.

    `detections_by_frame` maps frame id -> (centroids, scores); missing
    frames count as zero detections, missing gt as zero ground truths.
    """
    frames: List[FrameEval] = []
    for frame_id in sorted(set(detections_by_frame) | set(gt_by_frame)):
        centroids, scores = detections_by_frame.get(frame_id, ((), ()))
        gts = gt_by_frame.get(frame_id, ())
        frames.append(evaluate_frame(frame_id, centroids, scores, gts,
                                     radius, inclusive))
    return aggregate(frames)


def aggregate(frames: Sequence[FrameEval]) -> EvalReport:
    """Micro-average: pool TP/FP/FN over frames, then compute the metrics."""
    tp = sum(f.tp for f in frames)
    fp = sum(f.fp for f in frames)
    fn = sum(f.fn for f in frames)
    p = precision(tp, fp)
    r = recall(tp, fn)
    return EvalReport(tp=tp, fp=fp, fn=fn, precision=p, recall=r,
                      f_measure=f_measure(p, r), frames=list(frames))


# Published MITOS-ATYPIA contest context: this method's reported score and
# the three strongest contest entries it was compared against.
PUBLISHED_SCORES = (
    ("two-stream detector (published)", 0.507),
    ("contest winner", 0.356),
    ("later published system A", 0.437),
    ("later published system B", 0.442),
)


def compare_to_published(report: EvalReport) -> str:
    """Plain-text table of this run's F-measure beside published scores.

    Context only; no assertion is made against the published figures.
    """
    width = max(len(name) for name, _ in PUBLISHED_SCORES)
    width = max(width, len("this run"))
    lines = [f"{'system':<{width}}  F-measure",
             f"{'this run':<{width}}  {report.f_measure:.3f}"]
    for name, score in PUBLISHED_SCORES:
        lines.append(f"{name:<{width}}  {score:.3f}")
    return "\n".join(lines)
