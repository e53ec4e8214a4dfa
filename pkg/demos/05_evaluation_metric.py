"""
Centroid matching, precision/recall/F-measure, and score aggregation
====================================================================

"""

# A detection counts as a true positive when its centroid lies within
# 32 pixels of a ground-truth mitosis (inclusive). Matching is greedy
# by detection score; each ground truth can be claimed once.
from mitodet import evaluation

gts = [(100.0, 100.0), (300.0, 100.0)]
dets = [(110.0, 100.0), (302.0, 98.0), (500.0, 500.0)]
scores = [0.9, 0.8, 0.7]

matches, tp, fp, fn = evaluation.match_detections(dets, scores, gts)
print("tp", tp, "fp", fp, "fn", fn, "matches (det, gt):", matches)

# The radius test is inclusive: exactly 32.0 pixels away still counts.
_, tp, fp, fn = evaluation.match_detections(
    [(32.0, 0.0)], [1.0], [(0.0, 0.0)])
print("boundary distance 32.0 -> tp:", tp)

# Greedy matching can be suboptimal when detections compete for the
# same ground truths. For small frames an exhaustive assignment is also
# computed as a diagnostic upper bound; the reported counts stay greedy.
dets = [(10.0, 0.0), (0.0, 0.0)]
scores = [0.9, 0.5]
gts = [(12.0, 0.0), (40.0, 0.0)]
_, tp, fp, fn = evaluation.match_detections(dets, scores, gts)
print("greedy tp:", tp, "exhaustive tp:",
      evaluation.max_matching_tp(dets, gts))

# Precision, recall, and F-measure with the usual degenerate-case
# conventions (0 when the denominator is 0).
p = evaluation.precision(tp=8, fp=8)
r = evaluation.recall(tp=8, fn=8)
print("P", p, "R", r, "F", round(evaluation.f_measure(p, r), 4))

# Per-frame counts pool across frames before computing the final
# scores (micro averaging), matching how the contest ranks entries.
frames = [
    evaluation.evaluate_frame("A03_00", [(5.0, 5.0)], [1.0], [(5.0, 5.0)]),
    evaluation.evaluate_frame("A03_01", [(9.0, 9.0), (200.0, 200.0)],
                              [0.9, 0.8], [(9.0, 9.0)]),
]
report = evaluation.aggregate(frames)
print("pooled:", report.tp, report.fp, report.fn,
      "F =", round(report.f_measure, 4))

# compare_to_published renders this run next to the published
# leaderboard rows for eyeballing.
print()
print(evaluation.compare_to_published(report))
