"""Miss-rate/FPPI evaluation with occlusion buckets and forgetting reports.

The headline number is the log-average miss rate over nine FPPI reference
points log-uniform in [1e-2, 1e0], computed per occlusion bucket after
filtering ground truth shorter than 50 px. Detections that land on
filtered (ignore) boxes are dropped from the counts entirely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .detector import AnchorConfig, DetectorParams, detect, iou

HEIGHT_MIN = 50.0        # gts must be strictly taller than this
MATCH_IOU = 0.5
MISS_FLOOR = 1e-4
FPPI_REFERENCES = tuple(np.logspace(-2.0, 0.0, 9))

# per-detection outcomes of the greedy pass
_TP, _FP, _DISCARD = 1, 0, -1


@dataclass(frozen=True)
class OcclusionBucket:
    """An occlusion-ratio interval; low_open selects (low, high] vs [low, high]."""

    name: str
    low: float
    high: float
    low_open: bool = False

    def contains(self, ratio: float) -> bool:
        if self.low_open:
            return self.low < ratio <= self.high
        return self.low <= ratio <= self.high


REASONABLE = OcclusionBucket("Reasonable", 0.0, 0.35)
BARE = OcclusionBucket("Bare", 0.0, 0.0)
PARTIAL = OcclusionBucket("Partial", 0.0, 0.35, low_open=True)
HEAVY = OcclusionBucket("Heavy", 0.35, 0.8, low_open=True)
BUCKETS = (REASONABLE, BARE, PARTIAL, HEAVY)


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    discarded: int


@dataclass(frozen=True)
class Counts:
    gt_used: int        # gts tall enough to ever be eligible
    gt_filtered: int    # gts removed by the height rule
    detections: int


@dataclass(frozen=True)
class EvalReport:
    """Per-bucket MR numbers (fractions in [0,1], None where a bucket has no
    eligible gts) plus the Reasonable-bucket miss-rate/FPPI curve."""

    mr2: dict
    curve: tuple
    counts: Counts
    dataset_id: str


@dataclass(frozen=True)
class BucketChange:
    mr2_before: float
    mr2_after: float
    absolute_increase: float
    percent_increase: Optional[float]


@dataclass(frozen=True)
class ForgettingReport:
    dataset_id: str
    rows: dict  # bucket name -> BucketChange


def _eligible(gt, bucket: OcclusionBucket) -> bool:
    return gt.height > HEIGHT_MIN and bucket.contains(gt.occlusion_ratio)


def _det_outcomes(dets, gts, bucket: OcclusionBucket):
    """One greedy pass over detections in descending score order.

    Returns (scores, outcomes, n_eligible) where outcomes[i] is the fate of
    the i-th detection in that order. Greedy matching is prefix-stable:
    the outcome of a detection never changes when lower-scored detections
    are appended, so any score threshold corresponds to a prefix of this
    ordering and reproduces match_detections at that threshold.
    """
    eligible = [g for g in gts if _eligible(g, bucket)]
    ignore = [g for g in gts if not _eligible(g, bucket)]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(eligible)
    scores = np.empty(len(dets))
    outcomes = np.empty(len(dets), dtype=np.int8)
    for rank, i in enumerate(order):
        det = dets[i]
        scores[rank] = det.score
        best_j, best_iou = -1, 0.0
        for j, g in enumerate(eligible):
            if matched[j]:
                continue
            v = iou(det.box, g.box)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= MATCH_IOU:
            matched[best_j] = True
            outcomes[rank] = _TP
            continue
        if any(iou(det.box, g.box) >= MATCH_IOU for g in ignore):
            outcomes[rank] = _DISCARD
        else:
            outcomes[rank] = _FP
    return scores, outcomes, len(eligible)


def match_detections(dets, gts, bucket: OcclusionBucket) -> MatchResult:
    """TP/FP/FN counts for one image at the given detection set.

    Ground truth shorter than the height floor or outside the bucket is
    ignore-class. Detections are processed in descending score order and
    matched greedily to the highest-IoU unmatched eligible gt at IoU >=
    0.5; failing that, a detection overlapping any ignore gt at IoU >= 0.5
    is discarded (neither TP nor FP); the remainder are FP.
    """
    _, outcomes, n_eligible = _det_outcomes(dets, gts, bucket)
    tp = int(np.sum(outcomes == _TP))
    fp = int(np.sum(outcomes == _FP))
    disc = int(np.sum(outcomes == _DISCARD))
    return MatchResult(tp=tp, fp=fp, fn=n_eligible - tp, discarded=disc)


def _sweep(dets_per_image, gts_per_image, bucket: OcclusionBucket):
    """Threshold sweep over all detection scores.

    Returns (miss_rates, fppis, n_eligible), one point per unique score in
    descending order; None in place of the arrays when the bucket has no
    eligible gts anywhere.
    """
    if len(dets_per_image) != len(gts_per_image) or not dets_per_image:
        raise ValueError("need matching, nonempty per-image lists")
    n_images = len(dets_per_image)
    all_scores, all_outcomes = [], []
    n_eligible = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        scores, outcomes, n_el = _det_outcomes(dets, gts, bucket)
        all_scores.append(scores)
        all_outcomes.append(outcomes)
        n_eligible += n_el
    if n_eligible == 0:
        return None, None, 0
    scores = np.concatenate(all_scores) if all_scores else np.empty(0)
    outcomes = np.concatenate(all_outcomes) if all_outcomes else np.empty(0, np.int8)
    if scores.size == 0:
        return np.empty(0), np.empty(0), n_eligible
    order = np.argsort(-scores, kind="stable")
    scores, outcomes = scores[order], outcomes[order]
    cum_tp = np.cumsum(outcomes == _TP)
    cum_fp = np.cumsum(outcomes == _FP)
    # last index of each unique threshold in the descending ordering
    is_last = np.empty(scores.size, dtype=bool)
    is_last[:-1] = scores[:-1] != scores[1:]
    is_last[-1] = True
    miss = (n_eligible - cum_tp[is_last]) / n_eligible
    fppi = cum_fp[is_last] / n_images
    return miss, fppi, n_eligible


def mr2(dets_per_image, gts_per_image, bucket: OcclusionBucket) -> Optional[float]:
    """Log-average miss rate over the FPPI reference points.

    At each reference, the sampled miss rate is the one achieved at the
    largest FPPI <= reference (1.0 when the sweep never gets that low).
    Sampled rates are floored at 1e-4 before geometric averaging. Returns
    None when the bucket has no eligible ground truth.
    """
    miss, fppi, n_eligible = _sweep(dets_per_image, gts_per_image, bucket)
    if n_eligible == 0:
        return None
    sampled = np.empty(len(FPPI_REFERENCES))
    for i, ref in enumerate(FPPI_REFERENCES):
        idx = np.flatnonzero(fppi <= ref) if fppi is not None and fppi.size else []
        # sweep order is descending threshold: fppi non-decreasing, miss
        # non-increasing, so the last qualifying point is the curve value
        sampled[i] = miss[idx[-1]] if len(idx) else 1.0
    sampled = np.maximum(sampled, MISS_FLOOR)
    return float(np.exp(np.mean(np.log(sampled))))


def evaluate(params: DetectorParams, dataset, config: AnchorConfig) -> EvalReport:
    """Detect over a test split and compute MR for all four buckets."""
    if dataset.split != "test":
        raise ValueError("evaluate expects a test split")
    dets_per_image = [detect(params, img, config) for img in dataset.images]
    gts_per_image = dataset.annotations
    mr = {b.name: mr2(dets_per_image, gts_per_image, b) for b in BUCKETS}
    miss, fppi, _ = _sweep(dets_per_image, gts_per_image, REASONABLE)
    if miss is None or miss.size == 0:
        curve = ()
    else:
        pts = sorted(zip(fppi.tolist(), miss.tolist()))
        curve = tuple((float(f), float(m)) for f, m in pts)
    gt_total = sum(len(g) for g in gts_per_image)
    gt_used = sum(1 for gts in gts_per_image for g in gts if g.height > HEIGHT_MIN)
    counts = Counts(gt_used=gt_used, gt_filtered=gt_total - gt_used,
                    detections=sum(len(d) for d in dets_per_image))
    return EvalReport(mr2=mr, curve=curve, counts=counts,
                      dataset_id=dataset.domain_id)


def forgetting_report(before: EvalReport, after: EvalReport) -> ForgettingReport:
    """Absolute and percent MR increase per bucket between two evaluations."""
    if before.dataset_id != after.dataset_id:
        raise ValueError("reports come from different datasets")
    rows = {}
    for name in before.mr2:
        b, a = before.mr2[name], after.mr2.get(name)
        if b is None or a is None:
            continue
        percent = (a - b) / b * 100.0 if b > 0 else None
        rows[name] = BucketChange(mr2_before=b, mr2_after=a,
                                  absolute_increase=a - b,
                                  percent_increase=percent)
    return ForgettingReport(dataset_id=before.dataset_id, rows=rows)
