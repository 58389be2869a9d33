"""Detection loss (classification + box regression) and its exact gradient.

The classification term is binary cross-entropy over positive anchors plus
hard-mined negatives; the regression term is smooth-L1 over positive
anchors' offsets. Both are differentiated by hand through the detector so
the flat gradient vector is exact, not autodiff output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .detector import (AnchorConfig, DetectorParams, backward_params,
                       encode_boxes, forward_cached, pairwise_iou)
from .netops import sigmoid, softplus

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.4
NEGATIVE_RATIO = 3      # mined negatives per positive
NEGATIVE_FALLBACK_CAP = 64   # cap when a batch has no positives at all
SMOOTH_L1_BETA = 1.0


class TrainingFault(RuntimeError):
    """Non-finite numbers surfaced during training; carries batch/step context."""

    def __init__(self, message: str, batch_id: Optional[int] = None,
                 step: Optional[int] = None):
        super().__init__(message)
        self.batch_id = batch_id
        self.step = step


@dataclass(frozen=True)
class AnchorTargets:
    """Per-anchor labels and encoded regression targets.

    reg_targets rows are meaningful only where labels == POSITIVE.
    """

    labels: np.ndarray       # (n_anchors,) int8 in {POSITIVE, NEGATIVE, IGNORE}
    reg_targets: np.ndarray  # (n_anchors, 4) float64

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8)
        regs = np.asarray(self.reg_targets, dtype=np.float64)
        if labels.ndim != 1 or regs.shape != (labels.size, 4):
            raise ValueError("labels and reg_targets shapes disagree")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "reg_targets", regs)

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.labels == POSITIVE))


@dataclass(frozen=True)
class LossReport:
    l_cls: float
    l_reg: float
    l_task: float
    l_ewc: float
    l_total: float


def _report(l_cls: float, l_reg: float, l_ewc: float = 0.0) -> LossReport:
    l_task = l_cls + l_reg
    return LossReport(l_cls=float(l_cls), l_reg=float(l_reg), l_task=float(l_task),
                      l_ewc=float(l_ewc), l_total=float(l_task + l_ewc))


@dataclass
class Batch:
    """A training batch: images paired with their anchor targets."""

    images: list
    targets: list
    batch_id: int = 0

    def __post_init__(self):
        if len(self.images) != len(self.targets):
            raise ValueError("images and targets must pair up")
        if not self.images:
            raise ValueError("batch must be nonempty")


def match_anchors(gt_boxes: np.ndarray, anchors: np.ndarray) -> AnchorTargets:
    """Label every anchor against the ground-truth boxes.

    An anchor is positive when its best IoU is >= 0.5 or when it is some
    gt's argmax-IoU anchor (ties to the lower anchor index; only if that
    IoU is > 0). Anchors with best IoU < 0.4 are negative, the rest are
    ignored. Positive anchors regress toward their own best-IoU gt (ties
    to the lower gt index). With no gt boxes every anchor is negative.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = anchors.shape[0]
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    regs = np.zeros((n, 4), dtype=np.float64)
    if gt.shape[0] == 0:
        return AnchorTargets(labels, regs)
    m = pairwise_iou(gt, anchors)          # (n_gt, n_anchors)
    best_iou = m.max(axis=0)
    labels[(best_iou >= NEGATIVE_IOU) & (best_iou < POSITIVE_IOU)] = IGNORE
    labels[best_iou >= POSITIVE_IOU] = POSITIVE
    for g in range(gt.shape[0]):
        a = int(np.argmax(m[g]))
        if m[g, a] > 0.0:
            labels[a] = POSITIVE
    pos = np.flatnonzero(labels == POSITIVE)
    if pos.size:
        assigned = np.argmax(m[:, pos], axis=0)
        regs[pos] = encode_boxes(gt[assigned], anchors[pos])
    return AnchorTargets(labels, regs)


def build_targets(annotations, anchors: np.ndarray) -> AnchorTargets:
    """Targets from a list of GroundTruthBox annotations."""
    boxes = np.asarray([g.box for g in annotations], dtype=np.float64).reshape(-1, 4)
    return match_anchors(boxes, anchors)


def _smooth_l1(d: np.ndarray) -> np.ndarray:
    a = np.abs(d)
    return np.where(a < SMOOTH_L1_BETA, 0.5 * d * d, a - 0.5 * SMOOTH_L1_BETA)


def _smooth_l1_grad(d: np.ndarray) -> np.ndarray:
    return np.where(np.abs(d) < SMOOTH_L1_BETA, d, np.sign(d))


def _loss_core(params: DetectorParams, batch: Batch, config: AnchorConfig,
               want_grad: bool):
    """Shared forward (and optional backward) over a batch.

    Classification averages BCE over positives plus the hardest negatives
    (3 per positive, pooled over the batch; with no positives, all
    negatives capped at 64). Regression averages the per-anchor 4-term
    smooth-L1 sum over positive anchors. Returns (LossReport, grad|None).
    """
    preds, caches = [], []
    for image in batch.images:
        pred, cache = forward_cached(params, image, config)
        if not (np.isfinite(pred.logits).all() and np.isfinite(pred.deltas).all()):
            raise TrainingFault(
                f"non-finite activations in batch {batch.batch_id}",
                batch_id=batch.batch_id)
        preds.append(pred)
        caches.append(cache)

    n_anchors = preds[0].logits.size
    logits = np.concatenate([p.logits for p in preds])
    labels = np.concatenate([t.labels for t in batch.targets])
    if labels.size != logits.size:
        raise ValueError("targets do not match the anchor count")

    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    n_pos = pos.size
    if n_pos > 0:
        n_neg = min(NEGATIVE_RATIO * n_pos, neg.size)
    else:
        n_neg = min(NEGATIVE_FALLBACK_CAP, neg.size)
    if n_neg > 0:
        neg_losses = softplus(logits[neg])  # BCE toward target 0
        # hardest first; ties broken by global anchor index for determinism
        order = np.lexsort((neg, -neg_losses))
        sel_neg = neg[order[:n_neg]]
    else:
        sel_neg = neg[:0]

    n_sel = n_pos + sel_neg.size
    if n_sel > 0:
        bce_pos = softplus(logits[pos]) - logits[pos]   # target 1
        bce_neg = softplus(logits[sel_neg])             # target 0
        l_cls = (np.sum(bce_pos) + np.sum(bce_neg)) / n_sel
    else:
        l_cls = 0.0

    l_reg = 0.0
    diffs = []
    if n_pos > 0:
        total = 0.0
        for i, (pred, tgt) in enumerate(zip(preds, batch.targets)):
            p = np.flatnonzero(tgt.labels == POSITIVE)
            d = pred.deltas[p] - tgt.reg_targets[p]
            diffs.append((i, p, d))
            total += float(np.sum(_smooth_l1(d)))
        l_reg = total / n_pos

    report = _report(l_cls, l_reg)
    if not want_grad:
        return report, None

    dlogits_all = np.zeros_like(logits)
    if n_sel > 0:
        dlogits_all[pos] = (sigmoid(logits[pos]) - 1.0) / n_sel
        dlogits_all[sel_neg] = sigmoid(logits[sel_neg]) / n_sel
    grad = np.zeros(params.k, dtype=np.float64)
    ddeltas_by_image = {i: np.zeros((n_anchors, 4)) for i in range(len(preds))}
    for i, p, d in diffs:
        ddeltas_by_image[i][p] = _smooth_l1_grad(d) / n_pos
    for i, cache in enumerate(caches):
        dlog = dlogits_all[i * n_anchors:(i + 1) * n_anchors]
        grad += backward_params(params, cache, dlog, ddeltas_by_image[i])
    return report, grad


def detection_loss(params: DetectorParams, batch: Batch,
                   config: AnchorConfig) -> LossReport:
    """Task loss L_cls + L_reg for one batch (no consolidation term)."""
    report, _ = _loss_core(params, batch, config, want_grad=False)
    return report


def loss_and_gradient(params: DetectorParams, batch: Batch, config: AnchorConfig,
                      state=None):
    """One fused forward/backward: returns (LossReport, flat gradient).

    `state` may be a ConsolidationState or a sequence of them; their
    quadratic penalties and penalty gradients are added on top of the task
    terms. States with lambda == 0 leave both untouched (identical code
    path to no state at all, so the two are bitwise equivalent).
    """
    report, grad = _loss_core(params, batch, config, want_grad=True)
    l_ewc = 0.0
    for st in _as_states(state):
        if st.lam == 0.0:
            continue
        l_ewc += st.penalty(params.values)
        grad += st.penalty_gradient(params.values)
    if l_ewc:
        report = _report(report.l_cls, report.l_reg, l_ewc)
    return report, grad


def loss_gradient(params: DetectorParams, batch: Batch, config: AnchorConfig,
                  state=None) -> np.ndarray:
    """Exact gradient of the total loss with respect to every parameter."""
    _, grad = loss_and_gradient(params, batch, config, state)
    return grad


def total_loss(params: DetectorParams, batch: Batch, config: AnchorConfig,
               state) -> LossReport:
    """Fine-tuning objective: task loss plus the consolidation penalty."""
    report, _ = _loss_core(params, batch, config, want_grad=False)
    l_ewc = sum(st.penalty(params.values) for st in _as_states(state))
    return _report(report.l_cls, report.l_reg, l_ewc)


def _as_states(state) -> Sequence:
    if state is None:
        return ()
    if isinstance(state, (list, tuple)):
        return state
    return (state,)
