"""Parameter-importance estimation and the quadratic consolidation penalty.

After training on the first distribution, each parameter's importance is
the per-example gradient of log(task loss + eps) at the converged weights,
accumulated over the dataset. The default "squared" mode accumulates
squared gradients (a Fisher-diagonal style estimate, nonnegative by
construction); "as_printed" accumulates raw gradients and is kept for
ablation since cancellation can drive entries negative.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .detector import AnchorConfig, DetectorParams, generate_anchors
from .losses import Batch, TrainingFault, loss_and_gradient, match_anchors

LOG_LOSS_EPS = 1e-12
MODES = ("squared", "as_printed")
MAX_SKIP_FRACTION = 0.01


@dataclass(frozen=True)
class ConsolidationState:
    """Snapshot of a finished training phase: everything the penalty needs.

    snapshot is the converged parameter vector, fisher the per-parameter
    importance diagonal, lam the stability/plasticity coefficient, and
    sample_count the number of examples whose gradients were accumulated.
    """

    snapshot: np.ndarray
    fisher: np.ndarray
    lam: float
    source_dataset_id: str
    sample_count: int
    mode: str = "squared"

    def __post_init__(self):
        snapshot = np.array(self.snapshot, dtype=np.float64, copy=True)
        fisher = np.array(self.fisher, dtype=np.float64, copy=True)
        if snapshot.ndim != 1 or fisher.shape != snapshot.shape:
            raise ValueError("snapshot and fisher must be equal-length vectors")
        if not (np.isfinite(snapshot).all() and np.isfinite(fisher).all()):
            raise ValueError("snapshot and fisher must be finite")
        if self.mode not in MODES:
            raise ValueError(f"unknown fisher mode {self.mode!r}")
        if self.mode == "squared" and np.any(fisher < 0.0):
            raise ValueError("squared-mode fisher must be elementwise nonnegative")
        if self.lam < 0.0:
            raise ValueError("lambda must be nonnegative")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")
        snapshot.flags.writeable = False
        fisher.flags.writeable = False
        object.__setattr__(self, "snapshot", snapshot)
        object.__setattr__(self, "fisher", fisher)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def k(self) -> int:
        return self.snapshot.size

    def with_lambda(self, lam: float) -> "ConsolidationState":
        return replace(self, lam=lam)

    def penalty(self, values: np.ndarray) -> float:
        """sum_i (lam/2) * fisher_i * (theta_i - snapshot_i)^2."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.snapshot.shape:
            raise ValueError("parameter vector length does not match snapshot")
        d = values - self.snapshot
        return 0.5 * self.lam * float(np.dot(self.fisher * d, d))

    def penalty_gradient(self, values: np.ndarray) -> np.ndarray:
        """Closed-form gradient lam * fisher * (theta - snapshot)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.snapshot.shape:
            raise ValueError("parameter vector length does not match snapshot")
        return self.lam * self.fisher * (values - self.snapshot)


def ewc_penalty(params, state) -> float:
    """Quadratic penalty of one state, or the sum over a sequence of states."""
    values = params.values if isinstance(params, DetectorParams) else params
    states = state if isinstance(state, (list, tuple)) else (state,)
    return sum(st.penalty(values) for st in states)


def penalty_gradient(params, state) -> np.ndarray:
    values = params.values if isinstance(params, DetectorParams) else params
    states = state if isinstance(state, (list, tuple)) else (state,)
    values = np.asarray(values, dtype=np.float64)
    grad = np.zeros_like(values)
    for st in states:
        grad += st.penalty_gradient(values)
    return grad


def accumulate_fisher(examples, mode: str = "squared"):
    """Fold per-example (task_loss, task_gradient) pairs into an importance vector.

    Each example contributes g = grad / (loss + eps), the gradient of
    log(loss + eps); squared mode accumulates g**2, as_printed accumulates
    g. The result is the running sum divided by the number of usable
    examples. Examples with non-finite gradients are skipped and counted.
    Returns (fisher, used, skipped).
    """
    if mode not in MODES:
        raise ValueError(f"unknown fisher mode {mode!r}")
    acc = None
    used = 0
    skipped = 0
    for loss, grad in examples:
        grad = np.asarray(grad, dtype=np.float64)
        if not (np.isfinite(loss) and np.isfinite(grad).all()):
            skipped += 1
            continue
        g = grad / (loss + LOG_LOSS_EPS)
        term = g * g if mode == "squared" else g
        acc = term if acc is None else acc + term
        used += 1
    if used == 0:
        raise ValueError("no usable examples to accumulate")
    return acc / used, used, skipped


def _fisher_with_count(params: DetectorParams, dataset, config: AnchorConfig,
                       mode: str):
    if len(dataset) == 0:
        raise ValueError("cannot compute importance over an empty dataset")
    anchors = generate_anchors(config)

    def per_example():
        for idx in range(len(dataset)):
            targets = match_anchors(
                np.asarray([g.box for g in dataset.annotations[idx]],
                           dtype=np.float64).reshape(-1, 4), anchors)
            batch = Batch([dataset.images[idx]], [targets], batch_id=idx)
            try:
                report, grad = loss_and_gradient(params, batch, config)
            except TrainingFault:
                yield np.nan, np.full(params.k, np.nan)
                continue
            yield report.l_task, grad

    fisher, used, skipped = accumulate_fisher(per_example(), mode)
    if skipped > MAX_SKIP_FRACTION * (used + skipped):
        raise TrainingFault(
            f"importance pass skipped {skipped}/{used + skipped} examples")
    return fisher, used


def compute_fisher(params: DetectorParams, dataset, config: AnchorConfig,
                   mode: str = "squared") -> np.ndarray:
    """Per-parameter importance of `dataset` at the (converged) params.

    One gradient evaluation per example, batch size 1, in dataset order.
    Fails if more than 1% of examples produce non-finite gradients.
    """
    fisher, _ = _fisher_with_count(params, dataset, config, mode)
    return fisher


def consolidate(params: DetectorParams, dataset, config: AnchorConfig,
                lam: float, mode: str = "squared") -> ConsolidationState:
    """Snapshot params and compute their importance over the dataset."""
    if lam < 0.0:
        raise ValueError("lambda must be nonnegative")
    fisher, used = _fisher_with_count(params, dataset, config, mode)
    return ConsolidationState(
        snapshot=params.values, fisher=fisher, lam=lam,
        source_dataset_id=getattr(dataset, "domain_id", "unknown"),
        sample_count=used, mode=mode)
