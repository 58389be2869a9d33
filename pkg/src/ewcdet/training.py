"""SGD training loop with momentum, weight decay, and global-norm clipping,
plus the two-phase scenario: train on domain A, consolidate, then fine-tune
on domain B with and without the quadratic penalty."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .consolidation import ConsolidationState, consolidate
from .detector import AnchorConfig, Architecture, DetectorParams, generate_anchors, init_params
from .evaluation import EvalReport, ForgettingReport, evaluate, forgetting_report
from .losses import (Batch, LossReport, TrainingFault, build_targets,
                     loss_and_gradient)

MAX_CONSECUTIVE_FAULTS = 3


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings (one phase = `epochs` passes)."""

    learning_rate: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 4
    g_max: float = 20.0
    lam: float = 0.0
    seed: int = 0
    fisher_mode: str = "squared"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.g_max <= 0:
            raise ValueError("g_max must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.fisher_mode not in ("squared", "as_printed"):
            raise ValueError(f"unknown fisher_mode {self.fisher_mode!r}")


@dataclass(frozen=True)
class OptimizerState:
    velocity: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, k: int) -> "OptimizerState":
        return cls(velocity=np.zeros(k, dtype=np.float64), step_count=0)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: LossReport
    evals: dict            # name -> EvalReport (empty if not evaluated)
    max_grad_norm: float   # largest post-clip gradient norm this epoch


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if record.epoch != len(self.records) + 1:
            raise ValueError("epochs must be contiguous from 1")
        self.records.append(record)


def clip_gradients(grad: np.ndarray, g_max: float) -> np.ndarray:
    """Rescale so the global L2 norm is at most g_max; direction preserved."""
    if g_max <= 0:
        raise ValueError("g_max must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(grad).all():
        raise TrainingFault("non-finite gradient passed to clip_gradients")
    norm = float(np.linalg.norm(grad))
    if norm > g_max:
        return grad * (g_max / norm)
    return grad


def sgd_step(params: DetectorParams, grad: np.ndarray, opt: OptimizerState,
             cfg: TrainConfig):
    """One momentum-SGD update with decoupled-from-nothing weight decay:
    g' = grad + wd * theta; v' = mu * v + g'; theta' = theta - lr * v'."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape or opt.velocity.shape != grad.shape:
        raise ValueError("gradient/velocity length does not match parameters")
    g = grad + cfg.weight_decay * params.values
    v = cfg.momentum * opt.velocity + g
    new_values = params.values - cfg.learning_rate * v
    if not np.isfinite(new_values).all():
        raise TrainingFault("non-finite parameter update",
                            step=opt.step_count)
    return params.with_values(new_values), OptimizerState(v, opt.step_count + 1)


def train_phase(dataset, cfg: TrainConfig, init: DetectorParams,
                state=None, *, anchor_config: AnchorConfig,
                eval_on: Optional[dict] = None):
    """Run one training phase over `dataset` and return (params, TrainLog).

    Supplying a consolidation state turns the phase into regularized
    fine-tuning. Data order is reshuffled every epoch from cfg.seed, so a
    run is fully reproducible from (seed, config, dataset). `eval_on` maps
    names to test datasets evaluated at every epoch end.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    anchors = generate_anchors(anchor_config)
    targets = [build_targets(anns, anchors) for anns in dataset.annotations]
    params, opt = init, OptimizerState.zeros(init.k)
    log = TrainLog()
    consecutive_faults = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(dataset))
        reports = []
        max_norm = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Batch([dataset.images[i] for i in idx],
                          [targets[i] for i in idx], batch_id=step)
            try:
                report, grad = loss_and_gradient(params, batch, anchor_config, state)
                grad = clip_gradients(grad, cfg.g_max)
                params, opt = sgd_step(params, grad, opt, cfg)
            except TrainingFault as fault:
                consecutive_faults += 1
                if consecutive_faults > MAX_CONSECUTIVE_FAULTS:
                    raise TrainingFault(
                        f"aborting: {consecutive_faults} consecutive faulted steps "
                        f"(last: {fault})", batch_id=batch.batch_id, step=step) from fault
                step += 1
                continue
            consecutive_faults = 0
            max_norm = max(max_norm, float(np.linalg.norm(grad)))
            reports.append(report)
            step += 1
        evals = {}
        if eval_on:
            evals = {name: evaluate(params, ds, anchor_config)
                     for name, ds in eval_on.items()}
        log.append(EpochRecord(epoch=epoch, loss=_mean_reports(reports),
                               evals=evals, max_grad_norm=max_norm))
    return params, log


def _mean_reports(reports) -> LossReport:
    if not reports:
        return LossReport(0.0, 0.0, 0.0, 0.0, 0.0)
    n = len(reports)
    return LossReport(
        l_cls=sum(r.l_cls for r in reports) / n,
        l_reg=sum(r.l_reg for r in reports) / n,
        l_task=sum(r.l_task for r in reports) / n,
        l_ewc=sum(r.l_ewc for r in reports) / n,
        l_total=sum(r.l_total for r in reports) / n)


@dataclass
class ArmResult:
    name: str
    params: DetectorParams
    log: TrainLog
    eval_a: EvalReport
    eval_b: EvalReport
    forgetting_a: ForgettingReport


@dataclass
class ScenarioReport:
    cfg: TrainConfig
    theta_a: DetectorParams
    log_a: TrainLog
    eval_a_on_a: EvalReport
    eval_a_on_b: EvalReport
    state: ConsolidationState
    arms: dict  # "baseline" / "proposed" -> ArmResult


def _check_domain(pair, name: str):
    train, test = pair
    if train.split != "train" or test.split != "test":
        raise ValueError(f"domain {name} must be a (train, test) pair of splits")
    return train, test


def run_scenario(domain_a, domain_b, cfg: TrainConfig, *,
                 anchor_config: AnchorConfig,
                 architecture: Optional[Architecture] = None,
                 arms: tuple = ("baseline", "proposed"),
                 eval_per_epoch: bool = True) -> ScenarioReport:
    """Full two-phase experiment.

    Trains on domain A, snapshots and consolidates, then fine-tunes on
    domain B once without regularization (baseline) and once with the
    penalty at cfg.lam (proposed). Both fine-tunes start from the same
    snapshot and seed, so the lam=0 proposed arm is bitwise the baseline.
    """
    train_a, test_a = _check_domain(domain_a, "A")
    train_b, test_b = _check_domain(domain_b, "B")
    arch = architecture or Architecture.for_config(anchor_config)
    eval_on = {"A": test_a, "B": test_b} if eval_per_epoch else None

    theta_0 = init_params(cfg.seed, arch)
    theta_a, log_a = train_phase(train_a, cfg, theta_0,
                                 anchor_config=anchor_config, eval_on=eval_on)
    eval_a_on_a = evaluate(theta_a, test_a, anchor_config)
    eval_a_on_b = evaluate(theta_a, test_b, anchor_config)
    state = consolidate(theta_a, train_a, anchor_config, lam=cfg.lam,
                        mode=cfg.fisher_mode)

    results = {}
    for arm in arms:
        arm_state = None if arm == "baseline" else state
        params, log = train_phase(train_b, cfg, theta_a, arm_state,
                                  anchor_config=anchor_config, eval_on=eval_on)
        eval_a = evaluate(params, test_a, anchor_config)
        eval_b = evaluate(params, test_b, anchor_config)
        results[arm] = ArmResult(
            name=arm, params=params, log=log, eval_a=eval_a, eval_b=eval_b,
            forgetting_a=forgetting_report(eval_a_on_a, eval_a))
    return ScenarioReport(cfg=cfg, theta_a=theta_a, log_a=log_a,
                          eval_a_on_a=eval_a_on_a, eval_a_on_b=eval_a_on_b,
                          state=state, arms=results)


@dataclass(frozen=True)
class SweepRow:
    lam: float
    mr2_a: float
    mr2_b: float
    drift: float


@dataclass
class SweepResult:
    rows: list
    recommended_lambda: float
    theta_a: DetectorParams
    state: ConsolidationState


def lambda_sweep(domain_a, domain_b, lambdas, cfg: TrainConfig, *,
                 anchor_config: AnchorConfig,
                 architecture: Optional[Architecture] = None,
                 pretrained: Optional[tuple] = None) -> SweepResult:
    """Fine-tune once per lambda against a shared snapshot and importance.

    Domain A training and the importance pass run once; each grid value
    re-runs only the fine-tune. Rows come back sorted by ascending lambda
    with the Reasonable-bucket MR on both domains and the parameter drift
    from the snapshot. `pretrained` may supply (theta_a, state) from an
    earlier run to skip phase A.
    """
    lambdas = [float(l) for l in lambdas]
    if any(l < 0 for l in lambdas):
        raise ValueError("lambda values must be nonnegative")
    train_a, test_a = _check_domain(domain_a, "A")
    train_b, test_b = _check_domain(domain_b, "B")
    arch = architecture or Architecture.for_config(anchor_config)
    if pretrained is not None:
        theta_a, state = pretrained
    else:
        theta_a, _ = train_phase(train_a, cfg, init_params(cfg.seed, arch),
                                 anchor_config=anchor_config)
        state = consolidate(theta_a, train_a, anchor_config, lam=0.0,
                            mode=cfg.fisher_mode)
    rows = []
    for lam in sorted(lambdas):
        arm_state = state.with_lambda(lam) if lam > 0 else None
        params, _ = train_phase(train_b, cfg, theta_a, arm_state,
                                anchor_config=anchor_config)
        ev_a = evaluate(params, test_a, anchor_config)
        ev_b = evaluate(params, test_b, anchor_config)
        drift = float(np.linalg.norm(params.values - theta_a.values))
        rows.append(SweepRow(lam=lam,
                             mr2_a=_reasonable(ev_a), mr2_b=_reasonable(ev_b),
                             drift=drift))
    best = min(rows, key=lambda r: ((r.mr2_a + r.mr2_b) / 2, r.lam))
    return SweepResult(rows=rows, recommended_lambda=best.lam,
                       theta_a=theta_a, state=state)


def _reasonable(report: EvalReport) -> float:
    value = report.mr2.get("Reasonable")
    return float("nan") if value is None else float(value)
