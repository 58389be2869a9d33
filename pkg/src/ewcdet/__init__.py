"""Continual-learning toy detection: consolidation-regularized fine-tuning
of a small anchor detector, with miss-rate/FPPI evaluation."""

from .detector import (AnchorConfig, Architecture, Detection, DetectorParams,
                       RawPrediction, decode_boxes, detect, encode_boxes,
                       forward, generate_anchors, init_params, iou, nms)
from .losses import (AnchorTargets, Batch, LossReport, TrainingFault,
                     detection_loss, loss_and_gradient, loss_gradient,
                     match_anchors, total_loss)
from .consolidation import (ConsolidationState, accumulate_fisher,
                            compute_fisher, consolidate, ewc_penalty,
                            penalty_gradient)
from .training import (OptimizerState, ScenarioReport, SweepResult,
                       TrainConfig, TrainLog, clip_gradients, lambda_sweep,
                       run_scenario, sgd_step, train_phase)
from .synthdata import (DOMAIN_A, DOMAIN_B, Dataset, DatasetIOError,
                        DomainSpec, GroundTruthBox, dataset_hash,
                        generate_domain, load_dataset, save_dataset)
from .evaluation import (BUCKETS, BARE, HEAVY, PARTIAL, REASONABLE,
                         EvalReport, ForgettingReport, MatchResult,
                         OcclusionBucket, evaluate, forgetting_report,
                         match_detections, mr2)
from .checkpoint import (Checkpoint, CheckpointError, load_checkpoint,
                         load_consolidation, save_checkpoint,
                         save_consolidation, vector_hash)

__version__ = "0.1.0"
