"""sparsedet: sparse set-prediction object detection with learnable proposals.

A fixed, learnable set of N boxes and N feature vectors replaces dense
candidate enumeration; iterative dynamic-interaction heads refine them,
one-to-one bipartite matching supervises them, and inference emits all N
scored boxes with no non-maximum suppression. Built on an in-package
reverse-mode autodiff engine (numpy arrays, 64-bit throughout).
"""

from .autodiff import Tensor, grad_check, no_grad
from .config import RunConfig, config_from_file, config_from_text, config_to_text, toy_config
from .data import DatasetSpec, SyntheticScene, generate_dataset, generate_scene, load_dataset, save_dataset
from .estimator import SparseProposalDetector
from .evaluation import Detection, MapReport, average_precision, map_report, recall_at_score
from .losses import LossBreakdown, focal_loss, giou_loss, l1_box_loss, set_loss
from .matching import MatchResult, brute_force_match, build_cost_matrix, hungarian
from .model import DetectionModel, ModelConfig, ProposalSet, StageOutput, init_proposals, roi_align
from .optim import AdamW, step_decay_lr
from .train import Trainer, evaluate_model, train_one_epoch

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "DatasetSpec",
    "Detection",
    "DetectionModel",
    "LossBreakdown",
    "MapReport",
    "MatchResult",
    "ModelConfig",
    "ProposalSet",
    "RunConfig",
    "SparseProposalDetector",
    "StageOutput",
    "SyntheticScene",
    "Tensor",
    "Trainer",
    "average_precision",
    "brute_force_match",
    "build_cost_matrix",
    "config_from_file",
    "config_from_text",
    "config_to_text",
    "evaluate_model",
    "focal_loss",
    "generate_dataset",
    "generate_scene",
    "giou_loss",
    "grad_check",
    "hungarian",
    "init_proposals",
    "l1_box_loss",
    "load_dataset",
    "map_report",
    "no_grad",
    "recall_at_score",
    "roi_align",
    "save_dataset",
    "set_loss",
    "step_decay_lr",
    "toy_config",
    "train_one_epoch",
    "__version__",
]
