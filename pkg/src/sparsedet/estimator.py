"""Scikit-learn style facade over the detector.

``SparseProposalDetector`` follows the estimator protocol (constructor
stores hyperparameters verbatim, ``fit`` returns self, ``get_params`` /
``set_params`` / ``clone`` work), so the detector drops into sklearn
tooling. ``fit`` takes images plus per-image box annotations, ``predict``
returns every proposal's scored box with no suppression, and ``score``
reports validation AP50.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .data import SyntheticScene
from .evaluation import detections_from_stage, map_report
from .model import DetectionModel, ModelConfig
from .optim import AdamW, step_decay_lr
from .train import train_one_epoch
from .validation import check_annotations, check_images


class SparseProposalDetector(BaseEstimator):
    """End-to-end trainable sparse detector with learnable proposals.

    Parameters mirror the run configuration; see the package README for
    their meaning. ``num_classes`` may be left None to infer the class
    count from the labels seen in ``fit``.
    """

    def __init__(
        self,
        num_proposals: int = 20,
        num_stages: int = 3,
        feature_dim: int = 64,
        roi_size: int = 7,
        num_attention_heads: int = 4,
        init_scheme: str = "image",
        interaction: str = "dynamic",
        num_classes: int | None = None,
        epochs: int = 20,
        batch_size: int = 8,
        learning_rate: float = 1e-3,
        weight_decay: float = 1e-4,
        lr_decay_epochs: tuple = (),
        lambda_cls: float = 2.0,
        lambda_l1: float = 5.0,
        lambda_giou: float = 2.0,
        focal_alpha: float = 0.25,
        focal_gamma: float = 2.0,
        flip: bool = True,
        random_state: int = 0,
    ):
        self.num_proposals = num_proposals
        self.num_stages = num_stages
        self.feature_dim = feature_dim
        self.roi_size = roi_size
        self.num_attention_heads = num_attention_heads
        self.init_scheme = init_scheme
        self.interaction = interaction
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lr_decay_epochs = lr_decay_epochs
        self.lambda_cls = lambda_cls
        self.lambda_l1 = lambda_l1
        self.lambda_giou = lambda_giou
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.flip = flip
        self.random_state = random_state

    def _model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(
            num_proposals=self.num_proposals,
            feature_dim=self.feature_dim,
            roi_size=self.roi_size,
            num_stages=self.num_stages,
            num_classes=n_classes,
            num_attention_heads=self.num_attention_heads,
            init_scheme=self.init_scheme,
            interaction=self.interaction,
        )

    def fit(self, X, y):
        """Train on images X (n, 3, H, W) and per-image annotations y.

        Each element of y is either an (G, 5) array of
        ``label cx cy w h`` rows or a (labels, boxes) pair, boxes in
        normalized center-size form.
        """
        X = check_images(X)
        targets = check_annotations(y, len(X))
        if self.num_classes is not None:
            n_classes = self.num_classes
        else:
            seen = [int(l.max()) for l, _ in targets if len(l)]
            n_classes = max(seen) + 1 if seen else 1
        self.n_classes_ = n_classes

        self.model_ = DetectionModel(self._model_config(n_classes), seed=self.random_state)
        optimizer = AdamW(
            self.model_.named_parameters(),
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
        )
        rng = np.random.default_rng(np.random.SeedSequence([self.random_state, 2]))
        scenes = [
            SyntheticScene(image=img, labels=lab, boxes=box, index=i)
            for i, (img, (lab, box)) in enumerate(zip(X, targets))
        ]
        self.loss_history_ = []
        for epoch in range(self.epochs):
            optimizer.lr = step_decay_lr(self.learning_rate, epoch, self.lr_decay_epochs)
            means = train_one_epoch(
                self.model_,
                optimizer,
                scenes,
                rng,
                batch_size=self.batch_size,
                flip=self.flip,
                lambda_cls=self.lambda_cls,
                lambda_l1=self.lambda_l1,
                lambda_giou=self.lambda_giou,
                alpha=self.focal_alpha,
                gamma=self.focal_gamma,
                epoch=epoch,
            )
            self.loss_history_.append(means["total"])
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This SparseProposalDetector instance is not fitted yet; call fit first."
            )

    def predict(self, X, score_floor: float = 0.0) -> list[np.ndarray]:
        """Per-image arrays of ``label, score, cx, cy, w, h`` rows.

        All proposals are emitted (descending score) with no suppression;
        ``score_floor`` optionally drops low-scoring rows.
        """
        self._check_fitted()
        X = check_images(X)
        out = []
        with ad.no_grad():
            for lo in range(0, len(X), max(self.batch_size, 1)):
                chunk = X[lo : lo + max(self.batch_size, 1)]
                stages = self.model_.forward(chunk)
                dets = detections_from_stage(stages[-1], range(len(chunk)), score_floor)
                for per_image in dets:
                    rows = np.array(
                        [[d.label, d.score, *d.box] for d in per_image], dtype=np.float64
                    ).reshape(-1, 6)
                    out.append(rows)
        return out

    def predict_scenes(self, X, score_floor: float = 0.0):
        """Like predict, but returns Detection objects per image."""
        self._check_fitted()
        X = check_images(X)
        out = []
        with ad.no_grad():
            for lo in range(0, len(X), max(self.batch_size, 1)):
                chunk = X[lo : lo + max(self.batch_size, 1)]
                stages = self.model_.forward(chunk)
                out.extend(
                    detections_from_stage(
                        stages[-1], range(lo, lo + len(chunk)), score_floor
                    )
                )
        return out

    def score(self, X, y) -> float:
        """Validation AP50 of the fitted detector on (X, y)."""
        self._check_fitted()
        X = check_images(X)
        targets = check_annotations(y, len(X))
        dets = self.predict_scenes(X)
        return map_report(dets, targets, thresholds=(0.5,)).ap50
