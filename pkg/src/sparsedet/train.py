"""Training loop: batched set-loss optimization with AdamW.

``train_one_epoch`` is the reusable core (the estimator facade calls it
directly); ``Trainer`` adds the config-driven orchestration used by the
CLI: synthetic data, per-epoch validation AP, logging with the config
hash, and a checkpoint after every epoch. Everything is deterministic
under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as datamod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, config_to_text
from .evaluation import COCO_THRESHOLDS, MapReport, detections_from_stage, map_report
from .exceptions import ConfigError, NumericError
from .losses import set_loss
from .model import DetectionModel
from .optim import AdamW, step_decay_lr


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_l1: float
    loss_giou: float
    lr: float
    val_ap: float | None = None
    val_ap50: float | None = None


def train_one_epoch(
    model: DetectionModel,
    optimizer: AdamW,
    scenes,
    rng: np.random.Generator,
    *,
    batch_size: int,
    flip: bool,
    lambda_cls: float = 2.0,
    lambda_l1: float = 5.0,
    lambda_giou: float = 2.0,
    alpha: float = 0.25,
    gamma: float = 2.0,
    epoch: int = 0,
) -> dict[str, float]:
    """One pass over ``scenes`` in shuffled batches; returns mean losses."""
    perm = rng.permutation(len(scenes))
    coins = rng.random(len(scenes)) < 0.5 if flip else np.zeros(len(scenes), dtype=bool)
    sums = {"total": 0.0, "cls": 0.0, "l1": 0.0, "giou": 0.0}
    steps = 0
    for lo in range(0, len(scenes), batch_size):
        sel = perm[lo : lo + batch_size]
        images, targets = [], []
        for offset, idx in enumerate(sel):
            scene = scenes[idx]
            if coins[lo + offset]:
                img, boxes = datamod.flip_horizontal(scene.image, scene.boxes)
            else:
                img, boxes = scene.image, scene.boxes
            images.append(img)
            targets.append((scene.labels, boxes))
        outputs = model.forward(np.stack(images))
        breakdown = set_loss(
            outputs, targets, lambda_cls, lambda_l1, lambda_giou, alpha, gamma
        )
        value = breakdown.total.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch}, step {steps}")
        model.zero_grad()
        breakdown.total.backward()
        optimizer.step()
        sums["total"] += value
        sums["cls"] += breakdown.cls
        sums["l1"] += breakdown.l1
        sums["giou"] += breakdown.giou
        steps += 1
    return {k: v / max(steps, 1) for k, v in sums.items()}


def evaluate_model(
    model: DetectionModel, scenes, batch_size: int = 16, thresholds=COCO_THRESHOLDS,
    score_floor: float = 0.0,
) -> MapReport:
    """NMS-free evaluation: last-stage outputs of every proposal."""
    all_dets, all_gts = [], []
    with ad.no_grad():
        for images, targets in datamod.batch_scenes(scenes, batch_size):
            outputs = model.forward(images)
            ids = list(range(len(all_dets), len(all_dets) + len(targets)))
            all_dets.extend(detections_from_stage(outputs[-1], ids, score_floor))
            all_gts.extend(targets)
    return map_report(all_dets, all_gts, thresholds)


class Trainer:
    """Config-driven training with validation, logging, and checkpoints."""

    def __init__(self, config: RunConfig, log=print):
        config.validate()
        self.config = config
        self.log = log
        self.model = DetectionModel(config.model, seed=config.seed)
        self.train_scenes = datamod.generate_dataset(
            config.dataset, 0, config.dataset.num_images
        )
        self.val_scenes = datamod.generate_dataset(
            config.dataset, config.dataset.num_images, config.num_val_images
        )
        self.optimizer = AdamW(
            self.model.named_parameters(),
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
        )
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        self.start_epoch = 0
        self.history: list[EpochStats] = []

    def resume_from(self, path) -> None:
        ckpt = load_checkpoint(path)
        self.model.load_state_dict(ckpt.params)
        try:
            self.optimizer.load_state_dict(
                {"step": ckpt.opt_step, "m": ckpt.opt_m, "v": ckpt.opt_v}
            )
        except (KeyError, ValueError) as e:
            raise ConfigError(f"optimizer state does not match model: {e}") from e
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        self.start_epoch = ckpt.epoch
        self.log(f"resumed from {path} at epoch {self.start_epoch}")

    def _checkpoint(self, epoch: int) -> Checkpoint:
        opt_state = self.optimizer.state_dict()
        return Checkpoint(
            config_text=config_to_text(self.config),
            params=self.model.state_dict(),
            opt_m=opt_state["m"],
            opt_v=opt_state["v"],
            opt_step=opt_state["step"],
            epoch=epoch,
            rng_state=self.rng.bit_generator.state,
        )

    def train(self, stop_at_ap50: float | None = None) -> list[EpochStats]:
        cfg = self.config
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tag = config_hash(cfg)
        self.log(f"config {tag}: {len(self.train_scenes)} train / {len(self.val_scenes)} val scenes")
        for epoch in range(self.start_epoch, cfg.epochs):
            lr = step_decay_lr(cfg.learning_rate, epoch, cfg.lr_decay_epochs)
            self.optimizer.lr = lr
            means = train_one_epoch(
                self.model,
                self.optimizer,
                self.train_scenes,
                self.rng,
                batch_size=cfg.batch_size,
                flip=cfg.flip,
                lambda_cls=cfg.lambda_cls,
                lambda_l1=cfg.lambda_l1,
                lambda_giou=cfg.lambda_giou,
                alpha=cfg.focal_alpha,
                gamma=cfg.focal_gamma,
                epoch=epoch,
            )
            report = None
            if self.val_scenes:
                report = evaluate_model(self.model, self.val_scenes, cfg.batch_size)
            stats = EpochStats(
                epoch=epoch,
                loss_total=means["total"],
                loss_cls=means["cls"],
                loss_l1=means["l1"],
                loss_giou=means["giou"],
                lr=lr,
                val_ap=report.ap if report else None,
                val_ap50=report.ap50 if report else None,
            )
            self.history.append(stats)
            ap_text = (
                f" val_AP={report.ap:.4f} val_AP50={report.ap50:.4f}" if report else ""
            )
            self.log(
                f"[{tag}] epoch {epoch:3d} lr={lr:.2e} "
                f"loss={stats.loss_total:.4f} (cls={stats.loss_cls:.4f} "
                f"l1={stats.loss_l1:.4f} giou={stats.loss_giou:.4f}){ap_text}"
            )
            ckpt = self._checkpoint(epoch + 1)
            save_checkpoint(out_dir / f"checkpoint_ep{epoch:03d}.bin", ckpt)
            save_checkpoint(out_dir / "checkpoint_last.bin", ckpt)
            if stop_at_ap50 is not None and report and report.ap50 >= stop_at_ap50:
                self.log(f"reached AP50 {report.ap50:.4f} >= {stop_at_ap50}, stopping early")
                break
        return self.history


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[DetectionModel, RunConfig]:
    """Rebuild the configured model from a checkpoint's config echo."""
    from .config import config_from_text

    cfg = config_from_text(ckpt.config_text)
    model = DetectionModel(cfg.model, seed=cfg.seed)
    model.load_state_dict(ckpt.params)
    return model, cfg
