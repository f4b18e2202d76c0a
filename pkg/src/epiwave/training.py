"""Detection-phase training: joint three-level objective over contiguous
segment windows, validation F2 tracking with early stopping, ablation
switches, and the training-curve log.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .data import SegmentSet
from .errors import ConfigError, DataValidationError, TrainingDivergedError
from .metrics import confusion, f_beta
from .model import AblationFlags, DetectionModel, joint_loss
from .pretraining import RepresentationModel, ContrastiveConfig


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_windows: int = 4  # windows per optimizer step
    seq_len: int = 32  # contiguous segments per window
    lr: float = 1e-3
    schedule: str = "cosine"  # or "constant"
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    freeze_encoder: bool = False
    early_stop_patience: int = 5  # epochs without val-F2 improvement; 0 disables
    discriminator_hidden: int = 32
    cross_threshold: float = 0.05
    inner_threshold: float = 0.1
    val_fraction: float = 0.15  # tail of the training span held out per epoch
    positive_weight: float = 1.0  # optional BCE up-weighting of positives (1 = off)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.seq_len < 1 or self.batch_windows < 1:
            raise ConfigError("epochs >= 0, seq_len >= 1, batch_windows >= 1 required")

    def level_weights(self) -> dict:
        if self.ablation.no_hierarchy:
            return {"channel": 1.0, "region": 0.0, "patient": 0.0}
        return {"channel": 1.0, "region": 1.0, "patient": 1.0}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = self.ablation.to_dict()
        return d


def _weighted_bce_loss(predictions: dict, labels: dict, weights: dict,
                       positive_weight: float) -> torch.Tensor:
    if positive_weight == 1.0:
        return joint_loss(predictions, labels, weights)
    total = None
    eps = 1e-7
    for level, probs in predictions.items():
        p = probs.clamp(eps, 1 - eps)
        y = labels[level].to(p.dtype)
        term = -(positive_weight * y * torch.log(p)
                 + (1 - y) * torch.log1p(-p)).sum() * weights.get(level, 1.0)
        total = term if total is None else total + term
    return total


def _windows(n_segments: int, seq_len: int) -> np.ndarray:
    """Start indices of non-overlapping contiguous windows (short tail dropped)."""
    if n_segments < seq_len:
        return np.array([0]) if n_segments >= 1 else np.array([], dtype=int)
    return np.arange(0, n_segments - seq_len + 1, seq_len)


def _labels_for(segments: SegmentSet, start: int, length: int) -> dict:
    sl = slice(start, start + length)
    return {
        "channel": torch.from_numpy(segments.channel_labels[sl].copy()),
        "region": torch.from_numpy(segments.region_labels[sl].copy()),
        "patient": torch.from_numpy(segments.patient_labels[sl].copy()),
    }


def validation_f2(model: DetectionModel, segments: SegmentSet) -> float:
    """Channel-level F2 (fraction scale) over a span at the 0.5 threshold."""
    scores = model.score_segments(segments.data)
    tp, fp, tn, fn = confusion(scores["channel"], segments.channel_labels)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return f_beta(precision, recall, 2.0)


@dataclass
class TrainResult:
    model: DetectionModel
    history: dict
    best_epoch: int
    best_val_f2: float


def train(pretrained: RepresentationModel | None, train_segments: SegmentSet,
          valid_segments: SegmentSet | None, config: TrainConfig) -> TrainResult:
    """Optimize the joint objective; keeps and restores the best
    validation-F2 parameters (channel level).

    With ablation.no_bcpc the representation encoder starts from a fresh
    random init even if a pretrained model is passed.
    """
    if valid_segments is None:
        n_val = max(1, int(train_segments.n_segments * config.val_fraction))
        if train_segments.n_segments - n_val < 1:
            raise DataValidationError("not enough segments to split off validation")
        valid_segments = train_segments.take(
            np.arange(train_segments.n_segments - n_val, train_segments.n_segments))
        train_segments = train_segments.take(
            np.arange(train_segments.n_segments - n_val))

    torch.manual_seed(config.seed)
    if config.ablation.no_bcpc or pretrained is None:
        repr_cfg = pretrained.config if pretrained is not None else ContrastiveConfig()
        repr_model = RepresentationModel(repr_cfg)
    else:
        repr_model = copy.deepcopy(pretrained)
    if train_segments.data.shape[2] != repr_model.config.segment_points:
        raise DataValidationError(
            f"segments have {train_segments.data.shape[2]} points, encoder expects "
            f"{repr_model.config.segment_points}")
    model = DetectionModel(
        repr_model, train_segments.channel_map,
        cross_threshold=config.cross_threshold,
        inner_threshold=config.inner_threshold,
        discriminator_hidden=config.discriminator_hidden,
        ablation=config.ablation)
    if config.freeze_encoder:
        for p in model.repr_model.parameters():
            p.requires_grad_(False)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    starts = _windows(train_segments.n_segments, config.seq_len)
    steps_per_epoch = max(1, int(np.ceil(len(starts) / config.batch_windows)))
    scheduler = None
    if config.schedule == "cosine" and config.epochs > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=config.epochs * steps_per_epoch)

    rng = np.random.default_rng(config.seed)
    data = torch.from_numpy(train_segments.data.copy())
    weights = config.level_weights()
    history = {"epoch": [], "train_loss": [], "val_f2": [], "lr": []}

    # best-state tracking starts at epoch 1: the untrained init is never a
    # candidate (its near-0.5 outputs can fluke a nonzero F2)
    best_state = copy.deepcopy(model.state_dict())
    best_f2 = -1.0
    best_epoch = 0
    since_best = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(starts))
        epoch_loss = 0.0
        for i in range(0, len(order), config.batch_windows):
            batch_starts = starts[order[i:i + config.batch_windows]]
            length = min(config.seq_len, train_segments.n_segments)
            batch = torch.stack([data[s:s + length] for s in batch_starts])
            window_labels = [_labels_for(train_segments, s, length) for s in batch_starts]
            labels = {key: torch.stack([wl[key] for wl in window_labels])
                      for key in ("channel", "region", "patient")}
            predictions = model(batch)
            if config.ablation.no_hierarchy:
                predictions = {"channel": predictions["channel"]}
            loss = _weighted_bce_loss(predictions, labels, weights,
                                      config.positive_weight)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss in epoch {epoch}", last_good_state=best_state)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if scheduler is not None:
                scheduler.step()
            epoch_loss += loss.item()
        val_f2 = validation_f2(model, valid_segments)
        history["epoch"].append(epoch)
        history["train_loss"].append(epoch_loss)
        history["val_f2"].append(val_f2)
        history["lr"].append(opt.param_groups[0]["lr"])
        if val_f2 > best_f2:
            best_f2, best_epoch, since_best = val_f2, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            if config.early_stop_patience and since_best >= config.early_stop_patience:
                break

    if config.epochs > 0:
        model.load_state_dict(best_state)
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_val_f2=best_f2)
