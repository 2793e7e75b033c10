"""
Multi-task objective and the staged freeze schedule.

loss = mean CE over the batch + mean squared centre error over the batch positives,
with unit weights. Training runs heads-only, then heads plus the final backbone stage,
then everything; the checkpoint with the best validation score is kept.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from services.augmentation import AugmentParams, augment, sample_rng
from services.evaluation import pr_at, predict_samples
from services.model import (
    ModelParams, classify, extract_features, localize, trainable_selector,
)
from services.optim import adam_step, set_trainable, zero_grad
from services.records import DEFECT, NO_DEFECT, Sample
from services.tensor import Tensor, as_tensor, backward, logsumexp, mul, no_grad
from utils.validation import TrainingError, ValidationError, check_finite, check_shape

logger = logging.getLogger(__name__)

Trainable = Literal["heads", "heads+tail", "all"]
Metric = Literal["val_loss", "f_at_r"]


@dataclass
class Batch:
    """Stacked images, labels in {1, 2} and normalized (x, y) targets (NaN on negatives)"""
    images: np.ndarray
    labels: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        check_shape("batch images", self.images.shape, (n, None, None))
        check_shape("batch targets", self.targets.shape, (n, 2))
        if not np.all(np.isin(self.labels, (DEFECT, NO_DEFECT))):
            raise ValidationError("batch labels must be 1 or 2")
        positive = self.labels == DEFECT
        if not np.all(np.isfinite(self.targets[positive])):
            raise ValidationError("every positive needs a target")
        if not np.all(np.isnan(self.targets[~positive])):
            raise ValidationError("negatives cannot carry a target")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Batch":
        if not samples:
            raise ValidationError("empty batch")
        images = np.stack([s.image for s in samples]).astype(np.float32)
        height, width = images.shape[1:]
        labels = np.array([s.annotation.label for s in samples], dtype=np.int64)
        targets = np.full((len(samples), 2), np.nan)
        for i, s in enumerate(samples):
            if s.annotation.is_positive:
                x, y = s.annotation.center_px
                targets[i] = (x / (width - 1), y / (height - 1))
        return cls(images=images, labels=labels, targets=targets)


class Stage(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(ge=1)
    lr: float = Field(ge=0)
    trainable: Trainable


class StageSchedule(BaseModel):
    """Consecutive stages; stage k covers the epochs right after stage k-1"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    stages: Tuple[Stage, ...] = Field(min_length=1)

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    def epoch_ranges(self) -> List[Tuple[int, int]]:
        """1-based inclusive (first, last) epoch of every stage"""
        ranges, start = [], 1
        for s in self.stages:
            ranges.append((start, start + s.epochs - 1))
            start += s.epochs
        return ranges

    def stage_of(self, epoch: int) -> int:
        for index, (first, last) in enumerate(self.epoch_ranges()):
            if first <= epoch <= last:
                return index
        raise ValidationError(f"epoch {epoch} outside the schedule")


def default_schedule(stage_epochs: Sequence[int] = (10, 10, 10),
                     lrs: Sequence[float] = (1e-3, 1e-4, 1e-4),
                     warm_start_epochs: int = 0, warm_start_lr: float = 1e-3) -> StageSchedule:
    """Heads-only, heads+tail, all; optionally preceded by an all-parameter warm start"""
    if len(stage_epochs) != 3 or len(lrs) != 3:
        raise ValidationError("the default schedule has exactly three stages")
    stages = []
    if warm_start_epochs > 0:
        stages.append(Stage(epochs=warm_start_epochs, lr=warm_start_lr, trainable="all"))
    for epochs, lr, trainable in zip(stage_epochs, lrs, ("heads", "heads+tail", "all")):
        stages.append(Stage(epochs=epochs, lr=lr, trainable=trainable))
    return StageSchedule(stages=tuple(stages))


class TrainSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(32, ge=1)
    seed: int = 0
    metric: Metric = "val_loss"
    select_r: float = Field(16.0, ge=0)
    eval_batch_size: int = Field(64, ge=1)
    augment: Optional[AugmentParams] = None


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    stage: int
    trainable: str
    lr: float
    train_loss: float
    val_loss: float
    val_metric: float


@dataclass
class TrainReport:
    records: List[EpochRecord] = field(default_factory=list)
    metric: str = "val_loss"
    selected_epoch: Optional[int] = None
    best_state: Optional[Dict[str, np.ndarray]] = None


def cross_entropy(scores, labels) -> Tensor:
    """
    CE(s; c) = log Σ_j exp(s_j) − s_c, row-wise.

    Args:
        scores: (2,) or (N, 2) scores for (defect, no-defect)
        labels: class or array of classes in {1, 2}

    Returns:
        Scalar for a single score vector, (N,) otherwise
    """
    scores = as_tensor(scores)
    check_finite("cross_entropy scores", scores.data)
    labels = np.atleast_1d(np.asarray(labels))
    if not np.all(np.isin(labels, (DEFECT, NO_DEFECT))):
        raise ValidationError(f"class labels must be 1 or 2, got {labels.tolist()}")
    single = scores.data.ndim == 1
    if single:
        scores = scores.reshape(1, 2)
    if scores.shape != (len(labels), 2):
        raise ValidationError(f"scores {scores.shape} do not match {len(labels)} labels")

    onehot = np.zeros(scores.shape, dtype=scores.dtype)
    onehot[np.arange(len(labels)), labels - 1] = 1.0
    picked = mul(scores, onehot).sum(axis=1)
    losses = logsumexp(scores, axis=1) - picked
    return losses.reshape(()) if single else losses


def multitask_objective(psi: Tensor, W_c: Tensor, W_r: Tensor,
                        labels: np.ndarray, targets: np.ndarray) -> Tensor:
    """Classification CE mean plus positives-only squared centre error mean"""
    n = len(labels)
    loss = cross_entropy(classify(psi, W_c), labels).sum() * (1.0 / n)
    positive = np.asarray(labels) == DEFECT
    n_pos = int(positive.sum())
    if n_pos == 0:
        return loss
    filled = np.where(positive[:, None], targets, 0.0).astype(psi.dtype)
    diff = localize(psi, W_r) - filled
    squared = mul(mul(diff, diff), positive[:, None].astype(psi.dtype))
    return loss + squared.sum() * (1.0 / n_pos)


def multitask_loss(batch: Batch, model: ModelParams, training: bool = True) -> Tensor:
    psi = extract_features(batch.images, model, training=training)
    return multitask_objective(psi, model["head.W_c"], model["head.W_r"], batch.labels, batch.targets)


def _batch_samples(samples: Sequence[Sample], params: Optional[AugmentParams],
                   seed: int, epoch: int) -> List[Sample]:
    if params is None:
        return list(samples)
    return [augment(s, params, sample_rng(seed, epoch, s.series_id, s.frame_index)) for s in samples]


def train_epoch(samples: Sequence[Sample], model: ModelParams, lr: float, trainable: Trainable,
                batch_size: int, rng: np.random.Generator, epoch: int = 1,
                augment_params: Optional[AugmentParams] = None, seed: int = 0) -> float:
    """
    One shuffled pass with Adam steps on the trainable set only.

    lr = 0 runs forward and backward passes but applies no update.

    Returns:
        Sample-weighted mean training loss
    """
    if not samples:
        raise ValidationError("training set is empty")
    selector = trainable_selector(model, trainable)
    set_trainable(model.all_params(), selector)
    heads_only = trainable == "heads"
    order = rng.permutation(len(samples))

    total, seen = 0.0, 0
    for batch_index, start in enumerate(range(0, len(order), batch_size)):
        chosen = [samples[i] for i in order[start:start + batch_size]]
        batch = Batch.from_samples(_batch_samples(chosen, augment_params, seed, epoch))

        if heads_only:
            with no_grad():
                psi = extract_features(batch.images, model, training=True, trainable=selector)
        else:
            psi = extract_features(batch.images, model, training=True, trainable=selector)
        if not np.all(np.isfinite(psi.data)):
            zero_grad(model.all_params())
            raise TrainingError("non-finite features", epoch=epoch, batch_index=batch_index)
        loss = multitask_objective(psi, model["head.W_c"], model["head.W_r"], batch.labels, batch.targets)

        value = loss.item()
        if not np.isfinite(value):
            zero_grad(model.all_params())
            raise TrainingError(f"non-finite loss {value}", epoch=epoch, batch_index=batch_index)
        backward(loss)
        if lr > 0:
            adam_step(model.all_params(), lr)
        else:
            zero_grad(model.all_params())

        total += value * len(batch)
        seen += len(batch)
    return total / seen


def validation_loss(samples: Sequence[Sample], model: ModelParams, batch_size: int = 64) -> float:
    """Inference-mode multitask loss averaged over samples"""
    total = 0.0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = Batch.from_samples(samples[start:start + batch_size])
            total += multitask_loss(batch, model, training=False).item() * len(batch)
    return total / len(samples)


def select_best(records: Sequence[EpochRecord], metric: Metric = "val_loss") -> int:
    """Epoch with the lowest val loss or the highest F at r; ties keep the earliest"""
    if not records:
        raise ValidationError("no completed epochs to select from")
    if metric == "val_loss":
        key = lambda rec: rec.val_loss
    elif metric == "f_at_r":
        key = lambda rec: -rec.val_metric
    else:
        raise ValidationError(f"unknown selection metric '{metric}'")
    best = records[0]
    for rec in records[1:]:
        if key(rec) < key(best):
            best = rec
    return best.epoch


def run_schedule(train_samples: Sequence[Sample], val_samples: Sequence[Sample],
                 schedule: StageSchedule, model: ModelParams, settings: TrainSettings,
                 on_epoch: Optional[Callable[[EpochRecord, ModelParams], None]] = None) -> TrainReport:
    """
    Run every stage in order, validating after each epoch.

    Args:
        train_samples: training samples (augmented on the fly when settings.augment is set)
        val_samples: validation samples, never augmented
        schedule: stages to run
        model: parameters, updated in place
        settings: batch size, seed and selection metric
        on_epoch: called after each epoch, e.g. to write a checkpoint

    Returns:
        TrainReport with one record per epoch and the state of the selected epoch
    """
    if not val_samples:
        raise ValidationError("validation set is empty")
    report = TrainReport(metric=settings.metric)
    truths = [s.annotation for s in val_samples]
    epoch = 0
    for stage_index, stage in enumerate(schedule.stages):
        logger.info(f"🎯 Stage {stage_index + 1}/{len(schedule.stages)}: trainable={stage.trainable} "
                    f"lr={stage.lr:g} epochs={stage.epochs}")
        for _ in range(stage.epochs):
            epoch += 1
            rng = np.random.default_rng(np.random.SeedSequence([settings.seed, epoch]))
            train_loss = train_epoch(train_samples, model, stage.lr, stage.trainable,
                                     settings.batch_size, rng, epoch=epoch,
                                     augment_params=settings.augment, seed=settings.seed)
            val_loss = validation_loss(val_samples, model, settings.eval_batch_size)
            preds = predict_samples(val_samples, model, settings.eval_batch_size)
            val_metric = pr_at(preds, truths, settings.select_r).f_measure

            record = EpochRecord(epoch=epoch, stage=stage_index + 1, trainable=stage.trainable,
                                 lr=stage.lr, train_loss=train_loss, val_loss=val_loss,
                                 val_metric=val_metric)
            report.records.append(record)
            logger.info(f"📈 epoch={epoch} stage={record.stage} trainable={stage.trainable} lr={stage.lr:g} "
                        f"train_loss={train_loss:.5f} val_loss={val_loss:.5f} val_f={val_metric:.4f}")

            if select_best(report.records, settings.metric) == epoch:
                report.selected_epoch = epoch
                report.best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            if on_epoch is not None:
                on_epoch(record, model)

    logger.info(f"✅ Training finished; selected epoch {report.selected_epoch} by {settings.metric}")
    return report
