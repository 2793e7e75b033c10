"""
Margin-based evaluation and the single-image latency harness.

A positive frame is a true positive only when the defect class is predicted AND the
regressed centre lies within r pixels of the annotated centre; otherwise it is a false
negative. Detections on defect-free frames are false positives.
"""
import logging
import math
import platform
import time
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
import psutil

from services.model import ModelParams, Prediction, parameter_count, predict, predict_batch
from services.records import DEFECT, Annotation, Sample
from utils.validation import ValidationError

logger = logging.getLogger(__name__)

MIN_BENCH_REPS = 10


class MatchTag(str, Enum):
    TP = "TP"
    FP = "FP"
    FN = "FN"
    TN = "TN"


@dataclass(frozen=True)
class MatchOutcome:
    tag: MatchTag
    distance_px: Optional[float] = None


@dataclass(frozen=True)
class PRPoint:
    r: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def f_measure(self) -> float:
        return f_measure(self.precision, self.recall)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class LatencyReport:
    median_ms: float
    p90_ms: float
    timings_ms: List[float]
    warmup: int
    device: str
    batch_size: int = 1
    parameter_count: int = 0
    label: str = ""

    @property
    def reps(self) -> int:
        return len(self.timings_ms)


def _distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def match(pred: Prediction, truth: Annotation, r: float) -> MatchOutcome:
    """Tag one prediction against its annotation at margin r (pixels)"""
    if r < 0:
        raise ValidationError(f"error margin must be non-negative, got {r}")
    detected = pred.predicted_class == DEFECT
    if not truth.is_positive:
        return MatchOutcome(MatchTag.FP if detected else MatchTag.TN)
    if not detected:
        return MatchOutcome(MatchTag.FN)
    distance = _distance(pred.center_px, truth.center_px)
    return MatchOutcome(MatchTag.TP if distance <= r else MatchTag.FN, distance)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def f_measure(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def pr_at(preds: Sequence[Prediction], truths: Sequence[Annotation], r: float) -> PRPoint:
    counts = {tag: 0 for tag in MatchTag}
    for pred, truth in zip(preds, truths):
        counts[match(pred, truth, r).tag] += 1
    tp, fp, fn, tn = (counts[t] for t in (MatchTag.TP, MatchTag.FP, MatchTag.FN, MatchTag.TN))
    return PRPoint(r=float(r), precision=_ratio(tp, tp + fp), recall=_ratio(tp, tp + fn),
                   tp=tp, fp=fp, fn=fn, tn=tn)


def pr_curve(preds: Sequence[Prediction], truths: Sequence[Annotation],
             r_grid: Sequence[float]) -> List[PRPoint]:
    """
    Precision and recall at every margin of `r_grid`.

    Args:
        preds: predictions aligned with `truths`
        truths: ground-truth annotations
        r_grid: margins in pixels of the evaluation image

    Returns:
        One PRPoint per margin, in grid order
    """
    if len(preds) != len(truths):
        raise ValidationError(f"{len(preds)} predictions for {len(truths)} annotations")
    if not preds:
        raise ValidationError("cannot evaluate an empty prediction set")
    return [pr_at(preds, truths, r) for r in r_grid]


def classification_accuracy(preds: Sequence[Prediction], truths: Sequence[Annotation]) -> float:
    if len(preds) != len(truths) or not preds:
        raise ValidationError("predictions and annotations must be aligned and nonempty")
    hits = sum(1 for p, t in zip(preds, truths) if p.predicted_class == t.label)
    return hits / len(preds)


def default_r_grid(image_size: int) -> List[float]:
    """Margins 0, 5, ..., 120 on a 224-pixel image, rescaled to `image_size`"""
    return [k * 5 * image_size / 224 for k in range(25)]


def predict_samples(samples: Sequence[Sample], model: ModelParams, batch_size: int = 64) -> List[Prediction]:
    preds: List[Prediction] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        preds.extend(predict_batch(np.stack([s.image for s in chunk]), model))
    return preds


def device_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    cores = psutil.cpu_count(logical=False) or psutil.cpu_count()
    return f"{cpu} {cores}c {platform.system()} python{platform.python_version()} numpy{np.__version__}"


def _pin_single_cpu():
    """Restrict this process to one CPU; returns the previous affinity or None"""
    process = psutil.Process()
    if not hasattr(process, "cpu_affinity"):
        return None
    try:
        previous = process.cpu_affinity()
        process.cpu_affinity(previous[:1])
        return previous
    except (psutil.Error, OSError) as e:
        logger.debug(f"CPU pinning unavailable: {e}")
        return None


def latency_bench(model: ModelParams, images: Sequence[np.ndarray], warmup: int = 5,
                  reps: int = 50, pin_cpu: bool = True, label: str = "") -> LatencyReport:
    """Time `reps` batch-size-1 forwards after `warmup` untimed ones"""
    if reps < MIN_BENCH_REPS:
        raise ValidationError(f"latency benchmark needs at least {MIN_BENCH_REPS} reps, got {reps}")
    if warmup < 0:
        raise ValidationError(f"warmup must be non-negative, got {warmup}")
    if len(images) == 0:
        raise ValidationError("latency benchmark needs at least one image")

    previous = _pin_single_cpu() if pin_cpu else None
    try:
        for i in range(warmup):
            predict(images[i % len(images)], model)
        timings = []
        for i in range(reps):
            image = images[i % len(images)]
            start = time.perf_counter()
            predict(image, model)
            timings.append((time.perf_counter() - start) * 1000.0)
    finally:
        if previous is not None:
            psutil.Process().cpu_affinity(previous)

    report = LatencyReport(
        median_ms=float(np.median(timings)),
        p90_ms=float(np.percentile(timings, 90)),
        timings_ms=timings,
        warmup=warmup,
        device=device_descriptor(),
        parameter_count=parameter_count(model),
        label=label,
    )
    logger.info(f"⏱️ Latency {label or 'model'}: median {report.median_ms:.2f} ms, p90 {report.p90_ms:.2f} ms")
    return report
