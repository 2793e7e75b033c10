"""CSV writers for training, evaluation, latency and dataset reports"""
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Sequence, Union

import pandas as pd

from services.evaluation import LatencyReport, PRPoint
from services.training import TrainReport

logger = logging.getLogger(__name__)

TRAIN_COLUMNS = ["epoch", "stage", "train_loss", "val_loss", "val_metric", "trainable", "lr", "selected"]
PR_COLUMNS = ["r", "precision", "recall", "tp", "fp", "fn", "tn", "f_measure"]
LATENCY_COLUMNS = ["label", "median_ms", "p90_ms", "reps", "warmup", "batch_size", "parameter_count", "device"]

PathLike = Union[str, Path]


def _write(df: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.6g", lineterminator="\n")
    logger.info(f"📝 Wrote {len(df)} rows to {path}")
    return path


def write_train_report(report: TrainReport, path: PathLike) -> Path:
    rows = [{**asdict(rec), "selected": int(rec.epoch == report.selected_epoch)} for rec in report.records]
    return _write(pd.DataFrame(rows, columns=TRAIN_COLUMNS), path)


def pr_frame(points: Sequence[PRPoint], checkpoint: str = None) -> pd.DataFrame:
    rows = [{**asdict(p), "f_measure": p.f_measure} for p in points]
    df = pd.DataFrame(rows, columns=PR_COLUMNS)
    if checkpoint is not None:
        df.insert(0, "checkpoint", checkpoint)
    return df


def write_pr_curves(curves: dict, path: PathLike) -> Path:
    """One block of rows per checkpoint; the checkpoint column is omitted for a single curve"""
    if len(curves) == 1:
        df = pr_frame(next(iter(curves.values())))
    else:
        df = pd.concat([pr_frame(points, name) for name, points in curves.items()], ignore_index=True)
    return _write(df, path)


def write_latency(reports: Sequence[LatencyReport], path: PathLike) -> Path:
    rows = [{
        "label": r.label,
        "median_ms": r.median_ms,
        "p90_ms": r.p90_ms,
        "reps": r.reps,
        "warmup": r.warmup,
        "batch_size": r.batch_size,
        "parameter_count": r.parameter_count,
        "device": r.device,
    } for r in reports]
    return _write(pd.DataFrame(rows, columns=LATENCY_COLUMNS), path)


def write_dataset_summary(summary: pd.DataFrame, path: PathLike) -> Path:
    return _write(summary, path)
