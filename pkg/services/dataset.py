"""
Dataset assembly: labeling rule, series-wise splits and input preprocessing
"""
import logging
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from services.records import DEFECT, NO_DEFECT, Annotation, Sample, Series
from services.wavesim import PlateSpec
from utils.validation import ValidationError, check_disjoint

logger = logging.getLogger(__name__)

DEFAULT_VISIBILITY = 0.01


class SplitConfig(BaseModel):
    """Disjoint series-id sets; all three are required"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    train_series: Tuple[int, ...] = Field(min_length=1)
    val_series: Tuple[int, ...] = Field(min_length=1)
    test_series: Tuple[int, ...] = Field(min_length=1)

    @model_validator(mode="after")
    def _disjoint(self):
        check_disjoint([
            ("train", self.train_series),
            ("val", self.val_series),
            ("test", self.test_series),
        ])
        return self

    def referenced(self) -> set:
        return set(self.train_series) | set(self.val_series) | set(self.test_series)


def auto_label(series: Series, spec: PlateSpec,
               visibility: float = DEFAULT_VISIBILITY) -> List[Annotation]:
    """
    Positive from the analytic arrival at the defect until the scattered wave fades.

    A frame is labeled 1 when its snapshot step is at or past the arrival step AND its
    relative scattered energy is at least `visibility`; every other frame is labeled 2.
    """
    if series.meta is None or len(series.meta) != len(series.frames):
        raise ValidationError(f"series {series.series_id}: simulator metadata missing")
    if len(spec.defects) > 1:
        raise ValidationError("labeling supports at most one defect per specimen")

    annotations = []
    for meta in series.meta:
        if not meta.presence:
            annotations.append(Annotation(label=NO_DEFECT))
            continue
        if not meta.arrival_steps or not meta.centers_px:
            raise ValidationError(
                f"series {series.series_id} frame {meta.frame_index}: arrival metadata missing"
            )
        visible = meta.step >= meta.arrival_steps[0] and meta.scattered_energy >= visibility
        if visible:
            annotations.append(Annotation(label=DEFECT, center_px=meta.centers_px[0]))
        else:
            annotations.append(Annotation(label=NO_DEFECT))
    return annotations


def split_by_series(all_series: Sequence[Series],
                    cfg: SplitConfig) -> Tuple[List[Series], List[Series], List[Series]]:
    """Assign whole series to train/val/test; frames of one series never straddle subsets"""
    check_disjoint([
        ("train", cfg.train_series),
        ("val", cfg.val_series),
        ("test", cfg.test_series),
    ])
    by_id = {}
    for s in all_series:
        if s.series_id in by_id:
            raise ValidationError(f"duplicate series id {s.series_id}")
        by_id[s.series_id] = s

    missing = sorted(cfg.referenced() - set(by_id))
    if missing:
        raise ValidationError(f"split references unknown series {missing}")
    unused = sorted(set(by_id) - cfg.referenced())
    if unused:
        logger.warning(f"⚠️ Series {unused} are not assigned to any subset")

    def pick(ids):
        return [by_id[i] for i in ids]

    return pick(cfg.train_series), pick(cfg.val_series), pick(cfg.test_series)


def resize_sample(sample: Sample, size: int) -> Sample:
    """Bilinear resize to size x size, moving the annotated centre with the image"""
    height, width = sample.image.shape
    if (height, width) == (size, size):
        return sample
    sy, sx = size / height, size / width
    image = ndimage.zoom(sample.image, (sy, sx), order=1, mode="nearest", grid_mode=True)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    annotation = sample.annotation
    if annotation.is_positive:
        x, y = annotation.center_px
        annotation = Annotation(label=DEFECT, center_px=((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5))
    return Sample(image=image, annotation=annotation,
                  series_id=sample.series_id, frame_index=sample.frame_index)


def series_to_samples(series: Series, input_size: int) -> List[Sample]:
    if series.annotations is None:
        raise ValidationError(f"series {series.series_id} has no annotations")
    samples = []
    for index, (frame, annotation) in enumerate(zip(series.frames, series.annotations)):
        sample = Sample(
            image=frame.astype(np.float32) / 255.0,
            annotation=annotation,
            series_id=series.series_id,
            frame_index=index,
        )
        samples.append(resize_sample(sample, input_size))
    return samples


def build_samples(series_list: Sequence[Series], input_size: int) -> List[Sample]:
    samples = []
    for series in series_list:
        samples.extend(series_to_samples(series, input_size))
    return samples


def summarize_series(series_list: Sequence[Series]) -> pd.DataFrame:
    """Per-series positive / negative frame counts"""
    rows = []
    for series in series_list:
        if series.annotations is None:
            raise ValidationError(f"series {series.series_id} has no annotations")
        positives = sum(1 for a in series.annotations if a.is_positive)
        rows.append({
            "series": series.series_id,
            "defect_position": series.position,
            "defects": positives,
            "non_defects": len(series.annotations) - positives,
        })
    return pd.DataFrame(rows, columns=["series", "defect_position", "defects", "non_defects"])
