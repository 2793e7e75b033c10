"""
Record types passed between the simulator, dataset builder, trainer and evaluator.

Pixel coordinates use a top-left origin, x rightward, y downward, with pixel
centres on integer coordinates.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from utils.validation import ValidationError

DEFECT = 1
NO_DEFECT = 2


@dataclass(frozen=True)
class Annotation:
    """Binary class c in {1, 2} plus the defect centre for positives"""
    label: int
    center_px: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.label not in (DEFECT, NO_DEFECT):
            raise ValidationError(f"label must be 1 or 2, got {self.label}")
        if self.label == NO_DEFECT and self.center_px is not None:
            raise ValidationError("negative annotation cannot carry a defect centre")
        if self.label == DEFECT and self.center_px is None:
            raise ValidationError("positive annotation requires a defect centre")

    @property
    def is_positive(self) -> bool:
        return self.label == DEFECT

    def within(self, width: int, height: int) -> bool:
        if self.center_px is None:
            return True
        x, y = self.center_px
        return 0.0 <= x <= width - 1 and 0.0 <= y <= height - 1


@dataclass
class FrameMeta:
    """Ground truth the simulator knows about one snapshot"""
    frame_index: int
    step: int
    presence: bool
    centers_px: List[Tuple[float, float]] = field(default_factory=list)
    arrival_steps: List[int] = field(default_factory=list)
    scattered_energy: float = 0.0


@dataclass
class Series:
    """Ordered 8-bit frames of one specimen run"""
    series_id: int
    frames: List[np.ndarray]
    meta: Optional[List[FrameMeta]] = None
    annotations: Optional[List[Annotation]] = None
    position: str = ""

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class Sample:
    """One preprocessed frame in [0, 1] with its annotation and provenance"""
    image: np.ndarray
    annotation: Annotation
    series_id: int
    frame_index: int
