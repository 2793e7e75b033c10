"""
Detector service - holds the inference model for the HTTP API

The checkpoint path comes from LUVT_CHECKPOINT. The model is loaded on first use and
shared read-only across requests (inference never mutates parameters).
"""
import logging
import os
import threading
from pathlib import Path
from typing import Optional

import numpy as np
from dotenv import load_dotenv

from crud.checkpoints import load_checkpoint
from services.dataset import resize_sample
from services.model import ModelParams, Prediction, predict
from services.records import Annotation, NO_DEFECT, Sample
from utils.validation import LuvtError

load_dotenv()

logger = logging.getLogger(__name__)


class DetectorUnavailable(LuvtError, RuntimeError):
    """No checkpoint configured or loadable"""


class DetectorService:
    """Thin wrapper around one loaded checkpoint"""

    def __init__(self, checkpoint: Optional[str] = None):
        self.checkpoint = (checkpoint or os.getenv("LUVT_CHECKPOINT", "")).strip()
        if not self.checkpoint:
            raise DetectorUnavailable("LUVT_CHECKPOINT is not set")
        if not Path(self.checkpoint).exists():
            raise DetectorUnavailable(f"checkpoint {self.checkpoint} does not exist")
        try:
            self.model: ModelParams = load_checkpoint(self.checkpoint)
        except LuvtError as e:
            logger.error(f"Failed to load checkpoint {self.checkpoint}: {e}")
            raise DetectorUnavailable(f"checkpoint {self.checkpoint} is unusable: {e}") from e
        logger.info(f"✅ Detector ready from {self.checkpoint}")

    @property
    def input_size(self) -> int:
        return self.model.config.input_size

    def predict_frame(self, frame: np.ndarray) -> Prediction:
        """
        Predict on an 8-bit frame of any size

        Args:
            frame: 2-D uint8 image

        Returns:
            Prediction with the centre in the frame's own pixel coordinates
        """
        height, width = frame.shape
        sample = Sample(image=frame.astype(np.float32) / 255.0,
                        annotation=Annotation(label=NO_DEFECT), series_id=0, frame_index=0)
        resized = resize_sample(sample, self.input_size)
        pred = predict(resized.image, self.model)
        size = self.input_size
        x, y = pred.center_px
        center = ((x + 0.5) * width / size - 0.5, (y + 0.5) * height / size - 0.5)
        return Prediction(scores=pred.scores, predicted_class=pred.predicted_class, center_px=center)


_detector_service: Optional[DetectorService] = None
_lock = threading.Lock()


def get_detector_service() -> DetectorService:
    """Get or create the detector singleton"""
    global _detector_service
    with _lock:
        if _detector_service is None:
            _detector_service = DetectorService()
    return _detector_service


def reset_detector_service(service: Optional[DetectorService] = None) -> None:
    """Replace (or drop) the singleton; used by tests and after checkpoint swaps"""
    global _detector_service
    with _lock:
        _detector_service = service
