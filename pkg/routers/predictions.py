from fastapi import APIRouter, File, HTTPException, UploadFile
from pydantic import BaseModel
from typing import Optional, Tuple
import logging

from crud.series import decode_image
from services.detector_service import DetectorUnavailable, get_detector_service
from services.records import DEFECT
from utils.validation import LuvtError

router = APIRouter(prefix="/api/predictions", tags=["predictions"])
logger = logging.getLogger(__name__)

MAX_UPLOAD_BYTES = 10 * 1024 * 1024


class PredictionResponse(BaseModel):
    predicted_class: int
    defect: bool
    probability: float
    scores: Tuple[float, float]
    center_px: Optional[Tuple[float, float]] = None
    width: int
    height: int


@router.post("", response_model=PredictionResponse)
async def predict_upload(file: UploadFile = File(...)):
    """Classify one uploaded LUVT frame (PGM or PNG) and localize the defect"""
    try:
        service = get_detector_service()
    except DetectorUnavailable as e:
        logger.warning(f"Prediction requested without a detector: {e}")
        raise HTTPException(status_code=503, detail=str(e))

    content = await file.read()
    if not content:
        raise HTTPException(status_code=400, detail="Empty upload")
    if len(content) > MAX_UPLOAD_BYTES:
        raise HTTPException(status_code=400, detail="Upload too large")

    try:
        frame = decode_image(content, file.filename or "<upload>")
        pred = service.predict_frame(frame)
    except LuvtError as e:
        logger.error(f"Error predicting on {file.filename}: {e}")
        raise HTTPException(status_code=400, detail=str(e))

    is_defect = pred.predicted_class == DEFECT
    logger.info(f"🔍 {file.filename}: class={pred.predicted_class} p={pred.defect_probability:.3f}")
    return PredictionResponse(
        predicted_class=pred.predicted_class,
        defect=is_defect,
        probability=pred.defect_probability,
        scores=(float(pred.scores[0]), float(pred.scores[1])),
        center_px=pred.center_px if is_defect else None,
        width=frame.shape[1],
        height=frame.shape[0],
    )
