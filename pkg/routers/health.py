from fastapi import APIRouter
from datetime import datetime
import logging

from services.detector_service import DetectorUnavailable, get_detector_service

router = APIRouter(prefix="/api", tags=["health"])
logger = logging.getLogger(__name__)


@router.get("/health")
async def health_check():
    """Health check endpoint"""
    try:
        service = get_detector_service()
        detector = {"loaded": True, "checkpoint": service.checkpoint, "input_size": service.input_size}
    except DetectorUnavailable as e:
        detector = {"loaded": False, "reason": str(e)}
    return {
        "status": "healthy",
        "timestamp": datetime.now().isoformat(),
        "service": "LUVT Defect Detector",
        "detector": detector,
    }


@router.get("/")
async def root():
    """Root endpoint"""
    return {
        "name": "LUVT Defect Detector API",
        "version": "1.0.0",
        "endpoints": {
            "health": "GET /api/health",
            "predict": "POST /api/predictions",
        }
    }
