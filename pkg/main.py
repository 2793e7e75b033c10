from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from contextlib import asynccontextmanager
import logging
from dotenv import load_dotenv
import os

# Load environment variables FIRST
load_dotenv()

from utils.logging_config import setup_logging

setup_logging(os.getenv("LOG_LEVEL", "INFO"), os.getenv("LOG_FORMAT", "text"))
logger = logging.getLogger(__name__)

logger.info("🚀 Starting LUVT Defect Detector...")
logger.info(f"📍 Current working directory: {os.getcwd()}")


def get_routers():
    from routers import health, predictions
    return health, predictions


@asynccontextmanager
async def lifespan(app: FastAPI):
    from services.detector_service import DetectorUnavailable, get_detector_service
    try:
        get_detector_service()
    except DetectorUnavailable as e:
        logger.warning(f"⚠️ Detector not loaded at startup: {e}")
    logger.info("✅ LUVT Defect Detector API started")
    yield
    logger.info("🛑 LUVT Defect Detector API shutdown")


app = FastAPI(
    title="LUVT Defect Detector API",
    version="1.0.0",
    description="Defect classification and localization on laser ultrasonic visualization frames",
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

health, predictions = get_routers()

app.include_router(health.router)
app.include_router(predictions.router)

logger.info("🎯 All routers registered")

if __name__ == "__main__":
    import uvicorn
    port = int(os.getenv("PORT", 8000))
    uvicorn.run(app, host="0.0.0.0", port=port, reload=False)
