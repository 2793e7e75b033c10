"""
Training-time augmentation with coordinate-consistent geometry.

Geometric draws (shift, scale, rotate, crop-and-resize) compose into one forward
affine map in pixel coordinates; the image is warped by its inverse and the annotated
centre by the map itself. Photometric draws (brightness, contrast, gamma standing in
for saturation on grayscale data, Gaussian noise) never touch the annotation.
"""
import logging
import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from services.records import Annotation, Sample

logger = logging.getLogger(__name__)

_SWAP_XY = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class AugmentParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    shift_fraction: float = Field(0.1, ge=0)
    scale_range: float = Field(0.1, ge=0, lt=1)
    rotate_deg: float = Field(10.0, ge=0)
    crop_range: float = Field(0.1, ge=0, lt=1)
    brightness: float = Field(0.1, ge=0)
    contrast_range: float = Field(0.25, ge=0)
    gamma_range: float = Field(0.25, ge=0)
    noise_sigma: float = Field(0.05, ge=0)

    p_shift: float = Field(0.5, ge=0, le=1)
    p_scale: float = Field(0.5, ge=0, le=1)
    p_rotate: float = Field(0.5, ge=0, le=1)
    p_crop: float = Field(0.5, ge=0, le=1)
    p_brightness: float = Field(0.5, ge=0, le=1)
    p_contrast: float = Field(0.5, ge=0, le=1)
    p_gamma: float = Field(0.5, ge=0, le=1)
    p_noise: float = Field(0.5, ge=0, le=1)

    max_retries: int = Field(10, ge=1)
    seed: int = 0

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(shift_fraction=0, scale_range=0, rotate_deg=0, crop_range=0,
                   brightness=0, contrast_range=0, gamma_range=0, noise_sigma=0)


def sample_rng(seed: int, epoch: int, series_id: int, frame_index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, series, frame)"""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, series_id, frame_index]))


def shift_matrix(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def rotation_scale_matrix(angle_deg: float, scale: float, center) -> np.ndarray:
    """Rotate by angle_deg and scale about `center`, in x-right / y-down pixel coordinates"""
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta) * scale, math.sin(theta) * scale
    cx, cy = center
    linear = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
    return shift_matrix(cx, cy) @ linear @ shift_matrix(-cx, -cy)


def crop_matrix(fraction: float, x0: float, y0: float) -> np.ndarray:
    """Crop a fraction-sized window at (x0, y0) and stretch it back to the full frame"""
    inv = 1.0 / fraction
    return np.array([
        [inv, 0.0, (0.5 - x0) * inv - 0.5],
        [0.0, inv, (0.5 - y0) * inv - 0.5],
        [0.0, 0.0, 1.0],
    ])


def transform_point(matrix: np.ndarray, point) -> tuple:
    x, y, _ = matrix @ np.array([point[0], point[1], 1.0])
    return float(x), float(y)


def warp(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample `image` so that source pixel p lands at matrix @ p"""
    inverse = np.linalg.inv(matrix)
    warped = ndimage.affine_transform(image, _SWAP_XY @ inverse @ _SWAP_XY, order=1, mode="nearest")
    return warped.astype(image.dtype, copy=False)


def apply_geometric(sample: Sample, matrix: np.ndarray) -> Optional[Sample]:
    """Warp image and centre together; None when the centre would leave the frame"""
    height, width = sample.image.shape
    annotation = sample.annotation
    if annotation.is_positive:
        center = transform_point(matrix, annotation.center_px)
        annotation = Annotation(label=annotation.label, center_px=center)
        if not annotation.within(width, height):
            return None
    if np.array_equal(matrix, np.eye(3)):
        image = sample.image
    else:
        image = warp(sample.image, matrix)
    return Sample(image=image, annotation=annotation,
                  series_id=sample.series_id, frame_index=sample.frame_index)


def _log_uniform(rng: np.random.Generator, spread: float) -> float:
    bound = math.log1p(spread)
    return math.exp(rng.uniform(-bound, bound))


def draw_geometry(params: AugmentParams, rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    center = ((width - 1) / 2.0, (height - 1) / 2.0)
    use = rng.random(4) < np.array([params.p_shift, params.p_scale, params.p_rotate, params.p_crop])
    tx, ty = rng.uniform(-params.shift_fraction, params.shift_fraction, 2) * (width, height)
    scale = rng.uniform(1.0 - params.scale_range, 1.0 + params.scale_range)
    angle = rng.uniform(-params.rotate_deg, params.rotate_deg)
    fraction = rng.uniform(1.0 - params.crop_range, 1.0)
    ox, oy = rng.random(2)

    matrix = np.eye(3)
    if use[1] or use[2]:
        matrix = rotation_scale_matrix(angle if use[2] else 0.0, scale if use[1] else 1.0, center) @ matrix
    if use[0] and (tx or ty):
        matrix = shift_matrix(tx, ty) @ matrix
    if use[3] and fraction < 1.0:
        matrix = crop_matrix(fraction, ox * (1 - fraction) * width, oy * (1 - fraction) * height) @ matrix
    return matrix


def photometric(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    use = rng.random(4) < np.array([params.p_brightness, params.p_contrast, params.p_gamma, params.p_noise])
    delta = rng.uniform(-params.brightness, params.brightness)
    contrast = _log_uniform(rng, params.contrast_range)
    gamma = _log_uniform(rng, params.gamma_range)
    sigma = rng.uniform(0.0, params.noise_sigma)

    out = image
    if use[0] and delta != 0.0:
        out = np.clip(out + delta, 0.0, 1.0)
    if use[1] and contrast != 1.0:
        out = np.clip((out - 0.5) * contrast + 0.5, 0.0, 1.0)
    if use[2] and gamma != 1.0:
        out = np.power(out, gamma)
    if use[3] and sigma > 0.0:
        out = np.clip(out + rng.normal(0.0, sigma, size=out.shape), 0.0, 1.0)
    return out.astype(image.dtype, copy=False)


def augment(sample: Sample, params: AugmentParams, rng: np.random.Generator) -> Sample:
    """
    Random geometric + photometric augmentation; the label never changes.

    Geometric draws that push the defect centre outside the frame are redrawn up to
    `max_retries` times, after which the sample is returned untouched.
    """
    height, width = sample.image.shape
    for _ in range(params.max_retries):
        moved = apply_geometric(sample, draw_geometry(params, rng, width, height))
        if moved is None:
            continue
        image = photometric(moved.image, params, rng)
        return Sample(image=image, annotation=moved.annotation,
                      series_id=sample.series_id, frame_index=sample.frame_index)

    logger.debug(f"Augmentation retries exhausted for series {sample.series_id} frame {sample.frame_index}")
    return sample
