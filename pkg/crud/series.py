"""Series storage: one directory per series, 8-bit PGM frames plus annotations.csv"""
import io
import logging
import re
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from services.records import DEFECT, NO_DEFECT, Annotation, Series
from utils.validation import ParseError, ValidationError

logger = logging.getLogger(__name__)

ANNOTATION_FILE = "annotations.csv"
ANNOTATION_COLUMNS = ["frame_index", "label", "defect_x_px", "defect_y_px"]
_SERIES_DIR = re.compile(r"^series(\d+)$")
_FRAME_FILE = re.compile(r"^series(\d+)_frame(\d+)\.pgm$")

PathLike = Union[str, Path]


def series_dir_name(series_id: int) -> str:
    return f"series{series_id:03d}"


def frame_file_name(series_id: int, frame_index: int) -> str:
    return f"series{series_id:03d}_frame{frame_index:04d}.pgm"


def write_pgm(path: PathLike, frame: np.ndarray) -> None:
    """Binary (P5) 8-bit PGM"""
    if frame.dtype != np.uint8 or frame.ndim != 2:
        raise ValidationError(f"PGM frames must be 2-D uint8, got {frame.dtype} {frame.shape}")
    Image.fromarray(frame).save(path, format="PPM")


def read_pgm(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as image:
            if image.format != "PPM" or image.mode != "L":
                raise ParseError(path, None, f"expected 8-bit grayscale PGM, got {image.format} {image.mode}")
            return np.array(image, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise ParseError(path, None, f"unreadable image: {e}") from e


def decode_image(content: bytes, source: str = "<upload>") -> np.ndarray:
    """Decode PGM/PNG bytes to a 2-D uint8 array (color images are converted to luminance)"""
    try:
        with Image.open(io.BytesIO(content)) as image:
            return np.array(image.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise ParseError(source, None, f"unreadable image: {e}") from e


def load_image(path: PathLike) -> np.ndarray:
    return decode_image(Path(path).read_bytes(), str(path))


def save_series(series: Series, root: PathLike) -> Path:
    """
    Write frames and annotations under root/seriesNNN/.

    Args:
        series: annotated series
        root: data directory

    Returns:
        The series directory
    """
    if series.annotations is None or len(series.annotations) != len(series.frames):
        raise ValidationError(f"series {series.series_id}: every frame needs an annotation")
    directory = Path(root) / series_dir_name(series.series_id)
    directory.mkdir(parents=True, exist_ok=True)

    rows = []
    for index, (frame, annotation) in enumerate(zip(series.frames, series.annotations)):
        write_pgm(directory / frame_file_name(series.series_id, index), frame)
        x, y = annotation.center_px if annotation.is_positive else (None, None)
        rows.append({"frame_index": index, "label": 1 if annotation.is_positive else 0,
                     "defect_x_px": x, "defect_y_px": y})
    pd.DataFrame(rows, columns=ANNOTATION_COLUMNS).to_csv(directory / ANNOTATION_FILE, index=False)
    logger.info(f"💾 Saved series {series.series_id} ({len(series)} frames) to {directory}")
    return directory


def _parse_annotations(path: Path) -> List[Annotation]:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError, OSError) as e:
        raise ParseError(path, None, f"invalid CSV: {e}") from e
    if list(df.columns) != ANNOTATION_COLUMNS:
        raise ParseError(path, 1, f"expected header {','.join(ANNOTATION_COLUMNS)}")

    annotations = []
    for row_number, row in enumerate(df.itertuples(index=False), start=2):
        try:
            frame_index = int(row.frame_index)
            flag = int(row.label)
        except ValueError as e:
            raise ParseError(path, row_number, f"non-integer field: {e}") from e
        if frame_index != len(annotations):
            raise ParseError(path, row_number, f"expected frame_index {len(annotations)}, got {frame_index}")
        has_x, has_y = row.defect_x_px.strip() != "", row.defect_y_px.strip() != ""
        if flag == 1:
            if not (has_x and has_y):
                raise ParseError(path, row_number, "positive frame without defect coordinates")
            try:
                center = (float(row.defect_x_px), float(row.defect_y_px))
            except ValueError as e:
                raise ParseError(path, row_number, f"bad coordinate: {e}") from e
            annotations.append(Annotation(label=DEFECT, center_px=center))
        elif flag == 0:
            if has_x or has_y:
                raise ParseError(path, row_number, "negative frame with defect coordinates")
            annotations.append(Annotation(label=NO_DEFECT))
        else:
            raise ParseError(path, row_number, f"label must be 0 or 1, got {flag}")
    return annotations


def load_series(directory: PathLike) -> Series:
    """Read one seriesNNN/ directory written by save_series"""
    directory = Path(directory)
    match = _SERIES_DIR.match(directory.name)
    if not directory.is_dir() or match is None:
        raise ValidationError(f"{directory} is not a series directory")
    series_id = int(match.group(1))

    annotations = _parse_annotations(directory / ANNOTATION_FILE)
    frames = []
    for index in range(len(annotations)):
        path = directory / frame_file_name(series_id, index)
        if not path.exists():
            raise ParseError(path, None, "frame listed in annotations is missing")
        frames.append(read_pgm(path))

    stray = [p.name for p in directory.glob("*.pgm")
             if (m := _FRAME_FILE.match(p.name)) is None or int(m.group(2)) >= len(annotations)]
    if stray:
        raise ValidationError(f"{directory}: frames without annotations: {sorted(stray)}")
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise ValidationError(f"{directory}: frames have mixed sizes {sorted(shapes)}")
    return Series(series_id=series_id, frames=frames, annotations=annotations)


def load_all_series(root: PathLike, ids: Optional[List[int]] = None) -> List[Series]:
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"data directory {root} does not exist")
    if ids is None:
        directories = sorted(p for p in root.iterdir() if _SERIES_DIR.match(p.name))
    else:
        directories = [root / series_dir_name(i) for i in ids]
    series = [load_series(d) for d in directories]
    logger.info(f"📂 Loaded {len(series)} series from {root}")
    return series
