"""
Binary checkpoints.

Layout (little-endian): magic "LUVTCKPT", u32 version, u32 entry count, then per entry
u16 name length, UTF-8 name, u8 rank, rank x u32 dims, float32 data. Model
hyperparameters live next to the file as key=value lines (`<name>.cfg`).
"""
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Union

import numpy as np
from dotenv import dotenv_values

from services.model import BackboneConfig, ModelParams, build_model
from utils.validation import ParseError, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"LUVTCKPT"
VERSION = 1

PathLike = Union[str, Path]


def encode_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValidationError(f"parameter name too long: {name[:40]}...")
        if array.ndim > 0xFF:
            raise ValidationError(f"{name}: rank {array.ndim} not representable")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.path, self.offset = data, path, 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ParseError(self.path, None, f"truncated checkpoint at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_arrays(data: bytes, source: str = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    reader = _Reader(data, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise ParseError(source, None, "not a checkpoint (bad magic)")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise ParseError(source, None, f"unsupported checkpoint version {version}")

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(source, None, f"invalid parameter name: {e}") from e
        if name in arrays:
            raise ParseError(source, None, f"duplicate entry {name}")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    if reader.offset != len(data):
        raise ParseError(source, None, f"{len(data) - reader.offset} trailing bytes")
    return arrays


def config_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def write_model_config(path: PathLike, config: BackboneConfig) -> None:
    lines = [
        f"model.widths={','.join(str(w) for w in config.widths)}",
        f"model.blocks_per_stage={config.blocks_per_stage}",
        f"model.block_type={config.block_type}",
        f"model.input_size={config.input_size}",
        f"model.coord_channels={str(config.coord_channels).lower()}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_model_config(path: PathLike) -> BackboneConfig:
    path = Path(path)
    if not path.exists():
        raise ParseError(path, None, "hyperparameter file missing")
    values = dotenv_values(path)
    fields = {}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section != "model" or name not in BackboneConfig.model_fields:
            raise ParseError(path, None, f"unknown key {key}")
        if value is None:
            raise ParseError(path, None, f"{key} has no value")
        fields[name] = tuple(v.strip() for v in value.split(",")) if name == "widths" else value
    try:
        return BackboneConfig(**fields)
    except ValueError as e:
        raise ParseError(path, None, f"invalid hyperparameters: {e}") from e


def save_checkpoint(path: PathLike, model: ModelParams, arrays: Dict[str, np.ndarray] = None) -> Path:
    """Write `arrays` (default: the model's current state) plus the hyperparameter sidecar"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_arrays(arrays if arrays is not None else model.state_arrays()))
    write_model_config(config_path(path), model.config)
    logger.debug(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: PathLike) -> ModelParams:
    """Rebuild the model from the sidecar and load the stored arrays into it"""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint {path} does not exist")
    config = read_model_config(config_path(path))
    arrays = decode_arrays(path.read_bytes(), str(path))
    model = build_model(config, seed=0)
    model.load_state_arrays(arrays)
    logger.info(f"📦 Loaded checkpoint {path} ({len(arrays)} tensors)")
    return model
