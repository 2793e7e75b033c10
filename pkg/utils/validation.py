"""Exception hierarchy and small validation helpers shared by every module"""
import math
from typing import Iterable, Optional, Sequence

import numpy as np


class LuvtError(Exception):
    """Base class for every error raised by the pipeline"""


class ValidationError(LuvtError, ValueError):
    """Input violates a documented precondition or invariant"""


class ParseError(ValidationError):
    """Malformed file content; names the file and (when known) the line"""

    def __init__(self, path, line: Optional[int], message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class ConfigError(ValidationError):
    """Bad configuration key or value; names the key and its source line"""

    def __init__(self, message: str, key: Optional[str] = None, line=None):
        self.key = key
        self.line = line
        parts = [message]
        if key is not None:
            parts.append(f"key={key}")
        if line is not None:
            parts.append(f"line={line}")
        super().__init__(" ".join(parts))


class StabilityError(LuvtError, RuntimeError):
    """Numeric blow-up in the wave solver"""


class TrainingError(LuvtError, RuntimeError):
    """Non-finite loss during training"""

    def __init__(self, message: str, epoch: int, batch_index: int):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(f"{message} (epoch={epoch}, batch={batch_index})")


def check_shape(name: str, actual: Sequence[int], expected: Sequence[Optional[int]]) -> None:
    """Compare a shape against an expected one; None entries match any size"""
    if len(actual) != len(expected) or any(
        e is not None and a != e for a, e in zip(actual, expected)
    ):
        raise ValidationError(f"{name}: expected shape {tuple(expected)}, got {tuple(actual)}")


def check_finite(name: str, values) -> None:
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{name}: contains non-finite values")


def check_positive(name: str, value: float) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise ValidationError(f"{name} must be positive, got {value}")


def check_disjoint(named_sets: Iterable[tuple]) -> None:
    """Raise if any id appears in more than one of the named sets"""
    seen = {}
    for name, ids in named_sets:
        for item in ids:
            if item in seen:
                raise ValidationError(f"series {item} listed in both {seen[item]} and {name}")
            seen[item] = name
