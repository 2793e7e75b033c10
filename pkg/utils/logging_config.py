import logging
import sys

from pythonjsonlogger import jsonlogger

TEXT_FORMAT = '%(levelname)s:%(name)s:%(message)s'
JSON_FORMAT = '%(asctime)s %(levelname)s %(name)s %(message)s'


def setup_logging(level: str = "INFO", fmt: str = "text") -> None:
    """
    Install the root handler for CLI runs and the API service.

    Args:
        level: logging level name
        fmt: "text" for the plain levelname:name:message lines, "json" for structured records
    """
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FORMAT))
    elif fmt == "text":
        handler.setFormatter(logging.Formatter(TEXT_FORMAT))
    else:
        raise ValueError(f"Unknown log format: {fmt}")

    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(level.upper())
