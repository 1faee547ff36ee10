"""Small file helpers shared by the result writers."""
import csv
import json
import logging
import os
from pathlib import Path

from errors import CorruptFileError, MissingPathError

logger = logging.getLogger(__name__)


def atomic_write_json(path, data) -> None:
    """Write JSON through a temp file and rename, so readers never see half a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix(path.suffix + ".tmp")
    with open(temp_path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
        handle.write("\n")
        handle.flush()
        os.fsync(handle.fileno())
    temp_path.replace(path)


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise MissingPathError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise CorruptFileError(f"{path} is not valid JSON: {error}") from error


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    logger.info("wrote %s (%d rows)", path, len(rows))


def require_dir(path, what="directory") -> Path:
    path = Path(path)
    if not path.is_dir():
        raise MissingPathError(f"{what} not found: {path}")
    return path
