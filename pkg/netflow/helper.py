import hashlib
import logging
import os
import time
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

ALLOWED_FORMATS = ["CSV", "VTK", "JSON", "TXT", "MESH"]

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1


def validate_file(file_path):
    """Check that an artifact exists, is non-empty and has a known extension."""
    ext = str(file_path).split(".")[-1].upper()
    if ext not in ALLOWED_FORMATS:
        return False, f"Unsupported artifact format: {ext}"
    if not os.path.isfile(file_path):
        return False, "Artifact was not written."
    if os.path.getsize(file_path) == 0:
        return False, "Artifact is empty."
    return True, "Artifact is valid."


def file_digest(file_path) -> str:
    sha = hashlib.sha256()
    with open(file_path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            sha.update(block)
    return sha.hexdigest()


def extract_metadata(file_path):
    metadata = {
        "file_name": os.path.basename(file_path),
        "file_size": os.path.getsize(file_path),
        "modified_time": time.ctime(os.path.getmtime(file_path)),
        "sha256": file_digest(file_path),
    }
    ext = str(file_path).split(".")[-1].lower()
    if ext == "csv":
        metadata["rows"] = int(len(pd.read_csv(file_path)))
    return metadata


def write_csv(path, columns: dict) -> Path:
    """Write named columns as CSV with full float precision.

    Column order follows the dict; floats are written with 17 significant digits.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(columns)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.debug("Wrote CSV artifact", extra={"path": str(path), "rows": len(frame)})
    return path


class SeededGenerator:
    """64-bit linear congruential generator.

    x <- (6364136223846793005 * x + 1442695040888963407) mod 2**64, and
    uniform() returns the top 53 bits scaled to [0, 1).
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (LCG_MULTIPLIER * self.state + LCG_INCREMENT) & _MASK64
        return self.state

    def uniform(self, low: float = 0.0, high: float = 1.0, size: int | None = None):
        if size is None:
            return low + (high - low) * ((self.next_u64() >> 11) * 2.0**-53)
        draws = np.array([(self.next_u64() >> 11) * 2.0**-53 for _ in range(size)])
        return low + (high - low) * draws
