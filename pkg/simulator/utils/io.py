"""Atomic artifact writers (CSV, PLY, raw bytes)"""
import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def atomic_write_bytes(path: str | Path, payload: bytes) -> Path:
    """Write to a temporary sibling, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def format_row(values: Iterable[object]) -> list[str]:
    # repr-level float formatting keeps CSVs byte-reproducible
    return [repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in values]


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(format_row(row))
    return atomic_write_text(path, buffer.getvalue())


def write_ply(path: str | Path, points: np.ndarray) -> Path:
    """ASCII PLY with vertex positions only."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines.extend(f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in points)
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_ply(path: str | Path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    count = next(int(line.split()[-1]) for line in lines if line.startswith("element vertex"))
    start = lines.index("end_header") + 1
    if count == 0:
        return np.zeros((0, 3))
    return np.array([[float(v) for v in line.split()] for line in lines[start:start + count]])
