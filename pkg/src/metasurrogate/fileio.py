"""Atomic file writes and the fixed-point CSV dialect used by every command."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path


def atomic_write(path, data: bytes) -> Path:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _cell(value) -> str:
    if isinstance(value, bool) or isinstance(value, (int, str)):
        return str(value)
    return f"{float(value):.6f}"


def csv_bytes(header, rows) -> bytes:
    """Header-first CSV with CRLF line ends; floats as 6-decimal fixed point."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue().encode("utf-8")


def write_csv(path, header, rows) -> Path:
    return atomic_write(path, csv_bytes(header, rows))
