"""Small IO helpers shared across modules."""

from __future__ import annotations

import os


def atomic_write_bytes(path, data: bytes) -> None:
    """Write a file via temp-and-rename so readers never see partial output."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def fmt(x: float) -> str:
    """Shortest decimal for a float that round-trips exactly via float()."""
    return repr(float(x))
