"""File-access auditing.

Every image or mask read by the toolkit goes through :func:`read_png`, which
records the resolved path in the innermost active :class:`AccessAudit`.
Training runners wrap their whole run in an audit and persist the result, so
data-isolation can be checked after the fact.
"""

from __future__ import annotations

import contextlib
import threading
from pathlib import Path

import numpy as np
from PIL import Image

_local = threading.local()


class AccessAudit:
    def __init__(self) -> None:
        self.opened: list[str] = []

    def record(self, path: str | Path) -> None:
        self.opened.append(str(Path(path).resolve()))

    @property
    def unique(self) -> list[str]:
        return sorted(set(self.opened))

    def __len__(self) -> int:
        return len(self.opened)


def _stack() -> list[AccessAudit]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


@contextlib.contextmanager
def audited():
    audit = AccessAudit()
    _stack().append(audit)
    try:
        yield audit
    finally:
        _stack().pop()


def record_access(path: str | Path) -> None:
    # nested audits all see the access
    for audit in _stack():
        audit.record(path)


def read_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG as a float32 array scaled to [0, 1]."""
    record_access(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def write_png(path: str | Path, array: np.ndarray) -> None:
    """Write a [0, 1] float array (or uint8 array) as 8-bit grayscale PNG."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG", optimize=False)
