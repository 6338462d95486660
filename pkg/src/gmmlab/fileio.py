"""Atomic file writes and the shared format-error type.

Every artifact this package writes goes through the atomic helpers (temp file
in the target directory, then rename), so interrupted runs never leave
partial files behind.
"""

from __future__ import annotations

import os
import tempfile


class FormatError(Exception):
    """Raised when an input file does not match its documented format."""


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
