"""Whole-file atomic writes shared by every on-disk format."""

import os


def atomic_write_bytes(path, payload: bytes):
    """Write to a sibling temp file and rename, so readers never see partials."""
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
