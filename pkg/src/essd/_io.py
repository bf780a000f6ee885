from __future__ import annotations

import contextlib
import hashlib
import os
import tempfile
from pathlib import Path


@contextlib.contextmanager
def atomic_write(path, mode: str = "w", newline: str | None = ""):
    """Write to a sibling temp file and rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": newline}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def derive_seed(*keys) -> int:
    """Stable 63-bit sub-seed from a master seed and any string-able keys.

    Unlike ``hash()`` this does not depend on PYTHONHASHSEED, so sub-seeds are
    identical across processes and runs.
    """
    h = hashlib.blake2b("\x1f".join(str(k) for k in keys).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
