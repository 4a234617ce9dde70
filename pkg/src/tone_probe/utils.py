"""Shared utilities."""

import hashlib
import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np


def read_file(path: Path) -> str:
    """Read file content, return empty string if not found."""
    if path.exists():
        return path.read_text(encoding="utf-8")
    return ""


def write_file(path: Path, content: str) -> None:
    """Write content to file atomically, creating parent dirs as needed."""
    atomic_write_bytes(path, content.encode("utf-8"))


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write to a temp file next to `path`, then rename over it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def temp_path_for(path: Path) -> Path:
    """Unique sibling path for staged writes that finish with os.replace."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    return Path(tmp_name)


def stable_hash(obj: object, length: int = 16) -> str:
    """Digest of the canonical JSON form of `obj`."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:length]


def seed_from(*parts: object) -> int:
    """Derive a 64-bit seed from arbitrary parts."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]")


def safe_name(name: str) -> str:
    """
    Filesystem-safe version of an identifier.

    Names that needed rewriting get a short digest suffix so that distinct
    identifiers never collide.
    """
    cleaned = _UNSAFE.sub("_", name)
    if cleaned == name and name not in ("", ".", ".."):
        return name
    return f"{cleaned}-{hashlib.sha256(name.encode('utf-8')).hexdigest()[:8]}"


def subsample_ids(ids: list[str], fraction: float, seed: int) -> list[str]:
    """
    Deterministic seeded subsample of identifiers.

    The selection depends only on the set of ids, the fraction and the seed;
    the returned list keeps the input order.
    """
    if fraction >= 1.0 or not ids:
        return list(ids)
    ordered = sorted(set(ids))
    n_keep = max(1, int(round(len(ordered) * fraction)))
    rng = np.random.default_rng(seed)
    keep = {ordered[i] for i in rng.permutation(len(ordered))[:n_keep]}
    return [i for i in ids if i in keep]
