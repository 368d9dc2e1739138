"""Small shared helpers: stable hashing and seed derivation.

Everything here must be stable across processes and platforms, so no use of
Python's builtin ``hash`` (randomized per process).
"""

from __future__ import annotations

import hashlib
from pathlib import Path


def stable_hash64(text: str) -> int:
    """Map a string to a stable unsigned 63-bit integer via SHA-256."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def stable_seed(*parts: object) -> int:
    """Derive a 31-bit seed from an arbitrary tuple of parts.

    The derivation is ``sha256(":".join(str(p)))`` truncated to 31 bits, so a
    single global seed can fan out to per-stage seeds reproducibly:
    ``stable_seed(global_seed, "cigm")``, ``stable_seed(global_seed, "eval")``
    and so on.
    """
    material = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFF_FFFF


def sha256_file(path: str | Path) -> str:
    """Hex SHA-256 digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
