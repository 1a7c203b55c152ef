"""Labeled seed derivation and content hashing for reproducible runs."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Union

_SEED_MASK = (1 << 63) - 1


def derive_seed(root: int, *labels: Union[str, int]) -> int:
    """Fan a root seed out into an independent stream keyed by labels.

    ``derive_seed(7, "rollout", 12)`` is stable across processes, platforms
    and Python versions (unlike ``hash``).
    """
    material = "|".join([str(int(root)), *(str(label) for label in labels)])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _SEED_MASK


def git_blob_hash(path: Union[str, Path]) -> str:
    """Hash a file the way ``git hash-object`` does (sha1 over a blob header)."""
    data = Path(path).read_bytes()
    header = f"blob {len(data)}\0".encode("ascii")
    return hashlib.sha1(header + data).hexdigest()


def config_digest(obj: Mapping[str, Any]) -> str:
    """Order-independent digest of a JSON-serialisable mapping."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.md5(payload.encode("utf-8")).hexdigest()
