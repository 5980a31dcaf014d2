"""Deterministic local byte corpus built from the Python standard library sources."""

from __future__ import annotations

import sysconfig
from pathlib import Path


def stdlib_corpus(size: int = 1_000_000, root: str | Path | None = None) -> bytes:
    """Concatenate stdlib ``.py`` files in sorted path order up to ``size`` bytes."""
    base = Path(root or sysconfig.get_paths()["stdlib"])
    chunks, total = [], 0
    for path in sorted(base.glob("*.py")):
        data = path.read_bytes()
        chunks.append(data)
        total += len(data)
        if total >= size:
            break
    blob = b"".join(chunks)[:size]
    if len(blob) < size:
        raise RuntimeError(f"only {len(blob)} bytes of source found under {base}")
    return blob


def order0_entropy_bits(data: bytes) -> float:
    """Empirical unigram entropy in bits per byte."""
    import math
    from collections import Counter

    counts = Counter(data)
    total = len(data)
    return -sum(c / total * math.log2(c / total) for c in counts.values())
