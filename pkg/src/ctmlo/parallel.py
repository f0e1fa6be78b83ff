"""Worker-count policy for internal data parallelism (``CTMLO_THREADS``)."""
from __future__ import annotations

import os


def worker_count() -> int:
    """Workers for scipy's parallel kNN queries; -1 means all cores."""
    raw = os.environ.get("CTMLO_THREADS", "").strip()
    if not raw:
        return -1
    try:
        n = int(raw)
    except ValueError:
        return -1
    return max(1, n)
