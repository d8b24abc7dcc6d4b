"""Cross-tensor parallelism, capped by the TASKVEC_THREADS variable."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")

ENV_VAR = "TASKVEC_THREADS"


def thread_cap() -> int:
    """Parallelism cap from TASKVEC_THREADS; 0 or unset means auto."""
    raw = os.environ.get(ENV_VAR, "0")
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    if cap < 0:
        raise ValueError(f"{ENV_VAR} must be >= 0, got {cap}")
    return cap if cap > 0 else (os.cpu_count() or 1)


def map_layers(fn: Callable[[str], T], names: Sequence[str]) -> dict[str, T]:
    """Apply fn per layer name, possibly across threads.

    Per-layer work must be independent; results are assembled by name so
    the outcome does not depend on scheduling.
    """
    workers = min(thread_cap(), len(names)) if names else 1
    if workers <= 1:
        return {name: fn(name) for name in names}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(fn, names))
    return dict(zip(names, results))
