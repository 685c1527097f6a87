"""Process-wide diagnostic counters for rare-but-legal events.

Cheap, thread-safe counters incremented by library code when it hits a
convention fallback (origin-point grouping, token-empty wedges, clamped
RoI depths).  Tests snapshot/reset them to assert the fallbacks fired.
"""

from __future__ import annotations

import threading
from collections import Counter

_lock = threading.Lock()
_counts: Counter[str] = Counter()


def bump(name: str, by: int = 1) -> None:
    with _lock:
        _counts[name] += by


def get(name: str) -> int:
    with _lock:
        return _counts.get(name, 0)


def snapshot() -> dict[str, int]:
    with _lock:
        return dict(_counts)


def reset() -> None:
    with _lock:
        _counts.clear()
