import threading
from collections import defaultdict
from typing import Dict, List

_local = threading.local()


def _stack() -> List["FlopCounter"]:
    if not hasattr(_local, "counters"):
        _local.counters = []
    return _local.counters


def record_flops(op: str, flops: int) -> None:
    """Charge ``flops`` to every counter active on this thread."""
    for counter in _stack():
        counter.total += flops
        counter.by_op[op] += flops


class FlopCounter:
    """Runtime FLOP meter for executed primitives.

    Uses the same convention as the complexity analyzer (1 multiply-add = 2 FLOPs).
    """

    def __init__(self):
        self.total = 0
        self.by_op: Dict[str, int] = defaultdict(int)

    def __enter__(self) -> "FlopCounter":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
