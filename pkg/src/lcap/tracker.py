"""Contiguous acknowledgment prefix (low-water mark) tracking."""

from __future__ import annotations


class AckTracker:
    """Acknowledged indices of one stream, stored as a prefix plus a sparse set.

    Every index ``<= prefix`` is acknowledged. ``above`` holds acknowledged
    indices past a gap; they are absorbed into the prefix as soon as the
    gap closes.
    """

    __slots__ = ("prefix", "above")

    def __init__(self, prefix: int = 0):
        self.prefix = prefix
        self.above: set[int] = set()

    def add(self, index: int) -> int:
        if index <= self.prefix or index in self.above:
            return self.prefix
        if index != self.prefix + 1:
            self.above.add(index)
            return self.prefix
        prefix = index
        above = self.above
        while prefix + 1 in above:
            prefix += 1
            above.remove(prefix)
        self.prefix = prefix
        return prefix

    def __contains__(self, index: int) -> bool:
        return index <= self.prefix or index in self.above

    def acked_count(self, start: int = 1) -> int:
        """Number of acknowledged indices ``>= start``."""
        return max(self.prefix - start + 1, 0) + sum(1 for i in self.above if i >= start)

    def __repr__(self) -> str:
        return f"AckTracker(prefix={self.prefix}, above={sorted(self.above)})"
