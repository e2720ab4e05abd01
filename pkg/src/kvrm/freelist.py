"""Size-partitioned free lists over a linear page arena.

Free space is kept as maximal runs of physically adjacent blocks.  Each run
sits in one of four size classes (1, 2-3, 4-7, 8+) with a LIFO stack per
class.  Runs are found by boundary tags, so freeing a block and coalescing it
with its neighbours is O(1); allocation is O(1) per block handed out.
Stale stack entries are discarded lazily on pop.
"""
from __future__ import annotations

from .errors import OutOfPages

CLASS_MIN = (1, 2, 4, 8)


def size_class(length: int) -> int:
    if length >= 8:
        return 3
    if length >= 4:
        return 2
    if length >= 2:
        return 1
    return 0


class FreeList:
    def __init__(self, n_pages: int):
        if n_pages <= 0:
            raise ValueError("arena must hold at least one page")
        self.n_pages = n_pages
        self.free_count = 0
        self._run_len: dict[int, int] = {}  # run start -> length
        self._run_start: dict[int, int] = {}  # run last block -> start
        self._stacks: list[list[int]] = [[], [], [], []]
        self.work = 0  # primitive steps, for the bounded-work audit
        self._add_run(0, n_pages)
        self.free_count = n_pages

    # -- run bookkeeping ---------------------------------------------------
    def _add_run(self, start: int, length: int) -> None:
        self._run_len[start] = length
        self._run_start[start + length - 1] = start
        self._stacks[size_class(length)].append(start)
        self.work += 1

    def _drop_run(self, start: int) -> int:
        length = self._run_len.pop(start)
        del self._run_start[start + length - 1]
        self.work += 1
        return length

    def _pop_valid(self, cls: int, need: int | None = None) -> int | None:
        stack = self._stacks[cls]
        while stack:
            start = stack[-1]
            self.work += 1
            length = self._run_len.get(start)
            if length is None or size_class(length) != cls:
                stack.pop()
                continue
            if need is not None and length < need:
                return None
            stack.pop()
            return start
        return None

    def _take_run(self, need: int) -> tuple[int, int]:
        """Pick a run for `need` blocks; returns (start, length of run)."""
        # smallest class whose every run is guaranteed to fit
        for cls in range(4):
            if CLASS_MIN[cls] >= need:
                start = self._pop_valid(cls)
                if start is not None:
                    return start, self._drop_run(start)
        # a run in need's own class may still be long enough
        cls = size_class(need)
        start = self._pop_valid(cls, need)
        if start is not None:
            return start, self._drop_run(start)
        # fragmented: hand out the largest-class run available, partially
        for cls in (3, 2, 1, 0):
            start = self._pop_valid(cls)
            if start is not None:
                return start, self._drop_run(start)
        raise AssertionError("free count and run index disagree")

    # -- public ------------------------------------------------------------
    def alloc(self, n: int) -> list[int]:
        if n < 0:
            raise ValueError("negative allocation")
        if n > self.free_count:
            raise OutOfPages(f"need {n} pages, {self.free_count} free")
        out: list[int] = []
        remaining = n
        while remaining:
            start, length = self._take_run(remaining)
            take = min(length, remaining)
            out.extend(range(start, start + take))
            self.work += take
            if take < length:
                self._add_run(start + take, length - take)
            remaining -= take
        self.free_count -= n
        return out

    def free(self, block: int) -> None:
        if block in self._run_len or block in self._run_start:
            raise ValueError(f"double free of block {block}")
        start, length = block, 1
        left = self._run_start.get(block - 1)
        if left is not None:
            llen = self._drop_run(left)
            start, length = left, llen + 1
        if block + 1 in self._run_len:
            length += self._drop_run(block + 1)
        self._add_run(start, length)
        self.free_count += 1
        self.work += 1

    def is_free(self, block: int) -> bool:
        # linear scan; used by audits and tests only
        for start, length in self._run_len.items():
            if start <= block < start + length:
                return True
        return False

    def runs(self) -> list[tuple[int, int]]:
        return sorted(self._run_len.items())

    def free_blocks(self) -> list[int]:
        return [b for s, n in self.runs() for b in range(s, s + n)]
