"""KV pager: page-aligned arena, per-session views and the Reserve/Alias/Trim/Frame verbs.

Every session owns two view buffers.  Verbs edit the *shadow* buffer and
append to a per-session edit log; ``frame_commit`` swaps shadow and active in
one step, bumps the epoch and replays the log onto the new shadow so both
buffers agree again.  Commit work is therefore proportional to the number of
edits in the frame, never to the size of the view.

Logical layout is page aligned: logical page ``p`` holds tokens
``[p * tokens_per_page, (p + 1) * tokens_per_page)``.  A prefix alias that
ends mid-page shares the boundary block; the first write into its unaliased
tail copies the block.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AliasOverlap,
    FutureDelta,
    InvariantViolation,
    OutOfPages,
    PrefixOutOfRange,
    SessionRetired,
    UnknownSession,
    UnmappedRange,
)
from .freelist import FreeList, size_class

_DTYPES = {1: np.int8, 2: np.float16, 4: np.float32, 8: np.float64}


@dataclass(frozen=True)
class PagerConfig:
    page_bytes: int = 16384
    arena_pages: int = 4096
    layers: int = 2
    kv_head_dim: int = 64
    elem_bytes: int = 2
    store_payload: bool = True

    def __post_init__(self):
        if self.page_bytes <= 0 or self.page_bytes & (self.page_bytes - 1):
            raise ValueError(f"page_bytes must be a power of two, got {self.page_bytes}")
        if self.elem_bytes not in _DTYPES:
            raise ValueError(f"unsupported elem_bytes {self.elem_bytes}")
        if self.page_bytes < self.token_bytes:
            raise ValueError(
                f"page of {self.page_bytes} B cannot hold one token ({self.token_bytes} B)"
            )
        if self.arena_pages <= 0:
            raise ValueError("arena_pages must be positive")

    @property
    def token_bytes(self) -> int:
        """Bytes of K plus V for one token across all layers."""
        return 2 * self.layers * self.kv_head_dim * self.elem_bytes

    @property
    def tokens_per_page(self) -> int:
        return max(1, self.page_bytes // self.token_bytes)

    @property
    def dtype(self):
        return _DTYPES[self.elem_bytes]


class BlockState(enum.Enum):
    FREE = "free"
    LIVE = "live"
    SHARED = "shared"


@dataclass(frozen=True)
class FrameDelta:
    """All view edits for one session at decode step ``step``."""

    session_id: object
    step: int
    reserves: tuple[int, ...] = ()
    aliases: tuple[tuple[object, int], ...] = ()
    trims: tuple[tuple[int, int], ...] = ()
    eos: bool = False

    def __len__(self) -> int:
        return len(self.reserves) + len(self.aliases) + len(self.trims) + int(self.eos)


@dataclass(frozen=True)
class ViewDescriptor:
    session_id: object
    epoch: int
    entries: tuple[tuple[tuple[int, int], int, int], ...]
    live_token_count: int
    eos_flag: bool

    def block_of(self, token: int) -> int:
        for (lo, hi), block, _ in self.entries:
            if lo <= token < hi:
                return block
        raise UnmappedRange(f"token {token} not mapped")

    @property
    def blocks(self) -> list[int]:
        return [b for _, b, _ in self.entries]


class _View:
    # negative page indices hold auxiliary rows (far-view summaries); they
    # never count toward live tokens or the logical capacity
    __slots__ = ("pages", "owner", "live", "eos", "next_page", "mapped_live", "next_aux")

    def __init__(self):
        self.pages: dict[int, int] = {}
        self.owner: dict[int, int] = {}
        self.live = 0
        self.eos = False
        self.next_page = 0
        self.next_aux = -1
        self.mapped_live = 0  # live tokens that sit in mapped pages

    def _live_in(self, page: int, tpp: int) -> int:
        if page < 0:
            return 0
        return min(tpp, max(0, self.live - page * tpp))

    def map(self, page: int, block: int, tpp: int) -> None:
        self.pages[page] = block
        self.owner[block] = page
        if page >= self.next_page:
            self.next_page = page + 1
        elif page <= self.next_aux:
            self.next_aux = page - 1
        self.mapped_live += self._live_in(page, tpp)

    def unmap(self, page: int, tpp: int) -> int:
        block = self.pages.pop(page)
        del self.owner[block]
        self.mapped_live -= self._live_in(page, tpp)
        return block

    def set_live(self, n: int) -> None:
        if n > self.live:
            # the pages covering [live, n) are mapped by construction
            self.mapped_live += n - self.live
            self.live = n


class _Session:
    __slots__ = ("sid", "active", "shadow", "epoch", "log", "deferred", "start_step", "next_step")

    def __init__(self, sid, start_step: int):
        self.sid = sid
        self.active = _View()
        self.shadow = _View()
        self.epoch = 0
        self.log: list[tuple] = []
        self.deferred: list[int] = []  # blocks dropped from shadow but still active
        self.start_step = start_step
        self.next_step = start_step


@dataclass
class ArenaStats:
    free_pages: int
    live_pages: int
    shared_pages: int
    reserved_bytes: int
    active_bytes: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class WorkCounters:
    commits: int = 0
    last_commit_touched: int = 0
    last_commit_edits: int = 0
    max_touched_per_edit: float = 0.0
    cow_copies: int = 0
    history: list = field(default_factory=list)


class KVPager:
    def __init__(self, config: PagerConfig | None = None):
        self.config = config or PagerConfig()
        cfg = self.config
        self.tpp = cfg.tokens_per_page
        self.freelist = FreeList(cfg.arena_pages)
        self.refcount = [0] * cfg.arena_pages
        self.shared_pages = 0
        self._sessions: dict[object, _Session] = {}
        self._payload: dict[int, np.ndarray] = {}
        self._active_tokens = 0
        self._lock = threading.RLock()
        self.counters = WorkCounters()

    # -- sessions ----------------------------------------------------------
    def open_session(self, sid, start_step: int = 0) -> None:
        with self._lock:
            if sid in self._sessions:
                raise ValueError(f"session {sid!r} already open")
            self._sessions[sid] = _Session(sid, start_step)

    def close_session(self, sid) -> None:
        """Forget a retired session; its views must already be empty."""
        with self._lock:
            s = self._get(sid)
            if s.active.pages or s.shadow.pages or s.log:
                raise ValueError(f"session {sid!r} still maps pages; trim and commit first")
            del self._sessions[sid]

    def has_session(self, sid) -> bool:
        return sid in self._sessions

    @property
    def sessions(self) -> list:
        return list(self._sessions)

    def _get(self, sid) -> _Session:
        try:
            return self._sessions[sid]
        except KeyError:
            raise UnknownSession(sid) from None

    # -- refcounts ---------------------------------------------------------
    def _incref(self, block: int) -> None:
        rc = self.refcount[block] + 1
        self.refcount[block] = rc
        if rc == 2:
            self.shared_pages += 1

    def _decref(self, block: int) -> bool:
        rc = self.refcount[block] - 1
        self.refcount[block] = rc
        if rc == 1:
            self.shared_pages -= 1
        if rc == 0:
            self.freelist.free(block)
            self._payload.pop(block, None)
            return True
        return False

    def block_state(self, block: int) -> BlockState:
        rc = self.refcount[block]
        if rc == 0:
            return BlockState.FREE
        return BlockState.SHARED if rc >= 2 else BlockState.LIVE

    def size_class_of_run(self, length: int) -> int:
        return size_class(length)

    # -- shadow edits ------------------------------------------------------
    def _shadow_map(self, s: _Session, page: int, block: int) -> None:
        s.shadow.map(page, block, self.tpp)
        if block not in s.active.owner:
            self._incref(block)
        s.log.append(("map", page, block))

    def _shadow_unmap(self, s: _Session, page: int) -> bool:
        """Drop a page from the shadow; True if its block is (or will be) freed."""
        block = s.shadow.unmap(page, self.tpp)
        s.log.append(("unmap", page, block))
        if block in s.active.owner:
            s.deferred.append(block)
            return self.refcount[block] == 1
        return self._decref(block)

    # -- verbs -------------------------------------------------------------
    def reserve(self, sid, token_count: int, aux: bool = False) -> list[tuple[int, int]]:
        """Allocate pages for ``token_count`` upcoming rows into the shadow view.

        ``aux=True`` maps them below page 0, the area used for far-view summaries.
        """
        if token_count < 0:
            raise ValueError("token_count must be >= 0")
        with self._lock:
            s = self._get(sid)
            if s.shadow.eos or s.active.eos:
                raise SessionRetired(f"reserve on retired session {sid!r}")
            if token_count == 0:
                return []
            n = -(-token_count // self.tpp)
            if n > self.config.arena_pages:
                raise OutOfPages(f"{n} pages requested, arena holds {self.config.arena_pages}")
            blocks = self.freelist.alloc(n)
            if aux:
                base = s.shadow.next_aux
                for i, b in enumerate(blocks):
                    self._shadow_map(s, base - i, b)
            else:
                base = s.shadow.next_page
                for i, b in enumerate(blocks):
                    self._shadow_map(s, base + i, b)
            return [(b, self.tpp) for b in blocks]

    def reserve_batch(self, requests) -> list[list[tuple[int, int]]]:
        """Reserve for several sessions with one free-list request.

        ``requests`` is a sequence of ``(session, token_count)``.  Blocks are
        handed out in request order from a single allocation, so a step's new
        pages sit physically next to each other whenever a long enough free
        run exists.  All or nothing: OutOfPages leaves every view untouched.
        """
        with self._lock:
            need = []
            for sid, n in requests:
                if n < 0:
                    raise ValueError("token_count must be >= 0")
                s = self._get(sid)
                if s.shadow.eos or s.active.eos:
                    raise SessionRetired(f"reserve on retired session {sid!r}")
                need.append(-(-n // self.tpp))
            blocks = self.freelist.alloc(sum(need))
            out, i = [], 0
            for (sid, _), k in zip(requests, need):
                s = self._sessions[sid]
                base = s.shadow.next_page
                mine = blocks[i:i + k]
                i += k
                for j, b in enumerate(mine):
                    self._shadow_map(s, base + j, b)
                out.append([(b, self.tpp) for b in mine])
            return out

    def alias(self, dst, src, prefix_token_count: int) -> int:
        with self._lock:
            d, sv = self._get(dst), self._get(src)
            if d.shadow.eos:
                raise SessionRetired(f"alias into retired session {dst!r}")
            if prefix_token_count <= 0:
                return 0
            src_view = sv.active
            if src_view.live < prefix_token_count:
                raise PrefixOutOfRange(
                    f"{src!r} holds {src_view.live} tokens, prefix {prefix_token_count} requested"
                )
            npages = -(-prefix_token_count // self.tpp)
            for p in range(npages):
                if p not in src_view.pages:
                    raise PrefixOutOfRange(f"{src!r} page {p} is not mapped")
                if p in d.shadow.pages:
                    raise AliasOverlap(f"{dst!r} already maps page {p}")
            for p in range(npages):
                self._shadow_map(d, p, src_view.pages[p])
            if prefix_token_count > d.shadow.live:
                d.shadow.set_live(prefix_token_count)
                d.log.append(("live", prefix_token_count))
            return npages

    def trim(self, sid, ranges=(), eos: bool = False) -> int:
        """Unmap every page touched by ``ranges`` (or all pages on EOS).

        Returns the number of pages whose last reference goes away; pages the
        active view still maps are released when the frame commits.
        """
        with self._lock:
            s = self._get(sid)
            pages: list[int] = []
            if eos:
                pages = sorted(s.shadow.pages)
            else:
                for lo, hi in ranges:
                    if hi <= lo:
                        continue
                    for p in range(lo // self.tpp, -(-hi // self.tpp)):
                        if p not in s.shadow.pages:
                            raise UnmappedRange(f"{sid!r} page {p} not mapped")
                        pages.append(p)
            freed = 0
            for p in dict.fromkeys(pages):
                freed += self._shadow_unmap(s, p)
            if eos and not s.shadow.eos:
                s.shadow.eos = True
                s.log.append(("eos",))
            return freed

    def trim_pages(self, sid, pages) -> int:
        """Block-granular trim used by the placement cold set."""
        with self._lock:
            s = self._get(sid)
            freed = 0
            for p in pages:
                if p not in s.shadow.pages:
                    raise UnmappedRange(f"{sid!r} page {p} not mapped")
                freed += self._shadow_unmap(s, p)
            return freed

    def write_tokens(self, sid, start: int, payload=None, count: int | None = None) -> int:
        """Write ``payload`` (shape ``(n, 2, L, d_kv)``) at logical token ``start``.

        Shared blocks are copied first.  Returns the number of copies made.
        """
        with self._lock:
            s = self._get(sid)
            if payload is not None:
                payload = np.asarray(payload)
                n = payload.shape[0]
            else:
                n = count if count is not None else 0
            if n <= 0:
                return 0
            tpp = self.tpp
            end = start + n
            copies = 0
            for p in range(start // tpp, -(-end // tpp)):
                block = s.shadow.pages.get(p)
                if block is None:
                    raise UnmappedRange(f"{sid!r} token page {p} not mapped")
                if self.refcount[block] >= 2:
                    block = self._cow(s, p, block)
                    copies += 1
                if payload is not None and self.config.store_payload:
                    lo = max(start, p * tpp)
                    hi = min(end, (p + 1) * tpp)
                    buf = self._page_buf(block)
                    buf[lo - p * tpp: hi - p * tpp] = payload[lo - start: hi - start]
            if end > s.shadow.live:
                s.shadow.set_live(end)
                s.log.append(("live", end))
            return copies

    def _page_buf(self, block: int) -> np.ndarray:
        buf = self._payload.get(block)
        if buf is None:
            cfg = self.config
            buf = np.zeros((self.tpp, 2, cfg.layers, cfg.kv_head_dim), dtype=cfg.dtype)
            self._payload[block] = buf
        return buf

    def _cow(self, s: _Session, page: int, block: int) -> int:
        (fresh,) = self.freelist.alloc(1)
        src = self._payload.get(block)
        if src is not None:
            self._payload[fresh] = src.copy()
        self._shadow_unmap(s, page)
        self._shadow_map(s, page, fresh)
        self.counters.cow_copies += 1
        return fresh

    # -- commit ------------------------------------------------------------
    def frame_commit(self, sid, delta: FrameDelta | None = None) -> int:
        with self._lock:
            s = self._get(sid)
            step = s.next_step if delta is None else delta.step
            if step < s.next_step:
                # already committed: idempotent no-op
                return step - s.start_step + 1
            if step > s.next_step:
                raise FutureDelta(f"{sid!r} expects step {s.next_step}, got {step}")
            if delta is not None:
                for src, prefix in delta.aliases:
                    self.alias(sid, src, prefix)
                for n in delta.reserves:
                    self.reserve(sid, n)
                if delta.trims:
                    self.trim(sid, delta.trims)
                if delta.eos:
                    self.trim(sid, eos=True)
            old_active_tokens = s.active.mapped_live
            # the swap: one reference exchange publishes every edit of the frame
            s.active, s.shadow = s.shadow, s.active
            s.epoch += 1
            s.next_step = step + 1
            log = s.log
            s.log = []
            tpp = self.tpp
            shadow = s.shadow
            for op in log:
                kind = op[0]
                if kind == "map":
                    shadow.map(op[1], op[2], tpp)
                elif kind == "unmap":
                    shadow.unmap(op[1], tpp)
                elif kind == "live":
                    shadow.set_live(op[1])
                else:
                    shadow.eos = True
            touched = len(log)
            for block in s.deferred:
                if block not in s.active.owner:
                    self._decref(block)
                touched += 1
            s.deferred = []
            self._active_tokens += s.active.mapped_live - old_active_tokens
            c = self.counters
            c.commits += 1
            c.last_commit_touched = touched
            c.last_commit_edits = len(log)
            if log:
                c.max_touched_per_edit = max(c.max_touched_per_edit, touched / len(log))
            return s.epoch

    # -- reads -------------------------------------------------------------
    def active_view(self, sid) -> ViewDescriptor:
        with self._lock:
            s = self._get(sid)
            v = s.active
            tpp = self.tpp
            entries = tuple(
                ((p * tpp, (p + 1) * tpp), v.pages[p], 0) for p in sorted(v.pages) if p >= 0
            )
            return ViewDescriptor(sid, s.epoch, entries, v.live, v.eos)

    def epoch(self, sid) -> int:
        return self._get(sid).epoch

    def next_step(self, sid) -> int:
        return self._get(sid).next_step

    def active_pages(self, sid) -> dict[int, int]:
        """Committed page table of ``sid``; callers must not mutate it."""
        return self._get(sid).active.pages

    def shadow_pages(self, sid) -> dict[int, int]:
        return self._get(sid).shadow.pages

    def live_tokens(self, sid, shadow: bool = False) -> int:
        s = self._get(sid)
        return (s.shadow if shadow else s.active).live

    def capacity_tokens(self, sid, shadow: bool = True) -> int:
        s = self._get(sid)
        return (s.shadow if shadow else s.active).next_page * self.tpp

    def is_eos(self, sid) -> bool:
        return self._get(sid).active.eos

    def gather(self, sid, start: int = 0, end: int | None = None) -> np.ndarray:
        """Token payload ``[start, end)`` of the committed view, in logical order."""
        with self._lock:
            s = self._get(sid)
            v = s.active
            if end is None:
                end = v.live
            cfg = self.config
            out = np.zeros((max(0, end - start), 2, cfg.layers, cfg.kv_head_dim), dtype=cfg.dtype)
            tpp = self.tpp
            for p in range(start // tpp, -(-end // tpp) if end > start else start // tpp):
                block = v.pages.get(p)
                if block is None:
                    raise UnmappedRange(f"{sid!r} page {p} not mapped")
                buf = self._payload.get(block)
                lo = max(start, p * tpp)
                hi = min(end, (p + 1) * tpp)
                if buf is not None:
                    out[lo - start: hi - start] = buf[lo - p * tpp: hi - p * tpp]
            return out

    def stats(self) -> ArenaStats:
        cfg = self.config
        free = self.freelist.free_count
        return ArenaStats(
            free_pages=free,
            live_pages=cfg.arena_pages - free,
            shared_pages=self.shared_pages,
            reserved_bytes=(cfg.arena_pages - free) * cfg.page_bytes,
            active_bytes=self._active_tokens * cfg.token_bytes,
        )

    # -- audits ------------------------------------------------------------
    def check_invariants(self) -> None:
        """Full O(arena) audit of conservation and refcount soundness."""
        with self._lock:
            expected = [0] * self.config.arena_pages
            for s in self._sessions.values():
                for b in set(s.active.owner) | set(s.shadow.owner):
                    expected[b] += 1
            free_set = set(self.freelist.free_blocks())
            for b, rc in enumerate(self.refcount):
                _expect(rc == expected[b], f"block {b}: refcount {rc}, referenced by {expected[b]}")
                _expect((rc == 0) == (b in free_set), f"block {b}: rc {rc}, free={b in free_set}")
            live_unique = sum(1 for rc in self.refcount if rc > 0)
            _expect(self.freelist.free_count + live_unique == self.config.arena_pages,
                    "free plus live pages differs from the arena size")
            _expect(len(free_set) == self.freelist.free_count, "free-list count is stale")
            _expect(self.shared_pages == sum(1 for rc in self.refcount if rc >= 2),
                    "shared-page counter is stale")


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise InvariantViolation(msg)
