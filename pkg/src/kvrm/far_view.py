"""Optional bounded-budget view: exact near window plus up to ``cap`` chunk means.

The kernel-visible width is always ``W_star + cap`` rows.  Slots that a short
history cannot fill are masked rather than dropped, so the shape never moves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyChunk


@dataclass(frozen=True)
class FarViewConfig:
    enabled: bool = False
    W_star: int = 512
    cap: int = 64
    sv_chunk: int = 128

    def __post_init__(self):
        if self.W_star < 1:
            raise ValueError("W_star must be >= 1")
        if self.cap < 0:
            raise ValueError("cap must be >= 0")
        if self.sv_chunk < 1:
            raise ValueError("sv_chunk must be >= 1")

    @property
    def visible_width(self) -> int:
        return self.W_star + (self.cap if self.enabled else 0)


@dataclass
class SummarizedView:
    keys: np.ndarray  # (visible_width, d)
    values: np.ndarray
    mask: np.ndarray  # True for real rows
    near_range: tuple[int, int]
    far_chunks: list[int]
    visible_width: int

    @property
    def n_far(self) -> int:
        return len(self.far_chunks)


def summarize_chunk(keys: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Uniform aggregation: elementwise mean of the chunk's K rows and V rows."""
    keys = np.asarray(keys)
    values = np.asarray(values)
    if keys.shape[0] == 0:
        raise EmptyChunk("cannot summarize an empty chunk")
    k = keys.mean(axis=0, dtype=np.float64).astype(keys.dtype, copy=False)
    v = values.mean(axis=0, dtype=np.float64).astype(values.dtype, copy=False)
    return k, v


def far_chunks(boundary: int, sv_chunk: int) -> list[tuple[int, int]]:
    """Chunks of the far history ``[0, boundary)``; the last may be short."""
    return [(lo, min(lo + sv_chunk, boundary)) for lo in range(0, boundary, sv_chunk)]


def select_chunks(scores, cap: int) -> list[int]:
    """Top-``cap`` chunk ids by score, lower id first on ties, returned in id order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:cap])


def chunk_scores_from_blocks(chunks, block_score, tokens_per_page: int) -> list[float]:
    """Chunk score = sum of the scores of the page blocks the chunk touches."""
    out = []
    for lo, hi in chunks:
        pages = range(lo // tokens_per_page, -(-hi // tokens_per_page))
        out.append(float(sum(block_score(p) for p in pages)))
    return out


def build_view(keys: np.ndarray, values: np.ndarray, config: FarViewConfig,
               chunk_scores=None) -> SummarizedView:
    """Fixed-width view over a history of ``len(keys)`` tokens (t = len - 1).

    ``chunk_scores`` ranks far chunks; by default later chunks rank higher.
    """
    keys = np.asarray(keys)
    values = np.asarray(values)
    n, d = keys.shape
    w, cap = config.W_star, config.cap
    width = w + cap
    b = max(0, n - w)
    chunks = far_chunks(b, config.sv_chunk)
    if chunk_scores is None:
        chunk_scores = list(range(len(chunks)))
    if len(chunk_scores) != len(chunks):
        raise ValueError(f"{len(chunks)} far chunks but {len(chunk_scores)} scores")
    chosen = select_chunks(chunk_scores, cap) if cap else []

    out_k = np.zeros((width, d), dtype=keys.dtype)
    out_v = np.zeros((width, d), dtype=values.dtype)
    mask = np.zeros(width, dtype=bool)
    # far rows first, then the near window, both in logical order
    for slot, c in enumerate(chosen):
        lo, hi = chunks[c]
        out_k[slot], out_v[slot] = summarize_chunk(keys[lo:hi], values[lo:hi])
        mask[slot] = True
    near = n - b
    out_k[cap:cap + near] = keys[b:n]
    out_v[cap:cap + near] = values[b:n]
    mask[cap:cap + near] = True
    return SummarizedView(out_k, out_v, mask, (b, n), chosen, width)


def attend_dense(keys: np.ndarray, values: np.ndarray, query: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys)
    query = np.asarray(query)
    if query.shape[-1] != keys.shape[-1]:
        raise DimensionMismatch(f"query dim {query.shape[-1]} != key dim {keys.shape[-1]}")
    if keys.shape[0] == 0:
        raise EmptyChunk("attention over an empty history")
    logits = keys @ query / np.sqrt(keys.shape[-1])
    logits = logits - logits.max()
    w = np.exp(logits)
    w /= w.sum()
    return w @ values


def attend(view: SummarizedView, query: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention over the view's unmasked rows."""
    return attend_dense(view.keys[view.mask], view.values[view.mask], query)
