"""Prefill and incremental decode with per-layer KV caches.

Full layers keep every key/value row. Sparse layers keep the sink blocks in a
separate store plus a ring of the ``l`` most recent blocks; a block is evicted
only when a new block opens, so the retained rows are exactly the keys the
streaming mask allows for the current position.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .attention import SparsePattern, blocked_sparse_attention, causal_mask, masked_attention
from .model import Full, Model, Sparse, _check_tokens, embed, ffn, project_qkv
from .numerics import ContractError, Tensor, masked_softmax, rmsnorm


class CacheIntegrityError(RuntimeError):
    """Caches disagree with the number of tokens processed."""


class FullKvCache:
    def __init__(self, n_heads: int, head_dim: int, capacity: int = 64):
        self._k = np.empty((capacity, n_heads, head_dim))
        self._v = np.empty((capacity, n_heads, head_dim))
        self.length = 0
        self.pos = 0  # tokens seen

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        """Append ``[m, h, d]`` rows."""
        m = k.shape[0]
        need = self.length + m
        if need > self._k.shape[0]:
            cap = max(need, 2 * self._k.shape[0])
            for name in ("_k", "_v"):
                old = getattr(self, name)
                new = np.empty((cap,) + old.shape[1:])
                new[: self.length] = old[: self.length]
                setattr(self, name, new)
        self._k[self.length : need] = k
        self._v[self.length : need] = v
        self.length = need
        self.pos += m

    def keys(self) -> np.ndarray:
        return self._k[: self.length]

    def values(self) -> np.ndarray:
        return self._v[: self.length]

    def positions(self) -> np.ndarray:
        return np.arange(self.length)

    @property
    def rows(self) -> int:
        return self.length


class SsaKvCache:
    def __init__(self, pattern: SparsePattern, n_heads: int, head_dim: int):
        self.pattern = pattern
        cap = pattern.sink_blocks * pattern.block_size
        self._sink_k = np.empty((cap, n_heads, head_dim))
        self._sink_v = np.empty((cap, n_heads, head_dim))
        self.sink_rows = 0
        # (block index, keys, values, rows filled)
        self.ring: deque = deque()
        self.pos = 0
        self._shape = (n_heads, head_dim)

    def _append_row(self, k: np.ndarray, v: np.ndarray) -> None:
        p = self.pattern
        b, t = p.block_size, self.pos
        qb = t // b
        if qb < p.sink_blocks:
            self._sink_k[self.sink_rows] = k
            self._sink_v[self.sink_rows] = v
            self.sink_rows += 1
        else:
            if t % b == 0 or not self.ring:
                while self.ring and qb - self.ring[0][0] >= p.local_blocks:
                    self.ring.popleft()
                self.ring.append([qb, np.empty((b,) + self._shape), np.empty((b,) + self._shape), 0])
            blk = self.ring[-1]
            blk[1][blk[3]] = k
            blk[2][blk[3]] = v
            blk[3] += 1
        self.pos += 1

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        """Append ``[m, h, d]`` rows. Whole blocks that would be evicted before
        the append finishes are skipped; only the position advances."""
        p = self.pattern
        b, m = p.block_size, k.shape[0]
        last_block = (self.pos + m - 1) // b
        i = 0
        while i < m:
            t = self.pos
            qb = t // b
            run = min(m - i, b - t % b)  # rows left in this block
            if qb >= p.sink_blocks and last_block - qb >= p.local_blocks:
                self.pos += run
            elif qb < p.sink_blocks:
                self._sink_k[self.sink_rows : self.sink_rows + run] = k[i : i + run]
                self._sink_v[self.sink_rows : self.sink_rows + run] = v[i : i + run]
                self.sink_rows += run
                self.pos += run
            else:
                if not self.ring or self.ring[-1][0] != qb:
                    while self.ring and qb - self.ring[0][0] >= p.local_blocks:
                        self.ring.popleft()
                    self.ring.append([qb, np.empty((b,) + self._shape), np.empty((b,) + self._shape), t % b])
                blk = self.ring[-1]
                blk[1][blk[3] : blk[3] + run] = k[i : i + run]
                blk[2][blk[3] : blk[3] + run] = v[i : i + run]
                blk[3] += run
                self.pos += run
            i += run

    def keys(self) -> np.ndarray:
        return np.concatenate([self._sink_k[: self.sink_rows]] + [blk[1][: blk[3]] for blk in self.ring])

    def values(self) -> np.ndarray:
        return np.concatenate([self._sink_v[: self.sink_rows]] + [blk[2][: blk[3]] for blk in self.ring])

    def positions(self) -> np.ndarray:
        b = self.pattern.block_size
        parts = [np.arange(self.sink_rows)] + [np.arange(blk[0] * b, blk[0] * b + blk[3]) for blk in self.ring]
        return np.concatenate(parts)

    @property
    def rows(self) -> int:
        return self.sink_rows + sum(blk[3] for blk in self.ring)


Cache = Union[FullKvCache, SsaKvCache]


@dataclass
class DecodeState:
    caches: list[Cache]
    pos: int = 0
    last_rows_read: list[int] = field(default_factory=list)

    def check(self) -> None:
        for i, c in enumerate(self.caches):
            if c.pos != self.pos:
                raise CacheIntegrityError(f"layer {i} cache has seen {c.pos} tokens, session has {self.pos}")


def new_state(m: Model) -> DecodeState:
    caches: list[Cache] = []
    for i, mode in enumerate(m.modes):
        if isinstance(mode, Full):
            caches.append(FullKvCache(m.cfg.n_heads, m.cfg.head_dim))
        elif isinstance(mode, Sparse):
            caches.append(SsaKvCache(mode.pattern, m.cfg.n_heads, m.cfg.head_dim))
        else:
            raise ContractError(f"layer {i} is blended; decoding needs full or sparse layers")
    return DecodeState(caches)


def _attend_one(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """One query ``[h, d]`` against cached ``[r, h, d]`` rows."""
    d = q.shape[-1]
    s = np.einsum("hd,rhd->hr", q, k) / math.sqrt(d)
    p = masked_softmax(s, None)
    return np.einsum("hr,rhd->hd", p, v)


def prefill(m: Model, tokens) -> tuple[DecodeState, np.ndarray]:
    """Run the prompt, fill caches, and return logits for its last position."""
    ids = _check_tokens(m, tokens)
    if ids.ndim != 1:
        raise ContractError("prefill takes a single [n] prompt")
    state = new_state(m)
    n = ids.shape[0]
    x = embed(m, ids)
    for i, cache in enumerate(state.caches):
        p = f"layers.{i}."
        h = rmsnorm(x, m[p + "ln1"])
        q, k, v = project_qkv(m, i, h)
        if isinstance(cache, SsaKvCache):
            o = blocked_sparse_attention(q.data, k.data, v.data, cache.pattern)
        else:
            o = masked_attention(q, k, v, causal_mask(n)).data
        cache.append(k.data, v.data)
        x = Tensor(x.data + o.reshape(n, -1) @ m[p + "w_o"].data)
        x = Tensor(x.data + ffn(m, i, rmsnorm(x, m[p + "ln2"])).data)
    state.pos = n
    state.last_rows_read = [c.rows for c in state.caches]
    logits = rmsnorm(Tensor(x.data[-1:]), m["ln_f"]).data @ m["head"].data
    return state, logits[0]


def decode_step(m: Model, state: DecodeState, token: int) -> np.ndarray:
    """Feed one token; returns next-token logits. ``state.last_rows_read`` holds the
    KV rows each layer read for this step."""
    state.check()
    t = state.pos
    if t >= m.cfg.max_seq_len:
        raise ContractError(f"position {t} exceeds max_seq_len {m.cfg.max_seq_len}")
    ids = _check_tokens(m, [token])
    x = embed(m, ids, offset=t).data  # [1, d]
    rows = []
    for i, cache in enumerate(state.caches):
        p = f"layers.{i}."
        h = rmsnorm(Tensor(x), m[p + "ln1"])
        q, k, v = project_qkv(m, i, h)
        cache.append(k.data, v.data)
        K, V = cache.keys(), cache.values()
        rows.append(K.shape[0])
        o = _attend_one(q.data[0], K, V).reshape(1, -1) @ m[p + "w_o"].data
        x = x + o
        x = x + ffn(m, i, rmsnorm(Tensor(x), m[p + "ln2"])).data
    state.pos = t + 1
    state.last_rows_read = rows
    return (rmsnorm(Tensor(x), m["ln_f"]).data @ m["head"].data)[0]


def greedy_decode(m: Model, prompt, steps: int) -> tuple[list[int], list[np.ndarray], list[list[int]]]:
    """Greedy generation; returns (generated ids, logits per step, rows read per step)."""
    state, logits = prefill(m, prompt)
    out, all_logits, reads = [], [logits], [list(state.last_rows_read)]
    for _ in range(steps):
        tok = int(np.argmax(logits))
        out.append(tok)
        logits = decode_step(m, state, tok)
        all_logits.append(logits)
        reads.append(list(state.last_rows_read))
    return out, all_logits, reads
