"""Causal full attention, streaming sparse attention and their gated blend.

The streaming pattern lets query ``i`` see key ``j`` iff ``j <= i`` and key
block ``j // b`` is either one of the first ``s`` (sink) blocks or within the
``l`` most recent blocks counted from the query's own block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .numerics import (
    ContractError,
    DimensionError,
    Tensor,
    masked_softmax,
    add,
    linear,
    mul,
    record,
    reshape,
    scale,
)


@dataclass(frozen=True)
class SparsePattern:
    sink_blocks: int = 1
    local_blocks: int = 7
    block_size: int = 128

    def __post_init__(self):
        if self.sink_blocks < 0 or self.local_blocks < 1 or self.block_size < 1:
            raise ContractError(
                f"invalid pattern (s={self.sink_blocks}, l={self.local_blocks}, b={self.block_size}): "
                "need s >= 0, l >= 1, b >= 1"
            )

    def window_tokens(self) -> int:
        return (self.sink_blocks + self.local_blocks) * self.block_size

    def to_dict(self) -> dict:
        return {"sink_blocks": self.sink_blocks, "local_blocks": self.local_blocks, "block_size": self.block_size}

    @classmethod
    def from_dict(cls, d: dict) -> "SparsePattern":
        return cls(int(d["sink_blocks"]), int(d["local_blocks"]), int(d["block_size"]))


LONG_CONTEXT_PATTERN = SparsePattern(1, 7, 128)
DESK_PATTERN = SparsePattern(1, 3, 16)


def key_block_ranges(qb: int, p: SparsePattern) -> tuple[tuple[int, int], tuple[int, int]]:
    """Key-block ranges ``[lo, hi)`` visible from query block ``qb``: (sinks, locals).

    The two ranges never overlap; either may be empty.
    """
    sink_hi = min(p.sink_blocks, qb + 1)
    local_lo = max(qb - p.local_blocks + 1, sink_hi)
    return (0, sink_hi), (local_lo, qb + 1)


@dataclass(frozen=True)
class AttnMask:
    """Streaming mask over ``seq_len`` tokens, stored as block intervals."""

    seq_len: int
    pattern: SparsePattern

    @property
    def n_blocks(self) -> int:
        return -(-self.seq_len // self.pattern.block_size)

    def allowed(self, i: int, j: int) -> bool:
        b = self.pattern.block_size
        if not (0 <= j <= i < self.seq_len):
            return False
        return j // b < self.pattern.sink_blocks or i // b - j // b < self.pattern.local_blocks

    def key_ranges(self, qb: int) -> list[tuple[int, int]]:
        """Token ranges ``[lo, hi)`` that query block ``qb`` may read (causality within
        the own block still applies per row)."""
        b, n = self.pattern.block_size, self.seq_len
        out = []
        for lo, hi in key_block_ranges(qb, self.pattern):
            if hi > lo:
                out.append((lo * b, min(hi * b, n)))
        return out

    def row_count(self, i: int) -> int:
        """Number of keys query ``i`` attends to."""
        b = self.pattern.block_size
        total = 0
        for lo, hi in self.key_ranges(i // b):
            total += max(0, min(hi, i + 1) - lo)
        return total

    def row_counts(self) -> np.ndarray:
        i = np.arange(self.seq_len)
        return _allowed_counts(i, self.pattern)

    def dense(self) -> np.ndarray:
        n, p = self.seq_len, self.pattern
        i = np.arange(n)[:, None]
        j = np.arange(n)[None, :]
        qb, kb = i // p.block_size, j // p.block_size
        return (j <= i) & ((kb < p.sink_blocks) | (qb - kb < p.local_blocks))


def _allowed_counts(i: np.ndarray, p: SparsePattern) -> np.ndarray:
    """Vectorized |allowed(i, .)| for an array of query positions."""
    b, s, l = p.block_size, p.sink_blocks, p.local_blocks
    qb = i // b
    sink_hi = np.minimum(s, qb + 1)
    local_lo = np.maximum(qb - l + 1, sink_hi)
    sink_rows = np.minimum(sink_hi * b, i + 1)
    local_rows = np.maximum(0, i + 1 - local_lo * b)
    return sink_rows + local_rows


def build_streaming_mask(n: int, p: SparsePattern) -> AttnMask:
    if n < 1:
        raise ContractError(f"sequence length must be >= 1, got {n}")
    return AttnMask(n, p)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------------------
# differentiable masked attention


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape or q.shape != v.shape or q.data.ndim not in (3, 4):
        raise DimensionError(f"attention expects matching [n, h, d] (or [B, n, h, d]) inputs, got {q.shape}, {k.shape}, {v.shape}")


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """softmax(QK^T / sqrt(d), mask) V per head; ``mask`` is a dense [n, n] bool array."""
    _check_qkv(q, k, v)
    n, d = q.shape[-3], q.shape[-1]
    if mask.shape != (n, n):
        raise DimensionError(f"mask {mask.shape} does not match sequence length {n}")
    c = 1.0 / math.sqrt(d)
    # [.., n, h, d] -> [.., h, n, d]
    Q = np.swapaxes(q.data, -3, -2)
    K = np.swapaxes(k.data, -3, -2)
    V = np.swapaxes(v.data, -3, -2)
    P = masked_softmax((Q @ np.swapaxes(K, -1, -2)) * c, mask)
    out = np.swapaxes(P @ V, -3, -2)

    def bw(g):
        G = np.swapaxes(g, -3, -2)
        dv = np.swapaxes(np.swapaxes(P, -1, -2) @ G, -3, -2) if v.requires_grad else None
        dP = G @ np.swapaxes(V, -1, -2)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * c
        dq = np.swapaxes(dS @ K, -3, -2) if q.requires_grad else None
        dk = np.swapaxes(np.swapaxes(dS, -1, -2) @ Q, -3, -2) if k.requires_grad else None
        return dq, dk, dv

    return record(out, (q, k, v), bw)


def attention_probs(q: np.ndarray, k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Attention weights [.., h, n, n] for inspection."""
    d = q.shape[-1]
    Q = np.swapaxes(q, -3, -2)
    K = np.swapaxes(k, -3, -2)
    return masked_softmax((Q @ np.swapaxes(K, -1, -2)) / math.sqrt(d), mask)


def full_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    _check_qkv(q, k, v)
    return masked_attention(q, k, v, causal_mask(q.shape[-3]))


def streaming_sparse_attention(q: Tensor, k: Tensor, v: Tensor, p: SparsePattern, method: str = "mask") -> Tensor:
    """Attention restricted to sink and local blocks.

    ``method="mask"`` is differentiable and materializes dense scores;
    ``method="blocked"`` only touches the allowed key blocks and is forward-only.
    """
    _check_qkv(q, k, v)
    n = q.shape[-3]
    if method == "mask":
        return masked_attention(q, k, v, build_streaming_mask(n, p).dense())
    if method == "blocked":
        return Tensor(blocked_sparse_attention(q.data, k.data, v.data, p))
    raise ContractError(f"unknown method {method!r}")


def blocked_sparse_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, p: SparsePattern) -> np.ndarray:
    """Block-gathered streaming attention over [.., n, h, d] arrays."""
    n, d = q.shape[-3], q.shape[-1]
    b = p.block_size
    c = 1.0 / math.sqrt(d)
    mask = build_streaming_mask(n, p)
    out = np.empty_like(q)
    for qb in range(mask.n_blocks):
        q0, q1 = qb * b, min((qb + 1) * b, n)
        idx = np.concatenate([np.arange(lo, hi) for lo, hi in mask.key_ranges(qb)])
        Qb = np.swapaxes(q[..., q0:q1, :, :], -3, -2)  # [.., h, m, d]
        Kb = np.swapaxes(k[..., idx, :, :], -3, -2)
        Vb = np.swapaxes(v[..., idx, :, :], -3, -2)
        rows = np.arange(q0, q1)[:, None]
        ok = idx[None, :] <= rows
        P = masked_softmax((Qb @ np.swapaxes(Kb, -1, -2)) * c, ok)
        out[..., q0:q1, :, :] = np.swapaxes(P @ Vb, -3, -2)
    return out


Gate = Union[float, Tensor]


def blended_attention(q: Tensor, k: Tensor, v: Tensor, p: SparsePattern, alpha: Gate) -> Tensor:
    """``alpha * full + (1 - alpha) * sparse``; ``alpha`` may be a scalar tensor."""
    a = alpha if isinstance(alpha, Tensor) else Tensor(float(alpha))
    if a.size != 1:
        raise ContractError(f"alpha must be a scalar, got shape {a.shape}")
    av = a.item()
    if not (0.0 <= av <= 1.0) or math.isnan(av):
        raise ContractError(f"alpha must lie in [0, 1], got {av}")
    a = reshape(a, ()) if a.shape != () else a
    o_full = full_attention(q, k, v)
    o_sparse = streaming_sparse_attention(q, k, v, p)
    one_minus = add(Tensor(1.0), scale(a, -1.0))
    return add(mul(a, o_full), mul(one_minus, o_sparse))


# ---------------------------------------------------------------------------
# latent KV projection


@dataclass
class MlaLiteWeights:
    """Joint low-rank KV compression: ``c = h W_down``, ``K = c W_uk``, ``V = c W_uv``."""

    w_down: Tensor  # [d_model, latent]
    w_uk: Tensor  # [latent, n_heads * head_dim]
    w_uv: Tensor  # [latent, n_heads * head_dim]
    w_q: Tensor  # [d_model, n_heads * head_dim]
    n_heads: int

    def __post_init__(self):
        d_model, latent = self.w_down.shape
        if latent > d_model:
            raise ContractError(f"latent dim {latent} exceeds d_model {d_model}")
        hd = self.w_q.shape[1]
        if (
            self.w_q.shape[0] != d_model
            or self.w_uk.shape != (latent, hd)
            or self.w_uv.shape != (latent, hd)
            or hd % self.n_heads
        ):
            raise DimensionError(
                f"inconsistent MLA-lite weights: down {self.w_down.shape}, uk {self.w_uk.shape}, "
                f"uv {self.w_uv.shape}, q {self.w_q.shape}, heads {self.n_heads}"
            )

    def tensors(self) -> dict[str, Tensor]:
        return {"w_down": self.w_down, "w_uk": self.w_uk, "w_uv": self.w_uv, "w_q": self.w_q}


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    hd = x.shape[-1]
    return reshape(x, x.shape[:-1] + (n_heads, hd // n_heads))


def mla_lite_project(h: Tensor, w: MlaLiteWeights) -> tuple[Tensor, Tensor, Tensor]:
    if h.shape[-1] != w.w_down.shape[0]:
        raise DimensionError(f"hidden states {h.shape} do not match d_model {w.w_down.shape[0]}")
    c = linear(h, w.w_down)
    k = _split_heads(linear(c, w.w_uk), w.n_heads)
    v = _split_heads(linear(c, w.w_uv), w.n_heads)
    q = _split_heads(linear(h, w.w_q), w.n_heads)
    return q, k, v

