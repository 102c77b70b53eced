"""Analytic attention cost for prefill and decode, and tensor-parallel rank balance.

Conventions: one multiply-accumulate is 2 FLOPs; softmax and norms are not
counted. Per (query, key) pair and head, scores and the value product cost
``2 * d`` FLOPs each, so a layer costs ``4 * h * d`` FLOPs per attended pair.
Decode cost is proxied by KV rows read.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .attention import SparsePattern, _allowed_counts
from .model import Full, LayerMode, ModelConfig, Sparse
from .numerics import ContractError

ModeLike = Union[LayerMode, str]


def _is_sparse(mode: ModeLike) -> bool:
    if isinstance(mode, str):
        if mode not in ("full", "sparse"):
            raise ContractError(f"unknown mode {mode!r}")
        return mode == "sparse"
    if isinstance(mode, (Full, Sparse)):
        return isinstance(mode, Sparse)
    raise ContractError(f"cost model handles full and sparse layers, got {mode!r}")


def attended_pairs(n: int, mode: ModeLike, p: SparsePattern) -> int:
    """Total (query, key) pairs over a causal prefill of ``n`` tokens."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    if not _is_sparse(mode):
        return n * (n + 1) // 2
    return int(_allowed_counts(np.arange(n, dtype=np.int64), p).sum())


def prefill_attention_flops(
    n: int, modes: Sequence[ModeLike], p: SparsePattern, n_heads: int = 1, head_dim: int = 1
) -> dict:
    """Per-layer and total attention FLOPs for prefilling ``n`` tokens."""
    per_pair = 4 * n_heads * head_dim
    cache: dict[bool, int] = {}
    per_layer = []
    for md in modes:
        sp = _is_sparse(md)
        if sp not in cache:
            cache[sp] = attended_pairs(n, "sparse" if sp else "full", p) * per_pair
        per_layer.append(cache[sp])
    return {"per_layer": per_layer, "total": sum(per_layer)}


def decode_kv_reads(t: int, mode: ModeLike, p: SparsePattern) -> int:
    """KV rows one layer reads when the context holds ``t`` tokens (the newest included)."""
    if t < 1:
        raise ContractError(f"t must be >= 1, got {t}")
    if not _is_sparse(mode):
        return t
    return int(_allowed_counts(np.array([t - 1]), p)[0])


def non_attention_flops_per_token(cfg: ModelConfig) -> int:
    """Projection and FFN FLOPs per token per layer."""
    d, hd = cfg.d_model, cfg.n_heads * cfg.head_dim
    if cfg.latent_dim is None:
        proj = 2 * (3 * d * hd + hd * d)
    else:
        proj = 2 * (d * hd + d * cfg.latent_dim + 2 * cfg.latent_dim * hd + hd * d)
    return proj + 2 * 2 * d * cfg.ffn_dim


@dataclass
class CostReport:
    context_len: int
    phase: str
    modes: list[str]
    attention: list[int]  # per layer: FLOPs (prefill) or KV rows read (decode)
    attention_flops: int
    kv_rows: int
    non_attention: float
    total: float
    baseline_total: float
    attention_ratio: float
    ratio: float


def cost_report(
    n: int,
    modes: Sequence[ModeLike],
    p: SparsePattern,
    phase: str,
    n_heads: int = 1,
    head_dim: int = 1,
    non_attention_per_token_layer: float = 0.0,
) -> CostReport:
    if phase not in ("prefill", "decode"):
        raise ContractError(f"phase must be prefill or decode, got {phase!r}")
    labels = ["sparse" if _is_sparse(md) else "full" for md in modes]
    L = len(labels)
    per_pair = 4 * n_heads * head_dim
    if phase == "prefill":
        att = prefill_attention_flops(n, labels, p, n_heads, head_dim)["per_layer"]
        rows = [a // per_pair for a in att]
        flops = sum(att)
        base = attended_pairs(n, "full", p) * per_pair * L
        non = non_attention_per_token_layer * n * L
    else:
        rows = [decode_kv_reads(n, md, p) for md in labels]
        att = rows
        flops = sum(rows) * per_pair
        base = n * per_pair * L
        non = non_attention_per_token_layer * L
    total = flops + non
    baseline = base + non
    return CostReport(
        context_len=n,
        phase=phase,
        modes=labels,
        attention=list(att),
        attention_flops=flops,
        kv_rows=sum(rows),
        non_attention=non,
        total=total,
        baseline_total=baseline,
        attention_ratio=flops / base,
        ratio=total / baseline,
    )


def end_to_end_ratio(
    n: int,
    modes: Sequence[ModeLike],
    p: SparsePattern,
    phase: str,
    n_heads: int = 1,
    head_dim: int = 1,
    non_attention_per_token_layer: float = 0.0,
) -> float:
    """Whole-model cost relative to the all-full model (attention plus a fixed per-token term)."""
    return cost_report(n, modes, p, phase, n_heads, head_dim, non_attention_per_token_layer).ratio


def non_attention_for_share(share: float, n: int, phase: str, n_heads: int = 1, head_dim: int = 1) -> float:
    """Per-token, per-layer non-attention cost that makes up ``share`` of the all-full cost."""
    if not 0.0 <= share < 1.0:
        raise ContractError(f"share must lie in [0, 1), got {share}")
    per_pair = 4 * n_heads * head_dim
    if phase == "prefill":
        att_per_layer = attended_pairs(n, "full", SparsePattern()) * per_pair
        tokens = n
    else:
        att_per_layer = n * per_pair
        tokens = 1
    return share / (1.0 - share) * att_per_layer / tokens


# ---------------------------------------------------------------------------
# rank balance


class AssignmentError(ValueError):
    """A (layer, head) is missing from, or duplicated in, a rank assignment."""


@dataclass
class RankAssignment:
    n_ranks: int
    unit: str  # layer | head
    n_layers: int
    n_heads: int
    modes: list[str]  # per layer; head-level sharding may override per head
    ranks: list[list[tuple[int, int, str]]] = field(default_factory=list)

    def validate(self) -> None:
        if len(self.ranks) != self.n_ranks:
            raise AssignmentError(f"{len(self.ranks)} rank lists for {self.n_ranks} ranks")
        seen: dict[tuple[int, int], int] = {}
        for r, items in enumerate(self.ranks):
            for layer, head, _ in items:
                if (layer, head) in seen:
                    raise AssignmentError(f"(layer {layer}, head {head}) on ranks {seen[(layer, head)]} and {r}")
                seen[(layer, head)] = r
        missing = [(l, h) for l in range(self.n_layers) for h in range(self.n_heads) if (l, h) not in seen]
        if missing:
            raise AssignmentError(f"unassigned (layer, head) pairs: {missing[:8]}{' ...' if len(missing) > 8 else ''}")


def layer_level_sharding(modes: Sequence[ModeLike], n_heads: int, n_ranks: int) -> RankAssignment:
    """Head-parallel split of every layer; each rank gets the same heads of every layer."""
    if n_heads % n_ranks:
        raise ContractError(f"{n_heads} heads do not split evenly over {n_ranks} ranks")
    labels = ["sparse" if _is_sparse(md) else "full" for md in modes]
    per = n_heads // n_ranks
    ranks = [
        [(l, h, labels[l]) for l in range(len(labels)) for h in range(r * per, (r + 1) * per)]
        for r in range(n_ranks)
    ]
    return RankAssignment(n_ranks, "layer", len(labels), n_heads, labels, ranks)


def head_level_sharding(head_modes: Sequence[Sequence[str]], n_ranks: int, adversarial: bool = True) -> RankAssignment:
    """Shard heads with per-head modes.

    ``adversarial`` groups heads by mode, so full heads pile up on the first
    ranks; otherwise heads are dealt round-robin in index order.
    """
    n_layers, n_heads = len(head_modes), len(head_modes[0])
    items = [(l, h, head_modes[l][h]) for l in range(n_layers) for h in range(n_heads)]
    if adversarial:
        items.sort(key=lambda it: (it[2] != "full", it[0], it[1]))
        per = -(-len(items) // n_ranks)
        ranks = [items[r * per : (r + 1) * per] for r in range(n_ranks)]
    else:
        ranks = [items[r::n_ranks] for r in range(n_ranks)]
    return RankAssignment(n_ranks, "head", n_layers, n_heads, ["mixed"] * n_layers, ranks)


def rank_balance(
    a: RankAssignment, n: int, p: SparsePattern, head_dim: int = 1, switch_penalty: float = 0.0
) -> dict:
    """Per-rank prefill attention FLOPs and imbalance statistics.

    ``switch_penalty`` is charged each time consecutive work items on a rank
    change pattern within a layer (a stand-in for divergence / schedule
    recompute); it defaults to 0 and is not calibrated.
    """
    a.validate()
    pair_cost = {m: attended_pairs(n, m, p) * 4 * head_dim for m in ("full", "sparse")}
    loads = []
    for items in a.ranks:
        load = float(sum(pair_cost[m] for _, _, m in items))
        if switch_penalty:
            for (l0, _, m0), (l1, _, m1) in zip(items, items[1:]):
                if l0 == l1 and m0 != m1:
                    load += switch_penalty
        loads.append(load)
    arr = np.array(loads)
    mean = float(arr.mean())
    return {
        "per_rank": loads,
        "max_over_mean": float(arr.max() / mean) if mean else 1.0,
        "cv": float(arr.std() / mean) if mean else 0.0,
    }


# ---------------------------------------------------------------------------
# wall-clock check of the decode path


def measure_decode_ratio(
    t: int, p: SparsePattern, n_heads: int = 4, head_dim: int = 32, repeats: int = 5, seed: int = 0
) -> dict:
    """Time one decode attention step against a full cache of ``t`` rows and a
    streaming cache at the same position. Returns measured and predicted ratios."""
    from .runtime import FullKvCache, SsaKvCache, _attend_one

    rng = np.random.default_rng(seed)
    full = FullKvCache(n_heads, head_dim, capacity=t)
    sparse = SsaKvCache(p, n_heads, head_dim)
    k = rng.standard_normal((t, n_heads, head_dim))
    v = rng.standard_normal((t, n_heads, head_dim))
    full.append(k, v)
    sparse.append(k, v)
    del k, v
    q = rng.standard_normal((n_heads, head_dim))

    def best(fn) -> float:
        # loop cheap calls so each sample spans >= 20 ms; report min per call
        t0 = time.perf_counter()
        fn()
        inner = max(1, int(0.02 / max(time.perf_counter() - t0, 1e-7)))
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for _ in range(inner):
                fn()
            times.append((time.perf_counter() - t0) / inner)
        return min(times)

    t_full = best(lambda: _attend_one(q, full.keys(), full.values()))
    t_sparse = best(lambda: _attend_one(q, sparse.keys(), sparse.values()))
    return {
        "t": t,
        "rows_full": full.rows,
        "rows_sparse": sparse.rows,
        "predicted_ratio": sparse.rows / full.rows,
        "measured_ratio": t_sparse / t_full,
        "seconds_full": t_full,
        "seconds_sparse": t_sparse,
    }
