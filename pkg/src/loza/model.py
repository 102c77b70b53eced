"""Toy pre-norm decoder whose attention layers each carry their own mode."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from .attention import (
    MlaLiteWeights,
    SparsePattern,
    build_streaming_mask,
    causal_mask,
    masked_attention,
    mla_lite_project,
)
from .numerics import (
    ContractError,
    Tensor,
    add,
    cross_entropy,
    embedding,
    gelu,
    linear,
    mse,
    mul,
    reshape,
    rmsnorm,
    scale,
    sigmoid,
)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 2
    head_dim: int = 16
    latent_dim: Optional[int] = None
    ffn_dim: int = 64
    vocab_size: int = 260
    max_seq_len: int = 256
    seed: int = 0

    def __post_init__(self):
        dims = dict(
            n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads, head_dim=self.head_dim,
            ffn_dim=self.ffn_dim, vocab_size=self.vocab_size, max_seq_len=self.max_seq_len,
        )
        bad = [k for k, v in dims.items() if int(v) < 1]
        if bad:
            raise ConfigError(f"dimensions must be >= 1: {', '.join(bad)}")
        if self.n_heads * self.head_dim != self.d_model:
            raise ConfigError(f"n_heads * head_dim = {self.n_heads * self.head_dim} != d_model = {self.d_model}")
        if self.latent_dim is not None and not 1 <= self.latent_dim <= self.d_model:
            raise ConfigError(f"latent_dim must lie in [1, d_model={self.d_model}], got {self.latent_dim}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# layer modes


@dataclass(frozen=True)
class Full:
    def to_dict(self) -> dict:
        return {"kind": "full"}


@dataclass(frozen=True)
class Sparse:
    pattern: SparsePattern

    def to_dict(self) -> dict:
        return {"kind": "sparse", "pattern": self.pattern.to_dict()}


@dataclass
class Blended:
    """Gate-mixed layer; the effective weight on the full branch is sigmoid(gate)."""

    pattern: SparsePattern
    gate: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True, name="gate"))

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.gate.item())))

    def to_dict(self) -> dict:
        return {"kind": "blended", "pattern": self.pattern.to_dict(), "gate": self.gate.item()}


LayerMode = Union[Full, Sparse, Blended]


def mode_from_dict(d: dict) -> LayerMode:
    kind = d.get("kind")
    if kind == "full":
        return Full()
    if kind == "sparse":
        return Sparse(SparsePattern.from_dict(d["pattern"]))
    if kind == "blended":
        return Blended(SparsePattern.from_dict(d["pattern"]), Tensor(float(d["gate"]), requires_grad=True, name="gate"))
    raise ConfigError(f"unknown layer mode {kind!r}")


def mode_label(mode: LayerMode) -> str:
    return mode.to_dict()["kind"]


# ---------------------------------------------------------------------------
# model


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], modes: Optional[list[LayerMode]] = None):
        self.cfg = cfg
        self.params = params
        self.modes: list[LayerMode] = list(modes) if modes is not None else [Full() for _ in range(cfg.n_layers)]
        if len(self.modes) != cfg.n_layers:
            raise ConfigError(f"{len(self.modes)} modes for {cfg.n_layers} layers")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigError("parameter names do not match")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ConfigError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64, copy=True)

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return Model(self.cfg, params, list(self.modes))

    def sparse_layers(self) -> list[int]:
        return [i for i, m in enumerate(self.modes) if isinstance(m, Sparse)]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hd = cfg.d_model, cfg.n_heads * cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1"] = (d,)
        shapes[p + "w_q"] = (d, hd)
        if cfg.latent_dim is None:
            shapes[p + "w_k"] = (d, hd)
            shapes[p + "w_v"] = (d, hd)
        else:
            shapes[p + "w_down"] = (d, cfg.latent_dim)
            shapes[p + "w_uk"] = (cfg.latent_dim, hd)
            shapes[p + "w_uv"] = (cfg.latent_dim, hd)
        shapes[p + "w_o"] = (hd, d)
        shapes[p + "ln2"] = (d,)
        shapes[p + "w_in"] = (d, cfg.ffn_dim)
        shapes[p + "w_out"] = (cfg.ffn_dim, d)
    shapes["ln_f"] = (d,)
    shapes["head"] = (d, cfg.vocab_size)
    return shapes


def build_model(cfg: ModelConfig) -> Model:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("ln1", "ln2", "ln_f")):
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return Model(cfg, params)


# ---------------------------------------------------------------------------
# forward


@lru_cache(maxsize=64)
def _mask_for(n: int, pattern: Optional[SparsePattern]) -> np.ndarray:
    m = causal_mask(n) if pattern is None else build_streaming_mask(n, pattern).dense()
    m.setflags(write=False)
    return m


def project_qkv(m: Model, i: int, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    cfg = m.cfg
    p = f"layers.{i}."
    if cfg.latent_dim is not None:
        w = MlaLiteWeights(m[p + "w_down"], m[p + "w_uk"], m[p + "w_uv"], m[p + "w_q"], cfg.n_heads)
        return mla_lite_project(h, w)
    split = h.shape[:-1] + (cfg.n_heads, cfg.head_dim)
    q = reshape(linear(h, m[p + "w_q"]), split)
    k = reshape(linear(h, m[p + "w_k"]), split)
    v = reshape(linear(h, m[p + "w_v"]), split)
    return q, k, v


def attention_layer(m: Model, i: int, h: Tensor) -> Tensor:
    """Attention sub-block output (before the residual add) for layer ``i``."""
    q, k, v = project_qkv(m, i, h)
    n = h.shape[-2]
    mode = m.modes[i]
    if isinstance(mode, Full):
        o = masked_attention(q, k, v, _mask_for(n, None))
    elif isinstance(mode, Sparse):
        o = masked_attention(q, k, v, _mask_for(n, mode.pattern))
    else:
        alpha = sigmoid(mode.gate)
        o_full = masked_attention(q, k, v, _mask_for(n, None))
        o_sparse = masked_attention(q, k, v, _mask_for(n, mode.pattern))
        o = add(mul(alpha, o_full), mul(add(Tensor(1.0), scale(alpha, -1.0)), o_sparse))
    o = reshape(o, h.shape[:-1] + (m.cfg.n_heads * m.cfg.head_dim,))
    return linear(o, m[f"layers.{i}.w_o"])


def _check_tokens(m: Model, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim not in (1, 2) or ids.shape[-1] < 1:
        raise ContractError(f"tokens must be a non-empty [n] or [B, n] array, got shape {ids.shape}")
    if ids.shape[-1] > m.cfg.max_seq_len:
        raise ContractError(f"sequence length {ids.shape[-1]} exceeds max_seq_len {m.cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= m.cfg.vocab_size:
        raise ContractError(f"token ids must lie in [0, {m.cfg.vocab_size})")
    return ids


def embed(m: Model, ids: np.ndarray, offset: int = 0) -> Tensor:
    n = ids.shape[-1]
    x = embedding(m["tok_emb"], ids)
    # positions tiled to the token shape keep add() free of broadcasting
    pos = embedding(m["pos_emb"], np.broadcast_to(np.arange(offset, offset + n), ids.shape))
    return add(x, pos)


def ffn(m: Model, i: int, h: Tensor) -> Tensor:
    p = f"layers.{i}."
    return linear(gelu(linear(h, m[p + "w_in"])), m[p + "w_out"])


def forward(m: Model, tokens) -> Tensor:
    """Logits ``[n, vocab]`` (or ``[B, n, vocab]``)."""
    ids = _check_tokens(m, tokens)
    x = embed(m, ids)
    for i in range(m.cfg.n_layers):
        p = f"layers.{i}."
        x = add(x, attention_layer(m, i, rmsnorm(x, m[p + "ln1"])))
        x = add(x, ffn(m, i, rmsnorm(x, m[p + "ln2"])))
    return linear(rmsnorm(x, m["ln_f"]), m["head"])


def lm_loss(m: Model, tokens) -> Tensor:
    """Next-token cross-entropy over positions ``0..n-2``."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.shape[-1] < 2:
        raise ContractError(f"lm_loss needs at least 2 tokens, got {ids.shape[-1]}")
    return cross_entropy(forward(m, ids[..., :-1]), ids[..., 1:])


def distill_loss(m: Model, tokens, teacher_logits: np.ndarray) -> Tensor:
    """Mean squared error of logits against a frozen teacher's logits on ``tokens[..., :-1]``."""
    ids = np.asarray(tokens, dtype=np.int64)
    return mse(forward(m, ids[..., :-1]), teacher_logits)
