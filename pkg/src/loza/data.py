"""Byte tokenizer and the synthetic grammar / copy / passkey tasks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import ContractError

BYTE_VOCAB = 256
SPECIALS = {"<bos>": 256, "<key>": 257, "<query>": 258, "<pad>": 259}
SPECIAL_NAMES = {v: k for k, v in SPECIALS.items()}
VOCAB_SIZE = BYTE_VOCAB + len(SPECIALS)
BOS, KEY, QUERY, PAD = (SPECIALS[k] for k in ("<bos>", "<key>", "<query>", "<pad>"))


class DecodeError(ValueError):
    pass


def byte_tokenize(text) -> list[int]:
    data = text if isinstance(text, (bytes, bytearray)) else text.encode("utf-8")
    return list(data)


def detokenize_bytes(ids) -> bytes:
    out = bytearray()
    for i in ids:
        i = int(i)
        if 0 <= i < BYTE_VOCAB:
            out.append(i)
        elif i in SPECIAL_NAMES:
            out += SPECIAL_NAMES[i].encode()
        else:
            raise DecodeError(f"unknown token id {i}")
    return bytes(out)


def detokenize(ids) -> str:
    return detokenize_bytes(ids).decode("utf-8", errors="surrogateescape")


# ---------------------------------------------------------------------------
# grammar: a fixed word-level Markov chain rendered as lowercase bytes

WORDS = (
    "the", "cat", "sat", "on", "mat", "dog", "ran", "to", "red", "big",
    "box", "in", "sun", "hot", "day", "we", "go", "up", "hill", "and",
)
# each word has three possible successors, chosen once from a fixed seed
_SUCC = np.random.default_rng(1234).integers(0, len(WORDS), size=(len(WORDS), 3))
VALUE_ALPHABET = tuple(range(ord("A"), ord("A") + 16))


def grammar_tokens(n: int, rng: np.random.Generator) -> list[int]:
    """``n`` byte tokens of grammar text starting at a random word."""
    out: list[int] = []
    w = int(rng.integers(len(WORDS)))
    # random phase so sequences do not always start on a word boundary
    skip = int(rng.integers(0, 4))
    while len(out) < n + skip:
        out += list(WORDS[w].encode()) + [ord(" ")]
        w = int(_SUCC[w, rng.integers(3)])
    return out[skip : skip + n]


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # grammar | copy | passkey
    seq_len: int
    distance: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("grammar", "copy", "passkey"):
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.seq_len < 2:
            raise ContractError(f"seq_len must be >= 2, got {self.seq_len}")
        if self.kind == "passkey" and not 0 < self.distance < self.seq_len:
            raise ContractError(f"passkey distance must lie in (0, seq_len={self.seq_len}), got {self.distance}")


@dataclass
class Instance:
    tokens: np.ndarray
    answer_positions: np.ndarray  # positions whose token is an answer
    answer: np.ndarray


def gen_passkey(spec: TaskSpec, rng: Optional[np.random.Generator] = None, min_value_pos: int = 2) -> Instance:
    """Grammar filler with ``<key> V`` planted ``distance`` tokens before the query.

    The query reads ``<query> ␣ V``: the space is the position that has to
    produce ``V``, and ``distance`` is measured from the planted value to that
    space. The query is placed at a random position (the filler continues after
    it), so neither the marker's absolute position nor the space token alone
    identifies the place where retrieval is needed. ``min_value_pos`` keeps the
    planted value out of a prefix (e.g. the sink blocks).
    """
    if spec.kind != "passkey":
        raise ContractError(f"gen_passkey needs a passkey spec, got {spec.kind!r}")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n, d = spec.seq_len, spec.distance
    if d < 2:
        raise ContractError(f"passkey distance must be >= 2, got {d}")
    lo = max(min_value_pos, 2) + d + 1  # value >= 2 leaves room for <bos> and <key>
    if lo > n - 1:
        raise ContractError(f"distance {d} infeasible for seq_len {n} with value at >= {max(min_value_pos, 2)}")
    a = int(rng.integers(lo, n))  # answer position
    v = a - 1 - d
    value = int(VALUE_ALPHABET[rng.integers(len(VALUE_ALPHABET))])
    toks = np.array([BOS] + grammar_tokens(n - 1, rng), dtype=np.int64)
    toks[v - 1] = KEY
    toks[v] = value
    toks[a - 2] = QUERY
    toks[a - 1] = ord(" ")
    toks[a] = value
    return Instance(toks, np.array([a]), np.array([value]))


def gen_grammar(spec: TaskSpec, rng: Optional[np.random.Generator] = None) -> Instance:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    toks = np.array([BOS] + grammar_tokens(spec.seq_len - 1, rng), dtype=np.int64)
    pos = np.arange(1, spec.seq_len)
    return Instance(toks, pos, toks[1:].copy())


def gen_copy(spec: TaskSpec, rng: Optional[np.random.Generator] = None) -> Instance:
    """A random value string followed by ``<query>`` and the same string again."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    half = (spec.seq_len - 2) // 2
    if half < 1:
        raise ContractError(f"seq_len {spec.seq_len} too short for a copy task")
    body = rng.choice(np.array(VALUE_ALPHABET), size=half)
    toks = np.concatenate([[BOS], body, [QUERY], body]).astype(np.int64)
    pad = spec.seq_len - toks.size
    toks = np.concatenate([toks, np.full(pad, PAD)]).astype(np.int64)
    pos = np.arange(half + 2, 2 * half + 2)
    return Instance(toks, pos, toks[pos].copy())


def generate(spec: TaskSpec, rng: Optional[np.random.Generator] = None) -> Instance:
    return {"grammar": gen_grammar, "copy": gen_copy, "passkey": gen_passkey}[spec.kind](spec, rng)


# ---------------------------------------------------------------------------
# training mixtures


def passkey_batch(
    rng: np.random.Generator, batch: int, seq_len: int, min_dist: int, max_dist: int, min_value_pos: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Passkey sequences with distances uniform on [min_dist, max_dist]; returns (tokens, answer positions)."""
    toks, answers = [], []
    for _ in range(batch):
        d = int(rng.integers(min_dist, max_dist + 1))
        inst = gen_passkey(TaskSpec("passkey", seq_len, d), rng, min_value_pos)
        toks.append(inst.tokens)
        answers.append(inst.answer_positions[0])
    return np.stack(toks), np.array(answers)


def grammar_batch(rng: np.random.Generator, batch: int, seq_len: int) -> np.ndarray:
    return np.stack([gen_grammar(TaskSpec("grammar", seq_len), rng).tokens for _ in range(batch)])
