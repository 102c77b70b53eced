import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loza.attention import SparsePattern, build_streaming_mask
from loza.config import ExperimentConfig, load_config
from loza.data import (
    KEY,
    QUERY,
    VOCAB_SIZE,
    DecodeError,
    TaskSpec,
    byte_tokenize,
    detokenize,
    detokenize_bytes,
    gen_passkey,
    generate,
)
from loza.model import ConfigError
from loza.numerics import ContractError


def test_bytes_are_ids():
    assert byte_tokenize("ab") == [97, 98]
    assert detokenize([256]) == "<bos>"


@settings(max_examples=1000, deadline=None)
@given(st.text())
def test_text_round_trip(s):
    assert detokenize(byte_tokenize(s)) == s


@given(st.binary(max_size=200))
def test_bytes_round_trip(b):
    assert detokenize_bytes(byte_tokenize(b)) == b


def test_unknown_id():
    with pytest.raises(DecodeError):
        detokenize([VOCAB_SIZE])


@settings(max_examples=200, deadline=None)
@given(n=st.integers(8, 200), data=st.data())
def test_passkey_layout(n, data):
    d = data.draw(st.integers(2, n - 4))
    inst = gen_passkey(TaskSpec("passkey", n, d, seed=data.draw(st.integers(0, 99))))
    a = int(inst.answer_positions[0])
    v = a - 1 - d
    t = inst.tokens
    assert t.shape == (n,) and t[v - 1] == KEY and t[a - 2] == QUERY and t[a - 1] == ord(" ")
    assert t[v] == t[a] == inst.answer[0]


def test_passkey_deterministic():
    s = TaskSpec("passkey", 64, 20, seed=3)
    assert np.array_equal(gen_passkey(s).tokens, gen_passkey(s).tokens)


def test_passkey_infeasible_distance():
    with pytest.raises(ContractError):
        gen_passkey(TaskSpec("passkey", 16, 14))
    with pytest.raises(ContractError):
        TaskSpec("passkey", 16, 16)


def test_key_visibility_follows_the_window():
    # local blocks are aligned, so only distances <= (l - 1) * b are always visible
    p = SparsePattern(1, 2, 4)
    n = 40
    mask = build_streaming_mask(n, p)
    for seed in range(20):
        for d, seen in ((4, True), (3, True), (20, False)):
            inst = gen_passkey(TaskSpec("passkey", n, d, seed=seed), min_value_pos=4)
            a = int(inst.answer_positions[0])
            assert mask.allowed(a - 1, a - 1 - d) == seen


def test_other_tasks():
    g = generate(TaskSpec("grammar", 30, seed=1))
    assert g.tokens.shape == (30,) and np.array_equal(g.answer, g.tokens[1:])
    c = generate(TaskSpec("copy", 20, seed=1))
    half = 9
    assert np.array_equal(c.tokens[1 : 1 + half], c.answer)


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert load_config(None) == cfg


@pytest.mark.parametrize(
    "doc",
    [{"modle": {}}, {"train": {"stepz": 3}}, {"pattern": {"sinks": 1}}, {"model": {"max_seq_len": 16}}],
)
def test_config_rejects_unknown_or_inconsistent(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)
