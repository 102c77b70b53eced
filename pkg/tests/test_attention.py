import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loza.attention import (
    AttnMask,
    MlaLiteWeights,
    SparsePattern,
    blended_attention,
    build_streaming_mask,
    full_attention,
    masked_attention,
    mla_lite_project,
    streaming_sparse_attention,
)
from loza.numerics import ContractError, DimensionError, Graph, Tensor, backward, mul, numerical_grad, rel_err, sum_all

patterns = st.builds(
    SparsePattern,
    sink_blocks=st.integers(0, 3),
    local_blocks=st.integers(1, 4),
    block_size=st.integers(1, 9),
)


def qkv(n, h=2, d=4, seed=0, batch=()):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.standard_normal(batch + (n, h, d)), requires_grad=True) for _ in range(3)]


def mask_oracle(n, p):
    b, s, l = p.block_size, p.sink_blocks, p.local_blocks
    return np.array(
        [[j <= i and (j // b < s or i // b - j // b < l) for j in range(n)] for i in range(n)]
    )


@settings(max_examples=60, deadline=None)
@given(p=patterns, n=st.integers(1, 60))
def test_dense_mask_matches_rule(p, n):
    m = build_streaming_mask(n, p)
    dense = m.dense()
    np.testing.assert_array_equal(dense, mask_oracle(n, p))
    np.testing.assert_array_equal(m.row_counts(), dense.sum(1))
    assert [m.row_count(i) for i in range(n)] == list(dense.sum(1))
    assert all(m.allowed(i, j) == dense[i, j] for i in range(n) for j in range(n))


@settings(max_examples=40, deadline=None)
@given(p=patterns, n=st.integers(1, 60))
def test_diagonal_always_allowed_and_nothing_above_it(p, n):
    dense = build_streaming_mask(n, p).dense()
    assert dense.diagonal().all()
    assert not np.triu(dense, 1).any()


@settings(max_examples=40, deadline=None)
@given(p=patterns, seed=st.integers(0, 10_000))
def test_sparse_equals_full_within_window(p, seed):
    n = int(np.random.default_rng(seed).integers(1, p.window_tokens() + 1))
    q, k, v = qkv(n, seed=seed)
    ref = full_attention(q, k, v).data
    assert np.abs(streaming_sparse_attention(q, k, v, p).data - ref).max() < 1e-12
    assert np.abs(streaming_sparse_attention(q, k, v, p, method="blocked").data - ref).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(p=patterns, n=st.integers(1, 70), seed=st.integers(0, 1000))
def test_blocked_path_matches_masked_path(p, n, seed):
    q, k, v = qkv(n, seed=seed, batch=(2,))
    a = streaming_sparse_attention(q, k, v, p).data
    b = streaming_sparse_attention(q, k, v, p, method="blocked").data
    assert np.abs(a - b).max() < 1e-12


def test_sparse_differs_beyond_window():
    p = SparsePattern(1, 1, 4)
    q, k, v = qkv(20)
    diff = np.abs(streaming_sparse_attention(q, k, v, p).data - full_attention(q, k, v).data)
    assert diff[: p.window_tokens()].max() < 1e-12
    assert diff[p.window_tokens():].max() > 1e-6


def test_sink_free_pattern_is_a_sliding_window():
    m = AttnMask(12, SparsePattern(0, 2, 3))
    assert m.allowed(11, 6) and not m.allowed(11, 5) and not m.allowed(11, 0)


def test_invalid_pattern_rejected():
    with pytest.raises(ContractError):
        SparsePattern(1, 0, 4)
    with pytest.raises(ContractError):
        build_streaming_mask(0, SparsePattern())


def test_masked_attention_gradients():
    q, k, v = qkv(7, seed=3)
    mask = build_streaming_mask(7, SparsePattern(1, 1, 2)).dense()
    w = Tensor(np.random.default_rng(5).standard_normal((7, 2, 4)))
    f = lambda: sum_all(mul(masked_attention(q, k, v, mask), w))
    with Graph() as g:
        out = f()
    backward(out, g)
    for x in (q, k, v):
        assert rel_err(x.grad, numerical_grad(lambda: f().item(), x)) < 1e-4


def test_blend_endpoints_exact():
    p = SparsePattern(1, 1, 3)
    q, k, v = qkv(15, seed=4)
    np.testing.assert_array_equal(blended_attention(q, k, v, p, 1.0).data, full_attention(q, k, v).data)
    np.testing.assert_array_equal(blended_attention(q, k, v, p, 0.0).data, streaming_sparse_attention(q, k, v, p).data)


def test_blend_rejects_alpha_outside_unit_interval():
    q, k, v = qkv(4)
    for a in (-0.1, 1.5, float("nan")):
        with pytest.raises(ContractError):
            blended_attention(q, k, v, SparsePattern(), a)


def test_mla_lite_keys_are_low_rank():
    rng = np.random.default_rng(0)
    d_model, latent, h, hd = 12, 3, 2, 5
    w = MlaLiteWeights(
        *(Tensor(rng.standard_normal(s)) for s in [(d_model, latent), (latent, h * hd), (latent, h * hd), (d_model, h * hd)]),
        n_heads=h,
    )
    q, k, v = mla_lite_project(Tensor(rng.standard_normal((20, d_model))), w)
    assert q.shape == k.shape == v.shape == (20, h, hd)
    assert np.linalg.matrix_rank(k.data.reshape(20, -1)) <= latent


def test_mla_lite_shape_checks():
    z = lambda *s: Tensor(np.zeros(s))
    with pytest.raises(ContractError):
        MlaLiteWeights(z(4, 6), z(6, 4), z(6, 4), z(4, 4), 2)
    with pytest.raises(DimensionError):
        MlaLiteWeights(z(4, 2), z(2, 4), z(2, 3), z(4, 4), 2)
