import numpy as np
import pytest
from hypothesis import given, strategies as st

from c2fed.errors import ShapeError
from c2fed.numerics import cosine, make_rng
from c2fed.prompting import (ClassPromptSet, PromptEntry, PromptPool, grow_pool, init_entries, query_weights,
                             synthesize_prompt)


def _pool(n, length=2, dim=3, seed=0):
    return init_entries(n, length, dim, make_rng(seed), stage=0, client=0)


def test_self_match_weight_one():
    q = np.array([0.3, -1.0, 2.0])
    pool = PromptPool(1, 3, np.zeros((1, 1, 3)), q[None].copy(), np.ones((1, 3)), [(0, 0, 0)])
    assert query_weights(pool, q)[0] == pytest.approx(1.0, abs=1e-15)


def test_orthogonal_key_weight_zero():
    pool = PromptPool(1, 2, np.zeros((1, 1, 2)), np.array([[0.0, 1.0]]), np.ones((1, 2)), [(0, 0, 0)])
    assert query_weights(pool, np.array([1.0, 0.0]))[0] == 0.0


def test_weights_match_independent_cosine():
    pool = _pool(3)
    q = make_rng(1).normal(size=3)
    want = [cosine(q * e.attn, e.key) for e in pool]
    np.testing.assert_allclose(query_weights(pool, q), want, atol=1e-14)


def test_empty_pool_and_bad_query():
    assert query_weights(PromptPool(2, 3), np.ones(3)).shape == (0,)
    with pytest.raises(ShapeError):
        query_weights(_pool(2), np.ones(4))


def test_synthesize_examples():
    pool = _pool(2)
    np.testing.assert_array_equal(synthesize_prompt(_pool(1), np.array([1.0])), _pool(1).prompts[0])
    assert np.all(synthesize_prompt(pool, np.zeros(2)) == 0)
    np.testing.assert_allclose(synthesize_prompt(pool, np.array([0.5, 0.5])), pool.prompts.mean(axis=0), atol=1e-16)
    with pytest.raises(ShapeError):
        synthesize_prompt(pool, np.ones(3))


floats = st.floats(-5, 5, allow_nan=False)


@given(st.lists(floats, min_size=4, max_size=4), st.lists(floats, min_size=4, max_size=4), floats, floats)
def test_synthesis_linearity(w1, w2, a, b):
    pool = _pool(4)
    w1, w2 = np.array(w1), np.array(w2)
    lhs = synthesize_prompt(pool, a * w1 + b * w2)
    rhs = a * synthesize_prompt(pool, w1) + b * synthesize_prompt(pool, w2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_query_scale_invariance(c, seed):
    pool = _pool(5, seed=seed)
    q = make_rng(seed).normal(size=3)
    np.testing.assert_allclose(query_weights(pool, c * q), query_weights(pool, q), atol=1e-12)


def test_grow_pool_keeps_history():
    old = _pool(8, seed=1)
    snap = old.prompts.copy()
    new = init_entries(8, 2, 3, make_rng(2), stage=1, client=4)
    grown = grow_pool(old, new.entries)
    assert len(grown) == 16
    assert np.array_equal(grown.prompts[:8], snap)
    assert grown.origins[8] == (1, 4, 0) and grown.origins[:8] == old.origins


def test_grow_pool_empty_and_mismatch():
    old = _pool(3)
    same = grow_pool(old, [])
    assert np.array_equal(same.prompts, old.prompts) and same.origins == old.origins
    bad = PromptEntry(np.zeros((5, 3)), np.zeros(3), np.zeros(3), (0, 0, 0))
    with pytest.raises(ShapeError):
        grow_pool(old, [bad])


def test_init_range():
    pool = _pool(10)
    for arr in (pool.prompts, pool.keys, pool.attn):
        assert np.all(np.abs(arr) <= 0.02)


def test_param_matrix_roundtrip():
    pool = _pool(3)
    back = pool.with_param_matrix(pool.param_matrix())
    assert np.array_equal(back.prompts, pool.prompts) and np.array_equal(back.keys, pool.keys)
    assert np.array_equal(back.attn, pool.attn)


def test_json_roundtrip():
    pool = _pool(3)
    back = PromptPool.from_json(pool.to_json())
    assert np.array_equal(back.prompts, pool.prompts) and back.origins == pool.origins


def test_class_prompt_set():
    cps = ClassPromptSet.init([3, 1], 2, 4, make_rng(0))
    assert sorted(cps.prompts) == [1, 3]
    assert cps.stacked(np.array([3, 1, 3])).shape == (3, 2, 4)
