import numpy as np
import pytest
from hypothesis import given, strategies as st

from c2fed.errors import InvalidInputError, ProtocolError
from c2fed.histograms import ClientHistogram, accumulate, accumulate_batch, flatten_for_upload, instance_hist
from c2fed.numerics import make_rng


def test_rectification():
    assert instance_hist(np.array([1.0, 0.0, -0.5])).scores.tolist() == [1.0, 0.0, 0.0]
    assert np.all(instance_hist(np.zeros(4)).scores == 0)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=10))
def test_rectification_elementwise(alpha):
    got = instance_hist(np.array(alpha)).scores
    assert got.tolist() == [a if a > 0 else 0.0 for a in alpha]


def test_single_update_and_doubling():
    ch = ClientHistogram.empty(3, [4, 7])
    ih = instance_hist(np.array([0.2, 0.0, 0.7]))
    one = accumulate(ch, ih, 7)
    assert one.matrix[:, 1].tolist() == [0.2, 0.0, 0.7] and np.all(one.matrix[:, 0] == 0)
    two = accumulate(one, ih, 7)
    np.testing.assert_array_equal(two.matrix[:, 1], 2 * one.matrix[:, 1])


def test_unknown_label():
    with pytest.raises(InvalidInputError):
        accumulate(ClientHistogram.empty(2, [0]), instance_hist(np.ones(2)), 5)


@given(st.integers(0, 10_000))
def test_online_equals_offline(seed):
    rng = make_rng(seed)
    alpha = rng.uniform(-1, 1, size=(20, 4))
    labels = rng.choice([1, 5, 9], size=20)
    ch = ClientHistogram.empty(4, [1, 5, 9])
    accumulate_batch(ch, alpha, labels)
    seq = ClientHistogram.empty(4, [1, 5, 9])
    for a, y in zip(alpha, labels):
        seq = accumulate(seq, instance_hist(a), y)
    assert np.array_equal(ch.matrix, seq.matrix)
    offline = np.stack([np.maximum(alpha[labels == c], 0).sum(axis=0) for c in (1, 5, 9)], axis=1)
    np.testing.assert_allclose(ch.matrix, offline, atol=1e-12)
    assert np.all(ch.matrix >= 0)
    assert abs(ch.matrix.sum() - np.maximum(alpha, 0).sum()) < 1e-12


def test_flatten_identity_and_zero_fill():
    ch = ClientHistogram.empty(2, [2])
    ch.matrix[:] = [[1.0], [2.0]]
    assert np.array_equal(flatten_for_upload(ch, [2]), ch.matrix)
    out = flatten_for_upload(ch, [1, 2, 3])
    assert out.tolist() == [[0.0, 1.0, 0.0], [0.0, 2.0, 0.0]]


def test_flatten_permuted_order():
    ch = ClientHistogram.empty(2, [1, 2, 3])
    ch.matrix[:] = np.arange(6.0).reshape(2, 3)
    a = flatten_for_upload(ch, [1, 2, 3])
    b = flatten_for_upload(ch, [3, 1, 2])
    assert np.array_equal(b, a[:, [2, 0, 1]])


def test_flatten_missing_class():
    with pytest.raises(ProtocolError):
        flatten_for_upload(ClientHistogram.empty(2, [1, 4]), [1, 2])


def test_json_roundtrip():
    ch = ClientHistogram.empty(2, [3, 1], client_id=2, stage=1)
    ch.matrix[:] = [[1.0, 2.0], [3.0, 4.0]]
    back = ClientHistogram.from_json(ch.to_json())
    assert back.class_index == (1, 3) and np.array_equal(back.matrix, ch.matrix) and back.client_id == 2
