import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import lt_counts_oracle
from sau import data as D
from sau import rng as R


def _pool(n_classes, per_class, dim=3, seed=0):
    g = np.random.default_rng(seed)
    return [D.Sample(g.standard_normal(dim), c, False, 1.0, c * per_class + k)
            for c in range(n_classes) for k in range(per_class)]


# -- long-tailed counts ------------------------------------------------------

def test_counts_head_5000_if100():
    c = D.long_tailed_counts(D.LtSpec(10, 5000, 100))
    assert c[0] == 5000 and c[9] == 50
    assert c == lt_counts_oracle(10, 5000, 100)


def test_counts_balanced_when_if_is_one():
    assert D.long_tailed_counts(D.LtSpec(10, 5000, 1)) == [5000] * 10


def test_counts_two_classes():
    assert D.long_tailed_counts(D.LtSpec(2, 100, 100)) == [100, 1]


def test_counts_single_class():
    assert D.long_tailed_counts(D.LtSpec(1, 7, 50)) == [7]


def test_counts_toy_default():
    assert D.long_tailed_counts(D.LtSpec(10, 500, 100)) == [500, 300, 180, 108, 65, 39, 23, 14, 8, 5]


@pytest.mark.parametrize("bad", [dict(n_classes=0), dict(n0=0), dict(imbalance_factor=0.5)])
def test_ltspec_validation(bad):
    with pytest.raises(ValueError):
        D.LtSpec(**bad)


@given(n=st.integers(2, 40), n0=st.integers(1, 10000), imb=st.floats(1.0, 500.0))
def test_counts_properties(n, n0, imb):
    c = D.long_tailed_counts(D.LtSpec(n, n0, imb))
    assert c[0] == n0
    assert all(a >= b for a, b in zip(c, c[1:]))
    assert c[-1] == int(np.floor(n0 / imb + 0.5))
    assert c == lt_counts_oracle(n, n0, imb)


# -- split and complement -------------------------------------------------------

def test_split_identity_when_counts_match_availability():
    pool = _pool(3, 4)
    split = D.build_lt_split(pool, [4, 4, 4], seed=1)
    assert sorted(s.id for s in split) == sorted(s.id for s in pool)


def test_split_zero_count_drops_class():
    split = D.build_lt_split(_pool(3, 4), [4, 0, 2], seed=1)
    assert D.class_counts(split, 3) == [4, 0, 2]


def test_split_deterministic_and_real():
    pool = _pool(4, 20)
    a = D.build_lt_split(pool, [20, 10, 5, 1], seed=3)
    b = D.build_lt_split(list(reversed(pool)), [20, 10, 5, 1], seed=3)
    assert [s.id for s in a] == [s.id for s in b]
    assert not any(s.is_synthetic for s in a)


def test_split_insufficient_names_class():
    with pytest.raises(D.InsufficientSamplesError) as e:
        D.build_lt_split(_pool(3, 4), [4, 5, 1], seed=0)
    assert e.value.class_id == 1


def test_complement_examples():
    assert D.complement_counts([5000, 50], 5000) == [0, 4950]
    assert D.complement_counts([7, 7, 7], 7) == [0, 0, 0]
    assert D.complement_counts([100, 10, 1], 100) == [0, 90, 99]


def test_complement_below_real_names_class():
    with pytest.raises(D.ComplementError) as e:
        D.complement_counts([10, 30, 5], 20)
    assert e.value.class_id == 1


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=20), st.integers(0, 500))
def test_complement_restores_constant_total(real, extra):
    target = max(real) + extra
    comp = D.complement_counts(real, target)
    assert [a + b for a, b in zip(real, comp)] == [target] * len(real)


def test_sample_validation():
    with pytest.raises(ValueError):
        D.Sample(np.zeros(2), -1)
    with pytest.raises(ValueError):
        D.Sample(np.zeros(2), 0, quality=1.5)
    with pytest.raises(ValueError):
        D.Sample(np.array([np.nan]), 0)


# -- augmentation ------------------------------------------------------------

def test_identity_policy():
    x = np.arange(12.0).reshape(3, 2, 2)
    assert np.array_equal(D.augment(x, "identity", R.stream(0, "test")), x)


def test_flip_involution():
    x = np.random.default_rng(0).standard_normal((3, 5, 6))
    assert np.array_equal(D.flip_horizontal(D.flip_horizontal(x)), x)


def test_unknown_policy():
    with pytest.raises(ValueError):
        D.augment(np.zeros(4), "autoaugment", R.stream(0, "test"))


@pytest.mark.parametrize("shape", [(16,), (3, 8, 8)])
@pytest.mark.parametrize("policy", D.POLICIES)
def test_augment_deterministic_shape_finite(shape, policy):
    x = np.random.default_rng(1).standard_normal(shape)
    a = D.augment(x, policy, R.stream(5, 1, 2, 3, "view2"))
    b = D.augment(x, policy, R.stream(5, 1, 2, 3, "view2"))
    assert a.shape == x.shape and np.all(np.isfinite(a))
    assert np.array_equal(a, b)


@given(seed=st.integers(0, 2 ** 32 - 1), image=st.booleans())
def test_augment_preserves_shape_and_finiteness(seed, image):
    shape = (2, 6, 6) if image else (9,)
    x = np.random.default_rng(seed).standard_normal(shape)
    for policy in D.POLICIES:
        out = D.augment(x, policy, R.stream(seed, "test"))
        assert out.shape == shape and np.all(np.isfinite(out))


def test_pad_crop_centre_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 4, 4))
    assert np.array_equal(D.pad_crop(x, 1, 1, 1), x)


# -- batch pairs -------------------------------------------------------------

def test_single_batch_covers_split():
    split = _pool(2, 3)
    plan = D.make_batch_pairs(split, 6, epoch=0, seed=0)
    assert len(plan) == 1
    pair = plan[0]
    assert sorted(pair.ids) == sorted(s.id for s in split)
    assert sorted(pair.ids2) == sorted(s.id for s in split)


def test_batch_pairs_deterministic():
    split = _pool(3, 10)
    a = [p.digest() for p in D.make_batch_pairs(split, 7, 2, 11)]
    b = [p.digest() for p in D.make_batch_pairs(split, 7, 2, 11)]
    c = [p.digest() for p in D.make_batch_pairs(split, 7, 3, 11)]
    assert a == b and a != c


def test_batch_pair_structure():
    split = _pool(3, 10, dim=4)
    plan = D.make_batch_pairs(split, 8, 0, 1)
    for pair in plan:
        assert len(pair.batch1) == len(pair.batch2)
        assert pair.v1.shape == pair.v2.shape == pair.v3.shape == pair.x2_v1.shape
        for (views, y, syn, i), (v, y2) in zip(pair.batch1, pair.batch2):
            assert 0 <= y < 3 and 0 <= y2 < 3
    # the two streams are differently ordered shuffles of the same split
    assert not np.array_equal(plan.order1, plan.order2)


def test_views_are_pure_functions_of_keys():
    split = _pool(2, 10, dim=4)
    plan = D.make_batch_pairs(split, 5, 1, 9)
    later = plan[2]
    fresh = D.make_batch_pairs(split, 5, 1, 9)
    assert fresh[2].digest() == later.digest()


@given(n=st.integers(2, 60), bs=st.integers(2, 60), seed=st.integers(0, 1000))
def test_epoch_covers_split_exactly_once(n, bs, seed):
    bs = min(bs, n)
    split = _pool(1, n, dim=2)
    plan = D.make_batch_pairs(split, bs, 0, seed)
    ids1 = np.concatenate([plan.ids[plan.order1[lo:hi]] for lo, hi in plan.spans])
    ids2 = np.concatenate([plan.ids[plan.order2[lo:hi]] for lo, hi in plan.spans])
    assert sorted(ids1) == sorted(s.id for s in split) == sorted(ids2)
    assert all(hi - lo >= 2 for lo, hi in plan.spans)


def test_batch_pairs_errors():
    with pytest.raises(ValueError):
        D.make_batch_pairs([], 2, 0, 0)
    with pytest.raises(ValueError):
        D.make_batch_pairs(_pool(1, 3), 4, 0, 0)


def test_toy_shapes_and_ids():
    spec = D.ToySpec(n_classes=3, shape=(5,), n_train_per_class=4, n_test_per_class=2)
    pool, test, means = D.make_toy(spec)
    assert means.shape == (3, 5)
    ids = [s.id for s in pool + test]
    assert len(set(ids)) == len(ids) == 18
