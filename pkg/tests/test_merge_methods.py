import itertools
import logging

import numpy as np
import pytest

from resm_merge.errors import InvalidFractions, LengthMismatch
from resm_merge.merge_methods import (
    breadcrumbs_mask,
    dare_drop,
    derive_rng,
    task_arithmetic,
    ties_combine,
    topk_mask,
    weight_average,
)


def test_weight_average_examples():
    assert weight_average([np.array(2.0), np.array(4.0)], [0.5, 0.5]) == 3.0
    a, b = np.arange(4.0), np.ones(4)
    np.testing.assert_array_equal(weight_average([a, b], [1, 0]), a)
    np.testing.assert_allclose(weight_average([a, a, a], [0.2, 0.3, 0.5]), a)
    with pytest.raises(LengthMismatch):
        weight_average([a, b], [1.0])


def test_weight_average_normalizes(caplog):
    with caplog.at_level(logging.WARNING):
        out = weight_average([np.array(2.0), np.array(4.0)], [1, 1])
    assert out == 3.0 and "normalizing" in caplog.text


def test_task_arithmetic_examples():
    assert task_arithmetic(np.array(1.0), [np.array(1.0), np.array(2.0)]) == 4.0
    base = np.arange(3.0)
    np.testing.assert_array_equal(task_arithmetic(base, [np.ones(3)], lam=0.0), base)
    ft = np.array([0.5, -2.0, 7.0])
    np.testing.assert_array_equal(task_arithmetic(base, [ft - base]), ft)


def test_topk_examples():
    d = np.array([5.0, -3.0, 1.0, 0.0])
    np.testing.assert_array_equal(topk_mask(d, 1.0).values, d)
    np.testing.assert_array_equal(topk_mask(d, 0.5).values, [5, -3, 0, 0])
    np.testing.assert_array_equal(topk_mask(np.full(4, 2.0), 0.25).mask, [1, 0, 0, 0])
    m = topk_mask(np.arange(10.0).reshape(2, 5), 0.2)
    assert m.values.shape == (2, 5) and m.mask_density == 0.2
    with pytest.raises(ValueError):
        topk_mask(d, 0.0)


def test_ties_examples():
    assert ties_combine([np.array([3.0]), np.array([-1.0])])[0] == 3.0
    assert ties_combine([np.array([2.0]), np.array([4.0])])[0] == 3.0
    assert ties_combine([np.array([1.0]), np.array([-1.0])])[0] == 0.0
    assert ties_combine([np.array([2.0]), np.array([4.0])], lam=0.5)[0] == 1.5


def _ties_oracle(values):
    total = sum(values)
    if total == 0:
        return 0.0
    agree = [v for v in values if v != 0 and (v > 0) == (total > 0)]
    return sum(agree) / len(agree)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_ties_matches_brute_force_over_sign_patterns(n, rng):
    patterns = list(itertools.product([-1, 0, 1], repeat=n))
    mags = rng.uniform(0.5, 2.0, size=(len(patterns), n))
    # one coordinate per sign pattern, plus an exactly cancelling variant
    cols = [np.array(p) * m for p, m in zip(patterns, mags)]
    cols += [np.array(p, dtype=float) for p in patterns]
    stacked = np.array(cols).T
    got = ties_combine(list(stacked))
    want = [_ties_oracle(list(c)) for c in cols]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=0)


def test_ties_permutation_invariance(rng):
    ds = [rng.standard_normal(20) for _ in range(4)]
    ref = ties_combine(ds)
    for perm in itertools.permutations(range(4)):
        np.testing.assert_allclose(ties_combine([ds[i] for i in perm]), ref, atol=1e-15)


def test_dare_examples():
    d = np.array([2.0, -1.0, 3.0])
    np.testing.assert_array_equal(dare_drop(d, 0.0).values, d)
    out = dare_drop(np.full(200, 2.0), 0.5, rng_seed=1)
    assert set(np.unique(out.values)) <= {0.0, 4.0}
    np.testing.assert_array_equal(out.values == 4.0, out.mask)
    with pytest.raises(ValueError):
        dare_drop(d, 1.0)


def test_dare_deterministic_per_seed_layer_model():
    d = np.ones((8, 8))
    a = dare_drop(d, 0.3, 5, "layer.0", 1)
    b = dare_drop(d, 0.3, 5, "layer.0", 1)
    c = dare_drop(d, 0.3, 5, "layer.0", 2)
    e = dare_drop(d, 0.3, 5, "layer.1", 1)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert not np.array_equal(a.mask, c.mask)
    assert not np.array_equal(a.mask, e.mask)


def test_dare_is_unbiased():
    x = np.array([1.5, -0.7, 3.0])
    p, trials = 0.4, 100_000
    # one vectorized draw per trial, same rescale rule as dare_drop
    draws = dare_drop(np.tile(x, (trials, 1)), p, rng_seed=11).values
    mean = draws.mean(axis=0)
    se = draws.std(axis=0) / np.sqrt(trials)
    assert np.all(np.abs(mean - x) <= 3 * se)


def test_derive_rng_stable():
    assert derive_rng(0, "a", 1).random() == derive_rng(0, "a", 1).random()
    assert derive_rng(0, "a", 1).random() != derive_rng(1, "a", 1).random()


def test_breadcrumbs_examples():
    d = np.array([10.0, 5.0, 1.0, 0.1])
    np.testing.assert_array_equal(breadcrumbs_mask(d, 0, 0).values, d)
    np.testing.assert_array_equal(breadcrumbs_mask(d, 0.25, 0.25).values, [0, 5, 1, 0])
    with pytest.raises(InvalidFractions):
        breadcrumbs_mask(d, 0.5, 0.5)
    with pytest.raises(InvalidFractions):
        breadcrumbs_mask(d, -0.1, 0.2)


@pytest.mark.parametrize("n", [7, 100, 1001])
def test_breadcrumbs_density(n, rng):
    m = breadcrumbs_mask(rng.standard_normal(n), 0.01, 0.15)
    assert abs(m.mask.sum() - 0.84 * n) <= 1


def _extract_masked_form(base, out, deltas, weights, mean=False):
    """Recover binary masks with ``out == base + sum_i w_i m_i delta_i`` exactly.

    With ``mean=True`` the selected terms are divided by their count, the
    per-coordinate weight used by the TIES disjoint mean.
    """
    n = len(deltas)
    flat_base, flat_out = base.ravel(), out.ravel()
    flat = [d.ravel() for d in deltas]
    masks = np.zeros((n, flat_out.size), dtype=bool)
    for j in range(flat_out.size):
        for pattern in itertools.product([False, True], repeat=n):
            update = sum(weights[i] * flat[i][j] for i in range(n) if pattern[i])
            if mean and any(pattern):
                update = update / sum(pattern)
            if flat_base[j] + update == flat_out[j]:
                masks[:, j] = pattern
                break
        else:
            raise AssertionError(f"coordinate {j} has no masked form")
    return masks


def test_operators_have_masked_form(rng):
    # dyadic values keep every sum exact, so "exactly" means bit-for-bit
    base = rng.integers(-64, 64, size=(3, 4)) / 8.0
    deltas = [rng.integers(-64, 64, size=(3, 4)) / 8.0 for _ in range(3)]
    n = len(deltas)

    # masks are not unique where selected deltas cancel; extraction only has to succeed
    _extract_masked_form(base, task_arithmetic(base, deltas), deltas, [1.0] * n)
    w = [0.25, 0.25, 0.5]
    _extract_masked_form(base, weight_average([base + d for d in deltas], w), deltas, w)

    for i, d in enumerate(deltas):
        m = topk_mask(d, 0.5)
        got = _extract_masked_form(base, base + m.values, [d], [1.0])
        np.testing.assert_array_equal(got[0] | (d.ravel() == 0), m.mask.ravel() | (d.ravel() == 0))
        b = breadcrumbs_mask(d, 0.1, 0.2)
        got = _extract_masked_form(base, base + b.values, [d], [1.0])
        np.testing.assert_array_equal(got[0] | (d.ravel() == 0), b.mask.ravel() | (d.ravel() == 0))
        r = dare_drop(d, 0.5, 3, "w", i)
        got = _extract_masked_form(base, base + r.values, [d], [2.0])
        np.testing.assert_array_equal(got[0] | (d.ravel() == 0), r.mask.ravel() | (d.ravel() == 0))

    trimmed = [topk_mask(d, 0.6) for d in deltas]
    out = base + ties_combine(trimmed)
    masks = _extract_masked_form(base, out, deltas, [1.0] * n, mean=True)
    # the recovered TIES mask never selects a trimmed, nonzero entry
    for m, t, d in zip(masks, trimmed, deltas):
        assert not np.any(m & ~t.mask.ravel() & (d.ravel() != 0))
