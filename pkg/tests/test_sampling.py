import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mitodetect.sampling import inverse_frequency_weights, plan_fraction_batches, weighted_draws


def _ids(n_pos, n_neg):
    return [(f"p{i}", True) for i in range(n_pos)] + [(f"n{i}", False) for i in range(n_neg)]


def test_every_batch_meets_quota():
    flags = _ids(5, 95)
    plan = plan_fraction_batches(flags, batch_size=8, min_positive_fraction=0.4, seed=3)
    positives = {pid for pid, f in flags if f}
    assert plan.min_positives == 4
    assert len(plan.batches) == math.ceil(100 / 8)
    for batch in plan.batches:
        assert len(batch) == 8
        assert sum(pid in positives for pid in batch) >= 4
    plan.check(positives)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 40),
    st.integers(0, 80),
    st.integers(1, 16),
    st.floats(0.0, 1.0),
    st.integers(0, 10_000),
)
def test_quota_property(n_pos, n_neg, bs, frac, seed):
    flags = _ids(n_pos, n_neg)
    plan = plan_fraction_batches(flags, bs, frac, seed)
    positives = {pid for pid, f in flags if f}
    need = math.ceil(frac * bs - 1e-9)
    for batch in plan.batches:
        assert len(batch) == bs
        assert sum(pid in positives for pid in batch) >= need


def test_zero_fraction_is_plain_shuffle():
    flags = _ids(10, 30)
    plan = plan_fraction_batches(flags, batch_size=8, min_positive_fraction=0.0, seed=1)
    seen = [pid for b in plan.batches for pid in b]
    assert sorted(seen) == sorted(pid for pid, _ in flags)


def test_full_fraction_only_positives():
    flags = _ids(6, 30)
    plan = plan_fraction_batches(flags, batch_size=4, min_positive_fraction=1.0, seed=0)
    assert all(pid.startswith("p") for b in plan.batches for pid in b)


def test_positives_cycle_before_repeating():
    flags = _ids(12, 88)
    plan = plan_fraction_batches(flags, batch_size=8, min_positive_fraction=0.4, seed=0)
    # each batch takes >= 4 positives, so the first 3 batches exhaust one pass
    first = {pid for b in plan.batches[:3] for pid in b if pid.startswith("p")}
    assert first == {f"p{i}" for i in range(12)}


def test_plan_is_deterministic():
    flags = _ids(7, 50)
    a = plan_fraction_batches(flags, 8, 0.4, seed=9)
    b = plan_fraction_batches(flags, 8, 0.4, seed=9)
    c = plan_fraction_batches(flags, 8, 0.4, seed=10)
    assert a.dumps() == b.dumps()
    assert a.dumps() != c.dumps()


def test_no_positives_rejected():
    with pytest.raises(ValueError, match="positive"):
        plan_fraction_batches(_ids(0, 10))


@pytest.mark.parametrize("kwargs", [{"min_positive_fraction": 1.5}, {"batch_size": 0}])
def test_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        plan_fraction_batches(_ids(2, 2), **kwargs)


def test_check_flags_violations():
    flags = _ids(4, 20)
    plan = plan_fraction_batches(flags, 8, 0.5, seed=0)
    with pytest.raises(AssertionError):
        plan.check(set())


def _labels(n0=90, n1=10):
    return {f"a{i:03d}": 0 for i in range(n0)} | {f"b{i:03d}": 1 for i in range(n1)}


def test_inverse_frequency_values():
    w = inverse_frequency_weights(_labels()).weights
    assert w["a000"] == pytest.approx(1 / 90)
    assert w["b000"] == pytest.approx(1 / 10)
    # each class carries equal total mass
    assert sum(v for k, v in w.items() if k[0] == "a") == pytest.approx(1.0)
    assert sum(v for k, v in w.items() if k[0] == "b") == pytest.approx(1.0)


def test_empty_class_rejected():
    with pytest.raises(ValueError, match="2"):
        inverse_frequency_weights({"x": 0, "y": 1}, classes=[0, 1, 2])
    with pytest.raises(ValueError):
        inverse_frequency_weights({})


def test_minority_share_is_balanced():
    draws = weighted_draws(inverse_frequency_weights(_labels()), 10_000, seed=0)
    share = sum(d.startswith("b") for d in draws) / len(draws)
    assert abs(share - 0.5) <= 0.03


def test_draw_distribution_chi_square():
    labels = _labels()
    draws = weighted_draws(inverse_frequency_weights(labels), 20_000, seed=4)
    counts = Counter(draws)
    ids = sorted(labels)
    probs = np.array([1 / 90 if labels[i] == 0 else 1 / 10 for i in ids]) / 2.0
    observed = np.array([counts.get(i, 0) for i in ids])
    chi2 = float(((observed - 20_000 * probs) ** 2 / (20_000 * probs)).sum())
    assert chi2 < stats.chi2.ppf(0.999, df=len(ids) - 1)


def test_draws_are_seeded():
    w = inverse_frequency_weights(_labels())
    assert weighted_draws(w, 50, seed=1) == weighted_draws(w, 50, seed=1)
    assert weighted_draws(w, 50, seed=1) != weighted_draws(w, 50, seed=2)
