"""Synthetic oracle pairs and the step/step_batch/rollback contract."""

import numpy as np
import pytest

from specexit.models import (
    SyntheticBundle,
    constant_schedule,
    offset_schedule,
    piecewise_schedule,
    sinusoid_schedule,
    synthetic_pair,
)


def test_vocab_too_small_rejected():
    with pytest.raises(ValueError):
        synthetic_pair(constant_schedule(0.5), vocab_size=1, seed=0)


def test_full_agreement_schedule():
    draft, target = synthetic_pair(constant_schedule(1.0), vocab_size=32, seed=3)
    for index in range(1, 200):
        assert draft.emitted_token(index) == target.emitted_token(index)


def test_zero_agreement_schedule():
    draft, target = synthetic_pair(constant_schedule(0.0), vocab_size=32, seed=3)
    for index in range(1, 200):
        assert draft.emitted_token(index) != target.emitted_token(index)


def test_monte_carlo_agreement_rate():
    """Empirical agreement over 10^4 positions within 0.8 +/- 0.02."""
    draft, target = synthetic_pair(constant_schedule(0.8), vocab_size=64, seed=11)
    agree = sum(
        draft.emitted_token(i) == target.emitted_token(i) for i in range(1, 10_001)
    )
    assert abs(agree / 10_000 - 0.8) < 0.02


def test_determinism_across_instances():
    a_draft, a_target = synthetic_pair(constant_schedule(0.6), 32, seed=5)
    b_draft, b_target = synthetic_pair(constant_schedule(0.6), 32, seed=5)
    for i in range(1, 50):
        assert a_draft.emitted_token(i) == b_draft.emitted_token(i)
        assert a_target.emitted_token(i) == b_target.emitted_token(i)


def test_step_returns_one_hot_like_logits():
    _, target = synthetic_pair(constant_schedule(0.5), vocab_size=16, seed=0)
    cache = target.new_cache()
    out = target.step(cache, 3)
    assert out.logits.shape == (16,)
    assert int(np.argmax(out.logits)) == target.emitted_token(1)
    assert np.isfinite(out.logits).all() and np.isfinite(out.hidden).all()


def test_step_batch_equals_sequential():
    draft, _ = synthetic_pair(constant_schedule(0.4), vocab_size=16, seed=2)
    c1, c2 = draft.new_cache(), draft.new_cache()
    toks = [1, 5, 2, 9]
    batch = draft.step_batch(c1, toks)
    seq = [draft.step(c2, t) for t in toks]
    for a, b in zip(batch, seq):
        assert np.array_equal(a.logits, b.logits)
        assert np.array_equal(a.hidden, b.hidden)
    with pytest.raises(ValueError):
        draft.step_batch(draft.new_cache(), [])


def test_rollback_contract():
    _, target = synthetic_pair(constant_schedule(0.5), vocab_size=16, seed=2)
    cache = target.new_cache()
    target.step_batch(cache, [1, 2, 3])
    cache.rollback(1)
    out = target.step(cache, 7)
    fresh = target.new_cache()
    ref = target.step_batch(fresh, [1, 7])[-1]
    assert np.array_equal(out.logits, ref.logits)
    cache.rollback(cache.position)  # no-op
    with pytest.raises(ValueError):
        cache.rollback(cache.position + 1)


def test_invalid_token_and_cache_mismatch():
    draft, target = synthetic_pair(constant_schedule(0.5), vocab_size=8, seed=2)
    cache = draft.new_cache()
    with pytest.raises(ValueError, match="invalid token"):
        draft.step(cache, 8)
    with pytest.raises(ValueError, match="different model"):
        target.step(cache, 1)


def test_bundle_session_rollback_rewinds_both_paths():
    bundle = SyntheticBundle(constant_schedule(0.7), 16, seed=4)
    session = bundle.new_session()
    for t in (1, 2, 3):
        session.draft_step(t)
    session.target_step(1)
    session.rollback(1)
    assert session.draft_position == 1
    assert session.target_position == 1


class TestSchedules:
    def test_piecewise_lookup(self):
        sched = piecewise_schedule([(0.9, 4), (0.2, 4)])
        assert [sched(i) for i in (0, 3, 4, 7, 100)] == [0.9, 0.9, 0.2, 0.2, 0.2]

    def test_piecewise_rejects_bad_segments(self):
        with pytest.raises(ValueError):
            piecewise_schedule([])
        with pytest.raises(ValueError):
            piecewise_schedule([(0.5, 0)])

    def test_offset_reindexes(self):
        sched = offset_schedule(piecewise_schedule([(1.0, 2), (0.0, 2)]), start=10)
        assert sched(10) == 1.0 and sched(11) == 1.0 and sched(12) == 0.0
        assert sched(3) == 1.0  # clamped below start

    def test_sinusoid_bounded(self):
        sched = sinusoid_schedule(0.5, 0.9, period=16)
        values = [sched(i) for i in range(64)]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert max(values) > 0.9 and min(values) < 0.1

    def test_agreement_follows_schedule_segments(self):
        sched = piecewise_schedule([(1.0, 50), (0.0, 50)])
        draft, target = synthetic_pair(sched, 32, seed=9)
        first = [draft.emitted_token(i) == target.emitted_token(i) for i in range(0, 50)]
        second = [draft.emitted_token(i) == target.emitted_token(i) for i in range(50, 100)]
        assert all(first) and not any(second)
