"""Domain types: token sequences, draft rounds, traces, and the PRNG."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specexit.core import (
    DecodeTrace,
    DraftRound,
    Rng,
    StopReason,
    TokenSequence,
    new_trace,
    push_round,
)


class TestRng:
    def test_equal_seeds_equal_streams(self):
        a, b = Rng(1234), Rng(1234)
        assert np.array_equal(a.integers(0, 2**62, size=1_000_000),
                              b.integers(0, 2**62, size=1_000_000))

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).random(size=64), Rng(2).random(size=64))

    def test_child_streams_independent_of_parent_draws(self):
        a = Rng(7)
        a.random(size=100)
        b = Rng(7)
        assert np.array_equal(a.child(3).random(size=16), b.child(3).random(size=16))

    def test_choice_excluding(self):
        rng = Rng(0)
        draws = {rng.choice_excluding(5, 2) for _ in range(200)}
        assert draws == {0, 1, 3, 4}


class TestTokenSequence:
    def test_bounds_checked(self):
        with pytest.raises(ValueError):
            TokenSequence([0, 7], vocab_size=7)
        seq = TokenSequence([0, 6], vocab_size=7)
        with pytest.raises(ValueError):
            seq.append(-1)

    def test_append_and_equality(self):
        seq = TokenSequence([1, 2], vocab_size=10)
        seq.append(3)
        assert seq.to_list() == [1, 2, 3]
        assert seq == TokenSequence([1, 2, 3], vocab_size=10)
        assert seq != TokenSequence([1, 2, 3], vocab_size=11)


class TestNewTrace:
    def test_constructor_identity(self):
        trace = new_trace(TokenSequence([5, 9], 16))
        assert trace.prompt_len == 2
        assert trace.rounds == []
        assert trace.output.to_list() == [5, 9]

    def test_empty_prompt_rejected(self):
        with pytest.raises(ValueError, match="empty prompt"):
            new_trace(TokenSequence([], 16))

    def test_long_prompt_length_passthrough(self):
        trace = new_trace(TokenSequence([3] * 512, 16))
        assert trace.prompt_len == 512


def _round(drafted, accepted, bonus, vocab=16, reason=None):
    if reason is None:
        reason = (
            StopReason.REJECTION if accepted < len(drafted) else StopReason.CONTROLLER_STOP
        )
    return DraftRound(
        drafted=TokenSequence(drafted, vocab),
        accepted_drafts=accepted,
        bonus=bonus,
        stop_reason=reason,
    )


class TestPushRound:
    def test_append_semantics(self):
        trace = new_trace(TokenSequence([1], 16))
        push_round(trace, _round([2, 3], 2, 4))
        assert trace.output.to_list() == [1, 2, 3, 4]

    def test_full_rejection_keeps_only_bonus(self):
        trace = new_trace(TokenSequence([1], 16))
        push_round(trace, _round([7], 0, 5))
        assert trace.output.to_list() == [1, 5]

    def test_cap_truncates(self):
        trace = new_trace(TokenSequence([1, 2], 16))
        push_round(trace, _round([3, 4], 2, 5), max_len=3)
        assert trace.output.to_list() == [1, 2, 3]

    def test_vocab_mismatch_rejected(self):
        trace = new_trace(TokenSequence([1], 16))
        with pytest.raises(ValueError):
            push_round(trace, _round([2], 1, 3, vocab=32))


class TestDraftRoundInvariants:
    def test_accepted_bounds(self):
        with pytest.raises(ValueError):
            _round([1, 2], 3, 0)

    def test_rejection_iff_partial_accept(self):
        with pytest.raises(ValueError):
            DraftRound(TokenSequence([1, 2], 16), 1, 0, StopReason.CONTROLLER_STOP)
        with pytest.raises(ValueError):
            DraftRound(TokenSequence([1, 2], 16), 2, 0, StopReason.REJECTION)

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            DraftRound(TokenSequence([1], 16), 1, 0, StopReason.CONTROLLER_STOP,
                       draft_time=-1.0)

    def test_empty_draft_rejected(self):
        with pytest.raises(ValueError):
            DraftRound(TokenSequence([], 16), 0, 0, StopReason.CONTROLLER_STOP)


rounds_strategy = st.lists(
    st.tuples(
        st.lists(st.integers(0, 15), min_size=1, max_size=8),
        st.integers(0, 8),
        st.integers(0, 15),
    ),
    min_size=1,
    max_size=12,
)


@settings(max_examples=100, deadline=None)
@given(prompt=st.lists(st.integers(0, 15), min_size=1, max_size=6), spec=rounds_strategy)
def test_trace_length_identity_and_replay(prompt, spec):
    """Without a cap, |output| - prompt_len is the sum of accepted + 1 per
    round, and replaying the recorded rounds reconstructs the output."""
    trace = new_trace(TokenSequence(prompt, 16))
    for drafted, accepted, bonus in spec:
        accepted = min(accepted, len(drafted))
        push_round(trace, _round(drafted, accepted, bonus))
    expected_new = sum(min(a, len(d)) + 1 for d, a, _ in spec)
    assert len(trace.output) - trace.prompt_len == expected_new

    replay = new_trace(TokenSequence(prompt, 16))
    for rnd in trace.rounds:
        push_round(replay, rnd)
    assert replay.output.to_list() == trace.output.to_list()


@settings(max_examples=100, deadline=None)
@given(
    prompt=st.lists(st.integers(0, 15), min_size=1, max_size=6),
    spec=rounds_strategy,
    cap_slack=st.integers(0, 10),
)
def test_trace_cap_truncation(prompt, spec, cap_slack):
    cap = len(prompt) + cap_slack
    trace = new_trace(TokenSequence(prompt, 16))
    for drafted, accepted, bonus in spec:
        push_round(trace, _round(drafted, min(accepted, len(drafted)), bonus), max_len=cap)
    uncapped = sum(min(a, len(d)) + 1 for d, a, _ in spec)
    assert len(trace.output) - trace.prompt_len == min(uncapped, cap_slack)
