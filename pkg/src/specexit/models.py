"""Model abstraction the decoding engine runs against.

A model exposes incremental `step` / `step_batch` over a per-session cache
plus `rollback`, and every step returns next-token logits together with the
final-layer hidden state at the consumed position.

Also provides synthetic draft/target model pairs whose per-position
agreement probability is a known schedule, so the bandit controllers can be
validated against a controlled Bernoulli process without a neural model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np

from .core import TokenId, TokenSequence

ThetaSchedule = Callable[[int], float]


@dataclass
class StepOutput:
    """Next-token scores and the final-layer hidden state for one position."""

    logits: np.ndarray
    hidden: np.ndarray


@runtime_checkable
class DecodingSession(Protocol):
    """Per-prompt decode state with separate draft/target read heads.

    `draft_step` consumes one token along the draft path, `target_step`
    along the target path; both return the distribution for the next
    position.  `rollback(p)` rewinds every path to at most `p` consumed
    tokens, after which replays are bitwise identical to a fresh session
    fed the truncated prefix.
    """

    @property
    def draft_position(self) -> int: ...

    @property
    def target_position(self) -> int: ...

    def draft_step(self, token: TokenId) -> StepOutput: ...

    def target_step(self, token: TokenId) -> StepOutput: ...

    def target_step_batch(self, tokens: Sequence[TokenId]) -> list[StepOutput]: ...

    def rollback(self, position: int) -> None: ...


@runtime_checkable
class DecodingBundle(Protocol):
    """A draft/target model pair the engine can open sessions against."""

    vocab_size: int
    d_model: int

    def new_session(self) -> DecodingSession: ...


class _PositionStream:
    """Deterministic per-position draws shared by a synthetic pair.

    Every sequence index gets its own counter-based PCG64 stream derived
    from (seed, index), so draws are independent across positions and
    identical across replays regardless of access order.
    """

    def __init__(self, seed: int, vocab_size: int, d_model: int):
        self.seed = int(seed)
        self.vocab_size = vocab_size
        self.d_model = d_model

    def _gen(self, index: int, salt: int) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, int(index), salt)))
        )

    def target_token(self, index: int) -> int:
        return int(self._gen(index, 0).integers(0, self.vocab_size))

    def agree(self, index: int, theta: float) -> bool:
        return bool(self._gen(index, 1).random() < theta)

    def disagreeing_token(self, index: int) -> int:
        """Uniform over the vocabulary minus the target token."""
        tgt = self.target_token(index)
        draw = int(self._gen(index, 2).integers(0, self.vocab_size - 1))
        return draw if draw < tgt else draw + 1

    def hidden(self, index: int, theta: float, salt: int) -> np.ndarray:
        gen = self._gen(index, 16 + salt)
        base = gen.standard_normal(self.d_model)
        return (base + theta).astype(np.float32)


class SyntheticCache:
    """Cache for a synthetic model: nothing but the consumed-token count."""

    def __init__(self, owner: "SyntheticModel"):
        self._owner = owner
        self.position = 0

    def rollback(self, position: int) -> None:
        if position > self.position:
            raise ValueError(
                f"cannot roll forward: position {position} > {self.position}"
            )
        self.position = int(position)


class SyntheticModel:
    """Scripted model: next-token argmax depends only on sequence position.

    The target always emits the stream's scripted token.  The draft emits
    the scripted token with probability theta(position) and otherwise a
    uniform draw from the rest of the vocabulary, realizing an independent
    per-position Bernoulli agreement process.
    """

    def __init__(
        self,
        stream: _PositionStream,
        theta_schedule: ThetaSchedule,
        is_draft: bool,
    ):
        self._stream = stream
        self._schedule = theta_schedule
        self._is_draft = is_draft
        self.vocab_size = stream.vocab_size
        self.d_model = stream.d_model

    def new_cache(self) -> SyntheticCache:
        return SyntheticCache(self)

    def _check(self, cache: SyntheticCache, token: int) -> None:
        if cache._owner is not self:
            raise ValueError("cache belongs to a different model")
        if not 0 <= int(token) < self.vocab_size:
            raise ValueError(f"invalid token {token}")

    def emitted_token(self, index: int) -> int:
        """Argmax this model emits for sequence index `index`."""
        if not self._is_draft:
            return self._stream.target_token(index)
        theta = float(self._schedule(index))
        if not 0.0 <= theta <= 1.0:
            raise ValueError(f"theta schedule returned {theta} at index {index}")
        if self._stream.agree(index, theta):
            return self._stream.target_token(index)
        return self._stream.disagreeing_token(index)

    def step(self, cache: SyntheticCache, token: TokenId) -> StepOutput:
        self._check(cache, token)
        cache.position += 1
        index = cache.position
        chosen = self.emitted_token(index)
        logits = np.zeros(self.vocab_size, dtype=np.float32)
        logits[chosen] = 8.0
        theta = float(self._schedule(index))
        hidden = self._stream.hidden(index, theta, 1 if self._is_draft else 0)
        return StepOutput(logits=logits, hidden=hidden)

    def step_batch(self, cache: SyntheticCache, tokens: Sequence[TokenId]) -> list[StepOutput]:
        if len(tokens) == 0:
            raise ValueError("step_batch requires at least one token")
        return [self.step(cache, tok) for tok in tokens]


def synthetic_pair(
    theta_schedule: ThetaSchedule,
    vocab_size: int,
    seed: int,
    d_model: int = 16,
) -> tuple[SyntheticModel, SyntheticModel]:
    """Build a (draft, target) pair over one shared scripted stream."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    stream = _PositionStream(seed, vocab_size, d_model)
    draft = SyntheticModel(stream, theta_schedule, is_draft=True)
    target = SyntheticModel(stream, theta_schedule, is_draft=False)
    return draft, target


class PairSession:
    """DecodingSession over two independent single-path models."""

    def __init__(self, draft: SyntheticModel, target: SyntheticModel):
        self._draft = draft
        self._target = target
        self._draft_cache = draft.new_cache()
        self._target_cache = target.new_cache()

    @property
    def draft_position(self) -> int:
        return self._draft_cache.position

    @property
    def target_position(self) -> int:
        return self._target_cache.position

    def draft_step(self, token: TokenId) -> StepOutput:
        return self._draft.step(self._draft_cache, token)

    def target_step(self, token: TokenId) -> StepOutput:
        return self._target.step(self._target_cache, token)

    def target_step_batch(self, tokens: Sequence[TokenId]) -> list[StepOutput]:
        return self._target.step_batch(self._target_cache, tokens)

    def rollback(self, position: int) -> None:
        self._draft_cache.rollback(min(position, self._draft_cache.position))
        self._target_cache.rollback(min(position, self._target_cache.position))


class SyntheticBundle:
    """Engine-facing wrapper pairing the two synthetic models."""

    def __init__(self, theta_schedule: ThetaSchedule, vocab_size: int, seed: int, d_model: int = 16):
        self.draft, self.target = synthetic_pair(theta_schedule, vocab_size, seed, d_model)
        self.vocab_size = vocab_size
        self.d_model = d_model

    def new_session(self) -> PairSession:
        return PairSession(self.draft, self.target)


def constant_schedule(theta: float) -> ThetaSchedule:
    return lambda index: theta


def offset_schedule(base: ThetaSchedule, start: int) -> ThetaSchedule:
    """Re-index a schedule so generation offsets count from `start`."""
    return lambda index: base(max(index - start, 0))


def piecewise_schedule(segments: Sequence[tuple[float, int]]) -> ThetaSchedule:
    """Schedule from (theta, length) segments; the last theta extends forever."""
    if not segments:
        raise ValueError("piecewise schedule needs at least one segment")
    bounds = []
    acc = 0
    for theta, length in segments:
        if length < 1:
            raise ValueError("segment length must be >= 1")
        acc += int(length)
        bounds.append((acc, float(theta)))

    def schedule(index: int) -> float:
        for end, theta in bounds:
            if index < end:
                return theta
        return bounds[-1][1]

    return schedule


def sinusoid_schedule(mean: float, amplitude: float, period: int) -> ThetaSchedule:
    if period < 1:
        raise ValueError("period must be >= 1")

    def schedule(index: int) -> float:
        value = mean + amplitude * np.sin(2.0 * np.pi * index / period)
        return float(min(max(value, 0.0), 1.0))

    return schedule


def make_prompt(length: int, vocab_size: int, rng) -> TokenSequence:
    """Random prompt helper used by the simulator and tests."""
    toks = [int(t) for t in rng.integers(0, vocab_size, size=length)]
    return TokenSequence(toks, vocab_size)
