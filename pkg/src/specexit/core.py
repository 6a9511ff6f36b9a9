"""Domain types shared by every other module.

Token sequences, per-round draft records, decode traces, and the seeded
PRNG that every stochastic operation receives explicitly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

# A token is a plain vocabulary index; bounds are enforced by the owning
# TokenSequence rather than by a wrapper type.
TokenId = int


class Rng:
    """Deterministic random stream backed by numpy's PCG64.

    PCG64 is a named, publicly specified generator whose bitstream is
    reproducible across platforms for a given seed.  Child streams are
    derived from the parent seed plus an integer key path, so parallel
    tasks get independent but replayable streams.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed,) + self.key))
        )

    def child(self, *key: int) -> "Rng":
        """Derived stream for a subtask; same (seed, key) always yields the
        same stream regardless of draws made from the parent."""
        return Rng(self.seed, self.key + tuple(key))

    def random(self, size=None):
        return self._gen.random(size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def beta(self, a: float, b: float) -> float:
        return float(self._gen.beta(a, b))

    def normal(self, mu: float, sigma: float) -> float:
        return float(self._gen.normal(mu, sigma))

    def bernoulli(self, p: float) -> bool:
        return bool(self._gen.random() < p)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size=size)

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def choice_excluding(self, n: int, excluded: int) -> int:
        """Uniform draw from range(n) \\ {excluded}; requires n >= 2."""
        draw = int(self._gen.integers(0, n - 1))
        return draw if draw < excluded else draw + 1

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


class TokenSequence:
    """Ordered list of vocabulary indices, bounds-checked and append-only."""

    __slots__ = ("vocab_size", "_tokens")

    def __init__(self, tokens, vocab_size: int):
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.vocab_size = int(vocab_size)
        self._tokens: list[int] = []
        self.extend(tokens)

    def _check(self, tok: int) -> int:
        tok = int(tok)
        if not 0 <= tok < self.vocab_size:
            raise ValueError(f"token {tok} out of range for vocab_size {self.vocab_size}")
        return tok

    def append(self, tok: TokenId) -> None:
        self._tokens.append(self._check(tok))

    def extend(self, tokens) -> None:
        for tok in tokens:
            self.append(tok)

    def copy(self) -> "TokenSequence":
        return TokenSequence(self._tokens, self.vocab_size)

    def to_list(self) -> list[int]:
        return list(self._tokens)

    def __len__(self):
        return len(self._tokens)

    def __getitem__(self, idx):
        return self._tokens[idx]

    def __iter__(self):
        return iter(self._tokens)

    def __eq__(self, other):
        if isinstance(other, TokenSequence):
            return self.vocab_size == other.vocab_size and self._tokens == other._tokens
        return NotImplemented

    def __repr__(self):
        return f"TokenSequence({self._tokens!r}, vocab_size={self.vocab_size})"


class StopReason(enum.Enum):
    """Why a round stopped drafting (REJECTION recorded post-verification)."""

    CONTROLLER_STOP = "controller_stop"
    LENGTH_CAP = "length_cap"
    REJECTION = "rejection"


@dataclass
class DraftRound:
    """One draft/verify cycle: proposed tokens, accepted prefix length, the
    target's bonus token, and per-phase wall times."""

    drafted: TokenSequence
    accepted_drafts: int
    bonus: TokenId
    stop_reason: StopReason
    draft_time: float = 0.0
    verify_time: float = 0.0
    sample_time: float = 0.0

    def __post_init__(self):
        if len(self.drafted) < 1:
            raise ValueError("round must draft at least one token")
        if not 0 <= self.accepted_drafts <= len(self.drafted):
            raise ValueError("accepted_drafts out of range")
        rejected = self.accepted_drafts < len(self.drafted)
        if rejected != (self.stop_reason is StopReason.REJECTION):
            raise ValueError("stop_reason must be REJECTION iff some draft was rejected")
        if min(self.draft_time, self.verify_time, self.sample_time) < 0:
            raise ValueError("negative phase time")
        if not 0 <= int(self.bonus) < self.drafted.vocab_size:
            raise ValueError("bonus token out of vocabulary")


@dataclass
class PhaseTimes:
    drafting: float = 0.0
    verification: float = 0.0
    sampling: float = 0.0
    other: float = 0.0

    def total(self) -> float:
        return self.drafting + self.verification + self.sampling + self.other


@dataclass
class DecodeTrace:
    """Full log of one decode session: prompt, per-round records, the output
    token stream, and phase-time totals."""

    prompt_len: int
    output: TokenSequence
    rounds: list[DraftRound] = field(default_factory=list)
    wall: PhaseTimes = field(default_factory=PhaseTimes)

    def new_tokens(self) -> int:
        return len(self.output) - self.prompt_len


def new_trace(prompt: TokenSequence) -> DecodeTrace:
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    return DecodeTrace(prompt_len=len(prompt), output=prompt.copy())


def push_round(trace: DecodeTrace, rnd: DraftRound, max_len: int | None = None) -> DecodeTrace:
    """Append a round: accepted draft prefix, then the bonus token, truncated
    at max_len last.  Returns the same trace for chaining."""
    if rnd.drafted.vocab_size != trace.output.vocab_size:
        raise ValueError("round vocabulary does not match trace")
    trace.rounds.append(rnd)
    for tok in list(rnd.drafted)[: rnd.accepted_drafts] + [rnd.bonus]:
        if max_len is not None and len(trace.output) >= max_len:
            break
        trace.output.append(tok)
    trace.wall.drafting += rnd.draft_time
    trace.wall.verification += rnd.verify_time
    trace.wall.sampling += rnd.sample_time
    return trace
