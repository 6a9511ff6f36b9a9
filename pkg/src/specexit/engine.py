"""Outer speculative-decoding loop.

Each round drafts tokens with the early-exit path under controller
guidance, verifies them against the target in one batched pass, keeps the
longest prefix matching the target's greedy choices plus the target's own
next token (the bonus), updates the controller posterior, and repeats.
Output is token-identical to plain greedy decoding of the target model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .controllers import (
    BetaTSController,
    CaliTSController,
    FixedKController,
    PredictorWeights,
)
from .core import DecodeTrace, DraftRound, Rng, StopReason, TokenSequence, new_trace, push_round
from .models import DecodingBundle, DecodingSession

CONTROLLER_KINDS = ("fixed", "beta", "cali")


@dataclass(frozen=True)
class EngineConfig:
    max_len: int = 512
    controller: str = "beta"
    k: int = 10
    alpha0: float = 1.0
    beta0: float = 1.0
    accounting: str = "literal"
    sigma_m: float = 0.2
    sigma_s: float = 0.5
    theta0: float = 0.5
    cali_model_only: bool = False
    round_cap: int = 64
    stop_tokens: tuple[int, ...] = ()

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.round_cap < 1:
            raise ValueError("round_cap must be >= 1")
        if self.controller not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def make_controller(cfg: EngineConfig, d_model: int, predictor: PredictorWeights | None = None):
    if cfg.controller == "fixed":
        return FixedKController(cfg.k)
    if cfg.controller == "beta":
        return BetaTSController(cfg.alpha0, cfg.beta0, cfg.accounting)
    if predictor is None:
        predictor = PredictorWeights.zeros(d_model)
    return CaliTSController(
        predictor,
        sigma_m=cfg.sigma_m,
        sigma_s=cfg.sigma_s,
        theta0=cfg.theta0,
        model_only=cfg.cali_model_only,
    )


def _argmax(logits: np.ndarray) -> int:
    # ties break toward the lowest token index
    return int(np.argmax(logits))


def verify(
    session: DecodingSession,
    drafted: list[int],
    pre_argmax: int,
) -> tuple[int, int]:
    """Batched verification of one drafted block.

    ``pre_argmax`` is the target's greedy token for the first drafted
    position (computed before the round).  Feeds the whole block through the
    target in one pass, accepts the longest prefix where each draft token
    equals the target's greedy choice given the same context, rolls the
    session back to the accepted position, and returns the accepted count
    plus the target's bonus token at the first divergence.
    """
    if not drafted:
        raise ValueError("drafted block must be non-empty")
    prefix_pos = session.target_position
    outs = session.target_step_batch(drafted)
    greedy = [pre_argmax] + [_argmax(o.logits) for o in outs]
    accepted = 0
    while accepted < len(drafted) and drafted[accepted] == greedy[accepted]:
        accepted += 1
    bonus = greedy[accepted]
    session.rollback(prefix_pos + accepted)
    return accepted, bonus


def autoregressive_reference(
    bundle: DecodingBundle,
    prompt: TokenSequence,
    max_len: int,
    stop_tokens: tuple[int, ...] = (),
) -> TokenSequence:
    """Plain greedy decoding of the target model; the losslessness oracle."""
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    if len(prompt) >= max_len:
        raise ValueError("prompt must be shorter than max_len")
    session = bundle.new_session()
    out = prompt.copy()
    step = None
    for tok in prompt:
        step = session.target_step(tok)
    stops = set(stop_tokens)
    while len(out) < max_len:
        nxt = _argmax(step.logits)
        out.append(nxt)
        if nxt in stops or len(out) >= max_len:
            break
        step = session.target_step(nxt)
    return out


def decode(
    bundle: DecodingBundle,
    prompt: TokenSequence,
    cfg: EngineConfig,
    rng: Rng,
    predictor: PredictorWeights | None = None,
) -> DecodeTrace:
    """Run the speculative loop; returns the full per-round trace.

    The drafting inner loop follows the draft-then-consult order: at least
    one token is proposed per round, and after each proposal the controller
    draws a continue/stop decision, bounded by the per-round cap and the
    output length cap.
    """
    if len(prompt) >= cfg.max_len:
        raise ValueError("prompt must be shorter than max_len")
    if prompt.vocab_size != bundle.vocab_size:
        raise ValueError("prompt vocabulary does not match the model bundle")
    controller = make_controller(cfg, bundle.d_model, predictor)
    stops = set(cfg.stop_tokens)
    trace = new_trace(prompt)
    session = bundle.new_session()
    t_start = time.perf_counter()

    last = None
    for tok in prompt:
        last = session.target_step(tok)
    pre_argmax = _argmax(last.logits)
    target_hidden = last.hidden

    while len(trace.output) < cfg.max_len:
        draft_s = verify_s = sample_s = 0.0
        controller.start_round(target_hidden)

        # catch the draft path up to the confirmed output, ending with the
        # prediction for the first new position
        t0 = time.perf_counter()
        draft_out = None
        for pos in range(session.draft_position, len(trace.output)):
            draft_out = session.draft_step(trace.output[pos])
        draft_s += time.perf_counter() - t0

        drafted: list[int] = []
        stop_reason = StopReason.LENGTH_CAP
        while True:
            drafted.append(_argmax(draft_out.logits))
            if len(trace.output) + len(drafted) >= cfg.max_len:
                break
            if len(drafted) >= cfg.round_cap:
                break
            t0 = time.perf_counter()
            decision = controller.decide(len(drafted), draft_out.hidden, rng)
            sample_s += time.perf_counter() - t0
            if not decision.continue_drafting:
                stop_reason = StopReason.CONTROLLER_STOP
                break
            t0 = time.perf_counter()
            draft_out = session.draft_step(drafted[-1])
            draft_s += time.perf_counter() - t0

        t0 = time.perf_counter()
        accepted, bonus = verify(session, drafted, pre_argmax)
        verify_s += time.perf_counter() - t0
        if accepted < len(drafted):
            stop_reason = StopReason.REJECTION

        appended = list(drafted[:accepted]) + [bonus]
        stop_at = None
        for offset, tok in enumerate(appended):
            if tok in stops:
                stop_at = len(trace.output) + offset + 1
                break
        rnd = DraftRound(
            drafted=TokenSequence(drafted, bundle.vocab_size),
            accepted_drafts=accepted,
            bonus=bonus,
            stop_reason=stop_reason,
            draft_time=draft_s,
            verify_time=verify_s,
            sample_time=sample_s,
        )
        push_round(trace, rnd, max_len=cfg.max_len if stop_at is None else min(cfg.max_len, stop_at))
        controller.observe(accepted, len(drafted))
        if stop_at is not None or len(trace.output) >= cfg.max_len:
            break

        # consume the bonus token on the target path: its logits are the
        # greedy baseline for the next round and its hidden state feeds the
        # calibrated controller
        t0 = time.perf_counter()
        last = session.target_step(bonus)
        verify_s = time.perf_counter() - t0
        rnd.verify_time += verify_s
        trace.wall.verification += verify_s
        pre_argmax = _argmax(last.logits)
        target_hidden = last.hidden

    total = time.perf_counter() - t_start
    trace.wall.other = total - (
        trace.wall.drafting + trace.wall.verification + trace.wall.sampling
    )
    return trace
