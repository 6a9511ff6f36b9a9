"""Acceptance statistics, the harmonic-mean score, the analytic time and
speedup model, synthetic clocks for the simulator, and report emission.

Also ships a machine-readable fixture of published (v_d, r_d, HM) triples
from reference benchmark tables, used as a regression oracle for the
harmonic-mean arithmetic.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources

from .core import DecodeTrace, PhaseTimes

CSV_HEADER = (
    "run_id,controller,k,seed,v_d,r_d,hm,alpha,measured_s,model_s,"
    "speedup_measured,speedup_model,draft_s,verify_s,sample_s,other_s"
)


def acceptance_stats(trace: DecodeTrace) -> tuple[float, float]:
    """(v_d, r_d): accepted fraction of drafted tokens, and accepted drafts
    as a fraction of all new output tokens.  Bonus tokens count only in the
    r_d denominator; they are target output, not draft output."""
    if not trace.rounds:
        raise ValueError("trace has no rounds")
    drafted = sum(len(r.drafted) for r in trace.rounds)
    accepted = sum(r.accepted_drafts for r in trace.rounds)
    if drafted == 0:
        raise ValueError("no drafted tokens; v_d undefined")
    new_tokens = trace.new_tokens()
    if new_tokens == 0:
        raise ValueError("trace produced no output tokens")
    # cap truncation can drop tail tokens; r_d counts what actually landed
    accepted_in_output = min(accepted, new_tokens)
    return accepted / drafted, accepted_in_output / new_tokens


def harmonic_mean(v_d: float, r_d: float) -> float:
    """Combined draft quality/strategy score: 200 * v * r / (v + r)."""
    if not (0.0 <= v_d <= 1.0 and 0.0 <= r_d <= 1.0):
        raise ValueError("v_d and r_d must lie in [0, 1]")
    if v_d + r_d == 0.0:
        return 0.0
    # grouping keeps the function exactly symmetric in floating point
    return 200.0 * (v_d * r_d) / (v_d + r_d)


def model_time(v_d: float, r_d: float, length: int, t_draft: float, t_target: float) -> float:
    """Analytic end-to-end time: (r*L/v) draft steps plus (1-r)*L target steps."""
    if v_d <= 0:
        raise ValueError("v_d must be positive for the time model")
    if min(length, t_draft, t_target) < 0:
        raise ValueError("all inputs must be nonnegative")
    return (r_d * length / v_d) * t_draft + (1.0 - r_d) * length * t_target


def model_speedup(v_d: float, r_d: float, alpha: float) -> float:
    """Analytic speedup v / ((alpha - v) * r + v); alpha is T_d / T_t.

    alpha = 0 is the free-drafts limit and is allowed; the guard below
    catches the resulting zero denominator at r = 1.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if not 0.0 < v_d <= 1.0:
        raise ValueError("v_d must lie in (0, 1]")
    if not 0.0 <= r_d <= 1.0:
        raise ValueError("r_d must lie in [0, 1]")
    denom = (alpha - v_d) * r_d + v_d
    if denom <= 0:
        raise ValueError(f"unbounded-invalid: speedup denominator {denom} <= 0")
    return v_d / denom


def simulate_clock(
    trace: DecodeTrace, t_draft: float, t_target: float, t_verify_overhead: float = 0.0
) -> float:
    """Synthetic wall time: every round pays one draft step per drafted token
    plus one batched verification pass (one target step plus overhead)."""
    if min(t_draft, t_target, t_verify_overhead) < 0:
        raise ValueError("costs must be nonnegative")
    return sum(
        len(r.drafted) * t_draft + t_target + t_verify_overhead for r in trace.rounds
    )


def synthetic_phases(
    trace: DecodeTrace, t_draft: float, t_target: float, t_verify_overhead: float = 0.0
) -> PhaseTimes:
    """Phase split implied by the synthetic clock: drafting pays per drafted
    token, verification pays one target pass plus overhead per round."""
    drafting = sum(len(r.drafted) for r in trace.rounds) * t_draft
    verification = len(trace.rounds) * (t_target + t_verify_overhead)
    return PhaseTimes(drafting=drafting, verification=verification, sampling=0.0, other=0.0)


@dataclass
class MetricsReport:
    run_id: str
    controller: str
    k: int
    seed: int
    v_d: float
    r_d: float
    hm: float
    alpha: float
    measured_s: float
    model_s: float
    speedup_measured: float
    speedup_model: float
    breakdown: PhaseTimes

    def csv_row(self) -> str:
        fields = [
            self.run_id,
            self.controller,
            str(self.k),
            str(self.seed),
            repr(float(self.v_d)),
            repr(float(self.r_d)),
            repr(float(self.hm)),
            repr(float(self.alpha)),
            repr(float(self.measured_s)),
            repr(float(self.model_s)),
            repr(float(self.speedup_measured)),
            repr(float(self.speedup_model)),
            repr(float(self.breakdown.drafting)),
            repr(float(self.breakdown.verification)),
            repr(float(self.breakdown.sampling)),
            repr(float(self.breakdown.other)),
        ]
        return ",".join(fields)

    def to_json(self) -> str:
        payload = {
            "run_id": self.run_id,
            "controller": self.controller,
            "k": self.k,
            "seed": self.seed,
            "v_d": self.v_d,
            "r_d": self.r_d,
            "hm": self.hm,
            "alpha": self.alpha,
            "measured_s": self.measured_s,
            "model_s": self.model_s,
            "speedup_measured": self.speedup_measured,
            "speedup_model": self.speedup_model,
            "breakdown": {
                "drafting": self.breakdown.drafting,
                "verification": self.breakdown.verification,
                "sampling": self.breakdown.sampling,
                "other": self.breakdown.other,
            },
        }
        return json.dumps(payload)


def report_from_trace(
    trace: DecodeTrace,
    *,
    run_id: str,
    controller: str,
    k: int,
    seed: int,
    t_draft: float,
    t_target: float,
    measured_s: float | None = None,
    breakdown: PhaseTimes | None = None,
) -> MetricsReport:
    """Build a report from a trace given per-token costs (measured for wall
    clock runs, configured for simulation)."""
    v_d, r_d = acceptance_stats(trace)
    alpha = t_draft / t_target
    length = trace.new_tokens()
    measured = trace.wall.total() if measured_s is None else measured_s
    if breakdown is None:
        breakdown = trace.wall
    model_s = model_time(v_d, r_d, length, t_draft, t_target) if v_d > 0 else float("nan")
    baseline = length * t_target
    speedup_measured = baseline / measured if measured > 0 else float("nan")
    speedup_model = model_speedup(v_d, r_d, alpha) if v_d > 0 else float("nan")
    return MetricsReport(
        run_id=run_id,
        controller=controller,
        k=k,
        seed=seed,
        v_d=v_d,
        r_d=r_d,
        hm=harmonic_mean(v_d, r_d),
        alpha=alpha,
        measured_s=measured,
        model_s=model_s,
        speedup_measured=speedup_measured,
        speedup_model=speedup_model,
        breakdown=breakdown,
    )


def trace_to_json(trace: DecodeTrace) -> str:
    """One decode trace as a single JSON line with fixed field names."""
    payload = {
        "prompt_len": trace.prompt_len,
        "output": trace.output.to_list(),
        "rounds": [
            {
                "drafted": r.drafted.to_list(),
                "accepted_drafts": r.accepted_drafts,
                "bonus": r.bonus,
                "stop_reason": r.stop_reason.value,
                "draft_time": r.draft_time,
                "verify_time": r.verify_time,
                "sample_time": r.sample_time,
            }
            for r in trace.rounds
        ],
        "wall": {
            "drafting": trace.wall.drafting,
            "verification": trace.wall.verification,
            "sampling": trace.wall.sampling,
            "other": trace.wall.other,
        },
    }
    return json.dumps(payload)


@dataclass(frozen=True)
class PublishedRow:
    dataset: str
    target_model: str
    method: str
    draft_model: str
    v_d: float
    r_d: float
    hm: float


def load_published_reference() -> list[PublishedRow]:
    """Published (v_d, r_d, HM) triples transcribed from reference benchmark
    tables; regression fixture for the harmonic-mean arithmetic."""
    rows = []
    with resources.files("specexit.data").joinpath("published_hm.csv").open("r") as f:
        for rec in csv.DictReader(f):
            rows.append(
                PublishedRow(
                    dataset=rec["dataset"],
                    target_model=rec["target_model"],
                    method=rec["method"],
                    draft_model=rec["draft_model"],
                    v_d=float(rec["v_d"]),
                    r_d=float(rec["r_d"]),
                    hm=float(rec["hm"]),
                )
            )
    return rows


def hm_attainable_under_rounding(row: PublishedRow, decimals: int = 2) -> bool:
    """Whether some unrounded (v, r) within the row's rounding interval can
    produce the published HM; distinguishes rounding artifacts from
    misprints in the source tables."""
    half = 0.5 * 10.0 ** (-decimals)
    lo = harmonic_mean(max(row.v_d - half, 0.0), max(row.r_d - half, 0.0))
    hi = harmonic_mean(min(row.v_d + half, 1.0), min(row.r_d + half, 1.0))
    return lo - 1e-9 <= row.hm <= hi + 1e-9
