#!/usr/bin/env python3
"""Fixed-K versus Thompson-sampling sweep on synthetic agreement schedules.

Runs the simulated-clock comparison behind the adaptivity experiments: a
constant-agreement schedule (where a well-chosen fixed K is hard to beat)
and a shifting schedule (where the samplers adapt and fixed K pays for its
stale setting).  Prints one table per schedule.

Usage: python scripts/run_adaptivity_sweep.py [--max-len 512] [--seeds 3]
"""

import argparse

import numpy as np

from specexit.core import Rng
from specexit.engine import EngineConfig, decode
from specexit.metrics import simulate_clock
from specexit.models import (
    SyntheticBundle,
    constant_schedule,
    make_prompt,
    offset_schedule,
    piecewise_schedule,
)

T_DRAFT, T_TARGET = 0.1, 1.0
PROMPT_LEN = 16
VOCAB = 64


def sweep_cell(schedule, controller, k, max_len, seeds, reps, accounting):
    times = []
    for seed in range(seeds):
        for rep in range(reps):
            pair_seed = 7919 * seed + rep
            bundle = SyntheticBundle(schedule, VOCAB, seed=pair_seed)
            prompt = make_prompt(PROMPT_LEN, VOCAB, Rng(pair_seed, key=(5,)))
            cfg = EngineConfig(
                max_len=max_len, controller=controller, k=k, accounting=accounting
            )
            trace = decode(bundle, prompt, cfg, Rng(0, key=(seed, rep)))
            times.append(simulate_clock(trace, T_DRAFT, T_TARGET))
    return float(np.mean(times))


def run_schedule(name, schedule, args):
    print(f"\n=== {name} (t_draft={T_DRAFT}, t_target={T_TARGET}) ===")
    rows = []
    for k in range(1, 17):
        rows.append((f"fixed K={k}", sweep_cell(schedule, "fixed", k, args.max_len,
                                                args.seeds, args.reps, "literal")))
    for mode in ("literal", "exact"):
        rows.append((f"beta-TS [{mode}]", sweep_cell(schedule, "beta", 1, args.max_len,
                                                     args.seeds, args.reps, mode)))
    rows.append(("cali-TS [zero predictor]", sweep_cell(schedule, "cali", 1, args.max_len,
                                                        args.seeds, args.reps, "literal")))
    best_fixed = min(t for label, t in rows if label.startswith("fixed"))
    for label, t in rows:
        marker = "  <- best fixed" if t == best_fixed and label.startswith("fixed") else ""
        print(f"{label:<26}{t:>10.2f}s   x{t / best_fixed:.3f} of best fixed{marker}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--max-len", type=int, default=512)
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--reps", type=int, default=2)
    args = parser.parse_args()

    run_schedule("constant agreement 0.8", constant_schedule(0.8), args)
    run_schedule(
        "piecewise agreement 0.9 then 0.3",
        offset_schedule(piecewise_schedule([(0.9, 64), (0.3, 10**9)]), PROMPT_LEN),
        args,
    )
    run_schedule("constant agreement 0.5", constant_schedule(0.5), args)


if __name__ == "__main__":
    main()
