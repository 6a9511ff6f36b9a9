"""Command-line entry point: train, distill, decode, simulate, bench.

Configuration is a flat ``key = value`` text file with ``#`` comments and
dotted section keys (``engine.max_len = 512``).  Command-line ``--set``
overrides beat file values, unknown keys are hard errors, and
``--dump-config`` writes the fully resolved configuration back out so the
identical run can be reproduced from the dumped file.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import models, nanolm, training
from .controllers import PredictorWeights
from .core import Rng, TokenSequence
from .engine import EngineConfig, autoregressive_reference, decode
from .metrics import CSV_HEADER, report_from_trace, simulate_clock, synthetic_phases, trace_to_json
from .nanolm import CheckpointError, NanoConfig, NanoModel, init_exit_from_target
from .training import Corpus, PredictorTrainConfig, TrainConfig

CONFIG_ENV_VAR = "SPECEXIT_CONFIG"


class ConfigError(Exception):
    """Usage or configuration problem; maps to exit code 2."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(int(part) for part in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"not a comma-separated int list: {raw!r}") from exc


def _parse_str_list(raw: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in raw.split(",") if p.strip())


# key -> (parse, default); the single source of truth for the config surface
CONFIG_SCHEMA: dict = {
    "nano.vocab_size": (int, 256),
    "nano.d_model": (int, 128),
    "nano.n_heads": (int, 4),
    "nano.n_layers": (int, 8),
    "nano.d_ff": (int, 512),
    "nano.max_seq_len": (int, 512),
    "nano.exit_after": (int, 2),
    "nano.exit_depth": (int, 1),
    "nano.norm_eps": (float, 1e-5),
    "train.lr": (float, 1e-3),
    "train.batch_size": (int, 32),
    "train.epochs": (int, 4),
    "train.seq_len": (int, 128),
    "train.optimizer": (str, "momentum"),
    "train.momentum": (float, 0.9),
    "train.seed": (int, 0),
    "train.distill_mix": (float, 0.5),
    "train.max_steps_per_epoch": (int, 0),
    "train.holdout_frac": (float, 0.15),
    "train.split_seed": (int, 0),
    "distill.n_prompts": (int, 24),
    "distill.prompt_len": (int, 24),
    "distill.gen_len": (int, 96),
    "distill.greedy_frac": (float, 0.5),
    "distill.seed": (int, 11),
    "predictor.prompt_len": (int, 40),
    "predictor.gen_len": (int, 48),
    "predictor.draft_k": (int, 6),
    "predictor.n_prompts": (int, 40),
    "predictor.lr": (float, 0.05),
    "predictor.epochs": (int, 8),
    "predictor.seed": (int, 3),
    "engine.max_len": (int, 512),
    "engine.controller": (str, "beta"),
    "engine.k": (int, 10),
    "engine.alpha0": (float, 1.0),
    "engine.beta0": (float, 1.0),
    "engine.accounting": (str, "literal"),
    "engine.sigma_m": (float, 0.2),
    "engine.sigma_s": (float, 0.5),
    "engine.theta0": (float, 0.5),
    "engine.cali_model_only": (_parse_bool, False),
    "engine.round_cap": (int, 64),
    "engine.seed": (int, 0),
    "engine.stop_tokens": (_parse_int_list, ()),
    "paths.corpus": (str, ""),
    "paths.checkpoint": (str, "checkpoint.nlm1"),
    "paths.distilled": (str, "distilled.nlm1"),
    "paths.predictor": (str, ""),
    "paths.out_dir": (str, "."),
    "simulate.schedule": (str, "constant:0.8"),
    "simulate.t_draft": (float, 0.1),
    "simulate.t_target": (float, 1.0),
    "simulate.overhead": (float, 0.0),
    "simulate.k_grid": (_parse_int_list, (1, 2, 4, 6, 8, 10, 12, 16)),
    "simulate.controllers": (_parse_str_list, ("fixed", "beta", "cali")),
    "simulate.seeds": (int, 3),
    "simulate.reps": (int, 2),
    "simulate.max_len": (int, 256),
    "simulate.prompt_len": (int, 16),
    "simulate.vocab_size": (int, 64),
    "bench.k_grid": (_parse_int_list, (4, 8)),
    "bench.controllers": (_parse_str_list, ("fixed", "beta", "cali", "cali_model_only")),
    "bench.seeds": (int, 2),
    "bench.n_prompts": (int, 8),
    "bench.prompt_len": (int, 32),
    "bench.gen_len": (int, 64),
    "bench.untrained_exit": (_parse_bool, False),
}


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_config(file_values: dict[str, str], overrides: list[str]) -> dict:
    raw = dict(file_values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    resolved = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    for key, value in raw.items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key: {key!r}")
        parse, _ = CONFIG_SCHEMA[key]
        try:
            resolved[key] = parse(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    return resolved


def dump_config(cfg: dict) -> str:
    lines = ["# resolved configuration; reproduces this run exactly"]
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _nano_config(cfg: dict) -> NanoConfig:
    return NanoConfig(
        vocab_size=cfg["nano.vocab_size"],
        d_model=cfg["nano.d_model"],
        n_heads=cfg["nano.n_heads"],
        n_layers=cfg["nano.n_layers"],
        d_ff=cfg["nano.d_ff"],
        max_seq_len=cfg["nano.max_seq_len"],
        exit_after=cfg["nano.exit_after"],
        exit_depth=cfg["nano.exit_depth"],
        norm_eps=cfg["nano.norm_eps"],
    )


def _train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    steps = cfg["train.max_steps_per_epoch"]
    return TrainConfig(
        lr=cfg["train.lr"],
        batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"],
        seq_len=cfg["train.seq_len"],
        optimizer=cfg["train.optimizer"],
        momentum=cfg["train.momentum"],
        seed=cfg["train.seed"] if seed is None else seed,
        distill_mix=cfg["train.distill_mix"],
        max_steps_per_epoch=None if steps == 0 else steps,
    )


def _engine_config(cfg: dict, controller: str | None = None, k: int | None = None) -> EngineConfig:
    name = controller if controller is not None else cfg["engine.controller"]
    model_only = cfg["engine.cali_model_only"]
    if name == "cali_model_only":
        name, model_only = "cali", True
    return EngineConfig(
        max_len=cfg["engine.max_len"],
        controller=name,
        k=cfg["engine.k"] if k is None else k,
        alpha0=cfg["engine.alpha0"],
        beta0=cfg["engine.beta0"],
        accounting=cfg["engine.accounting"],
        sigma_m=cfg["engine.sigma_m"],
        sigma_s=cfg["engine.sigma_s"],
        theta0=cfg["engine.theta0"],
        cali_model_only=model_only,
        round_cap=cfg["engine.round_cap"],
        stop_tokens=cfg["engine.stop_tokens"],
    )


def _load_corpus(cfg: dict) -> Corpus:
    path = cfg["paths.corpus"]
    if not path:
        return Corpus.bundled()
    if not Path(path).is_file():
        raise ConfigError(f"corpus file not found: {path}")
    return Corpus.from_file(path)


def _load_bundle(cfg: dict, path_key: str = "paths.checkpoint") -> NanoModel:
    path = cfg[path_key]
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    nano_cfg, weights = nanolm.load_checkpoint(path)
    return NanoModel(nano_cfg, weights)


def _load_predictor(cfg: dict) -> PredictorWeights | None:
    path = cfg["paths.predictor"]
    if not path:
        return None
    if not Path(path).is_file():
        raise ConfigError(f"predictor checkpoint not found: {path}")
    return PredictorWeights.load(path)


def parse_schedule(spec: str, prompt_len: int) -> models.ThetaSchedule:
    """Schedule grammar: ``constant:0.8``, ``piecewise:0.9x64,0.3x64``,
    ``sin:0.6~0.25@96``.  Piecewise and sinusoid index from the first
    generated token."""
    kind, _, rest = spec.partition(":")
    try:
        if kind == "constant":
            theta = float(rest)
            if not 0.0 <= theta <= 1.0:
                raise ValueError("theta out of [0, 1]")
            return models.constant_schedule(theta)
        if kind == "piecewise":
            segments = []
            for part in rest.split(","):
                theta_s, _, len_s = part.partition("x")
                segments.append((float(theta_s), int(len_s)))
            return models.offset_schedule(models.piecewise_schedule(segments), prompt_len)
        if kind == "sin":
            mean_s, _, tail = rest.partition("~")
            amp_s, _, period_s = tail.partition("@")
            return models.offset_schedule(
                models.sinusoid_schedule(float(mean_s), float(amp_s), int(period_s)),
                prompt_len,
            )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid schedule spec {spec!r}: {exc}") from exc
    raise ConfigError(f"invalid schedule spec {spec!r}: unknown kind {kind!r}")


def _out_path(cfg: dict, name: str) -> Path:
    out_dir = Path(cfg["paths.out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / name


# --- commands -----------------------------------------------------------------


def cmd_train_target(cfg: dict) -> int:
    corpus = _load_corpus(cfg)
    train_c, held_c = corpus.split(cfg["train.holdout_frac"], cfg["train.split_seed"])
    nano_cfg = _nano_config(cfg)
    tcfg = _train_config(cfg)
    t0 = time.perf_counter()
    weights = training.train_target(train_c, nano_cfg, tcfg)
    held = training.evaluate_loss(weights, nano_cfg, held_c, tcfg.seq_len)
    nanolm.save_checkpoint(weights, nano_cfg, cfg["paths.checkpoint"])
    print(f"trained target in {time.perf_counter() - t0:.1f}s; held-out loss {held:.4f}")
    print(f"checkpoint written: {cfg['paths.checkpoint']}")
    return 0


def cmd_distill(cfg: dict) -> int:
    bundle = _load_bundle(cfg)
    nano_cfg = bundle.config
    corpus = _load_corpus(cfg)
    train_c, held_c = corpus.split(cfg["train.holdout_frac"], cfg["train.split_seed"])
    tcfg = _train_config(cfg)
    w_init = init_exit_from_target(nano_cfg, bundle.weights)
    loss_before = training.evaluate_loss(w_init, nano_cfg, held_c, tcfg.seq_len, exit_path=True)
    mixed = train_c
    n_generated = 0
    if tcfg.distill_mix > 0.0:
        prompts = [
            d[: cfg["distill.prompt_len"]] for d in train_c.documents[: cfg["distill.n_prompts"]]
        ]
        generated = training.self_distill_generate(
            nano_cfg,
            bundle.weights,
            prompts,
            gen_len=cfg["distill.gen_len"],
            seed=cfg["distill.seed"],
            greedy_frac=cfg["distill.greedy_frac"],
        )
        n_generated = len(generated.documents)
        mixed = train_c.merge(generated)
    w_trained = training.train_exit(w_init, mixed, nano_cfg, tcfg)
    loss_after = training.evaluate_loss(w_trained, nano_cfg, held_c, tcfg.seq_len, exit_path=True)
    nanolm.save_checkpoint(w_trained, nano_cfg, cfg["paths.distilled"])
    print(f"exit_loss_before={loss_before!r} exit_loss_after={loss_after!r}")
    print(f"generated_documents={n_generated}")
    print(f"distilled checkpoint written: {cfg['paths.distilled']}")
    report = _out_path(cfg, "distill_report.csv")
    with open(report, "w") as f:
        f.write("exit_loss_before,exit_loss_after,generated_documents\n")
        f.write(f"{loss_before!r},{loss_after!r},{n_generated}\n")
    return 0


def _read_prompt_lines(path) -> list[bytes]:
    if not Path(path).is_file():
        raise ConfigError(f"prompt file not found: {path}")
    return Path(path).read_bytes().splitlines()


def cmd_decode(cfg: dict, prompt_file: str, controller: str | None, k: int | None,
               check_lossless: bool) -> int:
    bundle = _load_bundle(cfg, "paths.distilled" if Path(cfg["paths.distilled"]).is_file()
                          else "paths.checkpoint")
    predictor = _load_predictor(cfg)
    ecfg = _engine_config(cfg, controller, k)
    lines = _read_prompt_lines(prompt_file)
    rows, traces = [], []
    mismatches = 0
    for idx, line in enumerate(lines):
        if not line.strip():
            print(f"warning: skipping empty prompt line {idx + 1}", file=sys.stderr)
            continue
        toks = list(line)
        max_len = min(ecfg.max_len, bundle.config.max_seq_len)
        if len(toks) >= max_len:
            print(f"warning: prompt line {idx + 1} longer than max_len; skipped", file=sys.stderr)
            continue
        prompt = TokenSequence(toks, bundle.vocab_size)
        run_cfg = dataclasses.replace(ecfg, max_len=max_len)
        trace = decode(bundle, prompt, run_cfg, Rng(cfg["engine.seed"], key=(idx,)), predictor)
        if check_lossless:
            ref = autoregressive_reference(bundle, prompt, max_len, run_cfg.stop_tokens)
            if trace.output.to_list() != ref.to_list():
                mismatches += 1
                print(f"LOSSLESS MISMATCH on prompt line {idx + 1}", file=sys.stderr)
        drafted = sum(len(r.drafted) for r in trace.rounds)
        t_draft = trace.wall.drafting / max(drafted, 1)
        target_steps = drafted + len(trace.rounds)
        t_target = trace.wall.verification / max(target_steps, 1)
        rows.append(
            report_from_trace(
                trace,
                run_id=f"decode-{idx}",
                controller=run_cfg.controller,
                k=run_cfg.k,
                seed=cfg["engine.seed"],
                t_draft=max(t_draft, 1e-12),
                t_target=max(t_target, 1e-12),
            )
        )
        traces.append(trace)
    csv_path = _out_path(cfg, "decode_report.csv")
    with open(csv_path, "w") as f:
        f.write("# volatile columns: alpha,measured_s,model_s,speedup_measured,speedup_model,"
                "draft_s,verify_s,sample_s,other_s\n")
        f.write(CSV_HEADER + "\n")
        for row in rows:
            f.write(row.csv_row() + "\n")
    jsonl_path = _out_path(cfg, "traces.jsonl")
    with open(jsonl_path, "w") as f:
        for trace in traces:
            f.write(trace_to_json(trace) + "\n")
    for row in rows:
        print(
            f"{row.run_id}: v_d={row.v_d:.3f} r_d={row.r_d:.3f} hm={row.hm:.2f} "
            f"measured={row.measured_s:.4f}s"
        )
    print(f"wrote {csv_path} and {jsonl_path}")
    if check_lossless:
        if mismatches:
            print(f"{mismatches} lossless mismatches", file=sys.stderr)
            return 1
        print("lossless check passed on all prompts")
    return 0


def cmd_simulate(cfg: dict) -> int:
    prompt_len = cfg["simulate.prompt_len"]
    schedule = parse_schedule(cfg["simulate.schedule"], prompt_len)
    vocab = cfg["simulate.vocab_size"]
    t_draft, t_target = cfg["simulate.t_draft"], cfg["simulate.t_target"]
    overhead = cfg["simulate.overhead"]
    cells: list[tuple[str, int]] = []
    for name in cfg["simulate.controllers"]:
        if name == "fixed":
            cells.extend(("fixed", k) for k in cfg["simulate.k_grid"])
        else:
            cells.append((name, 0))
    rows = []
    task = 0
    for controller, k in cells:
        for seed in range(cfg["simulate.seeds"]):
            for rep in range(cfg["simulate.reps"]):
                pair_seed = 7919 * seed + rep
                bundle = models.SyntheticBundle(schedule, vocab, seed=pair_seed)
                rng = Rng(cfg["engine.seed"], key=(seed, rep, task))
                prompt = models.make_prompt(prompt_len, vocab, Rng(pair_seed, key=(5,)))
                ecfg = _engine_config(cfg, controller, k if k else None)
                ecfg = dataclasses.replace(ecfg, max_len=cfg["simulate.max_len"])
                trace = decode(bundle, prompt, ecfg, rng)
                sim_s = simulate_clock(trace, t_draft, t_target, overhead)
                rows.append(
                    report_from_trace(
                        trace,
                        run_id=f"sim-{controller}{k or ''}-s{seed}-r{rep}",
                        controller=controller,
                        k=k,
                        seed=seed,
                        t_draft=t_draft,
                        t_target=t_target,
                        measured_s=sim_s,
                        breakdown=synthetic_phases(trace, t_draft, t_target, overhead),
                    )
                )
                task += 1
    csv_path = _out_path(cfg, "simulate.csv")
    with open(csv_path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for row in rows:
            f.write(row.csv_row() + "\n")
    by_cell: dict[tuple[str, int], list[float]] = {}
    for row in rows:
        by_cell.setdefault((row.controller, row.k), []).append(row.measured_s)
    for (controller, k), times in by_cell.items():
        label = f"{controller}(k={k})" if controller == "fixed" else controller
        print(f"{label}: mean simulated time {np.mean(times):.3f}s over {len(times)} runs")
    print(f"wrote {csv_path}")
    return 0


def cmd_bench(cfg: dict) -> int:
    bundle = _load_bundle(cfg, "paths.distilled" if Path(cfg["paths.distilled"]).is_file()
                          else "paths.checkpoint")
    if cfg["bench.untrained_exit"]:
        bundle = NanoModel(bundle.config, init_exit_from_target(bundle.config, bundle.weights))
    predictor = _load_predictor(cfg)
    corpus = _load_corpus(cfg)
    _, held_c = corpus.split(cfg["train.holdout_frac"], cfg["train.split_seed"])
    plen, glen = cfg["bench.prompt_len"], cfg["bench.gen_len"]
    prompts = [
        TokenSequence(list(d[:plen]), bundle.vocab_size)
        for d in held_c.documents
        if len(d) >= plen
    ][: cfg["bench.n_prompts"]]
    if not prompts:
        raise ConfigError("no bench prompts available at this prompt_len")
    cells: list[tuple[str, int]] = []
    for name in cfg["bench.controllers"]:
        if name == "fixed":
            cells.extend(("fixed", k) for k in cfg["bench.k_grid"])
        else:
            cells.append((name, 0))
    rows = []
    max_len_cap = bundle.config.max_seq_len
    for controller, k in cells:
        for seed in range(cfg["bench.seeds"]):
            for p_idx, prompt in enumerate(prompts):
                ecfg = _engine_config(cfg, controller, k if k else None)
                max_len = min(len(prompt) + glen, max_len_cap)
                ecfg = dataclasses.replace(ecfg, max_len=max_len)
                trace = decode(
                    bundle, prompt, ecfg, Rng(seed, key=(p_idx, len(rows))), predictor
                )
                drafted = sum(len(r.drafted) for r in trace.rounds)
                t_draft = trace.wall.drafting / max(drafted, 1)
                t_target = trace.wall.verification / max(drafted + len(trace.rounds), 1)
                rows.append(
                    report_from_trace(
                        trace,
                        run_id=f"bench-{controller}{k or ''}-s{seed}-p{p_idx}",
                        controller=controller,
                        k=k,
                        seed=seed,
                        t_draft=max(t_draft, 1e-12),
                        t_target=max(t_target, 1e-12),
                    )
                )
    csv_path = _out_path(cfg, "bench.csv")
    with open(csv_path, "w") as f:
        f.write("# volatile columns: alpha,measured_s,model_s,speedup_measured,speedup_model,"
                "draft_s,verify_s,sample_s,other_s\n")
        f.write(CSV_HEADER + "\n")
        for row in rows:
            f.write(row.csv_row() + "\n")
    print(f"{'cell':<24}{'v_d':>8}{'r_d':>8}{'hm':>8}{'draft_s':>10}{'verify_s':>10}"
          f"{'sample_s':>10}{'other_s':>10}")
    by_cell: dict[tuple[str, int], list] = {}
    for row in rows:
        by_cell.setdefault((row.controller, row.k), []).append(row)
    for (controller, k), cell_rows in by_cell.items():
        label = f"{controller}(k={k})" if controller == "fixed" else controller
        mean = lambda f: float(np.mean([f(r) for r in cell_rows]))
        print(
            f"{label:<24}{mean(lambda r: r.v_d):>8.3f}{mean(lambda r: r.r_d):>8.3f}"
            f"{mean(lambda r: r.hm):>8.2f}{mean(lambda r: r.breakdown.drafting):>10.4f}"
            f"{mean(lambda r: r.breakdown.verification):>10.4f}"
            f"{mean(lambda r: r.breakdown.sampling):>10.4f}"
            f"{mean(lambda r: r.breakdown.other):>10.4f}"
        )
    print(f"wrote {csv_path}")
    return 0


def cmd_train_predictor(cfg: dict) -> int:
    bundle = _load_bundle(cfg, "paths.distilled" if Path(cfg["paths.distilled"]).is_file()
                          else "paths.checkpoint")
    corpus = _load_corpus(cfg)
    train_c, _ = corpus.split(cfg["train.holdout_frac"], cfg["train.split_seed"])
    plen = cfg["predictor.prompt_len"]
    prompts = [
        TokenSequence(list(d[:plen]), bundle.vocab_size)
        for d in train_c.documents
        if len(d) >= plen + 8
    ][: cfg["predictor.n_prompts"]]
    max_len = min(plen + cfg["predictor.gen_len"], bundle.config.max_seq_len)
    labels = training.make_predictor_labels(
        bundle, prompts, max_len=max_len, draft_k=cfg["predictor.draft_k"]
    )
    pcfg = PredictorTrainConfig(
        lr=cfg["predictor.lr"], epochs=cfg["predictor.epochs"], seed=cfg["predictor.seed"]
    )
    pred = training.train_predictor(labels, pcfg)
    out = cfg["paths.predictor"] or str(_out_path(cfg, "predictor.nlm1"))
    pred.save(out)
    scores = training.predictor_scores_batch(pred, labels)
    print(f"labels={len(labels)} positive_rate={labels.label.mean():.3f} "
          f"train_auc={training.auc_score(labels.label, scores):.3f}")
    print(f"predictor written: {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="specexit",
        description="speculative decoding with an early-exit draft path",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train-target": cmd_train_target,
        "distill": cmd_distill,
        "train-predictor": cmd_train_predictor,
        "decode": cmd_decode,
        "simulate": cmd_simulate,
        "bench": cmd_bench,
    }
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key")
        p.add_argument("--dump-config", default=None, metavar="PATH",
                       help="write the resolved config, then run")
        if name == "decode":
            p.add_argument("prompt_file", help="one byte-string prompt per line")
            p.add_argument("--controller", choices=("fixed", "beta", "cali"), default=None)
            p.add_argument("--k", type=int, default=None)
            p.add_argument("--check-lossless", action="store_true")
    args = parser.parse_args(argv)
    try:
        config_path = args.config or os.environ.get(CONFIG_ENV_VAR)
        file_values = parse_config_file(config_path) if config_path else {}
        cfg = resolve_config(file_values, args.set)
        if args.dump_config:
            Path(args.dump_config).write_text(dump_config(cfg), encoding="utf-8")
        if args.command == "decode":
            return cmd_decode(cfg, args.prompt_file, args.controller, args.k,
                              args.check_lossless)
        return commands[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
