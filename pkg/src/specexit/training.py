"""Desk-scale training.

Three stages: (a) the nano target model on a byte corpus, (b) the exit
block, trained on a mix of corpus text and text the target generated about
itself, with everything except the exit tensors frozen, and (c) the
agreement predictor used by the calibrated controller.

All stages are seeded and deterministic: fixed window order, fixed batch
composition, fixed accumulation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import nanolm
from .controllers import MAX_POSITION_MATRICES, PredictorWeights, predictor_score
from .core import Rng, TokenSequence
from .engine import _argmax
from .nanolm import NanoConfig, NanoModel, NanoWeights, teacher_forcing_loss

GENERATED_TAG = "generated"
TEXT_TAG = "text"


@dataclass
class Corpus:
    """Byte documents with a source tag per document."""

    documents: list[bytes]
    tags: list[str]

    def __post_init__(self):
        if not self.documents:
            raise ValueError("corpus must contain at least one document")
        if len(self.tags) != len(self.documents):
            raise ValueError("one tag per document required")

    @classmethod
    def from_documents(cls, documents: list[bytes], tag: str = TEXT_TAG) -> "Corpus":
        return cls(documents=list(documents), tags=[tag] * len(documents))

    @classmethod
    def from_text(cls, text: str) -> "Corpus":
        docs = [d.strip().encode("utf-8") for d in text.split("\n\n")]
        return cls.from_documents([d for d in docs if d])

    @classmethod
    def from_file(cls, path) -> "Corpus":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_text(f.read())

    @classmethod
    def bundled(cls) -> "Corpus":
        text = resources.files("specexit.data").joinpath("corpus.txt").read_text("utf-8")
        return cls.from_text(text)

    def merge(self, other: "Corpus") -> "Corpus":
        return Corpus(self.documents + other.documents, self.tags + other.tags)

    def split(self, holdout_frac: float, seed: int) -> tuple["Corpus", "Corpus"]:
        """Deterministic document-level split; held-out docs are disjoint."""
        if not 0.0 < holdout_frac < 1.0:
            raise ValueError("holdout_frac must lie strictly between 0 and 1")
        order = Rng(seed, key=(101,)).permutation(len(self.documents))
        n_hold = max(1, int(round(holdout_frac * len(self.documents))))
        if n_hold >= len(self.documents):
            raise ValueError("holdout would consume the whole corpus")
        hold_idx = set(int(i) for i in order[:n_hold])
        train = [i for i in range(len(self.documents)) if i not in hold_idx]
        hold = [i for i in range(len(self.documents)) if i in hold_idx]
        pick = lambda idxs: Corpus(
            [self.documents[i] for i in idxs], [self.tags[i] for i in idxs]
        )
        return pick(train), pick(hold)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 4
    seq_len: int = 128
    optimizer: str = "momentum"
    momentum: float = 0.9
    seed: int = 0
    distill_mix: float = 0.5
    max_steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.seq_len < 2:
            raise ValueError("lr, batch_size, epochs, seq_len must be positive")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValueError("optimizer must be 'sgd' or 'momentum'")
        if not 0.0 <= self.distill_mix <= 1.0:
            raise ValueError("distill_mix must lie in [0, 1]")


def _doc_windows(doc: bytes, seq_len: int) -> list[np.ndarray]:
    """Non-overlapping (seq_len + 1)-byte windows; stride equals seq_len so
    consecutive windows share the boundary byte as target/input."""
    arr = np.frombuffer(doc, dtype=np.uint8).astype(np.int64)
    out = []
    for start in range(0, len(arr) - seq_len, seq_len):
        out.append(arr[start : start + seq_len + 1])
    if not out and len(arr) >= 2:
        pad = np.zeros(seq_len + 1, dtype=np.int64)
        pad[: len(arr)] = arr
        pad[len(arr) :] = arr[-1]
        out.append(pad)
    return out


def corpus_windows(corpus: Corpus, seq_len: int) -> np.ndarray:
    windows: list[np.ndarray] = []
    for doc in corpus.documents:
        windows.extend(_doc_windows(doc, seq_len))
    if not windows:
        raise ValueError("corpus yields no training windows at this seq_len")
    return np.stack(windows, axis=0)


def _sgd_step(weights: dict, grads: dict, velocity: dict, cfg: TrainConfig) -> None:
    for name, g in grads.items():
        if cfg.optimizer == "momentum":
            velocity[name] = cfg.momentum * velocity.get(name, 0.0) + g
            update = velocity[name]
        else:
            update = g
        weights[name] -= (cfg.lr * update).astype(np.float32)


def evaluate_loss(
    weights: NanoWeights,
    nano_cfg: NanoConfig,
    corpus: Corpus,
    seq_len: int,
    exit_path: bool = False,
    batch_size: int = 32,
) -> float:
    """Mean next-byte cross entropy over all corpus windows."""
    windows = corpus_windows(corpus, seq_len)
    total, count = 0.0, 0
    for start in range(0, len(windows), batch_size):
        batch = windows[start : start + batch_size]
        loss = teacher_forcing_loss(
            weights, nano_cfg, batch[:, :-1], batch[:, 1:], exit_path=exit_path
        )
        total += loss * len(batch)
        count += len(batch)
    return total / count


def _run_epochs(
    weights: NanoWeights,
    nano_cfg: NanoConfig,
    windows: np.ndarray,
    cfg: TrainConfig,
    *,
    exit_path: bool,
    rng: Rng,
) -> None:
    velocity: dict[str, np.ndarray] = {}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(windows))
        steps = range(0, len(windows), cfg.batch_size)
        if cfg.max_steps_per_epoch is not None:
            steps = list(steps)[: cfg.max_steps_per_epoch]
        for start in steps:
            batch = windows[order[start : start + cfg.batch_size]]
            try:
                _, grads = teacher_forcing_loss(
                    weights,
                    nano_cfg,
                    batch[:, :-1],
                    batch[:, 1:],
                    exit_path=exit_path,
                    with_grads=True,
                )
            except FloatingPointError as exc:
                raise RuntimeError(
                    f"training diverged at epoch {epoch} step {start // cfg.batch_size}: {exc}"
                ) from exc
            _sgd_step(weights.tensors, grads, velocity, cfg)


def train_target(corpus: Corpus, nano_cfg: NanoConfig, cfg: TrainConfig) -> NanoWeights:
    """Train the full target stack (exit block included, so the later copy
    init starts from trained tail layers)."""
    rng = Rng(cfg.seed)
    weights = nanolm.init_weights(nano_cfg, rng.child(1))
    windows = corpus_windows(corpus, cfg.seq_len)
    _run_epochs(weights, nano_cfg, windows, cfg, exit_path=False, rng=rng.child(2))
    return weights.validate(nano_cfg)


def self_distill_generate(
    nano_cfg: NanoConfig,
    weights: NanoWeights,
    prompts: list[bytes],
    gen_len: int,
    seed: int,
    greedy_frac: float = 0.5,
) -> Corpus:
    """Continuations written by the target model itself: the first part of
    each continuation is greedy, the remainder temperature-1 sampled."""
    if not prompts:
        raise ValueError("need at least one prompt")
    if not 0.0 <= greedy_frac <= 1.0:
        raise ValueError("greedy_frac must lie in [0, 1]")
    model = NanoModel(nano_cfg, weights)
    docs = []
    n_greedy = int(round(gen_len * greedy_frac))
    for p_idx, prompt in enumerate(prompts):
        rng = Rng(seed, key=(7, p_idx))
        session = model.new_session()
        toks = list(prompt)
        room = nano_cfg.max_seq_len - 1
        toks = toks[: max(1, room - gen_len)]
        step = None
        for tok in toks:
            step = session.target_step(tok)
        out = list(toks)
        for i in range(gen_len):
            if i < n_greedy:
                nxt = _argmax(step.logits)
            else:
                probs = np.exp(step.logits - np.max(step.logits))
                probs = probs / probs.sum()
                nxt = int(np.searchsorted(np.cumsum(probs), rng.random()))
                nxt = min(nxt, nano_cfg.vocab_size - 1)
            out.append(nxt)
            if len(out) >= nano_cfg.max_seq_len:
                break
            step = session.target_step(nxt)
        docs.append(bytes(out))
    return Corpus.from_documents(docs, tag=GENERATED_TAG)


def mixed_windows(
    mixed_corpus: Corpus, seq_len: int, lam: float, rng: Rng
) -> tuple[np.ndarray, int, int]:
    """Epoch window pool with exactly round(lam * n_total) self-generated
    windows; returns (windows, n_generated, n_total)."""
    real_docs = [d for d, t in zip(mixed_corpus.documents, mixed_corpus.tags) if t != GENERATED_TAG]
    gen_docs = [d for d, t in zip(mixed_corpus.documents, mixed_corpus.tags) if t == GENERATED_TAG]
    if lam > 0.0 and not gen_docs:
        raise ValueError("distill_mix > 0 but the mixed corpus has no generated documents")
    if lam < 1.0 and not real_docs:
        raise ValueError("distill_mix < 1 but the mixed corpus has no text documents")
    real_w = (
        corpus_windows(Corpus.from_documents(real_docs), seq_len) if real_docs else None
    )
    gen_w = (
        corpus_windows(Corpus.from_documents(gen_docs, GENERATED_TAG), seq_len)
        if gen_docs
        else None
    )
    pools = [w for w in (real_w, gen_w) if w is not None]
    n_total = max(len(w) for w in pools)
    n_gen = int(round(lam * n_total))
    parts = []
    if n_gen > 0:
        idx = rng.child(11).integers(0, len(gen_w), size=n_gen)
        parts.append(gen_w[np.asarray(idx)])
    if n_total - n_gen > 0:
        idx = rng.child(12).integers(0, len(real_w), size=n_total - n_gen)
        parts.append(real_w[np.asarray(idx)])
    return np.concatenate(parts, axis=0), n_gen, n_total


def train_exit(
    weights: NanoWeights,
    mixed_corpus: Corpus,
    nano_cfg: NanoConfig,
    cfg: TrainConfig,
) -> NanoWeights:
    """Train only the exit tensors on a mix of real and self-generated
    windows; the realized generated fraction per epoch equals distill_mix up
    to rounding.  Every non-exit tensor is returned bit-identical."""
    out = weights.copy()
    rng = Rng(cfg.seed, key=(3,))
    windows, _, _ = mixed_windows(mixed_corpus, cfg.seq_len, cfg.distill_mix, rng)
    _run_epochs(out, nano_cfg, windows, cfg, exit_path=True, rng=rng.child(13))
    return out.validate(nano_cfg)


@dataclass
class LabelSet:
    """Predictor training examples captured exactly as the calibrated
    controller consumes them at decode time."""

    target_hidden: np.ndarray  # (n, d)
    draft_hidden: np.ndarray  # (n, d)
    position: np.ndarray  # (n,) draft index within the round, 1-based
    label: np.ndarray  # (n,) 1 where draft argmax matched the target

    def __len__(self):
        return len(self.label)

    def subset(self, idx) -> "LabelSet":
        return LabelSet(
            self.target_hidden[idx],
            self.draft_hidden[idx],
            self.position[idx],
            self.label[idx],
        )

    def save(self, path) -> None:
        nanolm.write_container(
            path,
            {"kind": "labels", "count": int(len(self.label))},
            {
                "target_hidden": self.target_hidden.astype(np.float32),
                "draft_hidden": self.draft_hidden.astype(np.float32),
                "position": self.position.astype(np.float32),
                "label": self.label.astype(np.float32),
            },
        )

    @classmethod
    def load(cls, path) -> "LabelSet":
        config, tensors = nanolm.read_container(path)
        if config.get("kind") != "labels":
            raise nanolm.CheckpointError("not a label-set checkpoint")
        return cls(
            target_hidden=tensors["target_hidden"],
            draft_hidden=tensors["draft_hidden"],
            position=tensors["position"].astype(np.int64),
            label=tensors["label"].astype(np.int64),
        )


def make_predictor_labels(
    bundle,
    prompts: list[TokenSequence],
    max_len: int,
    draft_k: int = 6,
) -> LabelSet:
    """Roll the drafting loop with a fixed draft length and record, for every
    drafted position, the features the calibrated controller would see plus
    whether the draft token matched the target's greedy choice there."""
    feats_t, feats_d, pos, labels = [], [], [], []
    for prompt in prompts:
        session = bundle.new_session()
        step = None
        for tok in prompt:
            step = session.target_step(tok)
        pre_argmax = _argmax(step.logits)
        target_hidden = step.hidden
        out = prompt.to_list()
        while len(out) < max_len:
            for p in range(session.draft_position, len(out)):
                draft_out = session.draft_step(out[p])
            drafted, hiddens = [], []
            while len(drafted) < draft_k and len(out) + len(drafted) < max_len:
                drafted.append(_argmax(draft_out.logits))
                hiddens.append(draft_out.hidden)
                if len(out) + len(drafted) >= max_len or len(drafted) >= draft_k:
                    break
                draft_out = session.draft_step(drafted[-1])
            prefix_pos = session.target_position
            outs = session.target_step_batch(drafted)
            greedy = [pre_argmax] + [_argmax(o.logits) for o in outs]
            for j, tok in enumerate(drafted):
                feats_t.append(np.asarray(target_hidden, dtype=np.float32))
                feats_d.append(np.asarray(hiddens[j], dtype=np.float32))
                pos.append(j + 1)
                labels.append(1 if tok == greedy[j] else 0)
            accepted = 0
            while accepted < len(drafted) and drafted[accepted] == greedy[accepted]:
                accepted += 1
            bonus = greedy[accepted]
            session.rollback(prefix_pos + accepted)
            out.extend(drafted[:accepted])
            out.append(bonus)
            if len(out) >= max_len:
                break
            last = session.target_step(bonus)
            pre_argmax = _argmax(last.logits)
            target_hidden = last.hidden
    return LabelSet(
        target_hidden=np.stack(feats_t),
        draft_hidden=np.stack(feats_d),
        position=np.asarray(pos, dtype=np.int64),
        label=np.asarray(labels, dtype=np.int64),
    )


def predictor_scores_batch(pred: PredictorWeights, labels: LabelSet) -> np.ndarray:
    idx = np.minimum(labels.position, MAX_POSITION_MATRICES) - 1
    transformed = np.einsum("nij,nj->ni", pred.position[idx], labels.target_hidden)
    feats = np.concatenate([transformed, labels.draft_hidden], axis=1)
    logits = feats @ pred.mixing.T
    return logits[:, 1] - logits[:, 0]


@dataclass(frozen=True)
class PredictorTrainConfig:
    lr: float = 0.05
    batch_size: int = 128
    epochs: int = 8
    momentum: float = 0.9
    seed: int = 0


def train_predictor(labels: LabelSet, cfg: PredictorTrainConfig) -> PredictorWeights:
    """Cross-entropy training of the agreement predictor; requires both
    classes to be present."""
    classes = np.unique(labels.label)
    if len(classes) < 2:
        raise ValueError("label set is single-class; predictor cannot be trained")
    d = labels.target_hidden.shape[1]
    rng = Rng(cfg.seed, key=(21,))
    pred = PredictorWeights.init_random(d, rng.child(1))
    vel_pos = np.zeros_like(pred.position)
    vel_mix = np.zeros_like(pred.mixing)
    n = len(labels)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            batch = labels.subset(sel)
            idx = np.minimum(batch.position, MAX_POSITION_MATRICES) - 1
            transformed = np.einsum("nij,nj->ni", pred.position[idx], batch.target_hidden)
            feats = np.concatenate([transformed, batch.draft_hidden], axis=1)
            logits = feats @ pred.mixing.T
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            onehot = np.zeros_like(probs)
            onehot[np.arange(len(sel)), batch.label] = 1.0
            dlogits = (probs - onehot) / len(sel)
            dmix = dlogits.T @ feats
            dfeats = dlogits @ pred.mixing
            dtrans = dfeats[:, :d]
            dpos = np.zeros_like(pred.position)
            for i in range(MAX_POSITION_MATRICES):
                mask = idx == i
                if np.any(mask):
                    dpos[i] = dtrans[mask].T @ batch.target_hidden[mask]
            vel_pos = cfg.momentum * vel_pos + dpos
            vel_mix = cfg.momentum * vel_mix + dmix
            pred.position -= (cfg.lr * vel_pos).astype(np.float32)
            pred.mixing -= (cfg.lr * vel_mix).astype(np.float32)
    return pred


def auc_score(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based AUC with average ranks on ties."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
