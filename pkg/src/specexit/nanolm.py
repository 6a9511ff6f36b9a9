"""Miniature decoder-only transformer with an early-exit draft path.

One weight bundle serves two models: the full-depth target, and a draft
model that reads the trunk's layer-N hidden state through a small stack of
exit layers with their own norm and output head.  A decode session shares
the first-N layers' KV cache between both paths, so each trunk layer runs
exactly once per position no matter which path consumes it first.

Architecture: pre-norm blocks with RMS norm everywhere, rotary position
embeddings (half-split convention), SwiGLU feed-forward, untied output
heads.  All arithmetic is float32; reductions use numpy/BLAS in fixed call
order, so repeated runs on one platform are bitwise reproducible.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .core import Rng, TokenId
from .models import StepOutput

CHECKPOINT_MAGIC = b"NLM1"
CHECKPOINT_VERSION = 1
_ALIGN = 64


class CheckpointError(Exception):
    """Raised for unreadable, truncated, or inconsistent checkpoint files."""


@dataclass(frozen=True)
class NanoConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 8
    d_ff: int = 512
    max_seq_len: int = 512
    exit_after: int = 2
    exit_depth: int = 1
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary embeddings")
        if not 1 <= self.exit_after < self.n_layers:
            raise ValueError("exit_after must satisfy 1 <= N < n_layers")
        if self.exit_depth < 1:
            raise ValueError("exit_depth must be >= 1")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _layer_shapes(cfg: NanoConfig, prefix: str) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    return {
        f"{prefix}.attn_norm": (d,),
        f"{prefix}.wq": (d, d),
        f"{prefix}.wk": (d, d),
        f"{prefix}.wv": (d, d),
        f"{prefix}.wo": (d, d),
        f"{prefix}.ffn_norm": (d,),
        f"{prefix}.w1": (d, f),
        f"{prefix}.w3": (d, f),
        f"{prefix}.w2": (f, d),
    }


def expected_shapes(cfg: NanoConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, cfg.d_model)}
    for i in range(cfg.n_layers):
        shapes.update(_layer_shapes(cfg, f"layers.{i}"))
    shapes["final_norm"] = (cfg.d_model,)
    shapes["head"] = (cfg.d_model, cfg.vocab_size)
    for j in range(cfg.exit_depth):
        shapes.update(_layer_shapes(cfg, f"exit.layers.{j}"))
    shapes["exit.norm"] = (cfg.d_model,)
    shapes["exit.head"] = (cfg.d_model, cfg.vocab_size)
    return shapes


EXIT_PREFIX = "exit."


def is_exit_tensor(name: str) -> bool:
    return name.startswith(EXIT_PREFIX)


@dataclass
class NanoWeights:
    """Named float32 tensors for the full bundle (target plus exit block)."""

    tensors: dict[str, np.ndarray]

    def validate(self, cfg: NanoConfig) -> "NanoWeights":
        shapes = expected_shapes(cfg)
        missing = sorted(set(shapes) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(shapes))
        if missing or extra:
            raise ValueError(f"tensor set mismatch: missing={missing} extra={extra}")
        for name, arr in self.tensors.items():
            if tuple(arr.shape) != shapes[name]:
                raise ValueError(
                    f"tensor {name!r} has shape {tuple(arr.shape)}, expected {shapes[name]}"
                )
            if arr.dtype != np.float32:
                raise ValueError(f"tensor {name!r} must be float32")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"tensor {name!r} contains non-finite values")
        return self

    def copy(self) -> "NanoWeights":
        return NanoWeights({k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def init_weights(cfg: NanoConfig, rng: Rng, scale: float = 0.02) -> NanoWeights:
    """Random init: small normal matrices, unit norm gains.  Logits start
    near uniform so initial cross-entropy sits at ln(vocab_size)."""
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return NanoWeights(tensors).validate(cfg)


def init_exit_from_target(cfg: NanoConfig, weights: NanoWeights) -> NanoWeights:
    """Seed the exit block from the target's tail: exit layer j copies target
    layer (n_layers - exit_depth + j); exit norm and head copy the target's."""
    if cfg.exit_depth > cfg.n_layers:
        raise ValueError("exit_depth exceeds n_layers")
    out = weights.copy()
    for j in range(cfg.exit_depth):
        src = cfg.n_layers - cfg.exit_depth + j
        for field in ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2", "w3"):
            out.tensors[f"exit.layers.{j}.{field}"] = weights[f"layers.{src}.{field}"].copy()
    out.tensors["exit.norm"] = weights["final_norm"].copy()
    out.tensors["exit.head"] = weights["head"].copy()
    return out.validate(cfg)


# --- math helpers -----------------------------------------------------------


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.asarray(eps, dtype=x.dtype)) * gain


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


@lru_cache(maxsize=8)
def _rope_tables(max_seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    angles = np.outer(np.arange(max_seq_len, dtype=np.float64), inv_freq)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _rope_rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate the half-split pairs; x is (..., head_dim), cos/sin (..., half)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _rope_rotate_inv(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos + x2 * sin, -x1 * sin + x2 * cos], axis=-1)


# --- incremental decoding session -------------------------------------------


class NanoSession:
    """Per-prompt KV caches for trunk, target tail, and exit layers.

    Three fill counters track how far each path has consumed the token
    stream; the trunk counter always leads or equals the other two.  The
    trunk's layer-N hidden state is retained per position so whichever path
    arrives second never recomputes the shared layers.
    """

    def __init__(self, model: "NanoModel"):
        cfg = model.config
        self.model = model
        self.cfg = cfg
        n_kv_layers = cfg.n_layers + cfg.exit_depth
        self._k = np.zeros(
            (n_kv_layers, cfg.max_seq_len, cfg.n_heads, cfg.head_dim), dtype=np.float32
        )
        self._v = np.zeros_like(self._k)
        self._hidden_n = np.zeros((cfg.max_seq_len, cfg.d_model), dtype=np.float32)
        self._tokens: list[int] = []
        self.shared_len = 0
        self.tail_len = 0
        self.exit_len = 0
        # per-layer execution counts; exit layers indexed after target layers
        self.layer_calls = np.zeros(n_kv_layers, dtype=np.int64)

    @property
    def target_position(self) -> int:
        return self.tail_len

    @property
    def draft_position(self) -> int:
        return self.exit_len

    def consumed_tokens(self) -> list[int]:
        return list(self._tokens)

    def _layer_step(self, kv_index: int, prefix: str, pos: int, x: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        w = self.model.weights
        cos, sin = self.model.rope
        xn = rmsnorm(x, w[f"{prefix}.attn_norm"], cfg.norm_eps)
        q = (xn @ w[f"{prefix}.wq"]).reshape(cfg.n_heads, cfg.head_dim)
        k = (xn @ w[f"{prefix}.wk"]).reshape(cfg.n_heads, cfg.head_dim)
        v = (xn @ w[f"{prefix}.wv"]).reshape(cfg.n_heads, cfg.head_dim)
        q = _rope_rotate(q, cos[pos], sin[pos])
        k = _rope_rotate(k, cos[pos], sin[pos])
        self._k[kv_index, pos] = k
        self._v[kv_index, pos] = v
        keys = self._k[kv_index, : pos + 1]
        vals = self._v[kv_index, : pos + 1]
        scores = np.einsum("the,he->ht", keys, q) / np.float32(np.sqrt(cfg.head_dim))
        attn = softmax_last(scores)
        ctx = np.einsum("ht,the->he", attn, vals).reshape(cfg.d_model)
        x = x + ctx @ w[f"{prefix}.wo"]
        xn2 = rmsnorm(x, w[f"{prefix}.ffn_norm"], cfg.norm_eps)
        gate = _silu(xn2 @ w[f"{prefix}.w1"]) * (xn2 @ w[f"{prefix}.w3"])
        x = x + gate @ w[f"{prefix}.w2"]
        self.layer_calls[kv_index] += 1
        return x

    def _advance_trunk(self, token: int, pos: int) -> None:
        cfg = self.cfg
        if pos >= cfg.max_seq_len:
            raise ValueError(f"sequence overflow at position {pos} (max {cfg.max_seq_len})")
        if not 0 <= int(token) < cfg.vocab_size:
            raise ValueError(f"invalid token {token}")
        x = self.model.weights["embed"][int(token)].copy()
        for layer in range(cfg.exit_after):
            x = self._layer_step(layer, f"layers.{layer}", pos, x)
        self._hidden_n[pos] = x
        self._tokens.append(int(token))
        self.shared_len = pos + 1

    def _enter(self, token: int, pos: int) -> None:
        if pos == self.shared_len:
            self._advance_trunk(token, pos)
        elif pos < self.shared_len:
            if self._tokens[pos] != int(token):
                raise ValueError(
                    f"token mismatch at cached position {pos}: "
                    f"got {token}, cache holds {self._tokens[pos]}"
                )
        else:
            raise ValueError(f"position gap: trunk at {self.shared_len}, step at {pos}")

    def target_step(self, token: TokenId) -> StepOutput:
        cfg = self.cfg
        pos = self.tail_len
        self._enter(token, pos)
        x = self._hidden_n[pos].copy()
        for layer in range(cfg.exit_after, cfg.n_layers):
            x = self._layer_step(layer, f"layers.{layer}", pos, x)
        h = rmsnorm(x, self.model.weights["final_norm"], cfg.norm_eps)
        logits = h @ self.model.weights["head"]
        self.tail_len = pos + 1
        return StepOutput(logits=logits, hidden=h)

    def draft_step(self, token: TokenId) -> StepOutput:
        cfg = self.cfg
        pos = self.exit_len
        self._enter(token, pos)
        x = self._hidden_n[pos].copy()
        for j in range(cfg.exit_depth):
            x = self._layer_step(cfg.n_layers + j, f"exit.layers.{j}", pos, x)
        h = rmsnorm(x, self.model.weights["exit.norm"], cfg.norm_eps)
        logits = h @ self.model.weights["exit.head"]
        self.exit_len = pos + 1
        return StepOutput(logits=logits, hidden=h)

    def target_step_batch(self, tokens: Sequence[TokenId]) -> list[StepOutput]:
        if len(tokens) == 0:
            raise ValueError("step_batch requires at least one token")
        return [self.target_step(tok) for tok in tokens]

    def draft_step_batch(self, tokens: Sequence[TokenId]) -> list[StepOutput]:
        if len(tokens) == 0:
            raise ValueError("step_batch requires at least one token")
        return [self.draft_step(tok) for tok in tokens]

    def rollback(self, position: int) -> None:
        if position < 0:
            raise ValueError("rollback position must be >= 0")
        if position > max(self.shared_len, self.tail_len, self.exit_len):
            raise ValueError(
                f"cannot roll forward: position {position} beyond consumed prefix"
            )
        self.shared_len = min(self.shared_len, position)
        self.tail_len = min(self.tail_len, position)
        self.exit_len = min(self.exit_len, position)
        del self._tokens[self.shared_len :]


class NanoModel:
    """Weight bundle plus config; opens decode sessions (DecodingBundle)."""

    def __init__(self, config: NanoConfig, weights: NanoWeights):
        weights.validate(config)
        self.config = config
        self.weights = weights
        self.vocab_size = config.vocab_size
        self.d_model = config.d_model
        self.rope = _rope_tables(config.max_seq_len, config.head_dim)

    def new_session(self) -> NanoSession:
        return NanoSession(self)


# --- NLM1 checkpoint container ----------------------------------------------


def write_container(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write the NLM1 container: magic, u32 version, length-prefixed JSON
    header (config + ordered tensor directory), then raw little-endian f32
    data, 64-byte aligned."""
    directory = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr32.tobytes())
        offset += len(blobs[-1])
        offset = (offset + _ALIGN - 1) // _ALIGN * _ALIGN
    header = json.dumps({"config": config, "tensors": directory}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        data_start = (f.tell() + _ALIGN - 1) // _ALIGN * _ALIGN
        f.write(b"\x00" * (data_start - f.tell()))
        pos = 0
        for blob in blobs:
            f.write(blob)
            pos += len(blob)
            pad = (pos + _ALIGN - 1) // _ALIGN * _ALIGN - pos
            f.write(b"\x00" * pad)
            pos += pad


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    head = buf.read(8)
    if len(head) < 8:
        raise CheckpointError("corrupt checkpoint: truncated header")
    version, header_len = struct.unpack("<II", head)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    header_bytes = buf.read(header_len)
    if len(header_bytes) < header_len:
        raise CheckpointError("corrupt checkpoint: truncated header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    data_start = (12 + header_len + _ALIGN - 1) // _ALIGN * _ALIGN
    data = raw[data_start:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 4
        if offset % _ALIGN != 0:
            raise CheckpointError(f"tensor {name!r}: misaligned offset {offset}")
        if end > len(data):
            raise CheckpointError(
                f"corrupt checkpoint: tensor {name!r} extends past end of file"
            )
        flat = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[name] = flat.reshape(shape).copy()
    return header["config"], tensors


def save_checkpoint(weights: NanoWeights, config: NanoConfig, path) -> None:
    weights.validate(config)
    write_container(path, asdict(config), weights.tensors)


def load_checkpoint(path) -> tuple[NanoConfig, NanoWeights]:
    config_dict, tensors = read_container(path)
    try:
        cfg = NanoConfig(**config_dict)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from exc
    weights = NanoWeights(tensors)
    try:
        weights.validate(cfg)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return cfg, weights


# --- batched training forward/backward ---------------------------------------


def _cast_weights(weights: NanoWeights, dtype) -> dict[str, np.ndarray]:
    if dtype == np.float32:
        return weights.tensors
    return {k: v.astype(dtype) for k, v in weights.tensors.items()}


def _layer_forward_batch(x, w, prefix, cos, sin, eps, head_dim, stash=None):
    """Full-sequence causal block; stashes intermediates when grads needed."""
    B, T, d = x.shape
    H = d // head_dim
    scale = 1.0 / np.sqrt(head_dim)
    g1 = w[f"{prefix}.attn_norm"]
    ms1 = np.mean(np.square(x), axis=-1, keepdims=True) + eps
    r1 = 1.0 / np.sqrt(ms1)
    n1 = x * r1 * g1
    q = (n1 @ w[f"{prefix}.wq"]).reshape(B, T, H, head_dim)
    k = (n1 @ w[f"{prefix}.wk"]).reshape(B, T, H, head_dim)
    v = (n1 @ w[f"{prefix}.wv"]).reshape(B, T, H, head_dim)
    qh = _rope_rotate(q, cos[None, :T, None, :], sin[None, :T, None, :]).transpose(0, 2, 1, 3)
    kh = _rope_rotate(k, cos[None, :T, None, :], sin[None, :T, None, :]).transpose(0, 2, 1, 3)
    vh = v.transpose(0, 2, 1, 3)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    mask = np.tril(np.ones((T, T), dtype=bool))
    scores = np.where(mask[None, None], scores, np.asarray(-1e30, dtype=x.dtype))
    attn = softmax_last(scores)
    ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(B, T, d)
    x2 = x + ctx @ w[f"{prefix}.wo"]
    g2 = w[f"{prefix}.ffn_norm"]
    ms2 = np.mean(np.square(x2), axis=-1, keepdims=True) + eps
    r2 = 1.0 / np.sqrt(ms2)
    n2 = x2 * r2 * g2
    u = n2 @ w[f"{prefix}.w1"]
    su = _silu(u)
    gv = n2 @ w[f"{prefix}.w3"]
    f = su * gv
    out = x2 + f @ w[f"{prefix}.w2"]
    if stash is not None:
        stash[prefix] = dict(
            x=x, r1=r1, n1=n1, qh=qh, kh=kh, vh=vh, attn=attn, ctx=ctx,
            x2=x2, r2=r2, n2=n2, u=u, su=su, gv=gv, f=f,
        )
    return out


def _rmsnorm_backward(dy, x, r, gain):
    d = x.shape[-1]
    dgain = np.sum(dy * x * r, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dot = np.sum(dxhat * x, axis=-1, keepdims=True)
    dx = dxhat * r - x * (r**3) * dot / d
    return dx, dgain


def _layer_backward_batch(dout, w, prefix, cos, sin, head_dim, stash, grads):
    s = stash[prefix]
    B, T, d = dout.shape
    H = d // head_dim
    scale = 1.0 / np.sqrt(head_dim)
    # feed-forward branch
    flat = lambda a: a.reshape(-1, a.shape[-1])
    grads[f"{prefix}.w2"] += flat(s["f"]).T @ flat(dout)
    df = dout @ w[f"{prefix}.w2"].T
    dsu = df * s["gv"]
    dgv = df * s["su"]
    # silu'(u) = sigma(u) * (1 + u * (1 - sigma(u)))
    sig = 1.0 / (1.0 + np.exp(-s["u"]))
    du = dsu * sig * (1.0 + s["u"] * (1.0 - sig))
    grads[f"{prefix}.w1"] += flat(s["n2"]).T @ flat(du)
    grads[f"{prefix}.w3"] += flat(s["n2"]).T @ flat(dgv)
    dn2 = du @ w[f"{prefix}.w1"].T + dgv @ w[f"{prefix}.w3"].T
    dx2, dg2 = _rmsnorm_backward(dn2, s["x2"], s["r2"], w[f"{prefix}.ffn_norm"])
    grads[f"{prefix}.ffn_norm"] += dg2
    dx2 = dx2 + dout
    # attention branch
    grads[f"{prefix}.wo"] += flat(s["ctx"]).T @ flat(dx2)
    dctxh = (dx2 @ w[f"{prefix}.wo"].T).reshape(B, T, H, head_dim).transpose(0, 2, 1, 3)
    a = s["attn"]
    dattn = dctxh @ s["vh"].transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ dctxh
    dscores = a * (dattn - np.sum(dattn * a, axis=-1, keepdims=True))
    dqh = (dscores @ s["kh"]) * scale
    dkh = (dscores.transpose(0, 1, 3, 2) @ s["qh"]) * scale
    dqr = dqh.transpose(0, 2, 1, 3)
    dkr = dkh.transpose(0, 2, 1, 3)
    dq = _rope_rotate_inv(dqr, cos[None, :T, None, :], sin[None, :T, None, :]).reshape(B, T, d)
    dk = _rope_rotate_inv(dkr, cos[None, :T, None, :], sin[None, :T, None, :]).reshape(B, T, d)
    dvf = dvh.transpose(0, 2, 1, 3).reshape(B, T, d)
    grads[f"{prefix}.wq"] += flat(s["n1"]).T @ flat(dq)
    grads[f"{prefix}.wk"] += flat(s["n1"]).T @ flat(dk)
    grads[f"{prefix}.wv"] += flat(s["n1"]).T @ flat(dvf)
    dn1 = dq @ w[f"{prefix}.wq"].T + dk @ w[f"{prefix}.wk"].T + dvf @ w[f"{prefix}.wv"].T
    dx, dg1 = _rmsnorm_backward(dn1, s["x"], s["r1"], w[f"{prefix}.attn_norm"])
    grads[f"{prefix}.attn_norm"] += dg1
    return dx + dx2


def teacher_forcing_loss(
    weights: NanoWeights,
    cfg: NanoConfig,
    tokens: np.ndarray,
    targets: np.ndarray,
    *,
    exit_path: bool = False,
    with_grads: bool = False,
    dtype=np.float32,
):
    """Mean next-token cross entropy over a (B, T) batch.

    With ``exit_path`` the loss reads the exit head on top of the frozen
    trunk; gradients then cover only exit tensors.  Returns ``loss`` or
    ``(loss, grads)``.
    """
    w = _cast_weights(weights, dtype)
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise ValueError("sequence overflow")
    cos, sin = (t[:T].astype(dtype) for t in _rope_tables(cfg.max_seq_len, cfg.head_dim))
    eps = np.asarray(cfg.norm_eps, dtype=dtype)
    x = w["embed"][tokens]
    stash: dict | None = {} if with_grads else None
    trunk_stash = stash if (with_grads and not exit_path) else None
    for i in range(cfg.exit_after):
        x = _layer_forward_batch(x, w, f"layers.{i}", cos, sin, eps, cfg.head_dim, trunk_stash)
    if exit_path:
        for j in range(cfg.exit_depth):
            x = _layer_forward_batch(x, w, f"exit.layers.{j}", cos, sin, eps, cfg.head_dim, stash)
        norm_name, head_name = "exit.norm", "exit.head"
        layer_prefixes = [f"exit.layers.{j}" for j in range(cfg.exit_depth)]
    else:
        for i in range(cfg.exit_after, cfg.n_layers):
            x = _layer_forward_batch(x, w, f"layers.{i}", cos, sin, eps, cfg.head_dim, stash)
        norm_name, head_name = "final_norm", "head"
        layer_prefixes = [f"layers.{i}" for i in range(cfg.n_layers)]
    msf = np.mean(np.square(x), axis=-1, keepdims=True) + eps
    rf = 1.0 / np.sqrt(msf)
    nf = x * rf * w[norm_name]
    logits = nf @ w[head_name]
    flat_logits = logits.reshape(B * T, cfg.vocab_size)
    flat_targets = targets.reshape(B * T)
    shifted = flat_logits - np.max(flat_logits, axis=-1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=-1))
    loss = float(np.mean(logz - shifted[np.arange(B * T), flat_targets]))
    if not np.isfinite(loss):
        raise FloatingPointError("training loss diverged (non-finite)")
    if not with_grads:
        return loss
    probs = np.exp(shifted - logz[:, None])
    probs[np.arange(B * T), flat_targets] -= 1.0
    dlogits = (probs / (B * T)).reshape(B, T, cfg.vocab_size).astype(dtype)
    grads = {name: np.zeros_like(w[name]) for name in w}
    grads[head_name] += nf.reshape(B * T, -1).T @ dlogits.reshape(B * T, -1)
    dnf = dlogits @ w[head_name].T
    dx, dgf = _rmsnorm_backward(dnf, x, rf, w[norm_name])
    grads[norm_name] += dgf
    if exit_path:
        for prefix in reversed([f"exit.layers.{j}" for j in range(cfg.exit_depth)]):
            dx = _layer_backward_batch(dx, w, prefix, cos, sin, cfg.head_dim, stash, grads)
        grads = {k: v for k, v in grads.items() if is_exit_tensor(k)}
    else:
        for prefix in reversed(layer_prefixes):
            dx = _layer_backward_batch(dx, w, prefix, cos, sin, cfg.head_dim, stash, grads)
        dembed = np.zeros_like(w["embed"])
        np.add.at(dembed, tokens, dx)
        grads["embed"] = dembed
        grads = {k: v for k, v in grads.items() if not is_exit_tensor(k)}
    return loss, grads
