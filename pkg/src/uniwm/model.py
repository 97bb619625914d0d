"""Decoder-only transformer over the unified vocabulary.

Two execution paths share the same parameters: ``forward`` records onto the
autodiff tape for training, and ``InferenceSession`` is a plain-numpy
incremental path with a KV cache for decoding. Both support memory-augmented
attention: at the layers listed in ``l_save``, fused memory K/V rows are
prepended to the in-context keys/values and are visible to every query
(causal masking applies only to in-context positions). Keys are captured
post-rotary, exactly as materialized at their original positions, and are
attended without re-rotation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vocab import VocabLayout

NEG_INF = -1e30  # additive mask value, safe in float32


def select_layers(n_layers: int, count: int | str) -> tuple[int, ...]:
    """``count`` indices evenly spaced over [0, n_layers-1], endpoints included."""
    if count == "all":
        return tuple(range(n_layers))
    count = int(count)
    if count < 1:
        raise ValueError("need at least one memory layer")
    if count == 1:
        return (0,)
    raw = np.round(np.linspace(0, n_layers - 1, count)).astype(int)
    return tuple(sorted(set(int(i) for i in raw)))


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 128
    context_len: int = 512
    l_save: tuple[int, ...] = field(default_factory=tuple)
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not self.l_save:
            self.l_save = select_layers(self.n_layers, min(5, self.n_layers))
        self.l_save = tuple(sorted(set(self.l_save)))
        if any(not 0 <= l < self.n_layers for l in self.l_save):
            raise ValueError(f"l_save {self.l_save} outside [0, {self.n_layers})")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "context_len": self.context_len,
            "l_save": list(self.l_save),
            "rope_base": self.rope_base,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["l_save"] = tuple(obj.get("l_save", ()))
        return cls(**obj)


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Scaled-normal init (std 0.02; output projections down by sqrt(2*n_layers))."""
    rng = np.random.default_rng(seed)
    out_scale = 0.02 / np.sqrt(2.0 * config.n_layers)

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    params: dict[str, Tensor] = {"embed": normal((config.vocab_size, config.d_model), 0.02)}
    d = config.d_model
    for l in range(config.n_layers):
        params[f"layers.{l}.attn_gain"] = ones((d,))
        params[f"layers.{l}.wqkv"] = normal((d, 3 * d), 0.02)
        params[f"layers.{l}.wo"] = normal((d, d), out_scale)
        params[f"layers.{l}.mlp_gain"] = ones((d,))
        params[f"layers.{l}.w1"] = normal((d, 4 * d), 0.02)
        params[f"layers.{l}.w2"] = normal((4 * d, d), out_scale)
    params["final_gain"] = ones((d,))
    return params


def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables shaped [T, 1, head_dim//2] for the given positions."""
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = positions[:, None].astype(np.float64) * freqs[None, :]
    cos = np.cos(angles).astype(dtype)[:, None, :]
    sin = np.sin(angles).astype(dtype)[:, None, :]
    return cos, sin


FusedKV = dict[int, tuple[np.ndarray, np.ndarray]]  # layer -> (K, V) [M, heads, head_dim]


def _memory_rows(fused_memory: FusedKV | None, layer: int, config: ModelConfig) -> tuple[np.ndarray, np.ndarray] | None:
    if not fused_memory or layer not in fused_memory:
        return None
    mk, mv = fused_memory[layer]
    expected = (config.n_heads, config.head_dim)
    if mk.ndim != 3 or mk.shape[1:] != expected or mv.shape != mk.shape:
        raise ValueError(f"fused memory at layer {layer} has shape {mk.shape}, expected (*, {expected})")
    if mk.shape[0] == 0:
        return None
    return mk, mv


def forward(
    params: dict[str, Tensor],
    tokens: np.ndarray,
    config: ModelConfig,
    obs_span: tuple[int, int] | None = None,
    fused_memory: FusedKV | None = None,
) -> tuple[Tensor, dict[int, tuple[np.ndarray, np.ndarray]] | None]:
    """Causal forward pass. Returns (logits [T, vocab], captured K/V or None).

    With ``obs_span``, post-rotary K/V of that span are captured (detached) at
    the ``l_save`` layers. Empty fused memory is exactly a plain forward.
    """
    tokens = np.asarray(tokens)
    t_len = len(tokens)
    if t_len > config.context_len:
        raise ValueError(f"sequence length {t_len} exceeds context {config.context_len}")
    h_n, h_d = config.n_heads, config.head_dim
    dtype = params["embed"].dtype
    cos, sin = rope_tables(np.arange(t_len), h_d, config.rope_base, dtype)
    causal = np.triu(np.full((t_len, t_len), NEG_INF, dtype=dtype), k=1)

    x = T.embedding(params["embed"], tokens)
    captured: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for l in range(config.n_layers):
        hn = T.rmsnorm(x, params[f"layers.{l}.attn_gain"])
        qkv = T.matmul(hn, params[f"layers.{l}.wqkv"])
        d = config.d_model
        q = T.reshape(T.slice_(qkv, (slice(None), slice(0, d))), (t_len, h_n, h_d))
        k = T.reshape(T.slice_(qkv, (slice(None), slice(d, 2 * d))), (t_len, h_n, h_d))
        v = T.reshape(T.slice_(qkv, (slice(None), slice(2 * d, 3 * d))), (t_len, h_n, h_d))
        q = T.scale(T.rotary(q, cos, sin), 1.0 / np.sqrt(h_d))
        k = T.rotary(k, cos, sin)

        if obs_span is not None and l in config.l_save:
            b, e = obs_span
            captured[l] = (
                np.array(k.data[b:e], dtype=np.float32),
                np.array(v.data[b:e], dtype=np.float32),
            )

        qh = T.transpose(q, (1, 0, 2))  # [H, T, hd]
        kh = T.transpose(k, (1, 0, 2))
        vh = T.transpose(v, (1, 0, 2))
        mask = causal
        mem = _memory_rows(fused_memory, l, config) if l in config.l_save else None
        if mem is not None:
            mk, mv = mem
            mk_h = Tensor(np.ascontiguousarray(mk.transpose(1, 0, 2)).astype(dtype))
            mv_h = Tensor(np.ascontiguousarray(mv.transpose(1, 0, 2)).astype(dtype))
            kh = T.concat([mk_h, kh], axis=1)
            vh = T.concat([mv_h, vh], axis=1)
            # memory rows are visible to every query position
            mask = np.concatenate([np.zeros((t_len, mk.shape[0]), dtype=dtype), causal], axis=1)

        scores = T.matmul(qh, T.transpose(kh, (0, 2, 1)))
        att = T.softmax(T.add(scores, Tensor(mask)))
        ctx = T.transpose(T.matmul(att, vh), (1, 0, 2))  # [T, H, hd]
        x = T.add(x, T.matmul(T.reshape(ctx, (t_len, d)), params[f"layers.{l}.wo"]))

        hm = T.rmsnorm(x, params[f"layers.{l}.mlp_gain"])
        up = T.relu(T.matmul(hm, params[f"layers.{l}.w1"]))
        x = T.add(x, T.matmul(up, params[f"layers.{l}.w2"]))

    xf = T.rmsnorm(x, params["final_gain"])
    logits = T.matmul(xf, T.transpose(params["embed"], (1, 0)))
    return logits, (captured if obs_span is not None else None)


def forward_batch(params: dict[str, Tensor], tokens: np.ndarray, config: ModelConfig) -> Tensor:
    """Training forward over a padded batch [B, T] -> logits [B, T, vocab].

    Samples are padded with EOS at the tail; causality keeps pad positions
    from influencing real ones and the losses never read pad logits. No
    capture and no memory here: memory augmentation is inference-only.
    """
    tokens = np.asarray(tokens)
    b, t_len = tokens.shape
    if t_len > config.context_len:
        raise ValueError(f"sequence length {t_len} exceeds context {config.context_len}")
    h_n, h_d, d = config.n_heads, config.head_dim, config.d_model
    dtype = params["embed"].dtype
    cos, sin = rope_tables(np.arange(t_len), h_d, config.rope_base, dtype)
    cos, sin = cos[None], sin[None]  # broadcast over the batch dim
    causal = np.triu(np.full((t_len, t_len), NEG_INF, dtype=dtype), k=1)

    x = T.embedding(params["embed"], tokens)  # [B, T, d]
    for l in range(config.n_layers):
        hn = T.rmsnorm(x, params[f"layers.{l}.attn_gain"])
        qkv = T.matmul(T.reshape(hn, (b * t_len, d)), params[f"layers.{l}.wqkv"])
        qkv = T.reshape(qkv, (b, t_len, 3, h_n, h_d))
        q = T.slice_(qkv, (slice(None), slice(None), 0))
        k = T.slice_(qkv, (slice(None), slice(None), 1))
        v = T.slice_(qkv, (slice(None), slice(None), 2))
        q = T.scale(T.rotary(q, cos, sin), 1.0 / np.sqrt(h_d))
        k = T.rotary(k, cos, sin)

        qh = T.transpose(q, (0, 2, 1, 3))  # [B, H, T, hd]
        kh = T.transpose(k, (0, 2, 1, 3))
        vh = T.transpose(v, (0, 2, 1, 3))
        scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2)))
        att = T.softmax(T.add(scores, Tensor(causal)))
        ctx = T.transpose(T.matmul(att, vh), (0, 2, 1, 3))
        ctx = T.reshape(ctx, (b * t_len, d))
        x = T.add(x, T.reshape(T.matmul(ctx, params[f"layers.{l}.wo"]), (b, t_len, d)))

        hm = T.rmsnorm(x, params[f"layers.{l}.mlp_gain"])
        up = T.relu(T.matmul(T.reshape(hm, (b * t_len, d)), params[f"layers.{l}.w1"]))
        x = T.add(x, T.reshape(T.matmul(up, params[f"layers.{l}.w2"]), (b, t_len, d)))

    xf = T.rmsnorm(x, params["final_gain"])
    logits = T.matmul(T.reshape(xf, (b * t_len, d)), T.transpose(params["embed"], (1, 0)))
    return T.reshape(logits, (b, t_len, config.vocab_size))


# ---------------------------------------------------------------------------
# inference path
# ---------------------------------------------------------------------------


class InferenceSession:
    """Incremental numpy-only forward with a KV cache.

    One session per decoded sequence. ``prefill`` consumes the prompt (and
    optionally captures the observation-span K/V); ``step`` appends a single
    token. Fused memory, when given, participates at the l_save layers for
    every query in this session.
    """

    def __init__(self, params: dict[str, Tensor], config: ModelConfig, fused_memory: FusedKV | None = None):
        self.config = config
        self.w = {k: p.data for k, p in params.items()}
        self.layer_w = [
            tuple(
                self.w[f"layers.{l}.{name}"]
                for name in ("attn_gain", "wqkv", "wo", "mlp_gain", "w1", "w2")
            )
            for l in range(config.n_layers)
        ]
        self.mem: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for l in config.l_save:
            rows = _memory_rows(fused_memory, l, config)
            if rows is not None:
                mk, mv = rows
                self.mem[l] = (
                    np.ascontiguousarray(mk.transpose(1, 0, 2)).astype(np.float32),
                    np.ascontiguousarray(mv.transpose(1, 0, 2)).astype(np.float32),
                )
        c = config
        self.k_cache = np.empty((c.n_layers, c.n_heads, c.context_len, c.head_dim), dtype=np.float32)
        self.v_cache = np.empty_like(self.k_cache)
        cos, sin = rope_tables(np.arange(c.context_len), c.head_dim, c.rope_base, np.float32)
        self.rope = (cos[:, 0, :], sin[:, 0, :])
        self.length = 0

    def _run(self, tokens: np.ndarray, capture_span: tuple[int, int] | None = None):
        """Process a chunk of tokens starting at the current cache length."""
        c = self.config
        t_len = len(tokens)
        start = self.length
        total = start + t_len
        if total > c.context_len:
            raise ValueError(f"sequence length {total} exceeds context {c.context_len}")
        cos = self.rope[0][start:total]
        sin = self.rope[1][start:total]
        # single-token steps attend to the whole cache: no mask needed
        causal = None if t_len == 1 else np.triu(np.full((t_len, total), NEG_INF, dtype=np.float32), k=1 + start)

        x = self.w["embed"][tokens]
        captured: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        scale = 1.0 / np.sqrt(c.head_dim)
        for l, (attn_gain, wqkv, wo, mlp_gain, w1, w2) in enumerate(self.layer_w):
            hn = _np_rmsnorm(x, attn_gain)
            qkv = hn @ wqkv
            q = _np_rotary(qkv[:, : c.d_model].reshape(t_len, c.n_heads, c.head_dim), cos, sin) * scale
            k = _np_rotary(qkv[:, c.d_model : 2 * c.d_model].reshape(t_len, c.n_heads, c.head_dim), cos, sin)
            v = qkv[:, 2 * c.d_model :].reshape(t_len, c.n_heads, c.head_dim)

            if capture_span is not None and l in c.l_save:
                b, e = capture_span
                captured[l] = (k[b - start : e - start].copy(), v[b - start : e - start].copy())

            self.k_cache[l, :, start:total] = k.transpose(1, 0, 2)
            self.v_cache[l, :, start:total] = v.transpose(1, 0, 2)
            kh = self.k_cache[l, :, :total]
            vh = self.v_cache[l, :, :total]
            mask = causal
            if l in self.mem:
                mk, mv = self.mem[l]
                kh = np.concatenate([mk, kh], axis=1)
                vh = np.concatenate([mv, vh], axis=1)
                if mask is not None:
                    mask = np.concatenate([np.zeros((t_len, mk.shape[1]), dtype=np.float32), mask], axis=1)

            scores = np.matmul(q.transpose(1, 0, 2), kh.transpose(0, 2, 1))
            if mask is not None:
                scores += mask
            att = _np_softmax(scores)
            ctx = np.matmul(att, vh).transpose(1, 0, 2).reshape(t_len, c.d_model)
            x = x + ctx @ wo
            hm = _np_rmsnorm(x, mlp_gain)
            x = x + np.maximum(hm @ w1, 0.0) @ w2

        self.length = total
        xf = _np_rmsnorm(x[-1:], self.w["final_gain"])
        logits = (xf @ self.w["embed"].T)[0]
        return logits, captured

    def prefill(self, tokens: np.ndarray, capture_span: tuple[int, int] | None = None):
        """Consume the prompt; returns (last-position logits, captured K/V)."""
        if self.length != 0:
            raise RuntimeError("prefill must be the first call on a session")
        logits, captured = self._run(np.asarray(tokens), capture_span)
        return logits, (captured or None)

    def step(self, token: int) -> np.ndarray:
        """Append one token; returns logits for the next position."""
        logits, _ = self._run(np.asarray([token]))
        return logits


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + T.RMSNORM_EPS)
    return x * inv * gain


def _np_rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    c, s = cos[:, None, :], sin[:, None, :]
    y = np.empty_like(x)
    y[..., 0::2] = x1 * c - x2 * s
    y[..., 1::2] = x1 * s + x2 * c
    return y


# ---------------------------------------------------------------------------
# constrained decoding
# ---------------------------------------------------------------------------


def _masked_pick(logits: np.ndarray, allowed: np.ndarray, temperature: float, rng) -> int:
    masked = np.full_like(logits, -np.inf)
    masked[allowed] = logits[allowed]
    if temperature <= 0:
        return int(np.argmax(masked))
    p = _np_softmax(masked[None, :] / temperature)[0]
    return int(rng.choice(len(p), p=p))


def decode_constrained(
    params: dict[str, Tensor],
    prompt: np.ndarray,
    role: str,
    config: ModelConfig,
    layout: VocabLayout,
    fused_memory: FusedKV | None = None,
    n_img: int | None = None,
    capture_span: tuple[int, int] | None = None,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[list[int], dict | None]:
    """Greedy role-masked decoding. Returns (tokens, captured K/V).

    Planner: first position is restricted to the dx bins plus STOP; a STOP
    ends decoding, otherwise the dy and dyaw bins follow. World model: exactly
    n_img positions restricted to the image range. "both" chains the two.
    """
    sess = InferenceSession(params, config, fused_memory)
    logits, captured = sess.prefill(prompt, capture_span)

    image_ids = np.arange(*layout.image_range())
    dim_ids = [np.arange(*layout.action_range(d)) for d in range(3)]

    def plan_masks():
        yield np.concatenate([dim_ids[0], [layout.stop]])
        yield dim_ids[1]
        yield dim_ids[2]

    out: list[int] = []
    if role in ("planner", "both"):
        for i, allowed in enumerate(plan_masks()):
            tok = _masked_pick(logits, allowed, temperature, rng)
            out.append(tok)
            if i == 0 and tok == layout.stop:
                return out, captured
            logits = sess.step(tok)
    if role in ("world", "both"):
        if n_img is None:
            raise ValueError("world decoding needs n_img")
        for _ in range(n_img):
            tok = _masked_pick(logits, image_ids, temperature, rng)
            out.append(tok)
            logits = sess.step(tok)
    if role not in ("planner", "world", "both"):
        raise ValueError(f"unknown role {role!r}")
    return out, captured


# ---------------------------------------------------------------------------
# checkpoint format: magic, u64 header length, JSON header, f32 LE blobs
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"UWMCKPT1"


def save_checkpoint(
    path: str | Path,
    params: dict[str, Tensor],
    config: ModelConfig,
    layout: VocabLayout,
    meta: dict | None = None,
    extra_blobs: dict[str, np.ndarray] | None = None,
) -> None:
    """Self-describing checkpoint: config + vocab layout + named f32 blobs."""
    blobs: list[tuple[str, np.ndarray]] = [(k, p.data) for k, p in sorted(params.items())]
    for k, arr in sorted((extra_blobs or {}).items()):
        blobs.append((k, arr))
    manifest = []
    offset = 0
    for name, arr in blobs:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = json.dumps(
        {
            "config": config.to_json(),
            "vocab_layout": layout.to_json(),
            "meta": meta or {},
            "manifest": manifest,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for _, arr in blobs:
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path: str | Path):
    """Returns (params, config, layout, meta, extra_blobs)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode())
    config = ModelConfig.from_json(header["config"])
    layout = VocabLayout.from_json(header["vocab_layout"])
    base = 16 + hlen
    params: dict[str, Tensor] = {}
    extra: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=base + entry["offset"]).reshape(shape).copy()
        if entry["name"].startswith("optim."):
            extra[entry["name"]] = arr
        else:
            params[entry["name"]] = Tensor(arr, requires_grad=True)
    return params, config, layout, header["meta"], extra
