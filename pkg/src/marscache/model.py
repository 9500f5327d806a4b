"""A small deterministic transformer with switchable causal/bidirectional
attention. Pre-norm residual blocks, RMS normalization, 4x feed-forward,
rotary positions keyed to explicit position ids (so rows can be physically
reordered while keeping their positional identity). Per-layer hidden states
and key/value projections are exposed for the caching engines.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import NEG_INF, Matrix, RandomStream, seeded_stream, softmax_rows

RMS_EPS = 1e-6
ROTARY_BASE = 10000.0
FF_EXPANSION = 4


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    num_heads: int = 4
    model_dim: int = 128
    head_dim: int = 32
    vocab_size: int = 256
    # Start index of each contiguous layer group, ascending, first must be 0.
    group_boundaries: tuple[int, ...] = (0, 2, 4, 6)
    mask_mode: str = "bidirectional"  # "causal" | "bidirectional"

    def __post_init__(self):
        if self.model_dim != self.num_heads * self.head_dim:
            raise ValueError(
                f"model_dim {self.model_dim} != num_heads*head_dim "
                f"{self.num_heads}*{self.head_dim}"
            )
        gb = tuple(self.group_boundaries)
        if not gb or gb[0] != 0 or list(gb) != sorted(set(gb)) or gb[-1] >= self.num_layers:
            raise ValueError(f"group_boundaries {gb} do not partition [0, {self.num_layers})")
        if self.mask_mode not in ("causal", "bidirectional"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        object.__setattr__(self, "group_boundaries", gb)

    @property
    def num_groups(self) -> int:
        return len(self.group_boundaries)

    def group_of_layer(self, layer: int) -> int:
        """0-based group index of a layer."""
        g = 0
        for i, start in enumerate(self.group_boundaries):
            if layer >= start:
                g = i
        return g

    def group_layers(self, g: int) -> range:
        start = self.group_boundaries[g]
        end = (
            self.group_boundaries[g + 1]
            if g + 1 < len(self.group_boundaries)
            else self.num_layers
        )
        return range(start, end)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray  # (D,)
    wq: np.ndarray  # (D, D)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ff_norm: np.ndarray  # (D,)
    w1: np.ndarray  # (D, FF*D)
    w2: np.ndarray  # (FF*D, D)


@dataclass
class Weights:
    config: ModelConfig
    embedding: np.ndarray  # (vocab, D)
    layers: list[LayerWeights]
    final_norm: np.ndarray  # (D,)
    head: np.ndarray  # (D, vocab)


def init_weights(config: ModelConfig, seed: int) -> Weights:
    """Gaussian init: std 0.02 everywhere except residual-path output
    projections (attention output, second feed-forward matrix), which get
    0.02/sqrt(num_layers). Norm gains start at 1. Reproducible per seed."""
    root = seeded_stream(seed, "weights")
    d = config.model_dim
    ff = FF_EXPANSION * d
    resid_std = 0.02 / np.sqrt(config.num_layers)

    def draw(stream: RandomStream, shape, std):
        return stream.normal(size=shape, std=std)

    layers = []
    for l in range(config.num_layers):
        s = root.child(f"layer{l}")
        layers.append(
            LayerWeights(
                attn_norm=np.ones(d),
                wq=draw(s.child("wq"), (d, d), 0.02),
                wk=draw(s.child("wk"), (d, d), 0.02),
                wv=draw(s.child("wv"), (d, d), 0.02),
                wo=draw(s.child("wo"), (d, d), resid_std),
                ff_norm=np.ones(d),
                w1=draw(s.child("w1"), (d, ff), 0.02),
                w2=draw(s.child("w2"), (ff, d), resid_std),
            )
        )
    return Weights(
        config=config,
        embedding=draw(root.child("embedding"), (config.vocab_size, d), 0.02),
        layers=layers,
        final_norm=np.ones(d),
        head=draw(root.child("head"), (d, config.vocab_size), 0.02),
    )


def build_causal_mask(length: int) -> Matrix:
    """Additive causal mask: entry (i, j) is 0 for j <= i, -inf otherwise."""
    if length < 1:
        raise ValueError("length must be >= 1")
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = NEG_INF
    return mask


def attention(Q: Matrix, K: Matrix, V: Matrix, mask: Matrix | None = None) -> Matrix:
    """Single-head scaled dot-product attention with optional additive mask."""
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"Q width {Q.shape[1]} != K width {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"K rows {K.shape[0]} != V rows {V.shape[0]}")
    d_k = Q.shape[1]
    scores = (Q @ K.T) / np.sqrt(d_k)
    return softmax_rows(scores, mask) @ V


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS) * gain


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def rotary_phases(position_ids: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) tables of shape (T, head_dim/2) for the given positions."""
    half = head_dim // 2
    inv_freq = ROTARY_BASE ** (-np.arange(half) / half)
    angles = np.asarray(position_ids, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate the (.., T, head_dim) array by per-position phases (half-split)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate((x1 * cos - x2 * sin, x1 * sin + x2 * cos), axis=-1)


def split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    """(T, D) -> (H, T, d_k)"""
    t, d = x.shape
    return x.reshape(t, num_heads, d // num_heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(H, T, d_k) -> (T, D)"""
    h, t, dk = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dk)


def multi_head_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: Matrix | None,
    d_k: int,
    capture: list | None = None,
) -> np.ndarray:
    """Batched per-head attention. q: (H, Tq, d_k); k, v: (H, Tk, d_k).
    mask, if given, is (Tq, Tk) and shared across heads. Returns (Tq, H*d_k)."""
    scores = np.matmul(q, k.transpose(0, 2, 1)) / np.sqrt(d_k)
    h, tq, tk = scores.shape
    flat = scores.reshape(h * tq, tk)
    flat_mask = None if mask is None else np.tile(mask, (h, 1))
    probs = softmax_rows(flat, flat_mask).reshape(h, tq, tk)
    if capture is not None:
        capture.append(probs)
    return merge_heads(np.matmul(probs, v))


@dataclass
class LayerActivations:
    """Per-layer states exposed by forward.

    hidden[l] is the input hidden state of layer l, (T, D); hidden[num_layers]
    is the final pre-norm output. keys[l] / values[l] are post-rotary
    projections, (H, T, d_k). attention_probs is populated only on request."""

    hidden: list[np.ndarray] = field(default_factory=list)
    keys: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    attention_probs: list[np.ndarray] | None = None


def forward(
    weights: Weights,
    embeddings: Matrix,
    position_ids,
    mask: Matrix | None = None,
    capture_attention: bool = False,
) -> tuple[Matrix, LayerActivations]:
    """Full forward pass: returns (logits over vocab, per-layer activations).

    Positions enter only through rotary phases on Q and K, so rows may be
    permuted as long as position_ids are permuted with them. If mask is None,
    a causal mask is built for mask_mode "causal"; bidirectional runs unmasked.
    """
    cfg = weights.config
    position_ids = np.asarray(position_ids)
    if embeddings.shape[0] != position_ids.shape[0]:
        raise ValueError(
            f"embeddings rows {embeddings.shape[0]} != position_ids length "
            f"{position_ids.shape[0]}"
        )
    if embeddings.shape[1] != cfg.model_dim:
        raise ValueError(f"embedding width {embeddings.shape[1]} != {cfg.model_dim}")
    t = embeddings.shape[0]
    if mask is None and cfg.mask_mode == "causal":
        mask = build_causal_mask(t)
    if mask is not None and mask.shape != (t, t):
        raise ValueError(f"mask shape {mask.shape} != ({t}, {t})")

    cos, sin = rotary_phases(position_ids, cfg.head_dim)
    acts = LayerActivations(attention_probs=[] if capture_attention else None)
    h = embeddings.astype(np.float64, copy=True)
    for lw in weights.layers:
        acts.hidden.append(h.copy())
        x = rms_norm(h, lw.attn_norm)
        q = apply_rotary(split_heads(x @ lw.wq, cfg.num_heads), cos, sin)
        k = apply_rotary(split_heads(x @ lw.wk, cfg.num_heads), cos, sin)
        v = split_heads(x @ lw.wv, cfg.num_heads)
        acts.keys.append(k)
        acts.values.append(v)
        attn = multi_head_attention(q, k, v, mask, cfg.head_dim, acts.attention_probs)
        h = h + attn @ lw.wo
        f = rms_norm(h, lw.ff_norm)
        h = h + gelu(f @ lw.w1) @ lw.w2
    acts.hidden.append(h.copy())
    logits = rms_norm(h, weights.final_norm) @ weights.head
    return logits, acts


# -----------------------------------------------------------------------------
# Weight snapshots: little-endian float64 blob with a JSON header.
# -----------------------------------------------------------------------------

_MAGIC = b"MCW1"


def _tensor_table(weights: Weights) -> list[tuple[str, np.ndarray]]:
    table = [("embedding", weights.embedding)]
    for i, lw in enumerate(weights.layers):
        for name in ("attn_norm", "wq", "wk", "wv", "wo", "ff_norm", "w1", "w2"):
            table.append((f"layers.{i}.{name}", getattr(lw, name)))
    table.append(("final_norm", weights.final_norm))
    table.append(("head", weights.head))
    return table


def save_weights(weights: Weights, path: str) -> None:
    cfg = weights.config
    tensors = _tensor_table(weights)
    entries, offset = [], 0
    for name, arr in tensors:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = json.dumps(
        {
            "config": {
                "num_layers": cfg.num_layers,
                "num_heads": cfg.num_heads,
                "model_dim": cfg.model_dim,
                "head_dim": cfg.head_dim,
                "vocab_size": cfg.vocab_size,
                "group_boundaries": list(cfg.group_boundaries),
                "mask_mode": cfg.mask_mode,
            },
            "tensors": entries,
        }
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path: str) -> Weights:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"not a weight snapshot: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    cfg = ModelConfig(
        num_layers=header["config"]["num_layers"],
        num_heads=header["config"]["num_heads"],
        model_dim=header["config"]["model_dim"],
        head_dim=header["config"]["head_dim"],
        vocab_size=header["config"]["vocab_size"],
        group_boundaries=tuple(header["config"]["group_boundaries"]),
        mask_mode=header["config"]["mask_mode"],
    )
    data = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    for ent in header["tensors"]:
        size = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arrays[ent["name"]] = (
            data[ent["offset"] : ent["offset"] + size]
            .reshape(ent["shape"])
            .astype(np.float64)
        )
    layers = [
        LayerWeights(**{n: arrays[f"layers.{i}.{n}"] for n in
                        ("attn_norm", "wq", "wk", "wv", "wo", "ff_norm", "w1", "w2")})
        for i in range(cfg.num_layers)
    ]
    return Weights(
        config=cfg,
        embedding=arrays["embedding"],
        layers=layers,
        final_norm=arrays["final_norm"],
        head=arrays["head"],
    )
