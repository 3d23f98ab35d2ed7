"""Bidirectional rotary transformer encoder with SwiGLU feed-forward blocks.

Layout per layer (pre-norm)::

    x = x + Wo · attn(rope(q), rope(k), v)    with q, k, v from LN(x)
    x = x + W3 · (silu(W1 · LN(x)) * W2 · LN(x))

No absolute position embeddings are added; position enters only through
the rotations applied to queries and keys.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError
from .rope import PolicyKind, RopeParams, RopePolicy, effective_rope, rope_tables, rotate

VOCAB_MULTIPLE = 64
_MASK_NEG = -1e30


class SequenceTooLongError(ValueError):
    pass


class TaskKind(str, enum.Enum):
    SEARCH_QUERY = "search_query"
    SEARCH_DOCUMENT = "search_document"
    CLASSIFICATION = "classification"
    CLUSTERING = "clustering"


def pad_vocab(raw_vocab: int) -> int:
    """Smallest multiple of 64 that holds ``raw_vocab`` entries."""
    if raw_vocab < 1:
        raise ValueError("raw_vocab must be >= 1")
    return -(-raw_vocab // VOCAB_MULTIPLE) * VOCAB_MULTIPLE


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 2048
    trained_context: int = 128
    rope_base: float = 1000.0
    dropout: float = 0.0
    pooling: str = "mean"
    tie_embeddings: bool = True
    init_std: float = 0.02
    layernorm_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must equal num_heads * head_dim")
        if self.vocab_size % VOCAB_MULTIPLE:
            raise ValueError(f"vocab_size must be a multiple of {VOCAB_MULTIPLE}, got {self.vocab_size}")
        if self.dropout != 0:
            raise ValueError("dropout is fixed at 0")
        if self.pooling not in ("mean", "cls"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        self.rope  # validates head_dim

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def rope(self) -> RopeParams:
        return RopeParams(base=self.rope_base, head_dim=self.head_dim, trained_context=self.trained_context)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TokenBatch:
    token_ids: np.ndarray
    attention_mask: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int64)
        if self.token_ids.ndim != 2 or self.token_ids.shape != self.attention_mask.shape:
            raise ShapeError(f"token_ids {self.token_ids.shape} and mask {self.attention_mask.shape} must be equal 2-d shapes")
        lengths = self.attention_mask.sum(axis=1)
        expected = (np.arange(self.token_ids.shape[1])[None, :] < lengths[:, None]).astype(np.int64)
        if not np.array_equal(expected, self.attention_mask):
            raise ValueError("attention_mask must be 1 on a prefix of each row and 0 after")

    @property
    def lengths(self) -> np.ndarray:
        return self.attention_mask.sum(axis=1)

    def rows(self, index) -> "TokenBatch":
        return TokenBatch(self.token_ids[index], self.attention_mask[index])

    @classmethod
    def from_sequences(cls, seqs, pad_id: int = 0, length: int | None = None) -> "TokenBatch":
        width = length if length is not None else max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), width), dtype=np.int64)
        for i, s in enumerate(seqs):
            s = list(s)[:width]
            ids[i, : len(s)] = s
            mask[i, : len(s)] = 1
        return cls(ids, mask)


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.word": (v, d),
        "embeddings.norm.weight": (d,),
        "embeddings.norm.bias": (d,),
    }
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn_norm.weight": (d,),
            p + "attn_norm.bias": (d,),
            p + "attn.wqkv": (d, 3 * d),
            p + "attn.wo": (d, d),
            p + "ffn_norm.weight": (d,),
            p + "ffn_norm.bias": (d,),
            p + "ffn.w_gate": (d, f),
            p + "ffn.w_up": (d, f),
            p + "ffn.w_down": (f, d),
        })
    shapes.update({
        "final_norm.weight": (d,),
        "final_norm.bias": (d,),
        "mlm.dense": (d, d),
        "mlm.dense_bias": (d,),
        "mlm.norm.weight": (d,),
        "mlm.norm.bias": (d,),
        "mlm.bias": (v,),
    })
    if not cfg.tie_embeddings:
        shapes["mlm.decoder"] = (d, v)
    return shapes


def init_weights(cfg: EncoderConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm.weight"):
            arr = np.ones(shape)
        elif name.endswith("bias"):
            arr = np.zeros(shape)
        else:
            std = cfg.init_std
            if name.endswith(("attn.wo", "ffn.w_down")):
                std = cfg.init_std / math.sqrt(2 * cfg.num_layers)
            arr = rng.normal(0.0, std, size=shape)
        out[name] = Tensor(arr, requires_grad=True, name=name)
    return out


def check_weights(cfg: EncoderConfig, weights: dict[str, Tensor]) -> None:
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise ShapeError(f"missing weights: {missing}")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise ShapeError(f"weight '{name}' has shape {weights[name].shape}, expected {shape}")


def _rope_for_length(cfg: EncoderConfig, policy: RopePolicy, batch: TokenBatch, trace: dict | None):
    seq = batch.token_ids.shape[1]
    longest = int(batch.lengths.max()) if batch.lengths.size else seq
    limit = policy.max_length(cfg.trained_context)
    if policy.kind is not PolicyKind.NONE and policy.target_context is None:
        limit = max(limit, longest)
    if longest > limit:
        raise SequenceTooLongError(
            f"sequence of {longest} tokens exceeds the {limit}-token limit of policy {policy.label()}"
        )
    base, pos_map = effective_rope(cfg.rope, policy, max(longest, 1))
    positions = pos_map(np.arange(seq, dtype=np.float64))
    if trace is not None:
        trace["rope_base"] = base
        trace["positions"] = positions
    return rope_tables(positions, base, cfg.head_dim)


def encode(
    cfg: EncoderConfig,
    weights: dict[str, Tensor],
    batch: TokenBatch,
    policy: RopePolicy | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Hidden states ``[batch, seq, hidden_dim]`` after the final layernorm."""
    policy = policy or RopePolicy.none()
    if batch.token_ids.size and batch.token_ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside the vocabulary")
    cos, sin = _rope_for_length(cfg, policy, batch, trace)
    B, S = batch.token_ids.shape
    H, hd, d = cfg.num_heads, cfg.head_dim, cfg.hidden_dim
    eps = cfg.layernorm_eps
    w = weights

    key_bias = np.where(batch.attention_mask[:, None, None, :] > 0, 0.0, _MASK_NEG)
    scale = 1.0 / math.sqrt(hd)

    x = ad.embedding(w["embeddings.word"], batch.token_ids)
    x = ad.layernorm(x, w["embeddings.norm.weight"], w["embeddings.norm.bias"], eps)
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        h = ad.layernorm(x, w[p + "attn_norm.weight"], w[p + "attn_norm.bias"], eps)
        qkv = (h @ w[p + "attn.wqkv"]).reshape(B, S, 3, H, hd).transpose(2, 0, 3, 1, 4)
        q = rotate(qkv[0], cos, sin)
        k = rotate(qkv[1], cos, sin)
        v = qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + key_bias
        ctx = ad.softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, S, d)
        x = x + ctx @ w[p + "attn.wo"]
        h = ad.layernorm(x, w[p + "ffn_norm.weight"], w[p + "ffn_norm.bias"], eps)
        gated = ad.silu(h @ w[p + "ffn.w_gate"]) * (h @ w[p + "ffn.w_up"])
        x = x + gated @ w[p + "ffn.w_down"]
    return ad.layernorm(x, w["final_norm.weight"], w["final_norm.bias"], eps)


def mean_pool(hidden, mask) -> Tensor:
    """Average hidden states over positions where ``mask == 1``."""
    hidden = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("mean_pool: a row has no unmasked tokens")
    return (hidden * mask[:, :, None]).sum(axis=1) * (1.0 / counts)


def cls_pool(hidden) -> Tensor:
    return hidden[:, 0, :]


def finalize_embedding(v, task: TaskKind | str):
    """Unit-normalize rows unless the task is classification."""
    task = TaskKind(task)
    arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("finalize_embedding: non-finite embedding")
    if task is TaskKind.CLASSIFICATION:
        return v
    if isinstance(v, Tensor):
        return ad.l2_normalize(v, axis=-1)
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("finalize_embedding: zero-norm row")
    return arr / norms


class Encoder:
    """Config plus weights, with pooling and the masked-LM head attached."""

    def __init__(self, config: EncoderConfig, weights: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.weights = weights if weights is not None else init_weights(config, seed)
        check_weights(config, self.weights)

    def parameters(self) -> dict[str, Tensor]:
        return self.weights

    def zero_grad(self) -> None:
        for t in self.weights.values():
            t.grad = None

    def copy(self) -> "Encoder":
        return Encoder(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.weights.items()},
        )

    def forward(self, batch: TokenBatch, policy: RopePolicy | None = None, trace: dict | None = None) -> Tensor:
        return encode(self.config, self.weights, batch, policy, trace)

    def pool(self, hidden: Tensor, batch: TokenBatch) -> Tensor:
        if self.config.pooling == "cls":
            return cls_pool(hidden)
        return mean_pool(hidden, batch.attention_mask)

    def embed(self, batch: TokenBatch, policy: RopePolicy | None = None, trace: dict | None = None) -> Tensor:
        """Pooled, un-normalized sentence embeddings ``[batch, hidden_dim]``."""
        return self.pool(self.forward(batch, policy, trace), batch)

    def mlm_logits(self, hidden: Tensor, positions: np.ndarray | None = None) -> Tensor:
        """Vocabulary logits for ``hidden`` rows; ``positions`` selects flattened rows."""
        w, eps = self.weights, self.config.layernorm_eps
        flat = hidden.reshape(-1, self.config.hidden_dim)
        if positions is not None:
            flat = flat[np.asarray(positions)]
        h = ad.silu(flat @ w["mlm.dense"] + w["mlm.dense_bias"])
        h = ad.layernorm(h, w["mlm.norm.weight"], w["mlm.norm.bias"], eps)
        decoder = w["embeddings.word"].transpose(1, 0) if self.config.tie_embeddings else w["mlm.decoder"]
        return h @ decoder + w["mlm.bias"]


def with_config(cfg: EncoderConfig, **changes) -> EncoderConfig:
    return replace(cfg, **changes)
