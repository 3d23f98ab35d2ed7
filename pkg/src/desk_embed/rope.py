"""Rotary position embeddings and context-extension policies.

Rotation pairs are interleaved: dims (2i, 2i+1) rotate together by the
angle ``m * base ** (-2i / head_dim)`` for position ``m``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, make_op, ShapeError

DEFAULT_BASE = 1000.0
DEFAULT_ALPHA = 2.0


class PolicyKind(str, enum.Enum):
    NONE = "none"
    POSITION_INTERPOLATION = "position_interpolation"
    NTK_AWARE = "ntk_aware"
    DYNAMIC_NTK = "dynamic_ntk"


@dataclass(frozen=True)
class RopeParams:
    base: float = DEFAULT_BASE
    head_dim: int = 32
    trained_context: int = 128

    def __post_init__(self):
        if self.head_dim % 2 or self.head_dim < 4:
            raise ValueError(f"head_dim must be even and >= 4, got {self.head_dim}")
        if not self.base > 1:
            raise ValueError(f"rope base must exceed 1, got {self.base}")
        if self.trained_context < 1:
            raise ValueError("trained_context must be positive")


@dataclass(frozen=True)
class RopePolicy:
    kind: PolicyKind = PolicyKind.NONE
    alpha: float = DEFAULT_ALPHA
    target_context: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if self.target_context is not None and self.target_context < 1:
            raise ValueError("target_context must be positive")

    @classmethod
    def none(cls) -> "RopePolicy":
        return cls(PolicyKind.NONE)

    @classmethod
    def dynamic(cls, alpha: float = DEFAULT_ALPHA, target_context: int | None = None) -> "RopePolicy":
        return cls(PolicyKind.DYNAMIC_NTK, alpha=alpha, target_context=target_context)

    @classmethod
    def parse(cls, text: str, target_context: int | None = None) -> "RopePolicy":
        """Parse ``none``, ``position_interpolation``, ``ntk_aware`` or ``dynamic_ntk[:alpha]``."""
        kind, _, arg = text.partition(":")
        alpha = float(arg) if arg else DEFAULT_ALPHA
        return cls(PolicyKind(kind), alpha=alpha, target_context=target_context)

    def label(self) -> str:
        if self.kind is PolicyKind.DYNAMIC_NTK:
            return f"dynamic_ntk:{self.alpha:g}"
        return self.kind.value

    def max_length(self, trained_context: int) -> int:
        if self.kind is PolicyKind.NONE:
            return trained_context
        return self.target_context if self.target_context is not None else trained_context

    def validate(self, trained_context: int) -> None:
        if self.kind is not PolicyKind.NONE and self.target_context is not None:
            if self.target_context < trained_context:
                raise ValueError(
                    f"target_context {self.target_context} is below the trained context {trained_context}"
                )


def _exponent(head_dim: int) -> float:
    if head_dim <= 2 or head_dim % 2:
        raise ValueError(f"head dimension must be even and > 2, got {head_dim}")
    return head_dim / (head_dim - 2)


def interpolate_positions(m, L: int, L_prime: int):
    """Squeeze position ``m`` of an ``L_prime`` window into the trained range ``L``."""
    if L < 1 or L_prime < L:
        raise ValueError(f"need L_prime >= L >= 1, got L={L}, L_prime={L_prime}")
    return np.asarray(m, dtype=np.float64) * L / L_prime if np.ndim(m) else m * L / L_prime


def ntk_base(b: float, s: float, D: int) -> float:
    """NTK-aware base for a context stretched by factor ``s``."""
    if s < 1:
        raise ValueError(f"scale must be >= 1, got {s}")
    return b * s ** _exponent(D)


def dynamic_ntk_base(b: float, s: float, alpha: float, D: int) -> float:
    """Length-dependent NTK base; returns ``b`` unchanged while ``s <= 1``."""
    exponent = _exponent(D)
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    factor = max(alpha * s - (alpha - 1.0), 1.0)
    return b * factor ** exponent


def effective_rope(params: RopeParams, policy: RopePolicy, seq_len: int) -> tuple[float, Callable]:
    """Resolve ``policy`` at ``seq_len`` into a base and a position map."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    policy.validate(params.trained_context)
    L = params.trained_context
    target = policy.target_context if policy.target_context is not None else max(L, seq_len)
    identity = lambda m: m  # noqa: E731
    if policy.kind is PolicyKind.NONE:
        return params.base, identity
    if policy.kind is PolicyKind.POSITION_INTERPOLATION:
        return params.base, lambda m: interpolate_positions(m, L, target)
    if policy.kind is PolicyKind.NTK_AWARE:
        return ntk_base(params.base, target / L, params.head_dim), identity
    return dynamic_ntk_base(params.base, seq_len / L, policy.alpha, params.head_dim), identity


def rope_tables(positions: Sequence[float], base: float, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``[len(positions), head_dim // 2]``."""
    if head_dim % 2:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.asarray(positions, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


def rotate(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Apply precomputed rotations to ``x[..., seq, head_dim]`` (differentiable)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    *lead, seq, hd = x.shape
    if hd % 2:
        raise ShapeError(f"op 'rope': odd head dimension {hd}")
    if cos.shape != (seq, hd // 2):
        raise ShapeError(f"op 'rope': table shape {cos.shape} does not fit sequence {seq}, head_dim {hd}")
    pairs = x.data.reshape(*lead, seq, hd // 2, 2)
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = x0 * cos - x1 * sin
    out[..., 1] = x0 * sin + x1 * cos

    def grad_fn(g):
        gp = g.reshape(pairs.shape)
        g0, g1 = gp[..., 0], gp[..., 1]
        back = np.empty_like(gp)
        back[..., 0] = g0 * cos + g1 * sin
        back[..., 1] = -g0 * sin + g1 * cos
        return (back.reshape(x.shape),)

    return make_op("rope", out.reshape(x.shape), (x,), grad_fn)


def apply_rope(x, positions: Sequence[float], base: float = DEFAULT_BASE) -> Tensor:
    """Rotate ``x[seq, head_dim]`` (or with leading batch axes) by position."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] % 2:
        raise ValueError(f"head_dim must be even, got {x.shape[-1]}")
    if len(positions) != x.shape[-2]:
        raise ValueError(f"{len(positions)} positions for a sequence of length {x.shape[-2]}")
    cos, sin = rope_tables(positions, base, x.shape[-1])
    return rotate(x, cos, sin)
