"""Multi-local feature extraction: parallel LANet spatial attention with map drop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    Rng,
    Tensor,
    concat,
    conv1x1,
    max_axis,
    mul,
    relu,
    sigmoid,
)

TRAIN = "train"
EVAL = "eval"


def check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


@dataclass(frozen=True)
class LaNetParams:
    """Two 1x1 convolutions: C -> C/r (ReLU) -> 1 (sigmoid)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    r: int

    def __post_init__(self):
        hidden, c = self.w1.shape
        if self.r < 1 or c % self.r or c // self.r != hidden:
            raise ValueError(f"LANet: {c} channels with r={self.r} needs hidden width {c // max(self.r, 1)}, got {hidden}")
        if self.w2.shape != (1, hidden) or self.b1.shape != (hidden,) or self.b2.shape != (1,):
            raise ValueError("LANet: inconsistent parameter shapes")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]


@dataclass(frozen=True)
class MlfeParams:
    lanets: tuple[LaNetParams, ...]
    p_map: float

    def __post_init__(self):
        if not self.lanets:
            raise ValueError("MLFE needs at least one LANet")
        if len({(ln.channels, ln.r) for ln in self.lanets}) != 1:
            raise ValueError("all LANets must share channel count and compression rate")
        if not 0.0 <= self.p_map <= 1.0:
            raise ValueError(f"p_map must lie in [0, 1], got {self.p_map}")


@dataclass(frozen=True)
class AttentionStack:
    """Attention maps ``(..., N, H, W)`` after the drop step.

    ``dropped`` holds, per leading position, the index of the zeroed map or
    -1 when nothing was dropped.
    """

    maps: Tensor
    dropped: np.ndarray

    @property
    def dropped_index(self) -> int | None:
        """Dropped map for an unbatched stack (None when nothing was dropped)."""
        if self.dropped.ndim != 0:
            raise ValueError("dropped_index is only defined for unbatched stacks")
        i = int(self.dropped)
        return None if i < 0 else i

    def fused(self) -> np.ndarray:
        """Channel max of the maps, shape ``(..., H, W)``."""
        return self.maps.data.max(axis=-3)


def lanet_forward(x: Tensor, params: LaNetParams) -> Tensor:
    """Attention map ``(..., 1, H, W)`` with values in (0, 1)."""
    if x.ndim < 3 or x.shape[-3] != params.channels:
        raise DimensionError(f"LANet expects {params.channels} channels, got input {x.shape}")
    hidden = relu(conv1x1(x, params.w1, params.b1))
    return sigmoid(conv1x1(hidden, params.w2, params.b2))


def attention_drop(stack: AttentionStack, p_map: float, rng: Rng | None, mode: str) -> AttentionStack:
    """Zero one uniformly chosen map with probability ``p_map`` (train mode only).

    Each leading (batch) position gets its own Bernoulli draw and index.
    Surviving maps are not rescaled.
    """
    check_mode(mode)
    if not 0.0 <= p_map <= 1.0:
        raise ValueError(f"p_map must lie in [0, 1], got {p_map}")
    maps = stack.maps
    if maps.ndim < 3 or maps.shape[-3] == 0:
        raise ValueError("attention_drop needs a non-empty stack of maps")
    if mode == EVAL or p_map == 0.0:
        return stack
    if rng is None:
        raise ValueError("train-mode attention_drop needs an rng")

    lead = maps.shape[:-3]
    n = maps.shape[-3]
    fire = rng.uniform(lead) < p_map
    index = rng.integers(0, n, size=lead)
    dropped = np.where(fire, index, -1)
    if not fire.any():
        return AttentionStack(maps, dropped)
    keep = np.ones(lead + (n,))
    flat_keep = keep.reshape(-1, n)
    rows = np.flatnonzero(fire.reshape(-1))
    flat_keep[rows, index.reshape(-1)[rows]] = 0.0
    return AttentionStack(mul(maps, Tensor(keep[..., None, None])), dropped)


def fuse_and_gate(x: Tensor, stack: AttentionStack) -> Tensor:
    """Channel max over the maps, then multiply every feature channel by it."""
    maps = stack.maps
    if maps.ndim < 3 or x.ndim < 3 or maps.shape[-2:] != x.shape[-2:]:
        raise DimensionError(f"fuse_and_gate: maps {maps.shape} vs features {x.shape}")
    return mul(x, max_axis(maps, axis=-3))


def mlfe_forward(x: Tensor, params: MlfeParams, rng: Rng | None, mode: str) -> tuple[Tensor, AttentionStack]:
    """Gated features and the post-drop attention stack."""
    maps = concat([lanet_forward(x, ln) for ln in params.lanets], axis=-3)
    lead = x.shape[:-3]
    stack = AttentionStack(maps, np.full(lead, -1, dtype=np.int64))
    stack = attention_drop(stack, params.p_map, rng, mode)
    return fuse_and_gate(x, stack), stack
