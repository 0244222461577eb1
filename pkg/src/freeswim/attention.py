"""Single-head attention kernels.

All kernels accumulate in float64. Masking uses exclusion semantics:
disallowed keys are dropped from the softmax (``-inf`` logits) and get
exactly zero weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import TokenGrid
from .window_mask import WindowSpec, interval_start


class EmptyReceptiveFieldError(ValueError):
    """A query row of the mask allows no keys."""


@dataclass(frozen=True)
class HeadTensors:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    checked: bool = True

    def __post_init__(self):
        q, k, v = (np.asarray(a, dtype=np.float64) for a in (self.q, self.k, self.v))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)
        if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
            raise ValueError("Q, K, V must be 2-D (tokens, dim)")
        if not (q.shape[0] == k.shape[0] == v.shape[0]):
            raise ValueError(f"token counts disagree: Q {q.shape[0]}, K {k.shape[0]}, V {v.shape[0]}")
        if q.shape[1] != k.shape[1]:
            raise ValueError(f"Q/K head_dim disagree: {q.shape[1]} vs {k.shape[1]}")
        if self.checked and not all(np.isfinite(a).all() for a in (q, k, v)):
            raise ValueError("Q, K, V must be finite")

    @property
    def token_count(self) -> int:
        return self.q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]


@dataclass(frozen=True)
class AttentionScale:
    value: float

    def __post_init__(self):
        if not (self.value > 0 and math.isfinite(self.value)):
            raise ValueError(f"attention scale must be positive and finite, got {self.value!r}")

    @classmethod
    def inverse_sqrt(cls, head_dim: int) -> "AttentionScale":
        return cls(1.0 / math.sqrt(head_dim))


def entropy_scale(native_token_count: int, target_token_count: int, head_dim: int) -> AttentionScale:
    """``sqrt(log_{native}(target) / head_dim)``; equals ``1/sqrt(d)`` at native size."""
    if native_token_count < 2:
        raise ValueError("native_token_count must be >= 2 (log base 1 is undefined)")
    if target_token_count < 2:
        raise ValueError("target_token_count must be >= 2")
    if head_dim < 1:
        raise ValueError("head_dim must be positive")
    return AttentionScale(math.sqrt(math.log(target_token_count) / math.log(native_token_count) / head_dim))


def _masked_softmax(logits: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    peak = logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits - peak)
    return weights / weights.sum(axis=-1, keepdims=True)


def softmax_attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax attention for rectangular Q (n_q, d) against K, V (n_k, ...)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return _masked_softmax(scale * (q @ k.T), mask) @ v


def attention_weights(t: HeadTensors, scale: AttentionScale, mask: np.ndarray | None = None) -> np.ndarray:
    """The (token_count, token_count) softmax matrix, exposed for inspection."""
    if mask is not None:
        mask = _validated_mask(mask, t.token_count)
    return _masked_softmax(scale.value * (t.q @ t.k.T), mask)


def dense_attention(t: HeadTensors, scale: AttentionScale) -> np.ndarray:
    return softmax_attend(t.q, t.k, t.v, scale.value)


def _validated_mask(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match ({n}, {n})")
    empty = ~mask.any(axis=1)
    if empty.any():
        raise EmptyReceptiveFieldError(f"empty receptive field for query {int(np.argmax(empty))}")
    return mask


def masked_dense_attention(t: HeadTensors, mask: np.ndarray, scale: AttentionScale) -> np.ndarray:
    mask = _validated_mask(mask, t.token_count)
    return softmax_attend(t.q, t.k, t.v, scale.value, mask)


def literal_product_attention(t: HeadTensors, mask: np.ndarray, scale: AttentionScale) -> np.ndarray:
    """Reference variant multiplying logits by the 0/1 mask before softmax.

    Masked keys end up with logit 0 and still get weight. Never used by
    the pipeline; kept for comparison against exclusion semantics.
    """
    mask = np.asarray(mask, dtype=np.float64)
    return _masked_softmax(scale.value * (t.q @ t.k.T) * mask, None) @ t.v


def windowed_attention(t: HeadTensors, window: WindowSpec, grid: TokenGrid, scale: AttentionScale) -> np.ndarray:
    """Inward sliding-window attention without building any N x N structure.

    Keys for a query are the ``min(h+1, H) x min(w+1, W)`` rectangle from
    ``key_interval`` in every frame, visited in (t, y, x) order. Queries are
    processed one spatial row at a time; within a row, the x-windows are
    strided views of K/V.
    """
    if t.token_count != grid.token_count:
        raise ValueError(f"token_count {t.token_count} does not match grid {grid} ({grid.token_count})")
    f, h, w = grid.shape
    d, dv = t.head_dim, t.v.shape[1]
    lw = min(window.w + 1, w)
    lh = min(window.h + 1, h)
    q = t.q.reshape(f, h, w, d)
    k = t.k.reshape(f, h, w, d)
    v = t.v.reshape(f, h, w, dv)

    x_lo = np.array([interval_start(x, window.w, w) for x in range(w)])
    # (F, H, W-lw+1, dim, lw) strided views; gathered windows per query column
    k_win = sliding_window_view(k, lw, axis=2)[:, :, x_lo]
    v_win = sliding_window_view(v, lw, axis=2)[:, :, x_lo]
    n_keys = f * lh * lw

    out = np.empty((f, h, w, dv))
    for y in range(h):
        y0 = interval_start(y, window.h, h)
        # (F, lh, W, dim, lw) -> (W, F*lh*lw, dim), keys ordered (t, y, x)
        kk = k_win[:, y0:y0 + lh].transpose(2, 0, 1, 4, 3).reshape(w, n_keys, d)
        vv = v_win[:, y0:y0 + lh].transpose(2, 0, 1, 4, 3).reshape(w, n_keys, dv)
        qq = q[:, y].transpose(1, 0, 2)  # (W, F, d)
        weights = _masked_softmax(scale.value * np.matmul(qq, kk.transpose(0, 2, 1)), None)
        out[:, y] = np.matmul(weights, vv).transpose(1, 0, 2)
    return out.reshape(grid.token_count, dv)
