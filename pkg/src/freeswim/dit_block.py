"""A toy diffusion-transformer stack with a cross-attention override hook.

Each block is self-attention (full or inward-windowed), latent-to-text
cross-attention, then a feed-forward layer, each pre-normalized and
residual-added. The cross-attention output before the residual add can
be blended with another branch's output (``override_cross``). The window
branch uses this to take its global semantics from the full branch.

Weights are seeded uniform in [-0.1, 0.1]; nothing is trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attention import AttentionScale, HeadTensors, dense_attention, softmax_attend, windowed_attention
from .grid import TokenGrid
from .window_mask import WindowSpec

FULL = "full"


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 32
    head_dim: int = 8
    heads: int = 4
    blocks: int = 2
    text_len: int = 8
    text_dim: int = 16
    channels: int = 4
    ff_mult: int = 2

    def __post_init__(self):
        for name in ("model_dim", "head_dim", "heads", "blocks", "text_len", "text_dim", "channels", "ff_mult"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.heads * self.head_dim != self.model_dim:
            raise ValueError(f"heads*head_dim ({self.heads}*{self.head_dim}) must equal model_dim {self.model_dim}")


@dataclass(frozen=True)
class LatentField:
    """Rank-4 (F, H, W, D) field laid out over a token grid."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 4:
            raise ValueError(f"latent must be rank-4 (F, H, W, D), got shape {values.shape}")
        if not np.isfinite(values).all():
            raise FloatingPointError("latent contains non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def grid(self) -> TokenGrid:
        f, h, w, _ = self.values.shape
        return TokenGrid(f, h, w)

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    def tokens(self) -> np.ndarray:
        """(token_count, D) view in flat (t, y, x) order."""
        return self.values.reshape(-1, self.channels)

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, grid: TokenGrid) -> "LatentField":
        return cls(np.asarray(tokens).reshape(*grid.shape, -1))


@dataclass(frozen=True)
class TextContext:
    tokens: np.ndarray

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValueError(f"text context must be (text_len >= 1, text_dim), got shape {tokens.shape}")
        if not np.isfinite(tokens).all():
            raise ValueError("text context must be finite")
        object.__setattr__(self, "tokens", tokens)

    @classmethod
    def random(cls, config: ModelConfig, seed) -> "TextContext":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((config.text_len, config.text_dim)))


@dataclass(frozen=True)
class BlockWeights:
    norm_self: np.ndarray
    self_q: np.ndarray
    self_k: np.ndarray
    self_v: np.ndarray
    self_o: np.ndarray
    norm_cross: np.ndarray
    cross_q: np.ndarray
    cross_k: np.ndarray
    cross_v: np.ndarray
    cross_o: np.ndarray
    norm_ff: np.ndarray
    ff_in: np.ndarray
    ff_in_bias: np.ndarray
    ff_out: np.ndarray
    ff_out_bias: np.ndarray


_PROJECTIONS = ("self_q", "self_k", "self_v", "self_o", "cross_q", "cross_k", "cross_v", "cross_o",
                "ff_in", "ff_in_bias", "ff_out", "ff_out_bias")


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    blocks: tuple[BlockWeights, ...]
    embed_in: np.ndarray    # (channels, model_dim)
    embed_time: np.ndarray  # (model_dim,)
    head_out: np.ndarray    # (model_dim, channels)
    seed: int | None = None

    @classmethod
    def generate(cls, config: ModelConfig, seed: int) -> "ModelWeights":
        rng = np.random.default_rng(seed)
        md, td, ff = config.model_dim, config.text_dim, config.model_dim * config.ff_mult

        def u(*shape):
            return rng.uniform(-0.1, 0.1, size=shape)

        blocks = []
        for _ in range(config.blocks):
            blocks.append(BlockWeights(
                norm_self=np.ones(md), self_q=u(md, md), self_k=u(md, md), self_v=u(md, md), self_o=u(md, md),
                norm_cross=np.ones(md), cross_q=u(md, md), cross_k=u(td, md), cross_v=u(td, md), cross_o=u(md, md),
                norm_ff=np.ones(md), ff_in=u(md, ff), ff_in_bias=u(ff), ff_out=u(ff, md), ff_out_bias=u(md),
            ))
        return cls(config, tuple(blocks), embed_in=u(config.channels, md), embed_time=u(md),
                   head_out=u(md, config.channels), seed=seed)

    def with_zero_projections(self, which: Sequence[str] = _PROJECTIONS) -> "ModelWeights":
        """Copy with the named block projections (and biases) set to zero."""
        blocks = tuple(replace(b, **{name: np.zeros_like(getattr(b, name)) for name in which}) for b in self.blocks)
        return replace(self, blocks=blocks)


@dataclass
class CrossOutputs:
    """Per-block pre-residual cross-attention outputs, each (F, H, W, model_dim)."""

    fields: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.fields)


def _rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, dim = x.shape
    return x.reshape(n, heads, dim // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, n, hd = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * hd)


def _check_mode(mode) -> None:
    if mode != FULL and not isinstance(mode, WindowSpec):
        raise ValueError(f"mode must be 'full' or a WindowSpec, got {mode!r}")


def self_attention_sublayer(latent: LatentField, weights: BlockWeights, mode, grid: TokenGrid,
                            scale: AttentionScale, heads: int) -> LatentField:
    """Residual self-attention. ``mode`` is ``"full"`` or a :class:`WindowSpec`."""
    _check_mode(mode)
    if latent.grid != grid:
        raise ValueError(f"latent grid {latent.grid} does not match {grid}")
    x = latent.tokens()
    xn = _rms_norm(x, weights.norm_self)
    q, k, v = (_split_heads(xn @ w, heads) for w in (weights.self_q, weights.self_k, weights.self_v))
    outs = []
    for hq, hk, hv in zip(q, k, v):
        t = HeadTensors(hq, hk, hv, checked=False)
        outs.append(dense_attention(t, scale) if mode == FULL else windowed_attention(t, mode, grid, scale))
    return LatentField.from_tokens(x + _merge_heads(np.stack(outs)) @ weights.self_o, grid)


def cross_attention_output(latent: LatentField, text: TextContext, weights: BlockWeights, heads: int) -> np.ndarray:
    """Raw (pre-residual) cross-attention output shaped like the latent."""
    x = latent.tokens()
    if text.tokens.shape[1] != weights.cross_k.shape[0]:
        raise ValueError(f"text_dim {text.tokens.shape[1]} does not match weights {weights.cross_k.shape[0]}")
    xn = _rms_norm(x, weights.norm_cross)
    q = _split_heads(xn @ weights.cross_q, heads)
    k = _split_heads(text.tokens @ weights.cross_k, heads)
    v = _split_heads(text.tokens @ weights.cross_v, heads)
    scale = 1.0 / math.sqrt(q.shape[2])
    merged = _merge_heads(np.stack([softmax_attend(hq, hk, hv, scale) for hq, hk, hv in zip(q, k, v)]))
    return (merged @ weights.cross_o).reshape(latent.values.shape[:3] + (-1,))


def cross_attention_sublayer(latent: LatentField, text: TextContext, weights: BlockWeights,
                             heads: int) -> tuple[LatentField, np.ndarray]:
    cross_out = cross_attention_output(latent, text, weights, heads)
    return LatentField(latent.values + cross_out), cross_out


def override_cross(window_out: np.ndarray, full_out: np.ndarray, lam: float) -> np.ndarray:
    """Blend ``lam * full_out + (1 - lam) * window_out``.

    The endpoints return the matching operand unchanged, so ``lam=1`` is a
    bit-exact override.
    """
    window_out = np.asarray(window_out)
    full_out = np.asarray(full_out)
    if window_out.shape != full_out.shape:
        raise ValueError(f"shape mismatch: window {window_out.shape} vs full {full_out.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam!r}")
    if lam == 1.0:
        return full_out
    if lam == 0.0:
        return window_out
    return lam * full_out + (1.0 - lam) * window_out


def feed_forward_sublayer(latent: LatentField, weights: BlockWeights) -> LatentField:
    x = latent.values
    hidden = np.tanh(_rms_norm(x, weights.norm_ff) @ weights.ff_in + weights.ff_in_bias)
    return LatentField(x + hidden @ weights.ff_out + weights.ff_out_bias)


def model_forward(latent: LatentField, text: TextContext, weights: ModelWeights, mode,
                  scale: AttentionScale, override_source: CrossOutputs | None = None,
                  lam: float = 1.0) -> tuple[LatentField, CrossOutputs]:
    """Run every block on a model_dim latent.

    With ``override_source`` given, each block's cross output is blended
    with the source's output for that block before the residual add. The
    returned CrossOutputs hold the fields actually added.
    """
    _check_mode(mode)
    cfg = weights.config
    if latent.channels != cfg.model_dim:
        raise ValueError(f"latent channels {latent.channels} != model_dim {cfg.model_dim}")
    if override_source is not None and len(override_source) != len(weights.blocks):
        raise ValueError(f"override_source has {len(override_source)} blocks, model has {len(weights.blocks)}")
    grid = latent.grid
    used = CrossOutputs()
    for i, block in enumerate(weights.blocks):
        latent = self_attention_sublayer(latent, block, mode, grid, scale, cfg.heads)
        cross_out = cross_attention_output(latent, text, block, cfg.heads)
        if override_source is not None:
            cross_out = override_cross(cross_out, override_source.fields[i], lam)
        used.fields.append(cross_out)
        latent = LatentField(latent.values + cross_out)
        latent = feed_forward_sublayer(latent, block)
    return latent, used


def positional_embedding(grid: TokenGrid, dim: int) -> np.ndarray:
    """Fixed sinusoidal (t, y, x) embedding, shape (F, H, W, dim)."""
    per_axis = max(2, (dim // 3) // 2 * 2)
    freqs = 1.0 / (10000.0 ** (np.arange(0, per_axis, 2) / per_axis))
    parts = []
    for axis, size in enumerate(grid.shape):
        pos = np.arange(size)[:, None] * freqs[None, :]
        emb = np.concatenate([np.sin(pos), np.cos(pos)], axis=1)
        shape = [1, 1, 1, per_axis]
        shape[axis] = size
        parts.append(np.broadcast_to(emb.reshape(shape), grid.shape + (per_axis,)))
    out = np.concatenate(parts, axis=-1)
    if out.shape[-1] < dim:
        out = np.concatenate([out, np.zeros(grid.shape + (dim - out.shape[-1],))], axis=-1)
    return out[..., :dim]


def predict_velocity(x: LatentField, sigma: float, text: TextContext, weights: ModelWeights, mode,
                     scale: AttentionScale, override_source: CrossOutputs | None = None,
                     lam: float = 1.0) -> tuple[np.ndarray, CrossOutputs]:
    """Velocity in latent channels: embed, run the block stack, project back."""
    cfg = weights.config
    if x.channels != cfg.channels:
        raise ValueError(f"latent channels {x.channels} != model channels {cfg.channels}")
    hidden = x.values @ weights.embed_in + positional_embedding(x.grid, cfg.model_dim) + sigma * weights.embed_time
    out, cross = model_forward(LatentField(hidden), text, weights, mode, scale, override_source, lam)
    return out.values @ weights.head_out, cross
