"""Inward sliding-window attention mask.

Each query attends to keys within ``w/2`` columns and ``h/2`` rows of
itself; near the grid boundary the window is pushed inward instead of
being cut off, so every query sees the same number of keys.

Two forms live here:

* :func:`mask_entry` evaluates the boundary-shift rule literally, in exact
  integer arithmetic. It is the oracle.
* :func:`key_interval` gives the fixed-extent rectangle each query may see.
  The kernels use this one.

The mask is purely spatial. Tokens in different frames attend to each
other whenever their (y, x) positions satisfy the rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .grid import TokenGrid

DENSE_MASK_CAP = 16_384


class MaskSizeError(ValueError):
    """Dense materialization would exceed the configured cap."""


@dataclass(frozen=True)
class WindowSpec:
    """Native window extents in tokens: ``w`` along x, ``h`` along y."""

    w: int
    h: int

    def __post_init__(self):
        for name in ("w", "h"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"window extent {name} must be a positive integer, got {value!r}")
            if value % 2:
                raise ValueError(
                    f"window extent {name}={value} must be even; odd extents give boundary "
                    "queries a larger receptive field than interior ones"
                )

    @classmethod
    def parse(cls, text: str) -> "WindowSpec":
        """Parse ``"WxH"``."""
        parts = text.lower().split("x")
        if len(parts) != 2:
            raise ValueError(f"expected WxH, got {text!r}")
        try:
            w, h = (int(p) for p in parts)
        except ValueError:
            raise ValueError(f"expected WxH with integer fields, got {text!r}") from None
        return cls(w, h)

    def covers(self, grid: TokenGrid) -> bool:
        """True when the window spans the whole spatial grid (mask is all-true)."""
        return grid.width <= self.w + 1 and grid.height <= self.h + 1

    def __str__(self) -> str:
        return f"{self.w}x{self.h}"


@dataclass(frozen=True)
class InwardOffsets:
    delta_w: Fraction
    delta_h: Fraction


@dataclass(frozen=True)
class KeyInterval:
    """Inclusive bounds of the allowed key rectangle for one query."""

    x_lo: int
    x_hi: int
    y_lo: int
    y_hi: int

    def contains(self, y: int, x: int) -> bool:
        return self.x_lo <= x <= self.x_hi and self.y_lo <= y <= self.y_hi

    @property
    def size(self) -> int:
        return (self.x_hi - self.x_lo + 1) * (self.y_hi - self.y_lo + 1)


def _check_spatial(coord: tuple[int, int], grid: TokenGrid, what: str) -> None:
    y, x = coord
    if not (0 <= y < grid.height and 0 <= x < grid.width):
        raise IndexError(f"{what} (y={y}, x={x}) outside {grid.height}x{grid.width} spatial grid")


def _twice_shift(pos: int, extent: int, size: int) -> int:
    # 2 * max(extent/2 - pos, extent/2 + pos - size + 1, 0), kept integral
    return max(extent - 2 * pos, extent + 2 * pos - 2 * size + 2, 0)


def inward_offsets(q_coord: tuple[int, int], window: WindowSpec, grid: TokenGrid) -> InwardOffsets:
    _check_spatial(q_coord, grid, "query")
    y_q, x_q = q_coord
    return InwardOffsets(
        delta_w=Fraction(_twice_shift(x_q, window.w, grid.width), 2),
        delta_h=Fraction(_twice_shift(y_q, window.h, grid.height), 2),
    )


def mask_entry(
    q_coord: tuple[int, int],
    k_coord: tuple[int, int],
    window: WindowSpec,
    grid: TokenGrid,
) -> bool:
    """Literal boundary-shift rule; comparisons are cross-multiplied by 2."""
    y_q, x_q = q_coord
    y_k, x_k = k_coord
    H, W = grid.height, grid.width
    if not (0 <= y_q < H and 0 <= x_q < W):
        raise IndexError(f"query (y={y_q}, x={x_q}) outside {H}x{W} spatial grid")
    if not (0 <= y_k < H and 0 <= x_k < W):
        raise IndexError(f"key (y={y_k}, x={x_k}) outside {H}x{W} spatial grid")
    w, h = window.w, window.h
    # 2*|dx| <= w + 2*max(w/2 - x_q, w/2 + x_q - W + 1, 0)
    if 2 * abs(x_q - x_k) > w + max(w - 2 * x_q, w + 2 * x_q - 2 * W + 2, 0):
        return False
    return 2 * abs(y_q - y_k) <= h + max(h - 2 * y_q, h + 2 * y_q - 2 * H + 2, 0)


def interval_start(pos: int, extent: int, size: int) -> int:
    """Lower bound of the length-``min(extent+1, size)`` interval around ``pos``."""
    length = min(extent + 1, size)
    return min(max(pos - extent // 2, 0), size - length)


def key_interval(q_coord: tuple[int, int], window: WindowSpec, grid: TokenGrid) -> KeyInterval:
    _check_spatial(q_coord, grid, "query")
    y_q, x_q = q_coord
    x_lo = interval_start(x_q, window.w, grid.width)
    y_lo = interval_start(y_q, window.h, grid.height)
    return KeyInterval(
        x_lo=x_lo,
        x_hi=x_lo + min(window.w + 1, grid.width) - 1,
        y_lo=y_lo,
        y_hi=y_lo + min(window.h + 1, grid.height) - 1,
    )


def materialize_mask(window: WindowSpec, grid: TokenGrid, cap: int = DENSE_MASK_CAP) -> np.ndarray:
    """Dense ``(H*W, H*W)`` spatial mask built from :func:`key_interval`.

    Use :func:`broadcast_mask` to lift it to the full (frames included)
    token count.
    """
    n = grid.spatial_count
    if n > cap:
        raise MaskSizeError(
            f"dense mask needs {n}x{n} entries (H*W={n} > cap {cap}); "
            "use windowed_attention, which never materializes the mask"
        )
    xs = np.arange(grid.width)
    ys = np.arange(grid.height)
    x_lo = np.array([interval_start(x, window.w, grid.width) for x in xs])
    y_lo = np.array([interval_start(y, window.h, grid.height) for y in ys])
    lw = min(window.w + 1, grid.width)
    lh = min(window.h + 1, grid.height)
    x_allowed = (xs[None, :] >= x_lo[:, None]) & (xs[None, :] < x_lo[:, None] + lw)
    y_allowed = (ys[None, :] >= y_lo[:, None]) & (ys[None, :] < y_lo[:, None] + lh)
    # (yq, xq, yk, xk) -> (H*W, H*W)
    mask = y_allowed[:, None, :, None] & x_allowed[None, :, None, :]
    return mask.reshape(n, n)


def materialize_mask_literal(window: WindowSpec, grid: TokenGrid, cap: int = DENSE_MASK_CAP) -> np.ndarray:
    """Dense spatial mask from the boundary-shift formula, not from intervals.

    Same doubled-integer arithmetic as :func:`mask_entry`, vectorized over
    all query/key pairs.
    """
    n = grid.spatial_count
    if n > cap:
        raise MaskSizeError(f"dense mask needs {n}x{n} entries (cap {cap})")

    def axis_ok(extent: int, size: int) -> np.ndarray:
        pos = np.arange(size)
        shift = np.maximum(np.maximum(extent - 2 * pos, extent + 2 * pos - 2 * size + 2), 0)
        return 2 * np.abs(pos[:, None] - pos[None, :]) <= (extent + shift)[:, None]

    x_ok = axis_ok(window.w, grid.width)
    y_ok = axis_ok(window.h, grid.height)
    return (y_ok[:, None, :, None] & x_ok[None, :, None, :]).reshape(n, n)


def broadcast_mask(spatial_mask: np.ndarray, frames: int) -> np.ndarray:
    """Lift a spatial mask to all frame pairs (row-major t, y, x layout)."""
    return np.tile(spatial_mask, (frames, frames))


def sparsity(window: WindowSpec, grid: TokenGrid) -> Fraction:
    allowed = min(window.w + 1, grid.width) * min(window.h + 1, grid.height)
    return Fraction(allowed, grid.spatial_count)


def mask_to_text(mask: np.ndarray) -> str:
    """Debug dump: one line per query row of '1'/'0' characters."""
    return "\n".join("".join("1" if v else "0" for v in row) for row in np.asarray(mask, dtype=bool)) + "\n"


def mask_from_text(text: str) -> np.ndarray:
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    if not rows:
        return np.zeros((0, 0), dtype=bool)
    width = len(rows[0])
    if any(len(r) != width or set(r) - {"0", "1"} for r in rows):
        raise ValueError("mask text must be rectangular rows of '0'/'1'")
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool)
