"""Token grid coordinate algebra.

Tokens of a video latent are laid out row-major over (frame, y, x): the
frame index is outermost and x innermost, so every frame's spatial block
is a contiguous run of ``height * width`` indices.
"""

from __future__ import annotations

from dataclasses import dataclass


class GridBoundsError(IndexError):
    """A coordinate or flat index falls outside the grid."""


@dataclass(frozen=True)
class TokenGrid:
    frames: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("frames", "height", "width"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"TokenGrid.{name} must be a positive integer, got {value!r}")

    @property
    def token_count(self) -> int:
        return self.frames * self.height * self.width

    @property
    def spatial_count(self) -> int:
        return self.height * self.width

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.frames, self.height, self.width)

    @classmethod
    def parse(cls, text: str) -> "TokenGrid":
        """Parse ``"FxHxW"`` (e.g. ``"1x30x52"``)."""
        parts = text.lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"expected FxHxW, got {text!r}")
        try:
            f, h, w = (int(p) for p in parts)
        except ValueError:
            raise ValueError(f"expected FxHxW with integer fields, got {text!r}") from None
        return cls(f, h, w)

    def __str__(self) -> str:
        return f"{self.frames}x{self.height}x{self.width}"


def _check_axis(name: str, value: int, size: int) -> None:
    if not 0 <= value < size:
        raise GridBoundsError(f"{name}={value} out of range [0, {size})")


def flat_index(grid: TokenGrid, coord: tuple[int, int, int]) -> int:
    t, y, x = coord
    _check_axis("t", t, grid.frames)
    _check_axis("y", y, grid.height)
    _check_axis("x", x, grid.width)
    return (t * grid.height + y) * grid.width + x


def coord_of(grid: TokenGrid, index: int) -> tuple[int, int, int]:
    if not 0 <= index < grid.token_count:
        raise GridBoundsError(f"index={index} out of range [0, {grid.token_count})")
    t, rest = divmod(index, grid.spatial_count)
    y, x = divmod(rest, grid.width)
    return (t, y, x)
