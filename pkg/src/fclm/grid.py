from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FeatureGrid:
    """Patch tokens laid out row-major on a ``grid_h x grid_w`` grid."""

    grid_h: int
    grid_w: int
    tokens: np.ndarray  # (grid_h * grid_w, dim)

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be 2-D, got shape {tokens.shape}")
        if tokens.shape[0] != self.grid_h * self.grid_w:
            raise ValueError(
                f"token count {tokens.shape[0]} != grid {self.grid_h}x{self.grid_w}"
            )
        if not np.all(np.isfinite(tokens)):
            raise ValueError("feature grid contains non-finite values")
        object.__setattr__(self, "tokens", tokens)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid_h, self.grid_w, self.dim

    def with_tokens(self, tokens) -> "FeatureGrid":
        return FeatureGrid(self.grid_h, self.grid_w, tokens)

    @classmethod
    def from_array(cls, arr) -> "FeatureGrid":
        """Build from a ``(grid_h, grid_w, dim)`` array."""
        arr = np.asarray(arr, dtype=np.float64)
        h, w, d = arr.shape
        return cls(h, w, arr.reshape(h * w, d))


def check_same_shape(*grids: FeatureGrid) -> None:
    first = grids[0]
    for g in grids[1:]:
        if g.shape != first.shape:
            raise ValueError(f"feature grid shape mismatch: {first.shape} vs {g.shape}")


def pool_to_grid(values: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Average-pool a 2-D map onto a coarser patch grid."""
    values = np.asarray(values, dtype=np.float64)
    gh, gw = grid
    h, w = values.shape
    if gh <= 0 or gw <= 0 or h % gh or w % gw:
        raise ValueError(
            f"map of size {h}x{w} is not divisible into a {gh}x{gw} grid; "
            f"height must be a multiple of {gh} and width a multiple of {gw}"
        )
    return values.reshape(gh, h // gh, gw, w // gw).mean(axis=(1, 3))
