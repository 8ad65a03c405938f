"""Three-axis rotary positional encoding over ``(tau, x, y)`` coordinates."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidSplit


@dataclass(frozen=True)
class RopeTables:
    head_dim: int
    split: tuple[int, int, int]
    base: float
    freqs: tuple[torch.Tensor, torch.Tensor, torch.Tensor]  # float64, one per axis

    def angles(self, positions: torch.Tensor) -> torch.Tensor:
        """Rotation angle per dimension pair, shape ``positions.shape[:-1] + (head_dim // 2,)``."""
        pos = positions.to(torch.float64)
        parts = [pos[..., a, None] * self.freqs[a] for a in range(3) if self.split[a]]
        return torch.cat(parts, dim=-1)


def build_rope_tables(head_dim: int, split: tuple[int, int, int] = (8, 12, 12),
                      base: float = 10000.0) -> RopeTables:
    if len(split) != 3 or any(s < 0 or s % 2 for s in split) or sum(split) != head_dim:
        raise InvalidSplit(f"split {split} must be three even parts summing to {head_dim}")
    freqs = tuple(
        base ** (-2.0 * torch.arange(d // 2, dtype=torch.float64) / d) if d else
        torch.zeros(0, dtype=torch.float64)
        for d in split
    )
    return RopeTables(head_dim, tuple(split), float(base), freqs)


def rope_cos_sin(positions: torch.Tensor, tables: RopeTables,
                 dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    ang = tables.angles(positions)
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive pairs ``(2k, 2k+1)`` of the last dim by precomputed angles."""
    pairs = x.unflatten(-1, (-1, 2))
    a, b = pairs[..., 0], pairs[..., 1]
    out = torch.stack((a * cos - b * sin, a * sin + b * cos), dim=-1)
    return out.flatten(-2)


def apply_rope(vectors: torch.Tensor, positions: torch.Tensor, tables: RopeTables) -> torch.Tensor:
    """Rotate ``vectors[..., T, head_dim]`` by ``positions[..., T, 3]``.

    Position ``(0, 0, 0)`` is the identity; norms are preserved.
    """
    if vectors.shape[-1] != tables.head_dim:
        raise InvalidSplit(f"head_dim {vectors.shape[-1]} != tables {tables.head_dim}")
    cos, sin = rope_cos_sin(positions, tables, vectors.dtype)
    return rotate(vectors, cos, sin)
