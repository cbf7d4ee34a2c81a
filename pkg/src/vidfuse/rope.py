"""3D rotary positions over (frame, row, column).

Video tokens sit at ``(t, i, j)``; reference-image tokens sit one frame
before the clip at ``(-1, i + w, j + h)`` so they never share a position
with a video token and are spatially offset from the frame they precede.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class RopeError(ValueError):
    pass


@dataclass(frozen=True)
class RopeAllocation:
    head_dim: int
    d_t: int
    d_i: int
    d_j: int
    base: float = 10000.0

    def __post_init__(self):
        dims = (self.d_t, self.d_i, self.d_j)
        if any(d < 0 or d % 2 for d in dims):
            raise RopeError(f"axis channel counts must be even and non-negative, got {dims}")
        if sum(dims) != self.head_dim:
            raise RopeError(f"axis channels {dims} do not sum to head_dim={self.head_dim}")

    @classmethod
    def default(cls, head_dim: int, base: float = 10000.0) -> "RopeAllocation":
        """Split head_dim as 1/4 time, 3/8 rows, 3/8 columns (16/24/24 at 64)."""
        if head_dim % 2 or head_dim < 6:
            raise RopeError(f"head_dim must be even and >= 6, got {head_dim}")
        d_t = max(2, 2 * round(head_dim / 8))
        rest = head_dim - d_t
        d_i = 2 * (rest // 4)
        return cls(head_dim, d_t, d_i, rest - d_i, base)


def video_indices(frames: int, h: int, w: int) -> np.ndarray:
    """(frames*h*w, 3) integer positions in row-major (t, i, j) order."""
    if min(frames, h, w) < 1:
        raise RopeError(f"grid dims must be positive, got {(frames, h, w)}")
    t, i, j = np.meshgrid(np.arange(frames), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([t.ravel(), i.ravel(), j.ravel()], axis=1).astype(np.int64)


def reference_indices(h: int, w: int, shift: bool = True) -> np.ndarray:
    """Positions for an h x w reference-image token grid at frame -1.

    With ``shift`` the rows are offset by ``w`` and the columns by ``h``;
    without it the grid lines up with frame 0 (used only for ablation).
    """
    grid = video_indices(1, h, w)
    grid[:, 0] = -1
    if shift:
        grid[:, 1] += w
        grid[:, 2] += h
    return grid


def _axis_angles(pos: np.ndarray, dim: int, base: float) -> np.ndarray:
    if dim == 0:
        return np.zeros((len(pos), 0))
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return pos[:, None].astype(np.float64) * freqs[None, :]


def rotary_angles(positions: np.ndarray, alloc: RopeAllocation) -> np.ndarray:
    """(N, head_dim/2) rotation angles in float64."""
    positions = np.asarray(positions)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise RopeError(f"positions must be (N, 3), got {positions.shape}")
    return np.concatenate(
        [
            _axis_angles(positions[:, 0], alloc.d_t, alloc.base),
            _axis_angles(positions[:, 1], alloc.d_i, alloc.base),
            _axis_angles(positions[:, 2], alloc.d_j, alloc.base),
        ],
        axis=1,
    )


def rotary_tables(positions, alloc: RopeAllocation, dtype=torch.float32, device=None):
    angles = torch.from_numpy(rotary_angles(positions, alloc))
    return angles.cos().to(dtype=dtype, device=device), angles.sin().to(dtype=dtype, device=device)


def rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved channel pairs (2m, 2m+1) of x[..., N, D] by the tabled angles."""
    pairs = x.reshape(*x.shape[:-1], -1, 2)
    a, b = pairs[..., 0], pairs[..., 1]
    out = torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1)
    return out.reshape(x.shape)


def apply_rotary(vectors: torch.Tensor, positions, alloc: RopeAllocation) -> torch.Tensor:
    if vectors.shape[-1] != alloc.head_dim:
        raise RopeError(f"vector dim {vectors.shape[-1]} != head_dim {alloc.head_dim}")
    if vectors.shape[-2] != len(positions):
        raise RopeError(f"{vectors.shape[-2]} vectors but {len(positions)} positions")
    cos, sin = rotary_tables(positions, alloc, vectors.dtype, vectors.device)
    return rotate(vectors, cos, sin)
