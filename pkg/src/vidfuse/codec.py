"""Fixed linear video codec standing in for a frozen 3D-VAE.

Pixels are cut into ``temporal_factor x spatial_factor x spatial_factor``
RGB blocks and each block is projected onto 16 orthonormal directions.
The directions span per-channel block means, linear ramps along x/y/t,
per-channel x*y cross terms and a luminance saddle; a seeded random
rotation then mixes them into the 16 latent channels.  Because the block
means are in the row space, clips that are constant within every block
survive a round trip exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensorio import read_meta, read_tensor, write_tensor

LATENT_CHANNELS = 16


class DimensionError(ValueError):
    """An input axis is not compatible with the codec factors."""


@dataclass(frozen=True)
class CodecConfig:
    temporal_factor: int = 4
    spatial_factor: int = 8
    latent_channels: int = LATENT_CHANNELS
    seed: int = 0
    # latent = scale * W @ (patch - offset)
    scale: float = 1.5
    offset: float = 0.5

    def __post_init__(self):
        if self.temporal_factor < 1 or self.spatial_factor < 1:
            raise ValueError("compression factors must be >= 1")
        if self.latent_channels != LATENT_CHANNELS:
            raise ValueError(f"latent_channels must be {LATENT_CHANNELS}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def patch_size(self) -> int:
        return self.temporal_factor * self.spatial_factor**2 * 3


@dataclass
class LatentVideo:
    data: np.ndarray  # (T', H', W', 16) float32
    source_dims: tuple[int, int, int]

    @property
    def shape(self):
        return self.data.shape


@lru_cache(maxsize=16)
def _projection(tf: int, sf: int, seed: int) -> np.ndarray:
    """Rows are orthonormal; shape (16, tf*sf*sf*3)."""
    dt, dy, dx, ch = (a.reshape(-1).astype(np.float64) for a in np.indices((tf, sf, sf, 3)))
    cx, cy, ct = dx - dx.mean(), dy - dy.mean(), dt - dt.mean()
    rows = []
    for c in range(3):
        m = (ch == c).astype(np.float64)
        rows += [m, cx * m, cy * m, ct * m]
    rows += [cx * cy * (ch == c) for c in range(3)]
    rows.append(cx**2 - cy**2)
    rng = np.random.default_rng(seed)
    # fill degenerate directions (e.g. tf == 1 gives a zero t-ramp) with noise
    basis = np.stack(rows, axis=1)
    norms = np.linalg.norm(basis, axis=0)
    weak = norms < 1e-9
    basis[:, weak] = rng.standard_normal((basis.shape[0], int(weak.sum())))
    if basis.shape[0] < LATENT_CHANNELS:
        raise DimensionError(
            f"patch of {basis.shape[0]} values cannot carry {LATENT_CHANNELS} channels"
        )
    q, _ = np.linalg.qr(basis)
    rot, _ = np.linalg.qr(rng.standard_normal((LATENT_CHANNELS, LATENT_CHANNELS)))
    return rot @ q.T


def projection_matrix(cfg: CodecConfig) -> np.ndarray:
    return _projection(cfg.temporal_factor, cfg.spatial_factor, cfg.seed)


def _check_dims(shape, cfg: CodecConfig):
    if len(shape) != 4 or shape[-1] != 3:
        raise DimensionError(f"expected (frames, height, width, 3), got {tuple(shape)}")
    for axis, size, factor in zip(
        ("frames", "height", "width"),
        shape[:3],
        (cfg.temporal_factor, cfg.spatial_factor, cfg.spatial_factor),
    ):
        if size == 0 or size % factor:
            raise DimensionError(f"{axis}={size} is not divisible by {factor}")


def _to_patches(clip: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    T, H, W, _ = clip.shape
    tf, sf = cfg.temporal_factor, cfg.spatial_factor
    blocks = clip.reshape(T // tf, tf, H // sf, sf, W // sf, sf, 3)
    return blocks.transpose(0, 2, 4, 1, 3, 5, 6).reshape(T // tf, H // sf, W // sf, -1)


def _from_patches(patches: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    t, h, w, _ = patches.shape
    tf, sf = cfg.temporal_factor, cfg.spatial_factor
    blocks = patches.reshape(t, h, w, tf, sf, sf, 3)
    return blocks.transpose(0, 3, 1, 4, 2, 5, 6).reshape(t * tf, h * sf, w * sf, 3)


def encode(clip: np.ndarray, cfg: CodecConfig) -> LatentVideo:
    clip = np.asarray(clip)
    _check_dims(clip.shape, cfg)
    patches = _to_patches(clip.astype(np.float64) - cfg.offset, cfg)
    data = cfg.scale * patches @ projection_matrix(cfg).T
    return LatentVideo(data.astype(np.float32), tuple(int(s) for s in clip.shape[:3]))


def decode(latent: LatentVideo | np.ndarray, cfg: CodecConfig) -> np.ndarray:
    data = latent.data if isinstance(latent, LatentVideo) else np.asarray(latent)
    if data.ndim != 4 or data.shape[-1] != cfg.latent_channels:
        raise DimensionError(
            f"latent must be (T', H', W', {cfg.latent_channels}), got {tuple(data.shape)}"
        )
    patches = (data.astype(np.float64) / cfg.scale) @ projection_matrix(cfg)
    clip = _from_patches(patches, cfg) + cfg.offset
    return np.clip(clip, 0.0, 1.0).astype(np.float32)


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of an (H, W, 3) image."""
    image = np.asarray(image)
    if image.shape[:2] == (height, width):
        return image
    rows = (np.arange(height) * image.shape[0] / height).astype(int)
    cols = (np.arange(width) * image.shape[1] / width).astype(int)
    return image[rows][:, cols]


def encode_image(image: np.ndarray, cfg: CodecConfig, size: tuple[int, int] | None = None) -> LatentVideo:
    """Encode one image as a single latent frame (the image repeated over a temporal block)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise DimensionError(f"expected (height, width, 3) image, got {image.shape}")
    if size is not None:
        image = resize_image(image, *size)
    clip = np.repeat(image[None], cfg.temporal_factor, axis=0)
    return encode(clip, cfg)


def save_latent(path: str | Path, latent: LatentVideo, cfg: CodecConfig) -> Path:
    meta = {"codec": asdict(cfg), "source_dims": list(latent.source_dims)}
    return write_tensor(path, latent.data.astype(np.float32), meta)


def load_latent(path: str | Path) -> tuple[LatentVideo, CodecConfig]:
    meta = read_meta(path)
    cfg = CodecConfig(**meta["codec"])
    return LatentVideo(read_tensor(path), tuple(meta["source_dims"])), cfg
