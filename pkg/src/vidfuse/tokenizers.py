"""Latent patch tokenizers and the pose feature extractor.

All tensors here are channels-last latents ``(B, T', H', W', C)``; tokens
come out as ``(B, N, D)`` in row-major (t, i, j) order so they line up with
:func:`vidfuse.rope.video_indices`.
"""

from __future__ import annotations

import copy

import torch
from torch import nn


class ShapeError(ValueError):
    pass


class VideoTokenizer(nn.Module):
    """Non-overlapping 3D patch embedding (a strided Conv3d)."""

    def __init__(self, in_channels: int = 16, out_dim: int = 128, patch=(1, 2, 2)):
        super().__init__()
        self.in_channels = in_channels
        self.out_dim = out_dim
        self.patch = tuple(patch)
        self.proj = nn.Conv3d(in_channels, out_dim, kernel_size=self.patch, stride=self.patch)

    def grid(self, latent_dims) -> tuple[int, int, int]:
        """Token grid for latent dims (T', H', W')."""
        for name, size, p in zip(("frames", "height", "width"), latent_dims, self.patch):
            if size % p:
                raise ShapeError(f"latent {name}={size} not divisible by patch {p}")
        return tuple(s // p for s, p in zip(latent_dims, self.patch))

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.ndim != 5 or latent.shape[-1] != self.in_channels:
            raise ShapeError(
                f"expected (B, T, H, W, {self.in_channels}) latent, got {tuple(latent.shape)}"
            )
        self.grid(latent.shape[1:4])
        x = self.proj(latent.permute(0, 4, 1, 2, 3))
        return x.flatten(2).transpose(1, 2)


def tokenize(latent: torch.Tensor, tokenizer: VideoTokenizer) -> torch.Tensor:
    return tokenizer(latent)


def build_fusion_tokenizer(base: VideoTokenizer) -> VideoTokenizer:
    """Widen a 16-channel tokenizer to 32 input channels.

    The first 16 input channels inherit ``base``'s kernel, the new 16 are
    zero, and the bias is copied, so ``K2([x; 0]) == K1(x)``.
    """
    if base.in_channels != 16:
        raise ShapeError(f"base tokenizer must take 16 channels, got {base.in_channels}")
    fused = VideoTokenizer(32, base.out_dim, base.patch)
    with torch.no_grad():
        fused.proj.weight.zero_()
        fused.proj.weight[:, :16].copy_(base.proj.weight)
        fused.proj.bias.copy_(base.proj.bias)
    return fused


def copy_tokenizer(base: VideoTokenizer) -> VideoTokenizer:
    return copy.deepcopy(base)


def tokenize_mask_pair(source: torch.Tensor, mask: torch.Tensor, fusion: VideoTokenizer) -> torch.Tensor:
    """Concatenate masked-source and mask latents along channels, then tokenize."""
    if source.shape != mask.shape:
        raise ShapeError(f"masked source {tuple(source.shape)} vs mask {tuple(mask.shape)}")
    return fusion(torch.cat([source, mask], dim=-1))


class PoseNet(nn.Module):
    """Two channel-preserving 3x3x3 convolutions; the last one starts at zero."""

    def __init__(self, channels: int = 16):
        super().__init__()
        self.conv_in = nn.Conv3d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()
        self.conv_out = nn.Conv3d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        x = latent.permute(0, 4, 1, 2, 3)
        x = self.conv_out(self.act(self.conv_in(x)))
        return x.permute(0, 2, 3, 4, 1)


def pose_tokens(pose: torch.Tensor, posenet: PoseNet, tokenizer: VideoTokenizer) -> torch.Tensor:
    return tokenizer(posenet(pose))
