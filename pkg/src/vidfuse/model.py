"""Micro MM-DiT denoiser.

Text tokens and the assembled video sequence pass through dual-stream
blocks (separate weights, joint attention) and then single-stream blocks
over the concatenation.  Rotary positions apply to video/reference tokens
only.  Every block is modulated by the timestep with zero-initialized
gates, so blocks start as identities.

Pose can be injected three ways (``ModelConfig.injection_variant``):

``fusion``
    PoseNet -> K3 -> zero-init FC, summed with the noisy and mask tokens.
``token_add``
    K3 tokens added elementwise to the video tokens, no projection.
``controlnet``
    A trainable copy of the first half of the blocks reads the pose tokens
    and feeds zero-initialized residuals back into the main stream.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .fusion import FusionHead, assemble, fuse, inject_token_add
from .rope import RopeAllocation, rotary_tables, rotate, video_indices
from .text import TextEncoder, VOCAB_SIZE
from .tokenizers import (
    PoseNet,
    VideoTokenizer,
    build_fusion_tokenizer,
    copy_tokenizer,
    pose_tokens,
    tokenize_mask_pair,
)

VARIANTS = ("fusion", "token_add", "controlnet")


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 128
    heads: int = 4
    dual_blocks: int = 2
    single_blocks: int = 2
    mlp_ratio: float = 2.0
    latent_channels: int = 16
    patch: tuple = (1, 2, 2)
    text_blocks: int = 2
    vocab_size: int = VOCAB_SIZE
    max_text_len: int = 64
    injection_variant: str = "fusion"
    fusion_fc: bool = True
    ref_shift: bool = True
    rope_base: float = 10000.0
    train_text_encoder: bool = True

    def __post_init__(self):
        self.patch = tuple(self.patch)
        if self.dim % self.heads:
            raise ModelConfigError(f"dim={self.dim} not divisible by heads={self.heads}")
        if self.dual_blocks < 1 or self.single_blocks < 1:
            raise ModelConfigError("need at least one dual and one single block")
        if self.injection_variant not in VARIANTS:
            raise ModelConfigError(f"unknown injection variant {self.injection_variant!r}; choose from {VARIANTS}")
        if self.patch[0] != 1:
            raise ModelConfigError("temporal patch must be 1 so single-frame references tokenize")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_blocks(self) -> int:
        return self.dual_blocks + self.single_blocks

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class CondBatch:
    """Batched conditioning in latent space (channels-last)."""

    text_ids: torch.Tensor  # (B, L)
    text_valid: torch.Tensor  # (B, L) bool
    text_present: torch.Tensor  # (B,) bool
    image_feats: Optional[torch.Tensor] = None  # (B, 16, 6)
    masked_source: Optional[torch.Tensor] = None  # (B, T, H, W, 16)
    mask_video: Optional[torch.Tensor] = None
    mask_present: Optional[torch.Tensor] = None  # (B,) bool
    pose: Optional[torch.Tensor] = None
    pose_present: Optional[torch.Tensor] = None
    references: Optional[torch.Tensor] = None  # (B, R, 1, H, W, 16)
    reference_present: Optional[torch.Tensor] = None  # (B, R) bool

    @property
    def batch_size(self) -> int:
        return self.text_ids.shape[0]

    def without(self, *streams: str) -> "CondBatch":
        """Copy with the named streams (mask, pose, reference, text) marked absent."""
        out = copy.copy(self)
        B = self.batch_size
        off = torch.zeros(B, dtype=torch.bool)
        for s in streams:
            if s == "mask":
                out.mask_present = off
            elif s == "pose":
                out.pose_present = off
            elif s == "reference":
                if self.references is not None:
                    out.reference_present = torch.zeros(self.references.shape[:2], dtype=torch.bool)
            elif s == "text":
                out.text_present = off
            else:
                raise KeyError(s)
        return out

    def index(self, idx) -> "CondBatch":
        def pick(x):
            return None if x is None else x[idx]

        return CondBatch(**{f.name: pick(getattr(self, f.name)) for f in fields(self)})


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


def _zero_linear(inp: int, out: int) -> nn.Linear:
    lin = nn.Linear(inp, out)
    nn.init.zeros_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


class Modulation(nn.Module):
    def __init__(self, dim: int, chunks: int):
        super().__init__()
        self.chunks = chunks
        self.lin = _zero_linear(dim, chunks * dim)

    def forward(self, c):
        return self.lin(F.silu(c)).chunk(self.chunks, dim=-1)


class MLP(nn.Sequential):
    def __init__(self, dim: int, ratio: float):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))


class StreamParams(nn.Module):
    """Projections for one modality inside an attention block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.mod = Modulation(dim, 6)
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.q_norm = nn.RMSNorm(dim // heads, eps=1e-6)
        self.k_norm = nn.RMSNorm(dim // heads, eps=1e-6)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = MLP(dim, mlp_ratio)

    def qkv_heads(self, x, shift, scale):
        B, L, D = x.shape
        q, k, v = self.qkv(modulate(self.norm1(x), shift, scale)).view(B, L, 3, self.heads, D // self.heads).permute(
            2, 0, 3, 1, 4
        )
        return self.q_norm(q), self.k_norm(k), v

    def finish(self, x, attn, gate1, shift2, scale2, gate2):
        B, H, L, d = attn.shape
        x = x + gate1[:, None] * self.proj(attn.transpose(1, 2).reshape(B, L, H * d))
        return x + gate2[:, None] * self.mlp(modulate(self.norm2(x), shift2, scale2))


def _attend(q, k, v, key_valid):
    return F.scaled_dot_product_attention(q, k, v, attn_mask=key_valid[:, None, None, :])


class DualBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.txt = StreamParams(dim, heads, mlp_ratio)
        self.img = StreamParams(dim, heads, mlp_ratio)

    def forward(self, txt, img, c, rope, key_valid):
        t_mod = self.txt.mod(c)
        i_mod = self.img.mod(c)
        tq, tk, tv = self.txt.qkv_heads(txt, t_mod[0], t_mod[1])
        iq, ik, iv = self.img.qkv_heads(img, i_mod[0], i_mod[1])
        iq, ik = rotate(iq, *rope), rotate(ik, *rope)
        attn = _attend(torch.cat([tq, iq], 2), torch.cat([tk, ik], 2), torch.cat([tv, iv], 2), key_valid)
        n = txt.shape[1]
        txt = self.txt.finish(txt, attn[:, :, :n], *t_mod[2:])
        img = self.img.finish(img, attn[:, :, n:], *i_mod[2:])
        return txt, img


class SingleBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.stream = StreamParams(dim, heads, mlp_ratio)

    def forward(self, x, c, rope, n_txt, key_valid):
        mod = self.stream.mod(c)
        q, k, v = self.stream.qkv_heads(x, mod[0], mod[1])
        q = torch.cat([q[:, :, :n_txt], rotate(q[:, :, n_txt:], *rope)], 2)
        k = torch.cat([k[:, :, :n_txt], rotate(k[:, :, n_txt:], *rope)], 2)
        return self.stream.finish(x, _attend(q, k, v, key_valid), *mod[2:])


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
        args = 1000.0 * t[:, None] * freqs[None]
        return self.mlp(torch.cat([args.cos(), args.sin()], dim=-1))


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mod = Modulation(dim, 2)
        self.linear = nn.Linear(dim, out_dim)
        nn.init.normal_(self.linear.weight, std=1e-3)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x, c):
        shift, scale = self.mod(c)
        return self.linear(modulate(self.norm(x), shift, scale))


def _run_block(block, txt, img, c, rope, key_valid):
    if isinstance(block, DualBlock):
        return block(txt, img, c, rope, key_valid)
    n = txt.shape[1]
    x = block(torch.cat([txt, img], 1), c, rope, n, key_valid)
    return x[:, :n], x[:, n:]


class ControlAdapter(nn.Module):
    """Trainable copies of the first ceil(blocks/2) backbone blocks acting on pose tokens."""

    def __init__(self, blocks: list[nn.Module], dim: int):
        super().__init__()
        n = math.ceil(len(blocks) / 2)
        self.blocks = nn.ModuleList(copy.deepcopy(b) for b in blocks[:n])
        self.out = nn.ModuleList(_zero_linear(dim, dim) for _ in range(n))

    def forward(self, video_tokens, hint, txt, c, rope, txt_valid):
        x = video_tokens + hint
        key_valid = torch.cat([txt_valid, torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)], 1)
        residuals = []
        for blk, out in zip(self.blocks, self.out):
            txt, x = _run_block(blk, txt, x, c, rope, key_valid)
            residuals.append(out(x))
        return residuals


class VideoDiT(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        D, C = cfg.dim, cfg.latent_channels
        self.k1 = VideoTokenizer(C, D, cfg.patch)
        self.k2 = build_fusion_tokenizer(self.k1)
        self.k3 = copy_tokenizer(self.k1)
        self.posenet = PoseNet(C) if cfg.injection_variant == "fusion" else None
        self.fusion = FusionHead(D, use_fc=cfg.fusion_fc)
        self.text = TextEncoder(D, cfg.heads, cfg.text_blocks, cfg.vocab_size, cfg.max_text_len)
        self.text.requires_grad_(cfg.train_text_encoder)
        self.time = TimestepEmbedding(D)
        self.dual = nn.ModuleList(DualBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.dual_blocks))
        self.single = nn.ModuleList(SingleBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.single_blocks))
        self.final = FinalLayer(D, math.prod(cfg.patch) * C)
        self.alloc = RopeAllocation.default(cfg.head_dim, cfg.rope_base)
        self.adapter = (
            ControlAdapter([*self.dual, *self.single], D) if cfg.injection_variant == "controlnet" else None
        )

    # -- pieces -------------------------------------------------------------
    @property
    def blocks(self) -> list[nn.Module]:
        return [*self.dual, *self.single]

    def unpatchify(self, tokens: torch.Tensor, grid) -> torch.Tensor:
        B = tokens.shape[0]
        pt, ph, pw = self.cfg.patch
        t, h, w = grid
        x = tokens.view(B, t, h, w, pt, ph, pw, self.cfg.latent_channels)
        return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(B, t * pt, h * ph, w * pw, -1)

    def condition_tokens(self, z_t: torch.Tensor, cond: CondBatch):
        """Return (fused video tokens, controlnet hint or None)."""
        t_noise = self.k1(z_t)
        mask_tokens = None
        if cond.masked_source is not None:
            mask_tokens = tokenize_mask_pair(cond.masked_source, cond.mask_video, self.k2)
        pose_tok = hint = None
        if cond.pose is not None:
            if self.cfg.injection_variant == "fusion":
                pose_tok = pose_tokens(cond.pose, self.posenet, self.k3)
            else:
                hint = self.k3(cond.pose)
        fused = fuse(t_noise, mask_tokens, pose_tok, self.fusion, cond.mask_present, cond.pose_present)
        if hint is not None and self.cfg.injection_variant == "token_add":
            fused = inject_token_add(fused, hint, cond.pose_present)
            hint = None
        return fused, hint

    def controlnet_residuals(self, video_tokens, hint, txt, c, rope, txt_valid, pose_present=None):
        if self.adapter is None:
            raise ModelConfigError("controlnet residuals requested but the model has no adapter")
        residuals = self.adapter(video_tokens, hint, txt, c, rope, txt_valid)
        if pose_present is not None:
            gate = pose_present.reshape(-1, 1, 1)
            residuals = [torch.where(gate, r, torch.zeros_like(r)) for r in residuals]
        return residuals

    # -- forward ------------------------------------------------------------
    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: CondBatch, return_aux: bool = False):
        """Predict the velocity for z_t (B, T', H', W', C) at times t (B,)."""
        grid = self.k1.grid(z_t.shape[1:4])
        fused, hint = self.condition_tokens(z_t, cond)
        refs = []
        if cond.references is not None:
            refs = [self.k1(cond.references[:, r]) for r in range(cond.references.shape[1])]
        H = assemble(refs, fused, grid, cond.reference_present, shift=self.cfg.ref_shift)
        n_ref = H.num_reference_tokens

        txt = self.text(cond.text_ids, cond.image_feats, cond.text_valid)
        txt_valid = cond.text_valid & cond.text_present[:, None]
        key_valid = torch.cat([txt_valid, H.key_valid], 1)
        c = self.time(t.to(z_t.dtype))
        rope = rotary_tables(H.positions, self.alloc, z_t.dtype, z_t.device)

        residuals = []
        if hint is not None:
            video_rope = rotary_tables(video_indices(*grid), self.alloc, z_t.dtype, z_t.device)
            residuals = self.controlnet_residuals(fused, hint, txt, c, video_rope, txt_valid, cond.pose_present)

        img = H.tokens
        for k, blk in enumerate(self.blocks):
            txt, img = _run_block(blk, txt, img, c, rope, key_valid)
            if k < len(residuals):
                img = torch.cat([img[:, :n_ref], img[:, n_ref:] + residuals[k]], 1)

        out = self.final(img, c)
        velocity = self.unpatchify(out[:, n_ref:], grid)
        if return_aux:
            return velocity, {"head_out": out, "assembled": H, "residuals": residuals}
        return velocity


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
