"""Segmented instruction prompts and a small bidirectional text encoder.

A prompt is laid out as::

    [instruction words] <SEP> [prompt words] (<SEP> [image words] <IMG> x 16)

Words are lower-cased, stripped of punctuation and hashed into a fixed
vocabulary.  The ``<IMG>`` slots are filled at encode time with a linear
projection of coarse colour statistics of the reference image.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

SEP, IMG, PAD = 0, 1, 2
NUM_RESERVED = 3
VOCAB_SIZE = 1024
NUM_IMAGE_TOKENS = 16
IMAGE_FEAT_DIM = 6

SEG_INSTRUCTION, SEG_SEP, SEG_PROMPT, SEG_IMAGE = 0, 1, 2, 3

_WORD = re.compile(r"[a-z0-9]+")


class PromptError(ValueError):
    pass


@dataclass
class PromptTriple:
    instruction: str
    text_prompt: str
    image_slot: Any = None  # (H, W, 3) image or a path; only presence matters for layout
    image_text: str = ""  # words preceding the image tokens, e.g. "the cat looks like"


@dataclass
class TextTokenSequence:
    ids: list[int]
    segments: list[int]
    dropped: tuple[str, ...] = field(default=())

    def __len__(self):
        return len(self.ids)

    @property
    def num_image_tokens(self) -> int:
        return sum(1 for i in self.ids if i == IMG)

    def split(self) -> dict[int, list[int]]:
        """Ids grouped by segment (separators excluded)."""
        out: dict[int, list[int]] = {SEG_INSTRUCTION: [], SEG_PROMPT: [], SEG_IMAGE: []}
        for tok, seg in zip(self.ids, self.segments):
            if seg != SEG_SEP:
                out[seg].append(tok)
        return out


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def word_id(word: str, vocab_size: int = VOCAB_SIZE) -> int:
    return NUM_RESERVED + zlib.crc32(word.encode()) % (vocab_size - NUM_RESERVED)


def build_prompt(
    triple: PromptTriple,
    vocab_size: int = VOCAB_SIZE,
    drop_instruction: bool = False,
    drop_image_prompt: bool = False,
) -> TextTokenSequence:
    """Token ids for a prompt triple.

    ``drop_instruction`` / ``drop_image_prompt`` keep the layout but replace
    the segment with ``<PAD>`` ids, which the encoders mask out.
    """
    if not triple.instruction.strip() or not triple.text_prompt.strip():
        raise PromptError("instruction and text prompt must be non-empty")
    instr = [word_id(w, vocab_size) for w in words(triple.instruction)]
    prompt = [word_id(w, vocab_size) for w in words(triple.text_prompt)]
    if not instr or not prompt:
        raise PromptError("instruction and text prompt need at least one word")
    if drop_instruction:
        instr = [PAD] * len(instr)
    ids = instr + [SEP] + prompt
    segments = [SEG_INSTRUCTION] * len(instr) + [SEG_SEP] + [SEG_PROMPT] * len(prompt)
    if triple.image_slot is not None:
        image = [word_id(w, vocab_size) for w in words(triple.image_text)]
        image += [IMG] * NUM_IMAGE_TOKENS
        if drop_image_prompt:
            image = [PAD] * len(image)
        ids += [SEP] + image
        segments += [SEG_SEP] + [SEG_IMAGE] * len(image)
    dropped = tuple(n for n, d in (("instruction", drop_instruction), ("image", drop_image_prompt)) if d)
    return TextTokenSequence(ids, segments, dropped)


def image_prompt_features(image: np.ndarray, grid: int = 4) -> np.ndarray:
    """Per-cell RGB mean and std on a grid x grid pooling of the image, shape (grid**2, 6)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise PromptError(f"expected (H, W, 3) image, got {image.shape}")
    H, W, _ = image.shape
    rows = np.array_split(np.arange(H), grid)
    cols = np.array_split(np.arange(W), grid)
    feats = []
    for r in rows:
        for c in cols:
            cell = image[r[0] : r[-1] + 1, c[0] : c[-1] + 1].reshape(-1, 3)
            feats.append(np.concatenate([cell.mean(0), cell.std(0)]))
    return np.asarray(feats, dtype=np.float32)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))

    def forward(self, x, key_mask):
        B, L, D = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        attn = F.scaled_dot_product_attention(q, k, v, attn_mask=key_mask[:, None, None, :])
        x = x + self.proj(attn.transpose(1, 2).reshape(B, L, D))
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    def __init__(
        self,
        dim: int = 128,
        heads: int = 4,
        blocks: int = 2,
        vocab_size: int = VOCAB_SIZE,
        max_len: int = 64,
        image_feat_dim: int = IMAGE_FEAT_DIM,
    ):
        super().__init__()
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.image_proj = nn.Linear(image_feat_dim, dim)
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads) for _ in range(blocks))
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor, image_feats: torch.Tensor | None = None, valid: torch.Tensor | None = None):
        """ids (B, L) -> (B, L, D).  ``valid`` marks non-pad positions."""
        B, L = ids.shape
        if L > self.max_len:
            raise PromptError(f"text length {L} exceeds max_len {self.max_len}")
        if valid is None:
            valid = ids != PAD
        is_img = ids == IMG
        counts = is_img.sum(1)
        x = self.embed(ids)
        if bool(counts.any()):
            if image_feats is None:
                raise PromptError("sequence has <IMG> placeholders but no image features were given")
            for b in range(B):
                n = int(counts[b])
                if n == 0:
                    continue
                if n != image_feats.shape[1]:
                    raise PromptError(f"row {b}: {n} <IMG> slots but {image_feats.shape[1]} image features")
                x[b, is_img[b]] = self.image_proj(image_feats[b])
        x = x + self.pos[:L]
        # rows with nothing valid would give NaN attention; let them attend to themselves
        attn_valid = valid | ~valid.any(1, keepdim=True)
        for blk in self.blocks:
            x = blk(x, attn_valid)
        return self.norm(x)


def encode_text(
    seq: TextTokenSequence | list[TextTokenSequence],
    encoder: TextEncoder,
    image_feats: np.ndarray | list | None = None,
) -> torch.Tensor:
    """Encode one sequence (returns (L, D)) or a list (returns padded (B, L, D))."""
    single = isinstance(seq, TextTokenSequence)
    seqs = [seq] if single else list(seq)
    feats = [image_feats] if single else (image_feats or [None] * len(seqs))
    ids, feat_t, valid = collate_text(seqs, feats)
    out = encoder(ids, feat_t, valid)
    return out[0] if single else out


def collate_text(seqs: list[TextTokenSequence], feats: list | None = None):
    """Pad id sequences to a common length; returns (ids, image_feats, valid)."""
    L = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), L), PAD, dtype=torch.long)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = torch.tensor(s.ids, dtype=torch.long)
    feats = feats or [None] * len(seqs)
    for s, f in zip(seqs, feats):
        if s.num_image_tokens and f is None:
            raise PromptError("sequence has <IMG> placeholders but no image features were given")
        if f is not None and not s.num_image_tokens and "image" not in s.dropped:
            raise PromptError("image features given for a sequence without <IMG> placeholders")
    feat_t = None
    if any(f is not None for f in feats):
        feat_t = torch.zeros(len(seqs), NUM_IMAGE_TOKENS, IMAGE_FEAT_DIM)
        for b, f in enumerate(feats):
            if f is not None:
                feat_t[b] = torch.as_tensor(np.asarray(f), dtype=torch.float32)
    return ids, feat_t, ids != PAD
