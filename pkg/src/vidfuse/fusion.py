"""Condition routing, token fusion and assembly of the model input sequence."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
from torch import nn

from .rope import reference_indices, video_indices

MAX_REFERENCES = 2
TAG_REFERENCE, TAG_VIDEO = 0, 1


class RoutingError(ValueError):
    pass


class FusionShapeError(ValueError):
    pass


@dataclass(frozen=True)
class DropoutPolicy:
    """Independent per-stream drop probabilities used during training."""

    p_mask: float = 0.1
    p_pose: float = 0.3
    p_reference: float = 0.3
    p_text: float = 0.1
    max_resample: int = 1000

    def __post_init__(self):
        probs = self.probabilities()
        for name, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise RoutingError(f"{name}={p} outside [0, 1]")
        if all(p == 1.0 for p in probs.values()):
            raise RoutingError("policy drops every stream with certainty; all-absent is forbidden")

    def probabilities(self) -> dict[str, float]:
        return {"mask": self.p_mask, "pose": self.p_pose, "reference": self.p_reference, "text": self.p_text}


@dataclass
class ConditionSet:
    """Per-sample conditioning bundle in pixel space plus presence flags."""

    references: list = field(default_factory=list)  # (H, W, 3) images
    masked_source: Optional[np.ndarray] = None
    mask_video: Optional[np.ndarray] = None
    pose_video: Optional[np.ndarray] = None
    mask_present: bool = False
    pose_present: bool = False
    reference_present: bool = False
    text_present: bool = True

    def __post_init__(self):
        if (self.masked_source is None) != (self.mask_video is None):
            raise RoutingError("masked source and mask video must be given together")
        if len(self.references) > MAX_REFERENCES:
            raise RoutingError(f"at most {MAX_REFERENCES} references are supported")

    @classmethod
    def from_streams(cls, references=(), masked_source=None, mask_video=None, pose_video=None, text=True):
        return cls(
            references=list(references),
            masked_source=masked_source,
            mask_video=mask_video,
            pose_video=pose_video,
            mask_present=masked_source is not None,
            pose_present=pose_video is not None,
            reference_present=len(references) > 0,
            text_present=text,
        )

    def presence(self) -> dict[str, bool]:
        return {
            "mask": self.mask_present,
            "pose": self.pose_present,
            "reference": self.reference_present,
            "text": self.text_present,
        }


def route(conds: ConditionSet, rng: np.random.Generator, policy: DropoutPolicy) -> ConditionSet:
    """Randomly mark present streams absent; never returns an all-absent set.

    Streams that are already absent stay absent.  If every present stream is
    dropped, the draw is repeated.
    """
    present = {k: v for k, v in conds.presence().items() if v}
    if not present:
        return conds
    probs = policy.probabilities()
    if all(probs[k] == 1.0 for k in present):
        raise RoutingError(f"policy drops all available streams {sorted(present)} with certainty")
    for _ in range(policy.max_resample):
        keep = {k: bool(rng.random() >= probs[k]) for k in present}
        if any(keep.values()):
            break
    else:
        raise RoutingError("could not draw a non-empty routing")
    return replace(
        conds,
        mask_present=keep.get("mask", False),
        pose_present=keep.get("pose", False),
        reference_present=keep.get("reference", False),
        text_present=keep.get("text", False),
    )


class FusionHead(nn.Module):
    """Per-stream linear maps applied to condition tokens before summation.

    Both maps start at zero, so fusing at initialization returns the noisy
    video tokens unchanged.  ``use_fc=False`` replaces them with identities.
    """

    def __init__(self, dim: int, use_fc: bool = True):
        super().__init__()
        self.use_fc = use_fc
        if use_fc:
            self.fc_mask = nn.Linear(dim, dim)
            self.fc_pose = nn.Linear(dim, dim)
            for fc in (self.fc_mask, self.fc_pose):
                nn.init.zeros_(fc.weight)
                nn.init.zeros_(fc.bias)
        else:
            self.fc_mask = self.fc_pose = nn.Identity()


def _gate(present, batch: int, device) -> torch.Tensor:
    if present is None:
        return torch.ones(batch, 1, 1, dtype=torch.bool, device=device)
    present = torch.as_tensor(present, dtype=torch.bool, device=device)
    return present.reshape(batch, 1, 1)


def fuse(
    t_noise: torch.Tensor,
    mask_tokens: torch.Tensor | None,
    pose_tokens: torch.Tensor | None,
    head: FusionHead,
    mask_present=None,
    pose_present=None,
) -> torch.Tensor:
    """t_noise + fc_mask(mask_tokens) + fc_pose(pose_tokens), skipping absent streams exactly."""
    out = t_noise
    for name, tokens, fc, present in (
        ("mask", mask_tokens, head.fc_mask, mask_present),
        ("pose", pose_tokens, head.fc_pose, pose_present),
    ):
        if tokens is None:
            continue
        if tokens.shape != t_noise.shape:
            raise FusionShapeError(f"{name} tokens {tuple(tokens.shape)} vs noise tokens {tuple(t_noise.shape)}")
        gate = _gate(present, t_noise.shape[0], t_noise.device)
        out = torch.where(gate, out + fc(tokens), out)
    return out


def inject_token_add(video_tokens: torch.Tensor, pose_tokens: torch.Tensor, pose_present=None) -> torch.Tensor:
    """Plain elementwise addition of pose tokens (no projection)."""
    if video_tokens.shape != pose_tokens.shape:
        raise FusionShapeError(f"pose tokens {tuple(pose_tokens.shape)} vs video tokens {tuple(video_tokens.shape)}")
    gate = _gate(pose_present, video_tokens.shape[0], video_tokens.device)
    return torch.where(gate, video_tokens + pose_tokens, video_tokens)


@dataclass
class AssembledInput:
    tokens: torch.Tensor  # (B, L, D)
    positions: np.ndarray  # (L, 3)
    tags: np.ndarray  # (L,) TAG_REFERENCE | TAG_VIDEO
    key_valid: torch.Tensor  # (B, L) False for absent reference slots

    @property
    def loss_mask(self) -> np.ndarray:
        return self.tags == TAG_VIDEO

    @property
    def num_reference_tokens(self) -> int:
        return int((self.tags == TAG_REFERENCE).sum())


def assemble(
    ref_tokens: list[torch.Tensor],
    fused: torch.Tensor,
    video_grid: tuple[int, int, int],
    ref_present: torch.Tensor | None = None,
    shift: bool = True,
) -> AssembledInput:
    """Concatenate reference tokens (in order) ahead of the fused video tokens.

    Every reference sits on the same frame -1 grid; ``ref_present`` (B, R)
    masks reference slots that are absent for a given sample.
    """
    if len(ref_tokens) > MAX_REFERENCES:
        raise RoutingError(f"{len(ref_tokens)} references given; at most {MAX_REFERENCES} supported")
    T, h, w = video_grid
    B, N, D = fused.shape
    if N != T * h * w:
        raise FusionShapeError(f"fused has {N} tokens but grid {video_grid} needs {T * h * w}")
    positions, tags, valid = [], [], []
    for r, tok in enumerate(ref_tokens):
        if tok.shape != (B, h * w, D):
            raise FusionShapeError(f"reference {r} tokens {tuple(tok.shape)}, expected {(B, h * w, D)}")
        positions.append(reference_indices(h, w, shift=shift))
        tags.append(np.full(h * w, TAG_REFERENCE))
        present = torch.ones(B, dtype=torch.bool) if ref_present is None else ref_present[:, r].bool()
        valid.append(present[:, None].expand(B, h * w))
    positions.append(video_indices(T, h, w))
    tags.append(np.full(N, TAG_VIDEO))
    valid.append(torch.ones(B, N, dtype=torch.bool))
    return AssembledInput(
        tokens=torch.cat([*ref_tokens, fused], dim=1),
        positions=np.concatenate(positions),
        tags=np.concatenate(tags),
        key_valid=torch.cat(valid, dim=1).to(fused.device),
    )
