"""Small fixed datasets and measurements used by the overfit and ablation experiments."""

from __future__ import annotations

import copy
from dataclasses import replace

import numpy as np

from .synth import (
    CorpusConfig,
    SceneSpec,
    TaskSample,
    build_inpaint,
    build_mask_edit,
    build_addition_pair,
    build_pose_drive,
    random_figure,
    random_scene,
    min_joint_gap,
    MARKER_RADIUS,
)
from .synth import SceneError
from .train import EncodedSample, TrainConfig, generate_clips


def figure_family(rng, n: int, cfg: CorpusConfig = CorpusConfig()) -> list[SceneSpec]:
    """``n`` scenes with the same figure (size, body type, start) but different motions.

    They share one reference image, so only the pose stream tells them apart.
    """
    H, W, T = cfg.height, cfg.width, cfg.frames
    base = random_figure(rng, H, W, T, max_speed=0.0)
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 1000:
            raise SceneError("could not vary the figure's motion inside the canvas")
        shape = replace(
            base,
            velocity=(float(rng.uniform(-0.75, 0.75)), 0.0),
            swing=float(rng.uniform(0.3, 0.8)),
            period=float(rng.uniform(8, 16)),
            phase=float(rng.uniform(0, 2 * np.pi)),
        )
        spec = SceneSpec(H, W, T, [shape], seed=len(out))
        try:
            spec.validate()
        except SceneError:
            continue
        if min_joint_gap(shape, T) > 2 * MARKER_RADIUS + 1:
            out.append(spec)
    return out


def pose_samples(n: int, seed: int = 0, cfg: CorpusConfig = CorpusConfig(), prefix: str = "pose") -> list[TaskSample]:
    rng = np.random.default_rng([seed, 7])
    return [build_pose_drive(spec, f"{prefix}-{k}") for k, spec in enumerate(figure_family(rng, n, cfg))]


def edit_samples(n_inpaint: int, n_edit: int, n_add: int, seed: int = 0, cfg: CorpusConfig = CorpusConfig()):
    rng = np.random.default_rng([seed, 3])
    out = []
    H, W, T = cfg.height, cfg.width, cfg.frames
    for kind, n in (("inpaint", n_inpaint), ("mask_edit", n_edit), ("addition", n_add)):
        for k in range(n):
            spec = random_scene(rng, H, W, T, n_shapes=2, max_speed=cfg.max_speed)
            sid = f"{kind}-{k}"
            if kind == "inpaint":
                out.append(build_inpaint(spec, rng, cfg.max_expand, sid))
            elif kind == "mask_edit":
                out.append(build_mask_edit(spec, rng, cfg.max_expand, sample_id=sid))
            else:
                out.append(build_addition_pair(spec, rng, sid))
    return out


def overfit_set(seed: int = 0, cfg: CorpusConfig = CorpusConfig()) -> list[TaskSample]:
    """Eight clips: two inpaint, two mask-guided edits, one addition, three pose-driven."""
    return edit_samples(2, 2, 1, seed, cfg) + pose_samples(3, seed, cfg)


def moving(sample: TaskSample) -> bool:
    return bool(np.abs(np.diff(sample.target, axis=0)).max() > 0)


def overfit_train_config(**overrides) -> TrainConfig:
    """The 8-clip memorisation run: every stream always present, 2000 steps at lr 5e-4."""
    base = dict(steps=2000, batch_size=8, lr=5e-4, p_mask=0.0, p_pose=0.0, p_reference=0.0, p_text=0.0,
                checkpoint_every=2000)
    return TrainConfig(**{**base, **overrides})


def pose_swap_ratio(model, data: list[EncodedSample], codec_cfg, sampler) -> float:
    """How much swapping the pose stream moves the output, relative to changing the noise seed.

    For each pose sample i, A_i is its own generation, B_i the same inputs with the
    pose latent of the next pose sample, C_i the same inputs with seed + 1.
    Returns mean ||A - B|| / mean ||A - C|| (L2 in pixel space).
    """
    pose = [d for d in data if d.pose is not None]
    if len(pose) < 2:
        raise ValueError("need at least two pose samples")
    swapped = []
    for k, d in enumerate(pose):
        s = copy.copy(d)
        s.pose = pose[(k + 1) % len(pose)].pose
        swapped.append(s)
    A = generate_clips(model, pose, codec_cfg, sampler)
    B = generate_clips(model, swapped, codec_cfg, sampler)
    C = generate_clips(model, pose, codec_cfg, replace(sampler, seed=sampler.seed + 1))
    ab = np.mean([np.linalg.norm(a - b) for a, b in zip(A, B)])
    ac = np.mean([np.linalg.norm(a - c) for a, c in zip(A, C)])
    return float(ab / ac)
