"""Procedural video scenes with exact ground truth, and editing-task pairs built from them.

Rendering is aliased on purpose: a pixel (x, y) belongs to a shape iff its
integer coordinates satisfy the shape's inequality, so masks are exact.
All colours are multiples of 1/16 and therefore survive float16 storage.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .fusion import ConditionSet
from .tensorio import read_tensor, write_tensor
from .text import PromptTriple

PALETTE: dict[str, tuple[float, float, float]] = {
    name: tuple(v / 16 for v in rgb)
    for name, rgb in {
        "red": (15, 1, 1),
        "green": (1, 15, 1),
        "blue": (1, 1, 15),
        "yellow": (15, 15, 1),
        "cyan": (1, 15, 15),
        "magenta": (15, 1, 15),
        "white": (16, 16, 16),
        "charcoal": (4, 4, 4),
        "orange": (16, 9, 0),
        "purple": (9, 3, 13),
        "pink": (16, 10, 12),
        "brown": (9, 5, 2),
    }.items()
}
SHAPE_COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", "pink", "brown")
BACKGROUND = (0.5, 0.5, 0.5)
MASK_FILL = 0.5
JOINTS = ("head", "neck", "elbow_l", "hand_l", "elbow_r", "hand_r", "foot_l", "foot_r")
# octant directions around mid-gray: pairwise cosine <= 1/3 relative to the background
JOINT_COLORS = ("yellow", "white", "red", "magenta", "green", "cyan", "blue", "charcoal")
LIMB_COLOR = (0.5, 0.5, 0.625)
MARKER_RADIUS = 3.0
SHAPE_KINDS = ("circle", "square", "triangle")
TASKS = ("inpaint", "outpaint", "mask_edit", "addition", "pose_drive")


class SceneError(ValueError):
    pass


class TaskError(ValueError):
    pass


# --------------------------------------------------------------------------
# scenes


@dataclass
class ShapeSpec:
    kind: str
    color: str
    size: float  # radius, half side, or figure height
    start: tuple[float, float]  # (x, y) at frame 0
    velocity: tuple[float, float] = (0.0, 0.0)  # px / frame
    trajectory: str = "linear"  # or "sine": adds a vertical bob
    amplitude: float = 0.0
    period: float = 16.0
    phase: float = 0.0
    limb_scale: float = 1.0  # stick figures only
    swing: float = 0.0  # stick-figure limb swing amplitude in radians

    def center(self, t: float) -> tuple[float, float]:
        x = self.start[0] + self.velocity[0] * t
        y = self.start[1] + self.velocity[1] * t
        if self.trajectory == "sine":
            y += self.amplitude * math.sin(2 * math.pi * t / self.period + self.phase)
        return x, y


@dataclass
class SceneSpec:
    height: int
    width: int
    frames: int
    shapes: list[ShapeSpec]
    background: tuple[float, float, float] = BACKGROUND
    seed: int = 0

    def validate(self):
        for n, s in enumerate(self.shapes):
            if s.kind not in (*SHAPE_KINDS, "stick_figure"):
                raise SceneError(f"shape {n}: unknown kind {s.kind!r}")
            if s.kind != "stick_figure" and s.color not in PALETTE:
                raise SceneError(f"shape {n}: unknown colour {s.color!r}")
            if s.trajectory not in ("linear", "sine"):
                raise SceneError(f"shape {n}: unknown trajectory {s.trajectory!r}")
            for t in range(self.frames):
                x0, y0, x1, y1 = _extent(s, t)
                if x0 < 0 or y0 < 0 or x1 > self.width - 1 or y1 > self.height - 1:
                    raise SceneError(f"shape {n} ({s.kind}) leaves the canvas at frame {t}")
        return self


@dataclass
class GroundTruth:
    masks: np.ndarray  # (T, n_shapes, H, W) bool, full footprint ignoring occlusion
    boxes: np.ndarray  # (T, n_shapes, 4) top, left, bottom, right (inclusive); -1 if empty
    joints: dict[int, np.ndarray] = field(default_factory=dict)  # shape index -> (T, 8, 2) as (x, y)


HEAD, TORSO = 0.3, 0.4


def figure_joints(shape: ShapeSpec, t: float) -> np.ndarray:
    """(8, 2) joint coordinates (x, y) for a stick figure at frame t."""
    cx, cy = shape.center(t)
    S = shape.size * shape.limb_scale
    swing = shape.swing * math.sin(2 * math.pi * t / shape.period + shape.phase)

    def step(origin, length, angle):
        # angle measured from straight down, positive towards +x
        return origin[0] + length * math.sin(angle), origin[1] + length * math.cos(angle)

    neck = (cx, cy)
    head = (cx, cy - HEAD * S)
    pelvis = (cx, cy + TORSO * S)
    elbow_l = step(neck, 0.3 * S, -1.2 - 0.5 * swing)
    hand_l = step(elbow_l, 0.3 * S, -1.2 - 0.8 * swing)
    elbow_r = step(neck, 0.3 * S, 1.2 - 0.5 * swing)
    hand_r = step(elbow_r, 0.3 * S, 1.2 - 0.8 * swing)
    foot_l = step(pelvis, 0.42 * S, -0.45 + 0.3 * swing)
    foot_r = step(pelvis, 0.42 * S, 0.45 + 0.3 * swing)
    return np.array([head, neck, elbow_l, hand_l, elbow_r, hand_r, foot_l, foot_r], dtype=np.float64)


def _figure_limbs(j: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    pelvis = j[1] + (j[1] - j[0]) * (TORSO / HEAD)
    return [(j[1], j[0]), (j[1], pelvis), (j[1], j[2]), (j[2], j[3]), (j[1], j[4]), (j[4], j[5]),
            (pelvis, j[6]), (pelvis, j[7])]


def _extent(s: ShapeSpec, t: float):
    if s.kind == "stick_figure":
        j = figure_joints(s, t)
        pts = np.vstack([j, *[np.vstack(l) for l in _figure_limbs(j)]])
        r = MARKER_RADIUS
        return pts[:, 0].min() - r, pts[:, 1].min() - r, pts[:, 0].max() + r, pts[:, 1].max() + r
    cx, cy = s.center(t)
    return cx - s.size, cy - s.size, cx + s.size, cy + s.size


def _grid(H, W):
    yy, xx = np.mgrid[0:H, 0:W]
    return xx.astype(np.float64), yy.astype(np.float64)


def _disk(xx, yy, cx, cy, r):
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _segment(H, W, a, b) -> np.ndarray:
    out = np.zeros((H, W), dtype=bool)
    n = int(math.ceil(2 * max(abs(b[0] - a[0]), abs(b[1] - a[1])))) + 1
    xs = np.rint(np.linspace(a[0], b[0], n)).astype(int)
    ys = np.rint(np.linspace(a[1], b[1], n)).astype(int)
    keep = (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
    out[ys[keep], xs[keep]] = True
    return out


def shape_footprint(s: ShapeSpec, t: float, H: int, W: int) -> np.ndarray:
    xx, yy = _grid(H, W)
    if s.kind == "stick_figure":
        j = figure_joints(s, t)
        fp = np.zeros((H, W), dtype=bool)
        for a, b in _figure_limbs(j):
            fp |= _segment(H, W, a, b)
        for x, y in j:
            fp |= _disk(xx, yy, x, y, MARKER_RADIUS)
        return fp
    cx, cy = s.center(t)
    r = s.size
    if s.kind == "circle":
        return _disk(xx, yy, cx, cy, r)
    if s.kind == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    # upward isosceles triangle inscribed in the 2r box
    rel = yy - (cy - r)
    return (rel >= 0) & (rel <= 2 * r) & (np.abs(xx - cx) <= rel / 2)


def _paint_figure(frame: np.ndarray, s: ShapeSpec, t: float, limb_color=LIMB_COLOR):
    H, W, _ = frame.shape
    xx, yy = _grid(H, W)
    j = figure_joints(s, t)
    for a, b in _figure_limbs(j):
        frame[_segment(H, W, a, b)] = limb_color
    for k, (x, y) in enumerate(j):
        frame[_disk(xx, yy, x, y, MARKER_RADIUS)] = PALETTE[JOINT_COLORS[k]]


def _bbox(mask: np.ndarray) -> list[int]:
    rows = np.flatnonzero(mask.any(1))
    cols = np.flatnonzero(mask.any(0))
    if rows.size == 0:
        return [-1, -1, -1, -1]
    return [int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])]


def gen_clip(spec: SceneSpec) -> tuple[np.ndarray, GroundTruth]:
    """Render (frames, H, W, 3) float32 clip and its ground truth."""
    spec.validate()
    T, H, W, n = spec.frames, spec.height, spec.width, len(spec.shapes)
    clip = np.empty((T, H, W, 3), dtype=np.float32)
    clip[:] = spec.background
    masks = np.zeros((T, n, H, W), dtype=bool)
    boxes = np.full((T, n, 4), -1, dtype=np.int64)
    joints = {}
    for k, s in enumerate(spec.shapes):
        if s.kind == "stick_figure":
            joints[k] = np.stack([figure_joints(s, t) for t in range(T)])
    for t in range(T):
        for k, s in enumerate(spec.shapes):
            fp = shape_footprint(s, t, H, W)
            masks[t, k] = fp
            boxes[t, k] = _bbox(fp)
            if s.kind == "stick_figure":
                _paint_figure(clip[t], s, t)
            else:
                clip[t][fp] = PALETTE[s.color]
    return clip, GroundTruth(masks, boxes, joints)


def random_scene(
    rng: np.random.Generator,
    height: int = 64,
    width: int = 64,
    frames: int = 16,
    n_shapes: int = 2,
    max_speed: float = 1.5,
    size_range: tuple[float, float] = (5.0, 8.0),
    figure: bool = False,
    seed: int = 0,
) -> SceneSpec:
    """Shapes with distinct colours on random linear/sinusoidal paths that stay in frame."""
    colors = list(rng.permutation(SHAPE_COLORS)[:n_shapes])
    shapes = []
    for k in range(n_shapes):
        for _ in range(200):
            s = ShapeSpec(
                kind=str(rng.choice(SHAPE_KINDS)),
                color=str(colors[k]),
                size=float(rng.uniform(*size_range)),
                start=(float(rng.uniform(0, width)), float(rng.uniform(0, height))),
                velocity=tuple(float(v) for v in rng.uniform(-max_speed, max_speed, 2)),
                trajectory=str(rng.choice(["linear", "sine"])),
                amplitude=float(rng.uniform(1, 4)),
                period=float(frames),
                phase=float(rng.uniform(0, 2 * math.pi)),
            )
            try:
                SceneSpec(height, width, frames, [s]).validate()
            except SceneError:
                continue
            shapes.append(s)
            break
        else:
            raise SceneError("could not place a shape inside the canvas")
    if figure:
        shapes.append(random_figure(rng, height, width, frames, max_speed=max_speed * 0.5))
    return SceneSpec(height, width, frames, shapes, seed=seed)


def random_figure(rng, height=64, width=64, frames=16, max_speed=0.75, size=None, limb_scale=None) -> ShapeSpec:
    """A stick figure with a body-type scale in [0.8, 1.25]; resampled until it fits."""
    for _ in range(500):
        scale = float(rng.uniform(0.8, 1.25)) if limb_scale is None else limb_scale
        s = ShapeSpec(
            kind="stick_figure",
            color="white",
            size=float(size if size is not None else rng.uniform(0.5, 0.6) * height),
            start=(float(rng.uniform(0.3, 0.7) * width), float(rng.uniform(0.3, 0.45) * height)),
            velocity=(float(rng.uniform(-max_speed, max_speed)), 0.0),
            period=float(rng.uniform(8, 16)),
            phase=float(rng.uniform(0, 2 * math.pi)),
            limb_scale=scale,
            swing=float(rng.uniform(0.3, 0.8)),
        )
        try:
            SceneSpec(height, width, frames, [s]).validate()
        except SceneError:
            continue
        if min_joint_gap(s, frames) > 2 * MARKER_RADIUS + 1:
            return s
    raise SceneError("could not fit a stick figure in the canvas")


def min_joint_gap(shape: ShapeSpec, frames: int) -> float:
    """Smallest distance between two joints over the clip; markers overlap below 2R+1."""
    best = math.inf
    for t in range(frames):
        j = figure_joints(shape, t)
        d = np.linalg.norm(j[:, None] - j[None], axis=-1)
        best = min(best, float(d[np.triu_indices(len(j), 1)].min()))
    return best


# --------------------------------------------------------------------------
# masks


def dilate_mask(mask: np.ndarray, rng: np.random.Generator | None = None, max_expand: int = 4, expand=None):
    """Grow a (T, H, W) mask independently upward, downward, left and right.

    ``expand`` = (top, bottom, left, right) overrides the random draw; each
    draw is uniform on [0, max_expand] and shared by all frames.
    """
    mask = np.asarray(mask, dtype=bool)
    if expand is None:
        expand = tuple(int(v) for v in rng.integers(0, max_expand + 1, size=4))
    top, bottom, left, right = expand
    out = mask.copy()
    # vertical pass, then horizontal pass over the vertically grown mask
    grown = mask.copy()
    for d in range(1, top + 1):
        grown[..., :-d, :] |= mask[..., d:, :]
    for d in range(1, bottom + 1):
        grown[..., d:, :] |= mask[..., :-d, :]
    out = grown.copy()
    for d in range(1, left + 1):
        out[..., :, :-d] |= grown[..., :, d:]
    for d in range(1, right + 1):
        out[..., :, d:] |= grown[..., :, :-d]
    return out, tuple(expand)


def mask_to_video(mask: np.ndarray) -> np.ndarray:
    return np.repeat(mask[..., None].astype(np.float32), 3, axis=-1)


def apply_mask(clip: np.ndarray, mask: np.ndarray, fill: float = MASK_FILL) -> np.ndarray:
    out = clip.copy()
    out[mask] = fill
    return out


# --------------------------------------------------------------------------
# tasks


@dataclass
class TaskSample:
    sample_id: str
    task: str
    source: np.ndarray
    target: np.ndarray
    prompt: PromptTriple
    masked_source: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None  # (T, H, W) bool
    pose_video: Optional[np.ndarray] = None
    references: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mask_video(self) -> Optional[np.ndarray]:
        return None if self.mask is None else mask_to_video(self.mask)

    def conditions(self) -> ConditionSet:
        return ConditionSet.from_streams(
            references=self.references,
            masked_source=self.masked_source,
            mask_video=self.mask_video,
            pose_video=self.pose_video,
        )


def describe(spec: SceneSpec) -> str:
    parts = []
    for s in spec.shapes:
        parts.append("a stick figure" if s.kind == "stick_figure" else f"a {s.color} {s.kind}")
    body = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
    moving = any(s.velocity != (0.0, 0.0) or s.trajectory == "sine" or s.swing for s in spec.shapes)
    return f"{body} {'moving' if moving else 'resting'} on a gray background"


def canonical_image(shape: ShapeSpec, height: int, width: int, background=BACKGROUND) -> np.ndarray:
    """The shape alone, centred and motionless, on the background."""
    still = replace(shape, start=(0.0, 0.0), velocity=(0.0, 0.0), trajectory="linear", swing=0.0)
    x0, y0, x1, y1 = _extent(still, 0)
    # centre the bounding box, not the anchor (figures hang below their neck)
    still = replace(still, start=((width - 1) / 2 - (x0 + x1) / 2, (height - 1) / 2 - (y0 + y1) / 2))
    clip, _ = gen_clip(SceneSpec(height, width, 1, [still], background))
    return clip[0]


def _pick(rng, indices, what):
    if not indices:
        raise TaskError(f"scene has no {what}")
    return int(indices[int(rng.integers(len(indices)))])


def build_inpaint(spec: SceneSpec, rng, max_expand: int = 4, sample_id: str = "") -> TaskSample:
    clip, gt = gen_clip(spec)
    idx = _pick(rng, [k for k, s in enumerate(spec.shapes) if s.kind != "stick_figure"], "plain shapes")
    mask, expand = dilate_mask(gt.masks[:, idx], rng, max_expand)
    return TaskSample(
        sample_id,
        "inpaint",
        source=clip,
        target=clip,
        prompt=PromptTriple("fill in the masked region of the video", describe(spec)),
        masked_source=apply_mask(clip, mask),
        mask=mask,
        meta={"shape_index": idx, "expand": list(expand), "color": spec.shapes[idx].color},
    )


def build_outpaint(clip: np.ndarray, rng, crop=None, min_frac: float = 0.5, sample_id: str = "", prompt=None) -> TaskSample:
    """Keep a random crop (>= min_frac of each side) and ask for the rest of the frame.

    ``crop`` = (top, left, height, width) overrides the draw.
    """
    T, H, W, _ = clip.shape
    if crop is None:
        ch = int(rng.integers(math.ceil(min_frac * H), H + 1))
        cw = int(rng.integers(math.ceil(min_frac * W), W + 1))
        crop = (int(rng.integers(0, H - ch + 1)), int(rng.integers(0, W - cw + 1)), ch, cw)
    top, left, ch, cw = crop
    if ch < math.ceil(min_frac * H) or cw < math.ceil(min_frac * W):
        raise TaskError(f"crop {ch}x{cw} is smaller than {min_frac:.0%} of {H}x{W}")
    if top < 0 or left < 0 or top + ch > H or left + cw > W:
        raise TaskError(f"crop {crop} exceeds the {H}x{W} frame")
    keep = np.zeros((T, H, W), dtype=bool)
    keep[:, top : top + ch, left : left + cw] = True
    mask = ~keep
    return TaskSample(
        sample_id,
        "outpaint",
        source=clip,
        target=clip,
        prompt=prompt or PromptTriple("extend the video beyond the cropped region", "a video on a gray background"),
        masked_source=apply_mask(clip, mask),
        mask=mask,
        meta={"crop_bbox": [top, left, top + ch - 1, left + cw - 1]},
    )


def remove_shape(spec: SceneSpec, idx: int) -> SceneSpec:
    return replace(spec, shapes=[s for k, s in enumerate(spec.shapes) if k != idx])


def build_addition_pair(spec: SceneSpec, rng, sample_id: str = "") -> TaskSample:
    """Source lacks one shape, target has it; the shape's image is the reference.

    The source enters as masked source with an empty mask, so the edit is
    driven by instruction and reference alone.
    """
    plain = [k for k, s in enumerate(spec.shapes) if s.kind != "stick_figure"]
    if len(spec.shapes) < 2 or not plain:
        raise TaskError("addition pairs need a scene with at least two shapes")
    idx = _pick(rng, plain, "plain shapes")
    shape = spec.shapes[idx]
    target, gt = gen_clip(spec)
    source, _ = gen_clip(remove_shape(spec, idx))
    T, H, W, _ = target.shape
    return TaskSample(
        sample_id,
        "addition",
        source=source,
        target=target,
        prompt=PromptTriple(
            f"add a {shape.color} {shape.kind} to the video",
            describe(spec),
            image_slot="reference_0",
            image_text=f"the {shape.kind} looks like",
        ),
        masked_source=source,
        mask=np.zeros((T, H, W), dtype=bool),
        references=[canonical_image(shape, H, W)],
        meta={"shape_index": idx, "color": shape.color, "kind": shape.kind, "object_mask_frames": None},
    )


def swap_shape(spec: SceneSpec, idx: int, kind: str, color: str) -> tuple[SceneSpec, tuple[str, str]]:
    """Replace shape idx's kind and colour; returns the new spec and the old (kind, colour)."""
    old = spec.shapes[idx]
    if (old.kind, old.color) == (kind, color):
        raise TaskError("replacement is identical to the original shape")
    shapes = list(spec.shapes)
    shapes[idx] = replace(old, kind=kind, color=color)
    return replace(spec, shapes=shapes), (old.kind, old.color)


def build_mask_edit(spec: SceneSpec, rng, max_expand: int = 4, swap_roster=None, sample_id: str = "") -> TaskSample:
    """Swap one shape for another along the same path inside a dilated mask."""
    plain = [k for k, s in enumerate(spec.shapes) if s.kind != "stick_figure"]
    idx = _pick(rng, plain, "plain shapes")
    old = spec.shapes[idx]
    used = {s.color for s in spec.shapes}
    if swap_roster is None:
        kinds = list(SHAPE_KINDS)
        colors = [c for c in SHAPE_COLORS if c not in used]
        kind = str(rng.choice(kinds))
        color = str(rng.choice(colors)) if colors else old.color
        swap_roster = (kind, color)
    kind, color = swap_roster
    new_spec, _ = swap_shape(spec, idx, kind, color)
    source, gt_src = gen_clip(spec)
    target, gt_tgt = gen_clip(new_spec)
    union = gt_src.masks[:, idx] | gt_tgt.masks[:, idx]
    mask, expand = dilate_mask(union, rng, max_expand)
    T, H, W, _ = source.shape
    return TaskSample(
        sample_id,
        "mask_edit",
        source=source,
        target=target,
        prompt=PromptTriple(
            f"replace the {old.color} {old.kind} with a {color} {kind}",
            describe(new_spec),
            image_slot="reference_0",
            image_text=f"the {kind} looks like",
        ),
        masked_source=apply_mask(source, mask),
        mask=mask,
        references=[canonical_image(new_spec.shapes[idx], H, W)],
        meta={
            "shape_index": idx,
            "expand": list(expand),
            "original": [old.kind, old.color],
            "replacement": [kind, color],
            "color": color,
        },
    )


def render_pose(joints: np.ndarray, height: int, width: int) -> np.ndarray:
    """Skeleton video on black: neutral limb lines plus one coloured marker per joint."""
    T = joints.shape[0]
    out = np.zeros((T, height, width, 3), dtype=np.float32)
    xx, yy = _grid(height, width)
    for t in range(T):
        j = joints[t]
        for a, b in _figure_limbs(j):
            out[t][_segment(height, width, a, b)] = LIMB_COLOR
        for k, (x, y) in enumerate(j):
            out[t][_disk(xx, yy, x, y, MARKER_RADIUS)] = PALETTE[JOINT_COLORS[k]]
    return out


def build_pose_drive(spec: SceneSpec, sample_id: str = "") -> TaskSample:
    figs = [k for k, s in enumerate(spec.shapes) if s.kind == "stick_figure"]
    if not figs:
        raise TaskError("pose-driven samples need a stick figure in the scene")
    idx = figs[0]
    clip, gt = gen_clip(spec)
    T, H, W, _ = clip.shape
    return TaskSample(
        sample_id,
        "pose_drive",
        source=clip,
        target=clip,
        prompt=PromptTriple(
            "animate the figure following the pose",
            describe(spec),
            image_slot="reference_0",
            image_text="the figure looks like",
        ),
        pose_video=render_pose(gt.joints[idx], H, W),
        references=[canonical_image(spec.shapes[idx], H, W)],
        meta={"shape_index": idx, "limb_scale": spec.shapes[idx].limb_scale, "joints": gt.joints[idx].tolist()},
    )


# --------------------------------------------------------------------------
# joint decoding


def decode_joints(frame: np.ndarray, tol: float = 0.05) -> np.ndarray:
    """Exact decoder: centroid of pixels within ``tol`` (max-abs) of each joint colour.

    Returns (8, 2) (x, y); NaN rows for joints with no matching pixel.
    """
    out = np.full((len(JOINTS), 2), np.nan)
    for k, name in enumerate(JOINT_COLORS):
        hit = np.abs(frame - np.asarray(PALETTE[name])).max(-1) <= tol
        ys, xs = np.nonzero(hit)
        if xs.size:
            out[k] = xs.mean(), ys.mean()
    return out


def decode_joints_soft(frame: np.ndarray, background=BACKGROUND, min_cos: float = 0.8, min_mass: float = 0.5):
    """Blur-tolerant decoder for generated frames.

    Each pixel's deviation from the background is compared with each joint
    colour's deviation; pixels pointing the same way (cosine >= min_cos)
    vote with weight (cos - min_cos) * |deviation|.  Returns (8, 2) with NaN
    where total vote mass is below ``min_mass``.
    """
    bg = np.asarray(background, dtype=np.float64)
    dev = frame.astype(np.float64) - bg
    mag = np.linalg.norm(dev, axis=-1)
    unit = dev / np.maximum(mag, 1e-9)[..., None]
    H, W = mag.shape
    yy, xx = np.mgrid[0:H, 0:W]
    out = np.full((len(JOINTS), 2), np.nan)
    for k, name in enumerate(JOINT_COLORS):
        ref = np.asarray(PALETTE[name]) - bg
        ref /= np.linalg.norm(ref)
        cos = unit @ ref
        w = np.clip(cos - min_cos, 0, None) * mag
        mass = w.sum()
        if mass >= min_mass:
            out[k] = (w * xx).sum() / mass, (w * yy).sum() / mass
    return out


# --------------------------------------------------------------------------
# corpus


@dataclass
class CorpusConfig:
    train_samples: int = 256
    eval_samples: int = 32
    frames: int = 16
    height: int = 64
    width: int = 64
    mixture: dict = field(default_factory=lambda: {t: 1.0 for t in TASKS})
    max_expand: int = 4
    max_speed: float = 1.5
    min_shapes: int = 2
    max_shapes: int = 3
    seed: int = 0
    png_frames: bool = False

    def weights(self) -> np.ndarray:
        unknown = set(self.mixture) - set(TASKS)
        if unknown:
            raise TaskError(f"unknown tasks in mixture: {sorted(unknown)}")
        w = np.array([float(self.mixture.get(t, 0.0)) for t in TASKS])
        if (w < 0).any() or w.sum() <= 0:
            raise TaskError("mixture weights must be non-negative with a positive sum")
        return w / w.sum()


def sample_seed(corpus_seed: int, split: str, index: int) -> int:
    digest = hashlib.sha256(f"{corpus_seed}:{split}:{index}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def make_sample(task: str, seed: int, cfg: CorpusConfig, sample_id: str = "") -> TaskSample:
    """One task sample as a pure function of (task, seed, cfg)."""
    rng = np.random.default_rng(seed)
    H, W, T = cfg.height, cfg.width, cfg.frames
    if task == "pose_drive":
        spec = SceneSpec(H, W, T, [random_figure(rng, H, W, T)], seed=seed)
        return build_pose_drive(spec, sample_id)
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    spec = random_scene(rng, H, W, T, n_shapes=n, max_speed=cfg.max_speed, seed=seed)
    if task == "inpaint":
        return build_inpaint(spec, rng, cfg.max_expand, sample_id)
    if task == "outpaint":
        clip, _ = gen_clip(spec)
        prompt = PromptTriple("extend the video beyond the cropped region", describe(spec))
        return build_outpaint(clip, rng, sample_id=sample_id, prompt=prompt)
    if task == "mask_edit":
        return build_mask_edit(spec, rng, cfg.max_expand, sample_id=sample_id)
    if task == "addition":
        return build_addition_pair(spec, rng, sample_id)
    raise TaskError(f"unknown task {task!r}")


def plan_corpus(cfg: CorpusConfig) -> list[dict]:
    """(id, split, task, seed) records for the whole corpus."""
    weights = cfg.weights()
    plan = []
    for split, count in (("train", cfg.train_samples), ("eval", cfg.eval_samples)):
        for i in range(count):
            seed = sample_seed(cfg.seed, split, i)
            task = TASKS[int(np.random.default_rng(seed).choice(len(TASKS), p=weights))]
            plan.append({"id": f"{split}-{i:05d}", "split": split, "task": task, "seed": seed})
    return plan


_CLIP_FIELDS = ("source", "target", "masked_source", "pose_video")


def write_sample(root: Path, sample: TaskSample, record: dict, png_frames: bool = False) -> dict:
    sdir = Path(root) / "samples" / sample.sample_id
    paths = {}
    for name in _CLIP_FIELDS:
        arr = getattr(sample, name)
        if arr is None:
            continue
        if name == "source" and arr is sample.target:
            continue
        write_tensor(sdir / f"{name}.vft", arr.astype(np.float16))
        paths[name] = str(Path("samples") / sample.sample_id / f"{name}.vft")
    if sample.mask is not None:
        write_tensor(sdir / "mask.vft", sample.mask[..., None].astype(np.uint8))
        paths["mask"] = str(Path("samples") / sample.sample_id / "mask.vft")
    for r, ref in enumerate(sample.references):
        write_tensor(sdir / f"reference_{r}.vft", ref[None].astype(np.float16))
        paths[f"reference_{r}"] = str(Path("samples") / sample.sample_id / f"reference_{r}.vft")
    if png_frames:
        save_frame_grid(sdir / "target.png", sample.target)
    return {
        **record,
        "paths": paths,
        "instruction": sample.prompt.instruction,
        "prompt": sample.prompt.text_prompt,
        "image_text": sample.prompt.image_text,
        "num_references": len(sample.references),
        "meta": sample.meta,
    }


def load_sample(root: str | Path, record: dict) -> TaskSample:
    root = Path(root)
    p = record["paths"]

    def clip(name):
        return read_tensor(root / p[name]).astype(np.float32) if name in p else None

    target = clip("target")
    source = clip("source")
    refs = [read_tensor(root / p[f"reference_{r}"])[0].astype(np.float32) for r in range(record["num_references"])]
    mask = read_tensor(root / p["mask"])[..., 0].astype(bool) if "mask" in p else None
    return TaskSample(
        record["id"],
        record["task"],
        source=target if source is None else source,
        target=target,
        prompt=PromptTriple(
            record["instruction"],
            record["prompt"],
            image_slot="reference_0" if refs else None,
            image_text=record.get("image_text", ""),
        ),
        masked_source=clip("masked_source"),
        mask=mask,
        pose_video=clip("pose_video"),
        references=refs,
        meta=record.get("meta", {}),
    )


def write_corpus(root: str | Path, cfg: CorpusConfig) -> list[dict]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for rec in plan_corpus(cfg):
        sample = make_sample(rec["task"], rec["seed"], cfg, rec["id"])
        manifest.append(write_sample(root, sample, rec, cfg.png_frames))
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in manifest:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (root / "corpus.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    return manifest


def read_manifest(root: str | Path) -> list[dict]:
    with open(Path(root) / "manifest.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_frame_grid(path: str | Path, clip: np.ndarray, cols: int = 8):
    from PIL import Image

    T, H, W, _ = clip.shape
    rows = math.ceil(T / cols)
    grid = np.zeros((rows * H, cols * W, 3), dtype=np.float32)
    for t in range(T):
        r, c = divmod(t, cols)
        grid[r * H : (r + 1) * H, c * W : (c + 1) * W] = clip[t]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(grid, 0, 1) * 255).round().astype(np.uint8)).save(path)
