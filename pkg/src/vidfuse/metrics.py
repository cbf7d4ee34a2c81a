"""Clip-level metrics with a pluggable image embedder, and the evaluation report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .synth import BACKGROUND, PALETTE, TaskSample, decode_joints, decode_joints_soft

PSNR_CAP = 99.0
METRICS = ("temporal_consistency", "dynamic_degree", "region_psnr", "object_similarity", "pose_error")


class MetricError(ValueError):
    pass


class Embedder(Protocol):
    def __call__(self, image: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class PatchColorEmbedder:
    """Grid of per-cell mean colours, centred at mid-gray and scaled to unit norm.

    A uniformly mid-gray image has no direction; it maps to the first basis vector.
    """

    grid: int = 4
    center: float = 0.5

    def __call__(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3:
            raise MetricError(f"expected (H, W, C) image, got {image.shape}")
        H, W, C = image.shape
        rows = np.array_split(np.arange(H), min(self.grid, H))
        cols = np.array_split(np.arange(W), min(self.grid, W))
        feats = np.zeros((self.grid, self.grid, C))
        for a, r in enumerate(rows):
            for b, c in enumerate(cols):
                feats[a, b] = image[r[0] : r[-1] + 1, c[0] : c[-1] + 1].reshape(-1, C).mean(0) - self.center
        v = feats.reshape(-1)
        n = np.linalg.norm(v)
        if n < 1e-12:
            out = np.zeros_like(v)
            out[0] = 1.0
            return out
        return v / n


DEFAULT_EMBEDDER = PatchColorEmbedder()


def _frames(clip) -> np.ndarray:
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4:
        raise MetricError(f"expected (T, H, W, C) clip, got {clip.shape}")
    if clip.shape[0] < 2:
        raise MetricError("metric needs at least two frames")
    return clip


def temporal_consistency(clip: np.ndarray, embedder: Embedder = DEFAULT_EMBEDDER) -> float:
    """Mean over frames k >= 1 of the average of cos(f_k, f_k-1) and cos(f_k, f_0)."""
    clip = _frames(clip)
    e = np.stack([embedder(f) for f in clip])
    adj = (e[1:] * e[:-1]).sum(-1)
    first = (e[1:] * e[0]).sum(-1)
    return float(np.mean(0.5 * (adj + first)))


def dynamic_degree(clip: np.ndarray, region: Optional[np.ndarray] = None, value_range: float = 1.0) -> float:
    """Mean absolute frame-to-frame change, averaged over frame pairs, as a fraction of the value range.

    With ``region`` (T, H, W) only pixels inside the region in either frame of a pair count.
    """
    clip = _frames(clip)
    diff = np.abs(np.diff(clip, axis=0)).mean(-1)  # (T-1, H, W)
    if region is None:
        return float(diff.mean() / value_range)
    region = np.asarray(region, dtype=bool)
    sel = region[1:] | region[:-1]
    if not sel.any():
        raise MetricError("dynamic_degree region is empty")
    return float(diff[sel].mean() / value_range)


def region_psnr(generated, source, mask, region: str = "outside", peak: float = 1.0) -> float:
    """PSNR over the pixels inside or outside ``mask`` (T, H, W), across all frames; capped at 99 dB."""
    generated = np.asarray(generated, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if generated.shape != source.shape:
        raise MetricError(f"shape mismatch {generated.shape} vs {source.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != generated.shape[:-1]:
        raise MetricError(f"mask {mask.shape} does not match clip {generated.shape}")
    if region not in ("inside", "outside"):
        raise MetricError(f"region must be 'inside' or 'outside', got {region!r}")
    sel = mask if region == "inside" else ~mask
    if not sel.any():
        raise MetricError(f"{region}-mask region is empty")
    mse = float(((generated - source) ** 2)[sel].mean())
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * math.log10(peak**2 / mse)))


# --------------------------------------------------------------------------
# object similarity


def color_region(clip: np.ndarray, color, tol: float = 0.25) -> np.ndarray:
    """(T, H, W) pixels within ``tol`` (max-abs per channel) of ``color``."""
    rgb = np.asarray(PALETTE[color] if isinstance(color, str) else color)
    return np.abs(np.asarray(clip) - rgb).max(-1) <= tol


def _crop(image, region, size: int = 16):
    rows = np.flatnonzero(region.any(1))
    cols = np.flatnonzero(region.any(0))
    crop = image[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    r = (np.arange(size) * crop.shape[0] / size).astype(int)
    c = (np.arange(size) * crop.shape[1] / size).astype(int)
    return crop[r][:, c]


@dataclass
class ObjectSimilarity:
    score: Optional[float]
    detected_frames: int
    total_frames: int

    @property
    def missing(self) -> bool:
        return self.score is None


def object_similarity(
    reference: np.ndarray,
    clip: np.ndarray,
    regions: Optional[np.ndarray] = None,
    color=None,
    embedder: Embedder = DEFAULT_EMBEDDER,
    background=BACKGROUND,
) -> ObjectSimilarity:
    """Mean cosine between the reference object crop and the per-frame detected crops.

    Regions come from ``regions`` or from colour segmentation with ``color``.
    The reference object is its non-background pixels.  Frames without a
    detection are skipped; fewer than half detected reports a missing score.
    """
    clip = np.asarray(clip, dtype=np.float64)
    if regions is None:
        if color is None:
            raise MetricError("object_similarity needs regions or a colour to detect")
        regions = color_region(clip, color)
    regions = np.asarray(regions, dtype=bool)
    ref_region = np.abs(np.asarray(reference) - np.asarray(background)).max(-1) > 1e-6
    if not ref_region.any():
        raise MetricError("reference image has no object pixels")
    ref_emb = embedder(_crop(np.asarray(reference, dtype=np.float64), ref_region))
    sims = [float(embedder(_crop(f, r)) @ ref_emb) for f, r in zip(clip, regions) if r.any()]
    T = clip.shape[0]
    if len(sims) * 2 < T:
        return ObjectSimilarity(None, len(sims), T)
    return ObjectSimilarity(float(np.mean(sims)), len(sims), T)


# --------------------------------------------------------------------------
# pose


@dataclass
class PoseError:
    value: Optional[float]  # mean px over decodable joints
    missing: int
    total: int


def pose_error(generated: np.ndarray, pose_video: np.ndarray, background=BACKGROUND) -> PoseError:
    """Mean distance between joints decoded from ``generated`` and from the conditioning pose video."""
    generated = np.asarray(generated)
    pose_video = np.asarray(pose_video)
    if generated.shape[0] != pose_video.shape[0]:
        raise MetricError("generated clip and pose video differ in frame count")
    dists = []
    missing = total = 0
    for g, p in zip(generated, pose_video):
        want = decode_joints(p)
        got = decode_joints_soft(g, background)
        ok = ~np.isnan(want[:, 0]) & ~np.isnan(got[:, 0])
        total += len(want)
        missing += int((~ok).sum())
        dists.extend(np.linalg.norm(got[ok] - want[ok], axis=1).tolist())
    return PoseError(float(np.mean(dists)) if dists else None, missing, total)


# --------------------------------------------------------------------------
# copy-paste


def copy_paste_score(reference: np.ndarray, frame: np.ndarray, motion_region: np.ndarray) -> Optional[float]:
    """Pearson correlation between reference and frame over pixels outside ``motion_region`` (H, W).

    A model that pastes the reference image into the video scores high;
    None when either side is constant on the region.
    """
    sel = ~np.asarray(motion_region, dtype=bool)
    a = np.asarray(reference, dtype=np.float64)[sel].reshape(-1)
    b = np.asarray(frame, dtype=np.float64)[sel].reshape(-1)
    if a.size < 2 or a.std() < 1e-9 or b.std() < 1e-9:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def motion_region(sample: TaskSample) -> np.ndarray:
    """(H, W) pixels that ever differ from the background in the target clip."""
    tgt = np.asarray(sample.target)
    return (np.abs(tgt - np.asarray(BACKGROUND)).max(-1) > 0).any(0)


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    samples: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        out = {}
        for name in (*METRICS, "copy_paste"):
            vals = [s[name] for s in self.samples if s.get(name) is not None]
            out[name] = float(np.mean(vals)) if vals else None
        return out

    def write_jsonl(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "meta", **self.meta}, sort_keys=True) + "\n")
            for s in self.samples:
                fh.write(json.dumps({"kind": "sample", **s}, sort_keys=True) + "\n")
            fh.write(json.dumps({"kind": "aggregate", **self.aggregate()}, sort_keys=True) + "\n")

    def table(self) -> str:
        cols = ["id", "task", *METRICS]
        rows = [cols]
        for s in self.samples:
            rows.append([str(s.get("id", "")), str(s.get("task", ""))] + [_fmt(s.get(m)) for m in METRICS])
        agg = self.aggregate()
        rows.append(["mean", ""] + [_fmt(agg[m]) for m in METRICS])
        widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows)


def _fmt(v):
    return "-" if v is None else f"{v:.4f}"


def evaluate_sample(sample: TaskSample, generated: np.ndarray, embedder: Embedder = DEFAULT_EMBEDDER) -> dict:
    """All metrics that apply to the sample's task; the rest are None."""
    rec = {
        "id": sample.sample_id,
        "task": sample.task,
        "temporal_consistency": temporal_consistency(generated, embedder),
        "dynamic_degree": dynamic_degree(generated),
        "region_psnr": None,
        "region_psnr_inside": None,
        "object_similarity": None,
        "pose_error": None,
        "copy_paste": None,
    }
    # preservation only means something when the mask marks an edit region (additions carry an empty one)
    if sample.mask is not None and sample.mask.any() and (~sample.mask).any():
        rec["region_psnr"] = region_psnr(generated, sample.source, sample.mask, "outside")
        rec["region_psnr_inside"] = region_psnr(generated, sample.target, sample.mask, "inside")
        rec["dynamic_degree_inside"] = dynamic_degree(generated, sample.mask)
    color = sample.meta.get("color")
    if sample.references and color is not None and sample.task in ("mask_edit", "addition"):
        sim = object_similarity(sample.references[0], generated, color=color, embedder=embedder)
        rec["object_similarity"] = sim.score
        rec["object_detected_frames"] = sim.detected_frames
    if sample.pose_video is not None:
        pe = pose_error(generated, sample.pose_video)
        rec["pose_error"] = pe.value
        rec["pose_missing"] = pe.missing
    if sample.references:
        rec["copy_paste"] = copy_paste_score(sample.references[0], generated[0], motion_region(sample))
    return rec


def evaluate(samples: list[TaskSample], generated: np.ndarray, embedder: Embedder = DEFAULT_EMBEDDER, meta=None) -> EvalReport:
    if len(samples) != len(generated):
        raise MetricError(f"{len(samples)} samples but {len(generated)} generated clips")
    return EvalReport([evaluate_sample(s, g, embedder) for s, g in zip(samples, generated)], dict(meta or {}))


def check_thresholds(report: EvalReport, thresholds: dict) -> list[str]:
    """Failures for thresholds like {"region_psnr": {"min": 25}, "pose_error": {"max": 3}} on aggregates."""
    agg = report.aggregate()
    failures = []
    for name, bound in thresholds.items():
        if name not in agg:
            raise MetricError(f"unknown metric in thresholds: {name}")
        v = agg[name]
        if v is None:
            failures.append(f"{name}: no value")
            continue
        if "min" in bound and v < bound["min"]:
            failures.append(f"{name}={v:.4f} < {bound['min']}")
        if "max" in bound and v > bound["max"]:
            failures.append(f"{name}={v:.4f} > {bound['max']}")
    return failures
