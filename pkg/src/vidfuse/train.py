"""Training loop, batching of task samples into latent conditioning, checkpoints and sampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from . import codec
from .flow import SamplerConfig, euler_sample, flow_loss, make_training_sample
from .fusion import ConditionSet, DropoutPolicy, route
from .model import CondBatch, ModelConfig, VideoDiT
from .synth import TaskSample
from .text import TextTokenSequence, build_prompt, collate_text, image_prompt_features

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    min_lr_ratio: float = 0.1  # cosine floor as a fraction of lr
    warmup_steps: int = 0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    t_loc: float = 0.0
    t_scale: float = 1.0
    log_every: int = 1
    checkpoint_every: int = 500
    seed: int = 0
    p_mask: float = 0.1
    p_pose: float = 0.3
    p_reference: float = 0.3
    p_text: float = 0.1
    drop_instruction: bool = False
    drop_image_prompt: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 0 or self.batch_size < 1:
            raise TrainingError("steps must be >= 0 and batch_size >= 1")

    @property
    def policy(self) -> DropoutPolicy:
        return DropoutPolicy(self.p_mask, self.p_pose, self.p_reference, self.p_text)

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(self.steps - self.warmup_steps, 1)
        prog = min((step - self.warmup_steps) / span, 1.0)
        floor = self.lr * self.min_lr_ratio
        return floor + (self.lr - floor) * 0.5 * (1 + math.cos(math.pi * prog))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise TrainingError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# data


@dataclass
class EncodedSample:
    """A task sample with every clip pushed through the codec (float32 tensors)."""

    sample_id: str
    task: str
    z1: torch.Tensor  # (T', H', W', 16)
    prompt: object
    conds: ConditionSet
    masked_source: Optional[torch.Tensor] = None
    mask_video: Optional[torch.Tensor] = None
    pose: Optional[torch.Tensor] = None
    references: list = field(default_factory=list)  # each (1, H', W', 16)
    image_feats: Optional[np.ndarray] = None


def _enc(clip, cfg) -> torch.Tensor:
    return torch.from_numpy(codec.encode(clip, cfg).data)


def encode_sample(sample: TaskSample, cfg: codec.CodecConfig) -> EncodedSample:
    conds = sample.conditions()
    refs = [torch.from_numpy(codec.encode_image(r, cfg).data) for r in sample.references]
    return EncodedSample(
        sample.sample_id,
        sample.task,
        z1=_enc(sample.target, cfg),
        prompt=sample.prompt,
        conds=conds,
        masked_source=None if sample.masked_source is None else _enc(sample.masked_source, cfg),
        mask_video=None if sample.mask is None else _enc(sample.mask_video, cfg),
        pose=None if sample.pose_video is None else _enc(sample.pose_video, cfg),
        references=refs,
        image_feats=image_prompt_features(sample.references[0]) if sample.references else None,
    )


def _stack_optional(items, present, like):
    if all(x is None for x in items):
        return None, None
    out = torch.stack([torch.zeros_like(like) if x is None else x for x in items])
    flags = torch.tensor([bool(p) and x is not None for x, p in zip(items, present)])
    return out, flags


def collate(
    samples: list[EncodedSample],
    presence: list[dict] | None = None,
    drop_instruction: bool = False,
    drop_image_prompt: bool = False,
) -> tuple[torch.Tensor, CondBatch]:
    """Stack z1 and build the CondBatch; ``presence`` overrides each sample's stream flags."""
    if presence is None:
        presence = [s.conds.presence() for s in samples]
    like = samples[0].z1
    z1 = torch.stack([s.z1 for s in samples])
    seqs: list[TextTokenSequence] = [
        build_prompt(s.prompt, drop_instruction=drop_instruction, drop_image_prompt=drop_image_prompt) for s in samples
    ]
    feats = [s.image_feats if s.prompt.image_slot is not None else None for s in samples]
    text_ids, image_feats, text_valid = collate_text(seqs, feats)
    ms, mask_present = _stack_optional([s.masked_source for s in samples], [p["mask"] for p in presence], like)
    mv, _ = _stack_optional([s.mask_video for s in samples], [p["mask"] for p in presence], like)
    pose, pose_present = _stack_optional([s.pose for s in samples], [p["pose"] for p in presence], like)
    R = max(len(s.references) for s in samples)
    refs = ref_present = None
    if R:
        ref_like = next(r for s in samples for r in s.references)
        refs = torch.zeros(len(samples), R, *ref_like.shape)
        ref_present = torch.zeros(len(samples), R, dtype=torch.bool)
        for b, (s, p) in enumerate(zip(samples, presence)):
            for r, ref in enumerate(s.references):
                refs[b, r] = ref
                ref_present[b, r] = bool(p["reference"])
    cond = CondBatch(
        text_ids=text_ids,
        text_valid=text_valid,
        text_present=torch.tensor([bool(p["text"]) for p in presence]),
        image_feats=image_feats,
        masked_source=ms,
        mask_video=mv,
        mask_present=mask_present,
        pose=pose,
        pose_present=pose_present,
        references=refs,
        reference_present=ref_present,
    )
    return z1, cond


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, step, 1]).generate_state(1)[0]))


def draw_batch(n_items: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Batch indices: a permutation when the dataset fits in one batch, else without-replacement draw."""
    if n_items <= batch_size:
        return np.concatenate([rng.permutation(n_items), rng.integers(0, n_items, batch_size - n_items)])
    return rng.choice(n_items, size=batch_size, replace=False)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory: str | Path, step: int, model: VideoDiT, optimizer=None, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"ckpt_{step:06d}.safetensors"
    meta = {
        "version": str(CHECKPOINT_VERSION),
        "step": str(step),
        "model_config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    state = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    save_file(state, str(path), metadata=meta)
    if optimizer is not None:
        torch.save({"optimizer": optimizer.state_dict(), "step": step}, path.with_suffix(".opt.pt"))
    return path


def read_checkpoint_meta(path: str | Path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), "pt") as fh:
        meta = fh.metadata() or {}
    if int(meta.get("version", -1)) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    return {
        "step": int(meta["step"]),
        "model_config": json.loads(meta["model_config"]),
        "extra": json.loads(meta.get("extra", "{}")),
    }


def load_model(path: str | Path, expect: ModelConfig | None = None) -> tuple[VideoDiT, dict]:
    meta = read_checkpoint_meta(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    if expect is not None and cfg.to_dict() != expect.to_dict():
        diff = sorted(k for k, v in expect.to_dict().items() if cfg.to_dict().get(k) != v)
        raise CheckpointError(f"{path}: checkpoint model config differs from the requested one in {diff}")
    model = VideoDiT(cfg)
    state = load_file(str(path))
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"{path}: state keys mismatch: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    return model, meta


def latest_checkpoint(directory: str | Path) -> Optional[Path]:
    paths = sorted(Path(directory).glob("ckpt_*.safetensors"))
    return paths[-1] if paths else None


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    losses: list[float]
    steps_run: int
    checkpoints: list[Path]
    model: VideoDiT


def make_optimizer(model: VideoDiT, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def train_step(model, optimizer, data: list[EncodedSample], cfg: TrainConfig, step: int) -> float:
    rng = step_rng(cfg.seed, step)
    idx = draw_batch(len(data), cfg.batch_size, rng)
    batch = [data[i] for i in idx]
    presence = [route(s.conds, rng, cfg.policy).presence() for s in batch]
    z1, cond = collate(batch, presence, cfg.drop_instruction, cfg.drop_image_prompt)
    fs = make_training_sample(z1, step_generator(cfg.seed, step), loc=cfg.t_loc, scale=cfg.t_scale)
    for g in optimizer.param_groups:
        g["lr"] = cfg.lr_at(step)
    model.train()
    v = model(fs.z_t, fs.t, cond)
    loss = flow_loss(v, fs.u_t)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at step {step} (seed {cfg.seed}, batch {idx.tolist()})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return float(loss.item())


def train_loop(
    data: list[EncodedSample],
    model: VideoDiT,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: bool = True,
    callback=None,
) -> TrainResult:
    """Train for ``cfg.steps`` steps; every random draw is keyed by (seed, step).

    With ``out_dir``, losses go to loss.jsonl and checkpoints to ckpt_*.safetensors.
    When resuming, the latest checkpoint's weights and optimizer state are
    loaded and the log is truncated to the steps before it, so a resumed run
    continues exactly like an uninterrupted one.  ``callback(step, model)`` is
    called before each step and after the last.
    """
    if not data:
        raise TrainingError("empty training set")
    torch.manual_seed(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    start = 0
    losses: list[float] = []
    ckpts: list[Path] = []
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss.jsonl"
        last = latest_checkpoint(out_dir) if resume else None
        if last is not None:
            start = _restore(last, model, optimizer)
            records = _read_log(log_path)
            losses = [r["loss"] for r in records if r["step"] < start]
            _write_log(log_path, [r for r in records if r["step"] < start])
            log.info("resumed from %s at step %d", last, start)
        elif log_path.exists():
            log_path.unlink()
    for step in range(start, cfg.steps):
        if callback is not None:
            callback(step, model)
        if out_dir is not None and step % cfg.checkpoint_every == 0 and (step > start or start == 0):
            ckpts.append(save_checkpoint(out_dir, step, model, optimizer, {"seed": cfg.seed}))
        loss = train_step(model, optimizer, data, cfg, step)
        losses.append(loss)
        if log_path is not None and step % cfg.log_every == 0:
            with open(log_path, "a") as fh:
                fh.write(json.dumps({"step": step, "loss": loss, "lr": cfg.lr_at(step), "seed": cfg.seed}) + "\n")
    if callback is not None:
        callback(cfg.steps, model)
    if out_dir is not None:
        ckpts.append(save_checkpoint(out_dir, cfg.steps, model, optimizer, {"seed": cfg.seed}))
    return TrainResult(losses, cfg.steps - start, ckpts, model)


def _restore(path: Path, model: VideoDiT, optimizer) -> int:
    meta = read_checkpoint_meta(path)
    if meta["model_config"] != model.cfg.to_dict():
        raise CheckpointError(f"{path}: model config does not match the run's config")
    model.load_state_dict(load_file(str(path)))
    opt_path = path.with_suffix(".opt.pt")
    if not opt_path.exists():
        raise CheckpointError(f"{opt_path} missing; cannot resume optimizer state")
    optimizer.load_state_dict(torch.load(opt_path, weights_only=False)["optimizer"])
    return meta["step"]


def _read_log(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_log(path: Path, records: list[dict]):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


# --------------------------------------------------------------------------
# sampling


@torch.no_grad()
def generate(model: VideoDiT, cond: CondBatch, latent_shape: tuple, sampler: SamplerConfig = SamplerConfig()) -> torch.Tensor:
    """Euler-integrate the model's velocity field from seeded noise; returns (B, T', H', W', 16)."""
    model.eval()
    shape = (cond.batch_size, *latent_shape)
    return euler_sample(lambda z, t: model(z, t, cond), shape, sampler)


def generate_clips(
    model: VideoDiT,
    samples: list[EncodedSample],
    codec_cfg: codec.CodecConfig,
    sampler: SamplerConfig = SamplerConfig(),
    presence: list[dict] | None = None,
    drop_instruction: bool = False,
    drop_image_prompt: bool = False,
) -> np.ndarray:
    """Decoded pixel clips (B, T, H, W, 3) for the given samples."""
    z1, cond = collate(samples, presence, drop_instruction, drop_image_prompt)
    z = generate(model, cond, tuple(z1.shape[1:]), sampler)
    return np.stack([codec.decode(zi.numpy(), codec_cfg) for zi in z])


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
