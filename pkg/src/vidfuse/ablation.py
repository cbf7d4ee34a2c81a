"""Ablation runner: train matched arms that differ in one component and compare their metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch

from . import codec
from .experiments import edit_samples, pose_samples
from .flow import SamplerConfig
from .metrics import METRICS, EvalReport, evaluate
from .model import ModelConfig, VideoDiT
from .synth import CorpusConfig, TaskSample
from .train import TrainConfig, encode_sample, generate_clips, load_model, train_loop

log = logging.getLogger(__name__)

# suite -> (section, field, arm values); the first arm is the reference for deltas
SUITES = {
    "posenet_variants": ("model", "injection_variant", ("fusion", "token_add", "controlnet")),
    "token_fusion_fc": ("model", "fusion_fc", (True, False)),
    "instruction_segments": ("train", "drop_instruction", (False, True)),
    "rope_shift": ("model", "ref_shift", (True, False)),
}


# posenet arms all memorise a handful of training motions down to the codec floor, so they are
# compared on unseen motions of the training figure instead
DEFAULT_HOLDOUT = {"posenet_variants": 8}
POSE_TRAIN = 24


class AblationError(ValueError):
    pass


class ConfigDriftError(AblationError):
    pass


@dataclass
class AblationConfig:
    suite: str = "posenet_variants"
    steps: int = 600
    batch_size: int = 8
    lr: float = 5e-4
    seed: int = 0
    data_seed: int = 0
    sampler_steps: int = 10
    model: dict = field(default_factory=dict)  # ModelConfig overrides shared by all arms
    arms: Optional[list] = None  # override the suite's arm values
    holdout: Optional[int] = None  # samples kept out of training for evaluation; None = suite default

    def __post_init__(self):
        if self.suite not in SUITES:
            raise AblationError(f"unknown suite {self.suite!r}; choose from {sorted(SUITES)}")
        if self.holdout is not None and self.holdout < 0:
            raise AblationError("holdout must be >= 0")

    @property
    def eval_holdout(self) -> int:
        return DEFAULT_HOLDOUT.get(self.suite, 0) if self.holdout is None else self.holdout


@dataclass
class Arm:
    name: str
    model: ModelConfig
    train: TrainConfig

    def fingerprint(self) -> dict:
        return {"model": self.model.to_dict(), "train": asdict(self.train)}


@dataclass
class AblationResult:
    suite: str
    reports: dict[str, EvalReport]
    losses: dict[str, list]

    def aggregates(self) -> dict[str, dict]:
        return {arm: rep.aggregate() for arm, rep in self.reports.items()}

    def deltas(self) -> dict[str, dict]:
        """Per metric, each arm's aggregate minus the first arm's."""
        aggs = self.aggregates()
        base_name = next(iter(aggs))
        out = {}
        for m in (*METRICS, "copy_paste"):
            base = aggs[base_name][m]
            out[m] = {
                arm: (None if base is None or a[m] is None else a[m] - base) for arm, a in aggs.items() if arm != base_name
            }
        return out

    def summary(self) -> dict:
        return {"suite": self.suite, "aggregates": self.aggregates(), "deltas": self.deltas()}


def arm_name(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


def build_arms(cfg: AblationConfig) -> list[Arm]:
    section, key, values = SUITES[cfg.suite]
    values = tuple(cfg.arms) if cfg.arms is not None else values
    arms = []
    for v in values:
        m = dict(cfg.model)
        t = dict(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed,
                 p_mask=0.0, p_pose=0.0, p_reference=0.0, p_text=0.0, checkpoint_every=max(cfg.steps, 1))
        (m if section == "model" else t)[key] = v
        name = f"{key}={arm_name(v)}"
        taken = sum(a.name == name or a.name.startswith(name + "#") for a in arms)
        # repeated values (determinism smoke runs) get numbered names
        arms.append(Arm(name if not taken else f"{name}#{taken + 1}", ModelConfig(**m), TrainConfig(**t)))
    validate_arms(arms, section, key)
    return arms


def validate_arms(arms: list[Arm], section: str, key: str):
    """Arms may differ only in the ablated field."""
    ref = arms[0].fingerprint()
    ref[section].pop(key)
    for arm in arms[1:]:
        fp = arm.fingerprint()
        fp[section].pop(key)
        for sec in ("model", "train"):
            drift = sorted(k for k in ref[sec] if ref[sec][k] != fp[sec].get(k))
            if drift:
                raise ConfigDriftError(f"arm {arm.name} differs from {arms[0].name} in {sec}.{drift}")


def suite_samples(suite: str, seed: int = 0, corpus: CorpusConfig = CorpusConfig(), holdout: int = 0) -> list[TaskSample]:
    """The shared sample set of a suite; the last ``holdout`` entries are for evaluation only."""
    if suite == "posenet_variants":
        return pose_samples((POSE_TRAIN if holdout else 6) + holdout, seed, corpus)
    if suite == "rope_shift":
        # every sample carries a reference image
        return edit_samples(0, 3, 3, seed, corpus) + pose_samples(2, seed, corpus)
    return edit_samples(2, 2, 2, seed, corpus) + pose_samples(2, seed, corpus)


def run_ablation(
    cfg: AblationConfig,
    out_dir: str | Path | None = None,
    samples: list[TaskSample] | None = None,
    checkpoints: dict[str, str] | None = None,
    codec_cfg: codec.CodecConfig = codec.CodecConfig(),
    eval_samples: list[TaskSample] | None = None,
    corpus: CorpusConfig = CorpusConfig(),
) -> AblationResult:
    """Train (or load) every arm on the same samples, sample them with the same seed, and evaluate.

    Evaluation uses ``eval_samples`` when given, else the training samples.
    Without explicit samples the suite's set is built and its holdout split
    off for evaluation.  ``checkpoints`` maps arm names to trained weights and
    skips training for those arms; every arm must be covered when it is given.
    """
    arms = build_arms(cfg)
    if samples is None:
        k = cfg.eval_holdout
        samples = suite_samples(cfg.suite, cfg.data_seed, corpus, holdout=k)
        if k:
            samples, eval_samples = samples[:-k], samples[-k:]
    eval_samples = eval_samples if eval_samples is not None else samples
    data = [encode_sample(s, codec_cfg) for s in samples]
    eval_data = data if eval_samples is samples else [encode_sample(s, codec_cfg) for s in eval_samples]
    sampler = SamplerConfig(cfg.sampler_steps, cfg.seed)
    reports, losses = {}, {}
    for arm in arms:
        arm_dir = None if out_dir is None else Path(out_dir) / arm.name
        if checkpoints is not None:
            if arm.name not in checkpoints:
                raise AblationError(f"no checkpoint given for arm {arm.name}")
            model, _ = load_model(checkpoints[arm.name], expect=arm.model)
            losses[arm.name] = []
        else:
            torch.manual_seed(cfg.seed)
            model = VideoDiT(arm.model)
            res = train_loop(data, model, arm.train, arm_dir, resume=False)
            losses[arm.name] = res.losses
        clips = generate_clips(model, eval_data, codec_cfg, sampler, drop_instruction=arm.train.drop_instruction)
        meta = {"arm": arm.name, "eval_ids": [s.sample_id for s in eval_samples], **arm.fingerprint()}
        reports[arm.name] = evaluate(eval_samples, clips, meta=meta)
        log.info("arm %s: %s", arm.name, reports[arm.name].aggregate())
        if arm_dir is not None:
            reports[arm.name].write_jsonl(arm_dir / "report.jsonl")
    result = AblationResult(cfg.suite, reports, losses)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True))
    return result
