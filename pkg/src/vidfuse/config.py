"""Run configuration: one file with a section per component, strict about unknown keys.

Precedence: command-line flags > config file > built-in defaults.  The
top-level ``seed`` is the single seed knob; it is copied into the corpus,
train, sampler and ablation sections when the config is resolved.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from . import __version__
from .ablation import AblationConfig
from .codec import CodecConfig
from .flow import SamplerConfig
from .model import ModelConfig
from .synth import CorpusConfig
from .train import TrainConfig

OUT_ENV = "VIDFUSE_OUT"
DEFAULT_OUT = "runs"


class ConfigError(ValueError):
    pass


@dataclass
class MetricConfig:
    split: str = "eval"
    max_samples: int = 32
    thresholds: dict = field(default_factory=lambda: {"region_psnr": {"min": 25.0}})


SECTIONS = {
    "codec": CodecConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "corpus": CorpusConfig,
    "metrics": MetricConfig,
    "ablation": AblationConfig,
}
SEEDED = ("train", "sampler", "corpus", "ablation")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = ""
    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def resolve(self, seed: int | None = None, out_dir: str | None = None) -> "RunConfig":
        """Apply flag overrides, propagate the seed and fill the output root."""
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if out_dir is not None:
            d["out_dir"] = out_dir
        if not d["out_dir"]:
            d["out_dir"] = os.environ.get(OUT_ENV, DEFAULT_OUT)
        for sec in SEEDED:
            d[sec]["seed"] = d["seed"]
        return RunConfig.from_dict(d, allow_section_seeds=True)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = _plain(v.to_dict() if isinstance(v, ModelConfig) else asdict(v) if is_dataclass(v) else v)
        return out

    @classmethod
    def from_dict(cls, d: dict, allow_section_seeds: bool = False) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level config keys {sorted(unknown)}")
        kwargs = {k: d[k] for k in ("seed", "out_dir") if k in d}
        for name, typ in SECTIONS.items():
            sec = d.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            known = {f.name for f in fields(typ)}
            bad = set(sec) - known
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            if name in SEEDED and "seed" in sec and not allow_section_seeds:
                raise ConfigError(f"section {name!r} sets its own seed; use the top-level seed")
            try:
                kwargs[name] = typ(**sec)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"section {name!r}: {e}") from e
        return cls(**kwargs)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return RunConfig.from_dict(data or {})


def source_fingerprint() -> str:
    """Hash of the package sources, so outputs can be traced to the exact code."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def write_resolved(cfg: RunConfig, directory: str | Path, command: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "version": __version__,
        "source": source_fingerprint(),
        "config_hash": cfg.fingerprint(),
        "config": cfg.to_dict(),
    }
    path = directory / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(record, sort_keys=True))
    return path
