"""Command line: gen-data | train | sample | eval | ablate."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from .ablation import SUITES, AblationConfig, build_arms, run_ablation
from .config import ConfigError, RunConfig, load_config, write_resolved
from .metrics import check_thresholds, evaluate
from .model import count_parameters, VideoDiT
from .synth import TASKS, load_sample, read_manifest, save_frame_grid, write_corpus
from .tensorio import write_tensor
from .train import (
    encode_sample,
    generate_clips,
    latest_checkpoint,
    load_model,
    train_loop,
)

log = logging.getLogger("vidfuse")


class CliError(RuntimeError):
    pass


def _paths(cfg: RunConfig, args) -> dict:
    root = Path(cfg.out_dir)
    return {
        "corpus": Path(getattr(args, "corpus", None) or root / "corpus"),
        "train": root / "train",
        "samples": root / "samples",
        "eval": root / "eval",
        "ablate": root / "ablate",
    }


def manifest_hash(root: Path) -> str:
    return hashlib.sha256((root / "manifest.jsonl").read_bytes()).hexdigest()


# --------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else _paths(cfg, args)["corpus"]
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty; pass --force to overwrite")
    if args.dry_run:
        print(f"would write {cfg.corpus.train_samples} train + {cfg.corpus.eval_samples} eval samples to {out}")
        return 0
    manifest = write_corpus(out, cfg.corpus)
    write_resolved(cfg, out, "gen-data")
    counts = Counter((r["split"], r["task"]) for r in manifest)
    for split in ("train", "eval"):
        print(split, " ".join(f"{t}={counts[(split, t)]}" for t in TASKS))
    print(f"manifest {manifest_hash(out)[:16]} -> {out}")
    return 0


def _check_corpus(cfg: RunConfig, corpus: Path):
    meta_path = corpus / "corpus.json"
    if not meta_path.exists():
        raise CliError(f"no corpus at {corpus}; run gen-data first")
    meta = json.loads(meta_path.read_text())
    for key in ("frames", "height", "width"):
        if meta[key] != getattr(cfg.corpus, key):
            raise CliError(f"corpus {key}={meta[key]} but config expects {getattr(cfg.corpus, key)}")


def _load_split(cfg: RunConfig, corpus: Path, split: str, ids=None, limit=None):
    records = [r for r in read_manifest(corpus) if r["split"] == split or (ids and r["id"] in ids)]
    if ids:
        by_id = {r["id"]: r for r in read_manifest(corpus)}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise CliError(f"ids {missing} not in manifest; available: {', '.join(sorted(by_id))}")
        records = [by_id[i] for i in ids]
    if limit:
        records = records[:limit]
    return [load_sample(corpus, r) for r in records]


def cmd_train(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args)
    out = Path(args.out) if args.out else paths["train"]
    torch.manual_seed(cfg.seed)
    model = VideoDiT(cfg.model)
    print(f"parameters: {count_parameters(model)}")
    _check_corpus(cfg, paths["corpus"])
    if args.dry_run:
        print("config valid; dry run, not training")
        return 0
    samples = _load_split(cfg, paths["corpus"], "train")
    data = [encode_sample(s, cfg.codec) for s in samples]
    write_resolved(cfg, out, "train")
    res = train_loop(data, model, cfg.train, out, resume=not args.force)
    if res.losses:
        print(f"trained {res.steps_run} steps; first loss {res.losses[0]:.4f}, last {res.losses[-1]:.4f}")
    return 0


def _checkpoint(cfg: RunConfig, args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    ck = latest_checkpoint(_paths(cfg, args)["train"])
    if ck is None:
        raise CliError("no checkpoint found; pass --checkpoint")
    return ck


def cmd_sample(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args)
    out = Path(args.out) if args.out else paths["samples"]
    model, meta = load_model(_checkpoint(cfg, args), expect=cfg.model)
    ids = args.ids.split(",") if args.ids else None
    samples = _load_split(cfg, paths["corpus"], cfg.metrics.split, ids=ids, limit=None if ids else 4)
    data = [encode_sample(s, cfg.codec) for s in samples]
    presence = None
    if args.unconditional:
        presence = [dict(mask=False, pose=False, reference=False, text=False) for _ in data]
    clips = generate_clips(model, data, cfg.codec, cfg.sampler, presence)
    write_resolved(cfg, out, "sample")
    for s, c in zip(samples, clips):
        write_tensor(out / f"{s.sample_id}.vft", c.astype(np.float32), {"seed": cfg.sampler.seed, "step": meta["step"]})
        save_frame_grid(out / f"{s.sample_id}.png", c)
        print(f"{s.sample_id} ({s.task}) -> {out / (s.sample_id + '.vft')}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args)
    out = Path(args.out) if args.out else paths["eval"]
    ck = _checkpoint(cfg, args)
    model, meta = load_model(ck, expect=cfg.model)
    samples = _load_split(cfg, paths["corpus"], cfg.metrics.split, limit=cfg.metrics.max_samples)
    data = [encode_sample(s, cfg.codec) for s in samples]
    clips = generate_clips(model, data, cfg.codec, cfg.sampler)
    report = evaluate(samples, clips, meta={"checkpoint": str(ck), "step": meta["step"], "seed": cfg.sampler.seed})
    write_resolved(cfg, out, "eval")
    report.write_jsonl(out / "report.jsonl")
    print(report.table())
    return _gate(report, cfg.metrics.thresholds)


def _gate(report, thresholds) -> int:
    failures = check_thresholds(report, thresholds)
    for f in failures:
        print(f"THRESHOLD FAILED: {f}", file=sys.stderr)
    return 1 if failures else 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    paths = _paths(cfg, args)
    out = Path(args.out) if args.out else paths["ablate"] / cfg.ablation.suite
    acfg = cfg.ablation
    checkpoints = None
    if args.checkpoint:
        root = Path(args.checkpoint)
        checkpoints = {}
        for arm in build_arms(acfg):
            ck = latest_checkpoint(root / arm.name)
            if ck is None:
                raise CliError(f"missing checkpoint for arm {arm.name} under {root}")
            checkpoints[arm.name] = str(ck)
    if args.dry_run:
        for arm in build_arms(acfg):
            print(arm.name, count_parameters(VideoDiT(arm.model)))
        return 0
    write_resolved(cfg, out, "ablate")
    result = run_ablation(acfg, out, checkpoints=checkpoints, codec_cfg=cfg.codec, corpus=cfg.corpus)
    for arm, rep in result.reports.items():
        print(f"== {arm}")
        print(rep.table())
    print(json.dumps(result.deltas(), indent=2))
    return max(_gate(rep, cfg.metrics.thresholds) for rep in result.reports.values())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidfuse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML or JSON run config")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--out", help="output directory for this command")
        s.add_argument("--force", action="store_true", help="overwrite existing outputs / restart training")
        s.add_argument("--dry-run", action="store_true", help="validate and report without doing the work")
        s.add_argument("--checkpoint", help="checkpoint file (ablate: directory of arm runs)")
        s.add_argument("--corpus", help="corpus directory (default <out root>/corpus)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "sample":
            s.add_argument("--ids", help="comma-separated sample ids")
            s.add_argument("--unconditional", action="store_true", help="mark every condition stream absent")
        if name == "ablate":
            s.add_argument("--suite", choices=sorted(SUITES))
            s.add_argument("--steps", type=int, help="training steps per arm")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "ablate" and (args.suite or args.steps):
            d = cfg.to_dict()
            if args.suite:
                d["ablation"]["suite"] = args.suite
            if args.steps:
                d["ablation"]["steps"] = args.steps
            cfg = RunConfig.from_dict(d, allow_section_seeds=True)
        cfg = cfg.resolve(seed=args.seed)
        return COMMANDS[args.command](cfg, args)
    except (CliError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
