"""Command-line surface: clip generation, pretraining, RL training,
evaluation, and report emission.

Usage: bevwarp-planner <gen-clips|pretrain|train|eval|report>
       [--config cfg.json] [overrides]
Exit codes: 0 success, 2 validation error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import bev_env, nn, trainer
from .bev_env import CLIP_KINDS, SAFETY_KINDS, generate_clip, load_clip, save_clip
from .discriminator import build_discriminator_params, init_from_generator
from .generator import DiffusionSchedule, GenConfig, build_generator_params, set_normalizer
from .trainer import LoopConfig, Metrics, ReplayBuffer, TrainState, evaluate, expert_windows


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every knob of the pipeline; defaults carry the paper-scale values."""

    clips_dir: str = "clips"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"
    seed: int = 0
    workers: int = 1
    # clip generation
    n_train_clips: int = 64   # per objective
    n_eval_clips: int = 32    # per objective
    # generator / diffusion
    m_candidates: int = 32
    k_steps: int = 10
    horizon: int = 30
    pretrain_steps: int = 2500
    pretrain_batch: int = 32
    il_lr: float = 1e-3
    # closed loop
    h_reuse: int = 8
    group_size: int = 4
    buffer_capacity: int = 8
    n_ingestions: int = 200
    clip_eps: float = 0.2
    sigma_min: float = 0.05
    ratio_decel: float = 0.85
    ratio_accel: float = 1.15
    gamma_safe: float = 1.5
    gamma_abort: float = 0.75
    t_max: float = 3.0
    entropy_target: Optional[float] = None  # default 0.5 ln(M)
    no_entropy: bool = False
    disc_lr: float = 3e-4
    gen_lr: float = 1e-3
    lambda_lr: float = 1e-2
    gen_il_mix: float = 0.5
    w_coll_safety: float = 1.0
    w_coll_efficiency: float = 0.2
    disc_init: str = "warm"  # "warm" | "random" (Tab. 7 ablation)
    # evaluation
    m_sweep: List[int] = field(default_factory=lambda: [32])
    select: str = "greedy"  # "greedy" | "random"
    eval_every: int = 0     # ingestions between metric snapshots; 0 = end only

    def validate(self) -> None:
        if self.m_candidates < 1 or self.k_steps < 1 or self.horizon < 2:
            raise ConfigError("m_candidates, k_steps, horizon out of range")
        if not 1 <= self.h_reuse <= self.horizon - 1:
            raise ConfigError("h_reuse out of range")
        if self.group_size < 2 or self.buffer_capacity < 1:
            raise ConfigError("group_size/buffer_capacity out of range")
        if not 0.0 < self.ratio_decel < 1.0 or self.ratio_accel <= 1.0:
            raise ConfigError("OGO ratios out of range")
        if self.select not in ("greedy", "random"):
            raise ConfigError(f"unknown selection mode {self.select!r}")
        if self.disc_init not in ("warm", "random"):
            raise ConfigError(f"unknown disc_init {self.disc_init!r}")
        if any(m < 1 for m in self.m_sweep):
            raise ConfigError("m_sweep entries must be >= 1")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    def loop_config(self, m_candidates: Optional[int] = None) -> LoopConfig:
        return LoopConfig(
            m_candidates=m_candidates or self.m_candidates,
            h_reuse=self.h_reuse,
            group_size=self.group_size,
            buffer_capacity=self.buffer_capacity,
            t_max=self.t_max,
            gamma_safe=self.gamma_safe,
            gamma_abort=self.gamma_abort,
            ratio_decel=self.ratio_decel,
            ratio_accel=self.ratio_accel,
            clip_eps=self.clip_eps,
            sigma_min=self.sigma_min,
            entropy_target=self.entropy_target,
            entropy_enabled=not self.no_entropy,
            disc_lr=self.disc_lr,
            gen_lr=self.gen_lr,
            lambda_lr=self.lambda_lr,
            gen_il_mix=self.gen_il_mix,
            w_coll_safety=self.w_coll_safety,
            w_coll_efficiency=self.w_coll_efficiency,
        )

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(k_steps=self.k_steps)


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**data)
    cfg.validate()
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json())


# ---------------------------------------------------------------------------
# Commands

EFFICIENCY_KINDS = tuple(k for k in CLIP_KINDS if k not in SAFETY_KINDS)


def _clip_plan(n_per_objective: int, seed_base: int):
    safety = sorted(SAFETY_KINDS)
    plan = []
    for i in range(n_per_objective):
        plan.append((safety[i % len(safety)], seed_base + i, "safety"))
    for i in range(n_per_objective):
        plan.append((EFFICIENCY_KINDS[i % len(EFFICIENCY_KINDS)],
                     seed_base + i, "efficiency"))
    return plan


def cmd_gen_clips(cfg: RunConfig) -> int:
    root = Path(cfg.clips_dir)
    manifest = {"train": [], "eval": []}
    for split, count, base in (("train", cfg.n_train_clips, cfg.seed * 100000),
                               ("eval", cfg.n_eval_clips, cfg.seed * 100000 + 10000)):
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for kind, seed, objective in _clip_plan(count, base):
            clip = generate_clip(kind, seed)
            fname = f"{kind}-{seed}.json"
            save_clip(clip, split_dir / fname)
            manifest[split].append({"id": clip.id, "objective": objective,
                                    "kind": kind, "file": f"{split}/{fname}"})
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    _echo_config(cfg, root)
    n_tr, n_ev = len(manifest["train"]), len(manifest["eval"])
    print(f"wrote {n_tr} train + {n_ev} eval clips under {root}")
    return 0


def _load_split(cfg: RunConfig, split: str, objective: Optional[str] = None):
    root = Path(cfg.clips_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no clip manifest under {root}; run gen-clips first")
    manifest = json.loads(manifest_path.read_text())
    clips = []
    for entry in manifest[split]:
        if objective and entry["objective"] != objective:
            continue
        clips.append(load_clip(root / entry["file"]))
    if not clips:
        raise ConfigError(f"no {objective or ''} clips in split {split}")
    return clips


def _expert_dataset(clips, horizon: int):
    dataset = []
    for clip in clips:
        dataset.extend(expert_windows(clip, horizon=horizon))
    return dataset


def cmd_pretrain(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    clips = _load_split(cfg, "train")
    dataset = _expert_dataset(clips, cfg.horizon)
    if not dataset:
        raise ConfigError("empty expert dataset")
    rng = np.random.default_rng(cfg.seed)

    gen_path = ckpt_dir / "generator.ckpt"
    if gen_path.exists():
        params = nn.load_checkpoint(gen_path)
        print(f"resuming from {gen_path} at step {params.step}")
    else:
        params = build_generator_params(
            GenConfig(horizon=cfg.horizon, k_steps=cfg.k_steps, seed=cfg.seed))
        set_normalizer(params, [traj for _, traj in dataset])
    schedule = cfg.schedule()

    curve_path = out / "pretrain_loss.csv"
    losses = []

    def log(step, loss):
        losses.append((params.step, loss))
        print(f"pretrain step {params.step}: loss {loss:.4f}")

    trainer.pretrain_generator(params, dataset, schedule, cfg.pretrain_steps,
                               cfg.pretrain_batch, rng, lr=cfg.il_lr,
                               log_every=50, log_fn=log)
    nn.save_checkpoint(params, gen_path)
    with open(curve_path, "w") as fh:
        fh.write("step,loss\n")
        for step, loss in losses:
            fh.write(f"{step},{loss:.6f}\n")
    print(f"saved generator checkpoint to {gen_path}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    ckpt_dir = Path(cfg.checkpoint_dir)
    _echo_config(cfg, out)
    gen_path = ckpt_dir / "generator.ckpt"
    if not gen_path.exists():
        raise ConfigError(f"missing pretrained generator at {gen_path}")
    gen_params = nn.load_checkpoint(gen_path)

    disc_path = ckpt_dir / "discriminator.ckpt"
    state_path = ckpt_dir / "trainer_state.json"
    if disc_path.exists() and state_path.exists():
        disc_params = nn.load_checkpoint(disc_path)
        state = TrainState.from_json(state_path.read_text())
        print(f"resuming training at ingestion {state.ingestions}")
    else:
        if cfg.disc_init == "warm":
            disc_params = init_from_generator(gen_params)
        else:
            disc_params = build_discriminator_params()
        state = TrainState()

    clips = _load_split(cfg, "train")
    dataset = _expert_dataset(clips, cfg.horizon) if cfg.gen_il_mix > 0 else None
    schedule = cfg.schedule()
    loop_cfg = cfg.loop_config()
    rng = np.random.default_rng([cfg.seed, state.ingestions])
    log_path = out / "training_log.jsonl"
    log_fh = open(log_path, "a")

    def log(record: dict):
        log_fh.write(json.dumps(record, sort_keys=True) + "\n")
        log_fh.flush()

    eval_clips = None
    remaining = cfg.n_ingestions - state.ingestions
    chunk = cfg.eval_every if cfg.eval_every > 0 else remaining
    try:
        while state.ingestions < cfg.n_ingestions:
            step = min(chunk, cfg.n_ingestions - state.ingestions)
            state = trainer.run_training(
                clips, gen_params, disc_params, schedule, loop_cfg, step, rng,
                expert_dataset=dataset, log_fn=log, state=state)
            nn.save_checkpoint(gen_params, gen_path)
            nn.save_checkpoint(disc_params, disc_path)
            state_path.write_text(state.to_json())
            if cfg.eval_every > 0:
                if eval_clips is None:
                    eval_clips = _load_split(cfg, "eval")
                m = evaluate(eval_clips, gen_params, disc_params, schedule,
                             cfg.loop_config(), np.random.default_rng(cfg.seed))
                snap = out / f"metrics_{state.ingestions:05d}.csv"
                snap.write_text(Metrics.CSV_HEADER + "\n"
                                + m.csv_row(f"eval@{state.ingestions}") + "\n")
                print(f"ingestion {state.ingestions}: CR={m.cr:.3f} EP={m.ep_mean:.3f}")
    finally:
        log_fh.close()
    print(f"training complete: {state.disc_updates} discriminator / "
          f"{state.gen_updates} generator updates")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    ckpt_dir = Path(cfg.checkpoint_dir)
    _echo_config(cfg, out)
    gen_path = ckpt_dir / "generator.ckpt"
    disc_path = ckpt_dir / "discriminator.ckpt"
    if not gen_path.exists():
        raise ConfigError(f"missing generator checkpoint at {gen_path}")
    gen_params = nn.load_checkpoint(gen_path)
    if disc_path.exists():
        disc_params = nn.load_checkpoint(disc_path)
    else:
        if cfg.select == "greedy":
            raise ConfigError("greedy eval needs a discriminator checkpoint "
                              "(use --select random for the baseline)")
        disc_params = build_discriminator_params()
    schedule = cfg.schedule()

    rows = [Metrics.CSV_HEADER]
    for objective in ("safety", "efficiency"):
        clips = _load_split(cfg, "eval", objective)
        for m_count in cfg.m_sweep:
            metrics = evaluate(
                clips, gen_params, disc_params, schedule,
                cfg.loop_config(m_candidates=m_count),
                np.random.default_rng(cfg.seed), selection=cfg.select)
            rows.append(metrics.csv_row(f"{objective}@M{m_count}"))
            print(rows[-1])
    (out / "metrics.csv").write_text("\n".join(rows) + "\n")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    log_path = out / "training_log.jsonl"
    if not log_path.exists():
        raise ConfigError(f"no training log at {log_path}")
    records = [json.loads(line) for line in log_path.read_text().splitlines() if line]
    series_path = out / "training_series.csv"
    with open(series_path, "w") as fh:
        fh.write("update,step,kind,objective,ratio_mean,entropy_mean,beta\n")
        for i, rec in enumerate(records):
            fh.write(f"{i},{rec.get('step', '')},{rec.get('kind', '')},"
                     f"{rec.get('objective', '')},{rec.get('ratio_mean', '')},"
                     f"{rec.get('entropy_mean', '')},{rec.get('beta', '')}\n")

    lines = ["training report", "================"]
    disc = [r for r in records if r.get("kind") == "discriminator" and "objective" in r]
    gen = [r for r in records if r.get("kind") == "generator"]
    lines.append(f"discriminator updates: {len(disc)}")
    lines.append(f"generator updates: {len(gen)}")
    if disc:
        ents = [r["entropy_mean"] for r in disc]
        lines.append(f"mean decision entropy: first {ents[0]:.3f} last {ents[-1]:.3f}")
    metric_files = sorted(out.glob("metrics_*.csv")) + \
        ([out / "metrics.csv"] if (out / "metrics.csv").exists() else [])
    crs = []
    for path in metric_files:
        for line in path.read_text().splitlines()[1:]:
            cells = line.split(",")
            crs.append((path.name, cells[0], float(cells[1])))
    if len(crs) >= 2:
        first, last = crs[0], crs[-1]
        if first[2] > 0:
            change = (last[2] - first[2]) / first[2] * 100.0
            lines.append(f"CR change {first[1]} -> {last[1]}: {change:+.1f}%")
        else:
            lines.append(f"CR change {first[1]} -> {last[1]}: n/a (zero baseline)")
    summary = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(summary)
    print(summary)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--clips-dir", dest="clips_dir")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--m-candidates", dest="m_candidates", type=int)
    p.add_argument("--h-reuse", dest="h_reuse", type=int)
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--clip-eps", dest="clip_eps", type=float)
    p.add_argument("--entropy-target", dest="entropy_target", type=float)
    p.add_argument("--no-entropy", dest="no_entropy", action="store_const", const=True)
    p.add_argument("--n-ingestions", dest="n_ingestions", type=int)
    p.add_argument("--n-train-clips", dest="n_train_clips", type=int)
    p.add_argument("--n-eval-clips", dest="n_eval_clips", type=int)
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    p.add_argument("--gen-il-mix", dest="gen_il_mix", type=float)
    p.add_argument("--disc-init", dest="disc_init", choices=["warm", "random"])
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--select", choices=["greedy", "random"])
    p.add_argument("--m-sweep", dest="m_sweep",
                   help="comma-separated candidate counts, e.g. 8,16,32")


COMMANDS = {
    "gen-clips": cmd_gen_clips,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="bevwarp-planner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_common(sub.add_parser(name))
    args = parser.parse_args(argv)

    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config")}
    if overrides.get("m_sweep") is not None:
        try:
            overrides["m_sweep"] = [int(x) for x in overrides["m_sweep"].split(",")]
        except ValueError:
            print("error: --m-sweep expects comma-separated integers", file=sys.stderr)
            return 2
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg)
    except (ConfigError, bev_env.ClipError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
