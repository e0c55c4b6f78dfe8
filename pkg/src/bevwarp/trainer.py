"""Closed-loop orchestration: rollout collection, rewards, the replay
buffer, the 8:1 alternating update schedule, and metric evaluation."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import bev_env, nn
from .bev_env import (Clip, EnvState, TokenizedObs, compute_ttc, ego_progress,
                      env_reset, env_step, observe, tokenize_observation)
from .control import (Control, IlqrConfig, IlqrDivergence, VehState,
                      bicycle_step, ilqr_solve, latch_controls,
                      reference_from_trajectory)
from .discriminator import (DecisionRecord, EntropyTemp, candidate_distribution,
                            score_trajectories, tcgrpo_step)
from .generator import (DiffusionSchedule, OgoSample, Trajectory, il_train_step,
                        ogo_adjust, ogo_finetune_step, ogo_trigger,
                        sample_candidates)
from .geometry import Pose2, pose_compose, pose_inverse, transform_points


@dataclass
class LoopConfig:
    """Hyperparameters of the closed-loop training loop."""

    m_candidates: int = 32
    h_reuse: int = 8
    group_size: int = 4
    buffer_capacity: int = 8
    t_max: float = 3.0
    gamma_safe: float = 1.5
    gamma_abort: float = 0.75
    lag_threshold: float = 1.0
    ratio_decel: float = 0.85
    ratio_accel: float = 1.15
    clip_eps: float = 0.2
    std_floor: float = 1e-3
    sigma_min: float = 0.05
    entropy_target: Optional[float] = None  # default 0.5 ln(M)
    entropy_enabled: bool = True
    disc_lr: float = 3e-4
    gen_lr: float = 1e-3
    lambda_lr: float = 1e-2
    gen_il_mix: float = 0.5  # share of expert replay in generator updates
    w_coll_safety: float = 1.0
    w_coll_efficiency: float = 0.2
    groups_per_update: int = 4
    gen_steps_per_update: int = 8
    gen_batch: int = 8
    ilqr_iters: int = 12  # rollout-time cap; the solver default stays 50
    ilqr_tol: float = 1e-3

    def target_entropy(self) -> float:
        if self.entropy_target is not None:
            return self.entropy_target
        return 0.5 * math.log(self.m_candidates)


@dataclass
class Rollout:
    """One closed-loop episode and its sequence-level reward."""

    clip_id: str
    objective: str
    records: List[DecisionRecord]
    decision_meta: List[Tuple[float, float, Trajectory]]  # (ttc, progress, raw plan)
    trace: List[Tuple[float, float, float, float]]        # executed x, y, yaw, v
    ttc_trace: List[float]
    r_coll: float = 0.0
    r_eff: float = 0.0
    reward: float = 0.0
    collided: bool = False
    at_fault: bool = False
    progress: float = 0.0

    @property
    def min_ttc(self) -> float:
        return min(self.ttc_trace) if self.ttc_trace else float("inf")


def trajectory_to_world(traj: Trajectory, pose: Pose2) -> np.ndarray:
    """(H, 4) waypoints with (x, y) mapped into the world frame."""
    out = traj.points.copy()
    out[:, :2] = transform_points(pose, traj.points[:, :2])
    return out


def _world_plan_poses(traj: Trajectory, state: EnvState) -> np.ndarray:
    """World (x, y, yaw) for every waypoint of a chosen plan."""
    world = trajectory_to_world(traj, state.sim_pose)
    h = world.shape[0]
    poses = np.zeros((h, 3))
    poses[:, :2] = world[:, :2]
    yaw_prev = state.sim_pose.yaw
    for k in range(h):
        d = world[min(k + 1, h - 1), :2] - world[max(k - 1, 0), :2]
        if np.hypot(d[0], d[1]) > 1e-6:
            yaw_prev = math.atan2(d[1], d[0])
        poses[k, 2] = yaw_prev
    return poses


def _ttc_from_plan(clip: Clip, t_abs: int, plan_poses: np.ndarray, offset: int,
                   t_max: float) -> float:
    """TTC at absolute step t_abs along the remaining latched plan.

    plan_poses are world poses of the full plan; offset is how many steps of
    it have already been executed.
    """
    if not clip.agents:
        return t_max
    k_max = int(round(t_max / clip.dt))
    h = plan_poses.shape[0]
    ego = np.zeros((k_max + 1, 3))
    for k in range(k_max + 1):
        ego[k] = plan_poses[min(offset + k, h - 1)]
    last = clip.length - 1
    n = len(clip.agents)
    agent_poses = np.zeros((n, k_max + 1, 3))
    agent_dims = np.zeros((n, 2))
    for i, agent in enumerate(clip.agents):
        idx = np.minimum(t_abs + np.arange(k_max + 1), last)
        agent_poses[i] = agent.poses[idx]
        agent_dims[i] = (agent.length, agent.width)
    hit = bev_env._kernels.ttc_first_hit(
        np.ascontiguousarray(ego), bev_env.EGO_LENGTH, bev_env.EGO_WIDTH,
        np.ascontiguousarray(agent_poses), np.ascontiguousarray(agent_dims))
    return t_max if hit < 0 else hit * clip.dt


def rollout_reward(ttc_trace: Sequence[float], progress: float, objective: str,
                   cfg: LoopConfig) -> Tuple[float, float, float]:
    """(r_coll, r_eff, combined) for one rollout.

    r_coll is the worst-case temporal margin min_t (T_t - T_max); r_eff is
    the stability-window penalty around [1.05, 1.10] progress.
    """
    r_coll = (min(ttc_trace) - cfg.t_max) if ttc_trace else 0.0
    r_eff = min(progress - 1.05, 0.0) + min(1.10 - progress, 0.0) + 1.0
    w = cfg.w_coll_safety if objective == "safety" else cfg.w_coll_efficiency
    return r_coll, r_eff, w * r_coll + r_eff


def _select_index(scores: np.ndarray, probs: np.ndarray, selection: str,
                  rng: np.random.Generator) -> int:
    if selection == "sample":
        return int(rng.choice(probs.size, p=probs))
    if selection == "greedy":
        return int(np.argmax(scores))
    if selection == "random":
        return int(rng.integers(probs.size))
    raise ValueError(f"unknown selection mode {selection!r}")


def run_episode(clip: Clip, gen_params: nn.ParamSet, disc_params: nn.ParamSet,
                schedule: DiffusionSchedule, cfg: LoopConfig,
                rng: np.random.Generator, selection: str = "sample",
                ilqr_cfg: Optional[IlqrConfig] = None,
                sampler: Optional[Callable] = None,
                scorer: Optional[Callable] = None) -> Rollout:
    """One closed-loop episode with latched execution and TTC-based aborts."""
    ilqr_cfg = ilqr_cfg or IlqrConfig(dt=clip.dt, max_iters=cfg.ilqr_iters,
                                      tol=cfg.ilqr_tol)
    if sampler is None:
        def sampler(tok, m, r):
            return sample_candidates(tok, gen_params, m, schedule, r)
    if scorer is None:
        def scorer(cands, tok):
            return score_trajectories(cands, tok, disc_params).data
    state = env_reset(clip)
    records: List[DecisionRecord] = []
    meta: List[Tuple[float, float, Trajectory]] = []
    trace: List[Tuple[float, float, float, float]] = []
    ttc_trace: List[float] = []

    while not state.done:
        obs = observe(state)
        tok = tokenize_observation(obs)
        cands = sampler(tok, cfg.m_candidates, rng)
        scores = np.asarray(scorer(cands, tok))
        probs = candidate_distribution(scores)
        idx = _select_index(scores, probs, selection, rng)
        chosen = cands[idx]
        records.append(DecisionRecord(
            obs=tok, candidates=tuple(cands), chosen=idx,
            p_old=float(probs[idx]), t=state.t))

        plan_poses = _world_plan_poses(chosen, state)
        ttc_now = _ttc_from_plan(clip, state.t, plan_poses, 0, cfg.t_max)
        meta.append((ttc_now, ego_progress(state), chosen))

        world_pts = trajectory_to_world(chosen, state.sim_pose)
        world_traj = Trajectory(points=world_pts, dt=chosen.dt)
        x0 = VehState(state.sim_pose.x, state.sim_pose.y,
                      state.sim_pose.yaw, state.sim_speed)
        refs = reference_from_trajectory(world_traj, x0)
        try:
            controls = ilqr_solve(x0, refs, ilqr_cfg)
        except IlqrDivergence:
            controls = [Control(0.0, 0.0) for _ in range(len(refs) - 1)]
        latch = latch_controls(controls, min(cfg.h_reuse, len(controls)))

        veh = x0
        offset = 0
        while not latch.exhausted and not state.done:
            ttc_step = _ttc_from_plan(clip, state.t, plan_poses, offset, cfg.t_max)
            ttc_trace.append(ttc_step)
            if ttc_step < cfg.gamma_abort:
                latch.abort()
                break
            u = latch.next_control()
            veh = bicycle_step(veh, u, clip.dt, ilqr_cfg.wheelbase)
            state = env_step(state, Pose2(veh.x, veh.y, veh.yaw), veh.v)
            trace.append((veh.x, veh.y, veh.yaw, veh.v))
            offset += 1
        if state.collided:
            ttc_trace.append(0.0)

    progress = ego_progress(state)
    rollout = Rollout(
        clip_id=clip.id, objective=clip.objective, records=records,
        decision_meta=meta, trace=trace, ttc_trace=ttc_trace,
        collided=state.collided, at_fault=state.at_fault, progress=progress)
    rollout.r_coll, rollout.r_eff, rollout.reward = rollout_reward(
        ttc_trace, progress, clip.objective, cfg)
    return rollout


def collect_rollouts(clip: Clip, gen_params: nn.ParamSet, disc_params: nn.ParamSet,
                     schedule: DiffusionSchedule, cfg: LoopConfig, count: int,
                     rng: np.random.Generator) -> List[Rollout]:
    """A group of independent sampled-selection rollouts from one clip."""
    if count < 2:
        raise ValueError("need at least 2 rollouts per group")
    seeds = rng.integers(0, 2 ** 63 - 1, size=count)
    return [run_episode(clip, gen_params, disc_params, schedule, cfg,
                        np.random.default_rng(int(s)), selection="sample")
            for s in seeds]


def variance_filter(rollouts: Sequence[Rollout], sigma_min: float) -> bool:
    """Keep a clip's group only if its reward spread is informative."""
    if len(rollouts) < 2:
        return False
    rewards = np.array([r.reward for r in rollouts])
    return float(rewards.std()) >= sigma_min


# ---------------------------------------------------------------------------
# Replay buffer

@dataclass
class BufferBatch:
    clip_id: str
    objective: str
    rollouts: List[Rollout]


class ReplayBuffer:
    """FIFO queue of rollout batches with a persistent ingestion counter."""

    def __init__(self, capacity: int = 8):
        self.capacity = capacity
        self._batches: deque = deque(maxlen=capacity)
        self.ingested = 0

    def __len__(self) -> int:
        return len(self._batches)

    @property
    def batches(self) -> List[BufferBatch]:
        return list(self._batches)

    def push(self, batch: BufferBatch) -> None:
        self._batches.append(batch)  # deque evicts oldest automatically
        self.ingested += 1

    def sample_groups(self, group_size: int, n_groups: int,
                      rng: np.random.Generator):
        """Same-clip groups of (records, reward) tuples for TC-GRPO."""
        if group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not self._batches:
            raise ValueError("sampling from an empty buffer")
        order = rng.permutation(len(self._batches))[:n_groups]
        groups = []
        for bi in order:
            batch = self._batches[int(bi)]
            rollouts = batch.rollouts
            if len(rollouts) > group_size:
                take = rng.choice(len(rollouts), size=group_size, replace=False)
                rollouts = [rollouts[int(i)] for i in take]
            groups.append([(r.records, r.reward) for r in rollouts])
        return groups


def training_schedule(ingestions: int, period: int = 8) -> List[str]:
    """Update actions triggered by the given (1-based) ingestion count."""
    actions = ["discriminator"]
    if ingestions % period == 0:
        actions.append("generator")
    return actions


# ---------------------------------------------------------------------------
# OGO harvesting

def ogo_harvest(rollouts: Sequence[Rollout], cfg: LoopConfig) -> List[OgoSample]:
    """Adjusted longitudinal targets from decisions that triggered corrections."""
    samples: List[OgoSample] = []
    for rollout in rollouts:
        for record, (ttc, progress, raw) in zip(rollout.records, rollout.decision_meta):
            trigger = ogo_trigger(ttc=ttc, progress=progress,
                                  gamma_safe=cfg.gamma_safe, lag=cfg.lag_threshold)
            if trigger == "none":
                continue
            ratio = cfg.ratio_decel if trigger == "decel" else cfg.ratio_accel
            try:
                adjusted, saturated = ogo_adjust(raw, trigger, ratio)
            except ValueError:
                continue  # degenerate zero-length plan
            samples.append(OgoSample(obs=record.obs, traj_opt=adjusted,
                                     trigger=trigger, saturated=saturated))
    return samples


# ---------------------------------------------------------------------------
# Expert windows for pretraining / IL replay

def expert_windows(clip: Clip, horizon: int = 30, stride: int = 5
                   ) -> List[Tuple[TokenizedObs, Trajectory]]:
    """(observation, expert trajectory) pairs from sliding reference windows."""
    out = []
    state = env_reset(clip)
    while True:
        t = state.t
        if t + horizon <= clip.length and t % stride == 0:
            tok = tokenize_observation(observe(state))
            window = clip.ref_poses[t:t + horizon]
            rel = transform_points(pose_inverse(state.sim_pose), window[:, :2])
            v = clip.ref_speeds[t:t + horizon].copy()
            pts = np.zeros((horizon, 4))
            pts[:, :2] = rel
            pts[:, 2] = v
            pts[:, 3] = np.gradient(v, clip.dt)
            out.append((tok, Trajectory(points=pts, dt=clip.dt)))
        if state.done or state.t + 1 >= clip.length - 1:
            break
        state = env_step(state, clip.ref_pose(t + 1), float(clip.ref_speeds[t + 1]))
    return out


def pretrain_generator(gen_params: nn.ParamSet, dataset, schedule: DiffusionSchedule,
                       steps: int, batch_size: int, rng: np.random.Generator,
                       lr: float = 1e-3, log_every: int = 50,
                       log_fn: Optional[Callable] = None) -> List[float]:
    """Imitation pretraining over an (obs, trajectory) dataset."""
    losses = []
    n = len(dataset)
    for step in range(steps):
        take = rng.choice(n, size=min(batch_size, n), replace=False)
        batch = [dataset[int(i)] for i in take]
        loss = il_train_step(batch, gen_params, schedule, rng, lr)
        losses.append(loss)
        if log_fn and (step + 1) % log_every == 0:
            log_fn(step + 1, float(np.mean(losses[-log_every:])))
    return losses


# ---------------------------------------------------------------------------
# Metrics

@dataclass
class Metrics:
    cr: float
    af_cr: float
    safety1: float
    safety2: float
    ep_mean: float
    ep10: float
    ep09: float
    fde: float
    ade: float

    CSV_HEADER = "set,CR,AFCR,Safety1,Safety2,EPMean,EP10,EP09,FDE,ADE"

    def csv_row(self, label: str) -> str:
        return (f"{label},{self.cr:.4f},{self.af_cr:.4f},{self.safety1:.4f},"
                f"{self.safety2:.4f},{self.ep_mean:.4f},{self.ep10:.4f},"
                f"{self.ep09:.4f},{self.fde:.4f},{self.ade:.4f}")


def open_loop_errors(clip: Clip, traj: Trajectory) -> Tuple[float, float]:
    """FDE/ADE of a first-frame plan against the reference window."""
    h = traj.horizon
    window = clip.ref_poses[:h, :2]
    inv = bev_env.pose_inverse(clip.ref_pose(0))
    ref_rel = transform_points(inv, window)
    k = min(h, ref_rel.shape[0])
    diff = np.linalg.norm(traj.points[:k, :2] - ref_rel[:k], axis=1)
    return float(diff[-1]), float(diff.mean())


def evaluate(clips: Sequence[Clip], gen_params: nn.ParamSet,
             disc_params: nn.ParamSet, schedule: DiffusionSchedule,
             cfg: LoopConfig, rng: np.random.Generator,
             selection: str = "greedy",
             sampler: Optional[Callable] = None,
             scorer: Optional[Callable] = None) -> Metrics:
    """Greedy closed-loop metrics plus first-frame open-loop errors."""
    if not clips:
        raise ValueError("empty evaluation set")
    collided, at_fault, s1, s2, eps_ = [], [], [], [], []
    fdes, ades = [], []
    for clip in clips:
        episode_rng = np.random.default_rng(rng.integers(0, 2 ** 63 - 1))
        rollout = run_episode(clip, gen_params, disc_params, schedule, cfg,
                              episode_rng, selection=selection,
                              sampler=sampler, scorer=scorer)
        collided.append(rollout.collided)
        at_fault.append(rollout.at_fault)
        s1.append(rollout.min_ttc > 1.0)
        s2.append(rollout.min_ttc > 2.0)
        eps_.append(rollout.progress)
        first = rollout.records[0]
        fde, ade = open_loop_errors(clip, first.candidates[first.chosen])
        fdes.append(fde)
        ades.append(ade)
    eps_arr = np.array(eps_)
    return Metrics(
        cr=float(np.mean(collided)),
        af_cr=float(np.mean(at_fault)),
        safety1=float(np.mean(s1)),
        safety2=float(np.mean(s2)),
        ep_mean=float(eps_arr.mean()),
        ep10=float(np.mean(eps_arr >= 1.0)),
        ep09=float(np.mean(eps_arr >= 0.9)),
        fde=float(np.mean(fdes)),
        ade=float(np.mean(ades)),
    )


# ---------------------------------------------------------------------------
# The RL loop

@dataclass
class TrainState:
    """Mutable trainer bookkeeping that persists across checkpoints."""

    ingestions: int = 0
    disc_updates: int = 0
    gen_updates: int = 0
    lam: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "TrainState":
        return cls(**json.loads(payload))


def run_training(clips: Sequence[Clip], gen_params: nn.ParamSet,
                 disc_params: nn.ParamSet, schedule: DiffusionSchedule,
                 cfg: LoopConfig, n_ingestions: int, rng: np.random.Generator,
                 expert_dataset=None,
                 log_fn: Optional[Callable[[dict], None]] = None,
                 state: Optional[TrainState] = None,
                 buffer: Optional[ReplayBuffer] = None) -> TrainState:
    """Collect -> filter -> ingest -> update until n_ingestions accepted.

    Discriminator updates fire on every ingestion, generator updates on
    every buffer_capacity-th (the 8:1 cadence). Clips cycle in a seeded
    shuffled order, alternating objectives when both are present.
    """
    state = state or TrainState()
    buffer = buffer or ReplayBuffer(cfg.buffer_capacity)
    temp = EntropyTemp(lam=state.lam, target=cfg.target_entropy(), lr=cfg.lambda_lr)
    clip_cycle = _mixed_cycle(clips, rng)
    target = state.ingestions + n_ingestions

    while state.ingestions < target:
        clip = next(clip_cycle)
        rollouts = collect_rollouts(clip, gen_params, disc_params, schedule,
                                    cfg, cfg.group_size, rng)
        if not variance_filter(rollouts, cfg.sigma_min):
            continue
        buffer.push(BufferBatch(clip.id, clip.objective, rollouts))
        state.ingestions += 1

        for action in training_schedule(state.ingestions, cfg.buffer_capacity):
            if action == "discriminator":
                groups = buffer.sample_groups(
                    cfg.group_size, min(cfg.groups_per_update, len(buffer)), rng)
                try:
                    stats = tcgrpo_step(groups, disc_params, temp,
                                        lr=cfg.disc_lr, eps=cfg.clip_eps,
                                        std_floor=cfg.std_floor,
                                        entropy_enabled=cfg.entropy_enabled)
                except nn.NonFiniteGradient:
                    if log_fn:
                        log_fn({"step": state.ingestions, "kind": "discriminator",
                                "skipped": "non-finite"})
                    continue
                state.disc_updates += 1
                state.lam = temp.lam
                if log_fn:
                    log_fn({"step": state.ingestions, "kind": "discriminator",
                            "objective": stats["objective"],
                            "ratio_mean": stats["ratio_mean"],
                            "entropy_mean": stats["entropy_mean"],
                            "beta": stats["beta"]})
            else:
                loss = _generator_update(buffer, gen_params, schedule, cfg,
                                         rng, expert_dataset)
                state.gen_updates += 1
                if log_fn:
                    log_fn({"step": state.ingestions, "kind": "generator",
                            "objective": loss, "ratio_mean": 0.0,
                            "entropy_mean": 0.0, "beta": 0.0})
    return state


def _generator_update(buffer: ReplayBuffer, gen_params: nn.ParamSet,
                      schedule: DiffusionSchedule, cfg: LoopConfig,
                      rng: np.random.Generator, expert_dataset) -> float:
    all_rollouts = [r for batch in buffer.batches for r in batch.rollouts]
    samples = ogo_harvest(all_rollouts, cfg)
    losses = []
    for _ in range(cfg.gen_steps_per_update):
        if samples:
            take = rng.choice(len(samples), size=min(cfg.gen_batch, len(samples)),
                              replace=False)
            batch = [samples[int(i)] for i in take]
            try:
                losses.append(ogo_finetune_step(batch, gen_params, schedule,
                                                lr=cfg.gen_lr))
            except nn.NonFiniteGradient:
                continue
        if expert_dataset and cfg.gen_il_mix > 0.0:
            take = rng.choice(len(expert_dataset),
                              size=min(cfg.gen_batch, len(expert_dataset)),
                              replace=False)
            batch = [expert_dataset[int(i)] for i in take]
            try:
                il_train_step(batch, gen_params, schedule, rng, lr=cfg.gen_lr * cfg.gen_il_mix)
            except nn.NonFiniteGradient:
                continue
    return float(np.mean(losses)) if losses else 0.0


def _mixed_cycle(clips: Sequence[Clip], rng: np.random.Generator):
    """Endless shuffled cycle alternating objectives when both exist."""
    safety = [c for c in clips if c.objective == "safety"]
    efficiency = [c for c in clips if c.objective == "efficiency"]
    if not safety or not efficiency:
        pool = list(clips)
        while True:
            order = rng.permutation(len(pool))
            for i in order:
                yield pool[int(i)]
    else:
        while True:
            s_order = list(rng.permutation(len(safety)))
            e_order = list(rng.permutation(len(efficiency)))
            for si, ei in zip(s_order, e_order):
                yield safety[int(si)]
                yield efficiency[int(ei)]
