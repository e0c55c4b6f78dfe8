"""Trajectory discriminator: encoding, cross-attention fusion, sigmoid
scoring, the candidate distribution, and the TC-GRPO objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .bev_env import TokenizedObs
from .generator import (AGENT_FEAT, MAP_FEAT, NAV_FEAT, GenConfig, Trajectory,
                        gen_config_from)

STD_FLOOR_DEFAULT = 1e-3
CLIP_EPS_DEFAULT = 0.2


@dataclass
class DiscConfig:
    token_dim: int = 32
    point_dim: int = 32
    fusion_hidden: int = 64
    horizon: int = 30
    seed: int = 1

    def as_dict(self) -> dict:
        return dict(token_dim=self.token_dim, point_dim=self.point_dim,
                    fusion_hidden=self.fusion_hidden, horizon=self.horizon,
                    seed=self.seed)


BEV_BLOCK_FEAT = 6  # 4 channel means + block center offset


def build_discriminator_params(cfg: Optional[DiscConfig] = None) -> nn.ParamSet:
    cfg = cfg or DiscConfig()
    rng = np.random.default_rng(cfg.seed + 1000)
    params = nn.ParamSet(meta={"component": "discriminator", "arch": cfg.as_dict()})
    d, p = cfg.token_dim, cfg.point_dim
    # scene encoders mirror the generator architecture (independent weights)
    nn.init_mlp(params, "map_enc", [MAP_FEAT, d, d], rng)
    nn.init_mlp(params, "agent_enc", [AGENT_FEAT, d, d], rng)
    nn.init_mlp(params, "bev_token_enc", [BEV_BLOCK_FEAT, d], rng)
    params.add("null_map", rng.uniform(-0.3, 0.3, size=(1, d)))
    params.add("null_agent", rng.uniform(-0.3, 0.3, size=(1, d)))
    # trajectory sequence encoder
    nn.init_mlp(params, "point_enc", [4, p, p], rng)
    params.add("cls_token", rng.uniform(-0.3, 0.3, size=(1, p)))
    nn.init_attention(params, "seq_attn", p, p, p, rng)
    nn.init_mlp(params, "query_mlp", [p, d], rng)
    # one cross-attention stream per context source, independent projections
    for name in ("attn_map", "attn_bev", "attn_agent", "attn_am2"):
        nn.init_attention(params, name, d, d, d, rng)
    nn.init_attention(params, "attn_am", d, d, d, rng)  # agents attending maps
    nn.init_mlp(params, "fusion_mlp", [4 * d, cfg.fusion_hidden, 1], rng)
    return params


def init_from_generator(gen_params: nn.ParamSet,
                        cfg: Optional[DiscConfig] = None) -> nn.ParamSet:
    """Warm-start the shared-architecture encoders from the generator.

    Copies the static (map) and dynamic (agent) encoder weights; everything
    else keeps its fresh initialization. Copies are value-equal but
    independently owned.
    """
    params = build_discriminator_params(cfg)
    for prefix in ("map_enc", "agent_enc"):
        for layer in (0, 1):
            for kind in ("w", "b"):
                name = f"{prefix}.l{layer}.{kind}"
                if name not in gen_params:
                    raise ValueError(f"generator lacks shared encoder weight {name}")
                if gen_params[name].shape != params[name].shape:
                    raise ValueError(f"shared encoder shape mismatch for {name}")
                params[name] = gen_params[name].copy()
    params.meta["warm_start"] = True
    return params


# ---------------------------------------------------------------------------
# Scoring

def _bev_block_tokens(bev8: np.ndarray) -> np.ndarray:
    """(C, 8, 8) pooled grid -> 16 coarse block tokens with center offsets."""
    c = bev8.shape[0]
    blocks = bev8.reshape(c, 4, 2, 4, 2).mean(axis=(2, 4))  # (C, 4, 4)
    feats = np.zeros((16, BEV_BLOCK_FEAT))
    idx = 0
    for by in range(4):
        for bx in range(4):
            feats[idx, :c] = blocks[:, by, bx]
            feats[idx, c] = (bx - 1.5) / 1.5
            feats[idx, c + 1] = (by - 1.5) / 1.5
            idx += 1
    return feats


def _scene_tokens(tape: nn.Tape, params: nn.ParamSet, obs: TokenizedObs):
    if obs.map_tokens.shape[0]:
        t_m = nn.apply_mlp(tape, params, "map_enc", tape.const(obs.map_tokens), 2)
    else:
        t_m = tape.param(params, "null_map")
    if obs.agent_tokens.shape[0]:
        t_a = nn.apply_mlp(tape, params, "agent_enc", tape.const(obs.agent_tokens), 2)
    else:
        t_a = tape.param(params, "null_agent")
    t_b = nn.apply_mlp(tape, params, "bev_token_enc",
                       tape.const(_bev_block_tokens(obs.bev8)), 1)
    return t_m, t_a, t_b


def score_trajectories(trajs: Sequence[Trajectory], obs: TokenizedObs,
                       params: nn.ParamSet,
                       tape: Optional[nn.Tape] = None) -> nn.TVal:
    """Sigmoid scores in (0, 1) for a batch of candidates, shape (M,).

    Pipeline: shared point MLP -> [cls]-led attention pooling -> four
    cross-attention context streams -> concat -> fusion MLP -> sigmoid.
    """
    tape = tape or nn.Tape(record=False)
    m = len(trajs)
    t_m, t_a, t_b = _scene_tokens(tape, params, obs)

    pts = np.stack([t.points for t in trajs])              # (M, H, 4)
    e_pts = nn.apply_mlp(tape, params, "point_enc", tape.const(pts), 2)
    cls = tape.param(params, "cls_token")
    cls_rep = tape.reshape(tape.concat([cls] * m, axis=0), (m, 1, -1))
    seq = tape.concat([cls_rep, e_pts], axis=1)            # (M, H+1, P)
    cls_q = tape.reshape(cls_rep, (m, -1))
    pooled = nn.apply_attention(tape, params, "seq_attn", cls_q, seq)
    q_traj = nn.apply_mlp(tape, params, "query_mlp", pooled, 1)  # (M, D)

    o_m = nn.apply_attention(tape, params, "attn_map", q_traj, t_m)
    o_b = nn.apply_attention(tape, params, "attn_bev", q_traj, t_b)
    o_a = nn.apply_attention(tape, params, "attn_agent", q_traj, t_a)
    t_am = nn.apply_attention(tape, params, "attn_am", t_a, t_m)
    o_am = nn.apply_attention(tape, params, "attn_am2", q_traj, t_am)

    fused = tape.concat([o_m, o_b, o_a, o_am], axis=-1)
    logit = nn.apply_mlp(tape, params, "fusion_mlp", fused, 2)  # (M, 1)
    return tape.sigmoid(tape.reshape(logit, (m,)))


def score_trajectory(traj: Trajectory, obs: TokenizedObs,
                     params: nn.ParamSet) -> float:
    return float(score_trajectories([traj], obs, params).data[0])


# ---------------------------------------------------------------------------
# Candidate distribution and TC-GRPO pieces

def candidate_distribution(scores: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Normalize sigmoid scores to a distribution; uniform if all ~zero."""
    scores = np.asarray(scores, dtype=np.float64)
    total = scores.sum()
    if total < floor:
        return np.full(scores.shape, 1.0 / scores.size)
    return scores / total


def group_advantage(rewards: Sequence[float],
                    std_floor: float = STD_FLOOR_DEFAULT) -> np.ndarray:
    """Population-standardized rewards relative to the group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group needs at least 2 rollouts")
    std = max(float(r.std()), std_floor)
    return (r - r.mean()) / std


def clipped_objective(ratio: float, advantage: float,
                      eps: float = CLIP_EPS_DEFAULT) -> float:
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)."""
    if ratio <= 0.0:
        raise ValueError("importance ratio must be positive")
    return min(ratio * advantage, float(np.clip(ratio, 1.0 - eps, 1.0 + eps)) * advantage)


def decision_entropy(probs: np.ndarray) -> float:
    """-sum p log p in nats with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    mask = p > 0.0
    return float(-(p[mask] * np.log(p[mask])).sum())


@dataclass
class EntropyTemp:
    """Learnable log-temperature for the adaptive entropy bonus."""

    lam: float = 0.0
    target: float = 1.0
    lr: float = 1e-2

    def beta(self, mean_entropy: float) -> float:
        return math.exp(self.lam) if mean_entropy < self.target else 0.0

    def update(self, mean_entropy: float) -> float:
        """Gradient-descend exp(lam) * (H - target); active only in deficit."""
        if mean_entropy < self.target:
            grad = math.exp(self.lam) * (mean_entropy - self.target)
            self.lam -= self.lr * grad
        return self.beta(mean_entropy)


def adaptive_entropy_beta(mean_entropy: float, temp: EntropyTemp) -> Tuple[float, bool]:
    """(beta, lambda-trainable) for the current average entropy."""
    deficit = mean_entropy < temp.target
    return (math.exp(temp.lam) if deficit else 0.0), deficit


# ---------------------------------------------------------------------------
# Rollout records and the TC-GRPO step

@dataclass(frozen=True)
class DecisionRecord:
    """One latched decision: frozen candidates, the choice, and p_old."""

    obs: TokenizedObs
    candidates: Tuple[Trajectory, ...]
    chosen: int
    p_old: float
    t: int

    def __post_init__(self):
        if not 0 <= self.chosen < len(self.candidates):
            raise ValueError("chosen index out of range")
        if not 0.0 < self.p_old <= 1.0:
            raise ValueError("p_old must be in (0, 1]")


def tcgrpo_loss(groups, params: nn.ParamSet, beta: Optional[float] = None,
                temp: Optional[EntropyTemp] = None,
                eps: float = CLIP_EPS_DEFAULT,
                std_floor: float = STD_FLOOR_DEFAULT,
                tape: Optional[nn.Tape] = None):
    """Negated TC-GRPO objective over groups of (records, reward) rollouts.

    Re-scores the stored candidate sets under the current parameters,
    forms clipped importance-ratio terms against the stored p_old, and adds
    the entropy bonus, averaging over all decision points. When beta is
    None the bonus weight is gated from this batch's mean entropy via
    `temp`. Returns (loss TVal, stats dict, tape).
    """
    tape = tape or nn.Tape(record=True)
    surrogates: List[nn.TVal] = []
    entropies: List[nn.TVal] = []
    ratio_sum = 0.0
    for group in groups:
        advantages = group_advantage([reward for _, reward in group], std_floor)
        for (records, _), adv in zip(group, advantages):
            for rec in records:
                scores = score_trajectories(list(rec.candidates), rec.obs, params, tape)
                probs = tape.normalize_sum(scores)
                p_new = tape.pick(probs, rec.chosen)
                ratio = tape.scale(p_new, 1.0 / rec.p_old)
                unclipped = tape.scale(ratio, float(adv))
                clipped = tape.scale(tape.clip_stopgrad(ratio, 1.0 - eps, 1.0 + eps),
                                     float(adv))
                surrogates.append(tape.minimum(unclipped, clipped))
                entropies.append(tape.entropy(probs))
                ratio_sum += float(ratio.data)
    if not surrogates:
        raise ValueError("no decision points in groups")
    n = len(surrogates)
    mean_sur = tape.scale(tape.add_n(surrogates), 1.0 / n)
    mean_ent = tape.scale(tape.add_n(entropies), 1.0 / n)
    if beta is None:
        beta = temp.beta(float(mean_ent.data)) if temp is not None else 0.0
    objective = tape.add(mean_sur, tape.scale(mean_ent, beta)) if beta != 0.0 else mean_sur
    loss = tape.scale(objective, -1.0)  # ascend the objective
    stats = {
        "objective": float(objective.data),
        "ratio_mean": ratio_sum / n,
        "entropy_mean": float(mean_ent.data),
        "beta": beta,
        "n_decisions": n,
    }
    return loss, stats, tape


def tcgrpo_step(groups, params: nn.ParamSet, temp: EntropyTemp,
                lr: float = 3e-4, eps: float = CLIP_EPS_DEFAULT,
                std_floor: float = STD_FLOOR_DEFAULT,
                entropy_enabled: bool = True) -> Dict[str, float]:
    """One ascent step of the TC-GRPO objective plus the lambda update.

    groups: sequence of groups; each group is a list of (records, reward)
    rollouts collected from the same clip. Returns logged statistics.
    """
    loss, stats, tape = tcgrpo_loss(
        groups, params,
        beta=None if entropy_enabled else 0.0,
        temp=temp, eps=eps, std_floor=std_floor)
    if not np.isfinite(loss.data):
        raise nn.NonFiniteGradient("non-finite TC-GRPO loss")
    grads = tape.backward(loss)
    nn.optimizer_step(params, grads, lr)
    if entropy_enabled:
        temp.update(stats["entropy_mean"])
    return stats
