"""Diffusion trajectory generator: scene encoding, K-step denoising,
imitation pretraining, and on-policy longitudinal optimization (OGO)."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .bev_env import TokenizedObs

HORIZON = 30
TRAJ_DT = 0.1
NORM_CLIP = 4.0  # normalized-envelope clamp for sampled trajectories


@dataclass(frozen=True)
class Trajectory:
    """H waypoints (x, y, v, a) in the ego frame at decision time.

    Waypoint 0 sits at the decision time itself, so waypoint k is the
    state at look-ahead k * dt.
    """

    points: np.ndarray  # (H, 4)
    dt: float = TRAJ_DT

    @property
    def horizon(self) -> int:
        return self.points.shape[0]

    def arc_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points[:, :2], axis=0), axis=1).sum())


def check_trajectory(traj: Trajectory) -> None:
    if not np.all(np.isfinite(traj.points)):
        raise ValueError("non-finite trajectory")
    if np.any(traj.points[:, 2] < -1e-9):
        raise ValueError("negative speed waypoint")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Forward-noising schedule; betas strictly increase and live in (0, 1)."""

    k_steps: int = 10
    beta_start: float = 0.05
    beta_end: float = 0.5
    betas: np.ndarray = field(init=False)
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.k_steps)
        if np.any(betas <= 0.0) or np.any(betas >= 1.0) or np.any(np.diff(betas) <= 0):
            raise ValueError("betas must be strictly increasing within (0, 1)")
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))


@dataclass
class GenConfig:
    token_dim: int = 32
    emb_dim: int = 64
    hidden: int = 128
    horizon: int = HORIZON
    k_steps: int = 10
    seed: int = 0

    def as_dict(self) -> dict:
        return dict(token_dim=self.token_dim, emb_dim=self.emb_dim,
                    hidden=self.hidden, horizon=self.horizon,
                    k_steps=self.k_steps, seed=self.seed)


MAP_FEAT = 5
AGENT_FEAT = 7
NAV_FEAT = 3
BEV_FEAT = 4 * 8 * 8


def build_generator_params(cfg: Optional[GenConfig] = None) -> nn.ParamSet:
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(cfg.seed)
    params = nn.ParamSet(meta={"component": "generator", "arch": cfg.as_dict(),
                               "norm": {"mean": [0.0, 0.0, 0.0], "std": [1.0, 1.0, 1.0]}})
    d, e, h = cfg.token_dim, cfg.emb_dim, cfg.hidden
    nn.init_mlp(params, "map_enc", [MAP_FEAT, d, d], rng)
    nn.init_mlp(params, "agent_enc", [AGENT_FEAT, d, d], rng)
    nn.init_mlp(params, "nav_enc", [NAV_FEAT, d, d], rng)
    nn.init_mlp(params, "bev_enc", [BEV_FEAT, d, d], rng)
    params.add("fuse_query", rng.uniform(-0.3, 0.3, size=(1, d)))
    params.add("null_map", rng.uniform(-0.3, 0.3, size=(1, d)))
    params.add("null_agent", rng.uniform(-0.3, 0.3, size=(1, d)))
    nn.init_attention(params, "fuse_attn", d, d, d, rng)
    nn.init_mlp(params, "fuse_mlp", [d, e, e], rng)
    traj_dim = 3 * cfg.horizon
    nn.init_mlp(params, "denoiser",
                [traj_dim + e + cfg.k_steps, h, h, traj_dim], rng)
    return params


def gen_config_from(params: nn.ParamSet) -> GenConfig:
    return GenConfig(**params.meta["arch"])


# ---------------------------------------------------------------------------
# Normalization

def set_normalizer(params: nn.ParamSet, trajs: Sequence[Trajectory]) -> None:
    """Per-coordinate affine stats (x, y, v) over a training corpus."""
    stacked = np.concatenate([t.points[:, :3] for t in trajs], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 0.1)
    params.meta["norm"] = {"mean": mean.tolist(), "std": std.tolist()}


def _norm_stats(params: nn.ParamSet):
    norm = params.meta["norm"]
    return np.asarray(norm["mean"]), np.asarray(norm["std"])


def normalize_traj(params: nn.ParamSet, points: np.ndarray) -> np.ndarray:
    """(H, 4) metric waypoints -> flat (3H,) normalized (x, y, v)."""
    mean, std = _norm_stats(params)
    return ((points[:, :3] - mean) / std).reshape(-1)


def denormalize_traj(params: nn.ParamSet, flat: np.ndarray, dt: float = TRAJ_DT) -> Trajectory:
    """Flat normalized (3H,) -> Trajectory with v clamped and a re-derived."""
    mean, std = _norm_stats(params)
    xyv = flat.reshape(-1, 3) * std + mean
    h = xyv.shape[0]
    pts = np.zeros((h, 4))
    pts[:, :3] = xyv
    pts[:, 2] = np.maximum(pts[:, 2], 0.0)
    pts[:, 3] = _accel_from_speed(pts[:, 2], dt)
    return Trajectory(points=pts, dt=dt)


def _accel_from_speed(v: np.ndarray, dt: float) -> np.ndarray:
    a = np.zeros_like(v)
    if v.shape[0] >= 2:
        a[1:-1] = (v[2:] - v[:-2]) / (2.0 * dt)
        a[0] = (v[1] - v[0]) / dt
        a[-1] = (v[-1] - v[-2]) / dt
    return a


# ---------------------------------------------------------------------------
# Scene encoding

def _encode_tokens(tape: nn.Tape, params: nn.ParamSet, prefix: str,
                   feats: np.ndarray, null_name: str) -> nn.TVal:
    if feats.shape[0] == 0:
        return tape.param(params, null_name)
    x = tape.const(feats)
    return nn.apply_mlp(tape, params, prefix, x, 2)


def encode_scene(obs: TokenizedObs, params: nn.ParamSet,
                 tape: Optional[nn.Tape] = None) -> nn.TVal:
    """Fuse map/agent/nav/BEV tokens into one scene embedding via attention."""
    tape = tape or nn.Tape(record=False)
    t_m = _encode_tokens(tape, params, "map_enc", obs.map_tokens, "null_map")
    t_a = _encode_tokens(tape, params, "agent_enc", obs.agent_tokens, "null_agent")
    t_n = nn.apply_mlp(tape, params, "nav_enc", tape.const(obs.nav[None, :]), 2)
    t_b = nn.apply_mlp(tape, params, "bev_enc",
                       tape.const(obs.bev8.reshape(1, -1)), 2)
    tokens = tape.concat([t_b, t_m, t_a, t_n], axis=0)
    query = tape.param(params, "fuse_query")
    fused = nn.apply_attention(tape, params, "fuse_attn", query, tokens)
    return nn.apply_mlp(tape, params, "fuse_mlp", fused, 2)


def _denoise_net(tape: nn.Tape, params: nn.ParamSet, x: nn.TVal,
                 emb: nn.TVal, k_onehot: np.ndarray) -> nn.TVal:
    inp = tape.concat([x, emb, tape.const(k_onehot)], axis=-1)
    return nn.apply_mlp(tape, params, "denoiser", inp, 3)


def _k_onehot(k: np.ndarray, k_steps: int) -> np.ndarray:
    out = np.zeros((k.shape[0], k_steps))
    out[np.arange(k.shape[0]), k - 1] = 1.0
    return out


# ---------------------------------------------------------------------------
# Sampling

def sample_candidates(obs: TokenizedObs, params: nn.ParamSet, m_count: int,
                      schedule: DiffusionSchedule, rng: np.random.Generator) -> List[Trajectory]:
    """Ancestral denoising of m_count independent Gaussian inits."""
    if m_count < 1:
        raise ValueError("m_count must be >= 1")
    tape = nn.Tape(record=False)
    emb = encode_scene(obs, params, tape)
    emb_rep = nn.TVal(np.repeat(emb.data, m_count, axis=0), -1)
    traj_dim = 3 * gen_config_from(params).horizon
    x = rng.standard_normal((m_count, traj_dim))
    k_steps = schedule.k_steps
    for k in range(k_steps, 0, -1):
        onehot = _k_onehot(np.full(m_count, k, dtype=int), k_steps)
        eps_hat = _denoise_net(tape, params, nn.TVal(x, -1), emb_rep, onehot).data
        alpha = schedule.alphas[k - 1]
        abar = schedule.alpha_bars[k - 1]
        x = (x - schedule.betas[k - 1] / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
        if k > 1:
            abar_prev = schedule.alpha_bars[k - 2]
            sigma = math.sqrt((1.0 - abar_prev) / (1.0 - abar) * schedule.betas[k - 1])
            x = x + sigma * rng.standard_normal(x.shape)
    x = np.clip(x, -NORM_CLIP, NORM_CLIP)
    return [denormalize_traj(params, row) for row in x]


# ---------------------------------------------------------------------------
# Imitation pretraining

def il_train_step(batch: Sequence[Tuple[TokenizedObs, Trajectory]],
                  params: nn.ParamSet, schedule: DiffusionSchedule,
                  rng: np.random.Generator, lr: float = 1e-3) -> float:
    """One denoising-regression step on (observation, expert trajectory) pairs."""
    if not batch:
        raise ValueError("empty batch")
    tape = nn.Tape(record=True)
    ks = rng.integers(1, schedule.k_steps + 1, size=len(batch))
    noisy_rows = []
    noise_rows = []
    emb_rows = []
    for (obs, traj), k in zip(batch, ks):
        x0 = normalize_traj(params, traj.points)
        eps = rng.standard_normal(x0.shape)
        abar = schedule.alpha_bars[k - 1]
        noisy_rows.append(math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps)
        noise_rows.append(eps)
        emb_rows.append(encode_scene(obs, params, tape))
    x_in = tape.const(np.stack(noisy_rows))
    emb = tape.stack_rows(emb_rows)
    emb = tape.reshape(emb, (len(batch), -1))
    pred = _denoise_net(tape, params, x_in, emb, _k_onehot(ks, schedule.k_steps))
    loss = tape.mse(pred, tape.const(np.stack(noise_rows)))
    if not np.isfinite(loss.data):
        raise nn.NonFiniteGradient("non-finite imitation loss")
    grads = tape.backward(loss)
    nn.optimizer_step(params, grads, lr)
    return float(loss.data)


# ---------------------------------------------------------------------------
# On-policy generator optimization

@dataclass(frozen=True)
class OgoSample:
    obs: TokenizedObs
    traj_opt: Trajectory
    trigger: str  # "decel" | "accel"
    saturated: bool = False


def _resample_polyline(xy: np.ndarray, arcs: np.ndarray) -> np.ndarray:
    """Points at the requested cumulative arc lengths along (and beyond) xy."""
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    # collapse zero-length segments for interpolation
    keep = np.concatenate([[True], seg > 1e-12])
    cum_u, xy_u = cum[keep], xy[keep]
    out = np.zeros((arcs.shape[0], 2))
    inside = arcs <= total
    if cum_u.shape[0] == 1:
        out[inside] = xy_u[0]
    else:
        out[inside, 0] = np.interp(arcs[inside], cum_u, xy_u[:, 0])
        out[inside, 1] = np.interp(arcs[inside], cum_u, xy_u[:, 1])
    if np.any(~inside):
        # extend along the final heading for arcs beyond the path end
        d = xy_u[-1] - xy_u[-2] if cum_u.shape[0] >= 2 else np.array([1.0, 0.0])
        d = d / max(np.linalg.norm(d), 1e-12)
        over = arcs[~inside] - total
        out[~inside] = xy_u[-1] + over[:, None] * d
    return out


def ogo_adjust(raw: Trajectory, trigger: str, ratio: float) -> Tuple[Trajectory, bool]:
    """Rescale travel distance by `ratio` along the unchanged spatial path.

    Finds a constant acceleration offset by bisection such that re-integrating
    the (clamped) speeds covers ratio x the original arc length, then
    resamples the original polyline at the new cumulative arcs. Returns
    (trajectory, saturated); saturated marks an unreachable target where the
    closest achievable profile is returned instead.
    """
    if trigger not in ("decel", "accel"):
        raise ValueError(f"unknown trigger {trigger!r}")
    if ratio == 1.0:
        return Trajectory(points=raw.points.copy(), dt=raw.dt), False
    if trigger == "decel" and not 0.0 < ratio < 1.0:
        raise ValueError("decel requires ratio in (0, 1)")
    if trigger == "accel" and not ratio > 1.0:
        raise ValueError("accel requires ratio > 1")
    pts = raw.points
    h = pts.shape[0]
    dt = raw.dt
    total = raw.arc_length()
    if total <= 1e-9:
        raise ValueError("zero-length trajectory")
    target = ratio * total
    times = np.arange(h) * dt
    v0 = pts[:, 2]

    def profile(da: float):
        w = np.maximum(v0 + da * times, 0.0)
        arcs = np.concatenate([[0.0], np.cumsum(0.5 * (w[:-1] + w[1:]) * dt)])
        return w, arcs

    lo, hi = -6.0, 4.0
    _, arcs_lo = profile(lo)
    _, arcs_hi = profile(hi)
    saturated = False
    if target <= arcs_lo[-1]:
        da, saturated = lo, target < arcs_lo[-1] - 1e-9
    elif target >= arcs_hi[-1]:
        da, saturated = hi, target > arcs_hi[-1] + 1e-9
    else:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if profile(mid)[1][-1] < target:
                lo = mid
            else:
                hi = mid
        da = 0.5 * (lo + hi)
    w, arcs = profile(da)
    xy = _resample_polyline(pts[:, :2], arcs)
    out = np.zeros_like(pts)
    out[:, :2] = xy
    out[:, 2] = w
    out[:, 3] = _accel_from_speed(w, dt)
    return Trajectory(points=out, dt=dt), saturated


def ogo_trigger(state=None, raw: Optional[Trajectory] = None,
                gamma_safe: float = 1.5, lag: float = 1.0, *,
                ttc: Optional[float] = None,
                progress: Optional[float] = None) -> str:
    """Decide the longitudinal correction; deceleration has priority.

    Pass either an environment state plus the raw lookahead plan, or the
    already-computed (ttc, progress) pair.
    """
    if ttc is None or progress is None:
        from .bev_env import compute_ttc, ego_progress
        ttc = compute_ttc(state, raw) if ttc is None else ttc
        progress = ego_progress(state) if progress is None else progress
    if ttc < gamma_safe:
        return "decel"
    if progress < lag and ttc > gamma_safe:
        return "accel"
    return "none"


def _sample_noise(traj: Trajectory) -> np.ndarray:
    """Deterministic per-sample corruption noise derived from the target bytes."""
    digest = hashlib.sha256(traj.points.tobytes()).digest()
    seed = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(seed).standard_normal(3 * traj.horizon)


def ogo_finetune_step(batch: Sequence[OgoSample], params: nn.ParamSet,
                      schedule: DiffusionSchedule, lr: float = 1e-3) -> float:
    """Regress the (x, y) waypoints of the adjusted targets.

    Denoises a fixed mid-schedule corruption of each target in a single shot
    (predicted noise -> implied clean sample) and penalizes the squared
    position error against the target, in metric units.
    """
    if not batch:
        raise ValueError("empty batch")
    k_mid = max(1, schedule.k_steps // 2)
    abar = schedule.alpha_bars[k_mid - 1]
    tape = nn.Tape(record=True)
    mean, std = _norm_stats(params)
    noisy = []
    emb_rows = []
    targets = []
    for sample in batch:
        x0 = normalize_traj(params, sample.traj_opt.points)
        eps = _sample_noise(sample.traj_opt)
        noisy.append(math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps)
        emb_rows.append(encode_scene(sample.obs, params, tape))
        targets.append(sample.traj_opt.points[:, :2])
    x_in = tape.const(np.stack(noisy))
    emb = tape.reshape(tape.stack_rows(emb_rows), (len(batch), -1))
    ks = _k_onehot(np.full(len(batch), k_mid, dtype=int), schedule.k_steps)
    eps_hat = _denoise_net(tape, params, x_in, emb, ks)
    # implied clean sample: (x_k - sqrt(1-abar) eps_hat) / sqrt(abar)
    x0_hat = tape.scale(
        tape.sub(x_in, tape.scale(eps_hat, math.sqrt(1.0 - abar))),
        1.0 / math.sqrt(abar))
    b = len(batch)
    hor = batch[0].traj_opt.horizon
    x0_hat = tape.reshape(x0_hat, (b, hor, 3))
    # de-normalize and keep the (x, y) columns
    scale_vec = np.zeros((b, hor, 3))
    scale_vec[:] = std
    mean_vec = np.zeros((b, hor, 3))
    mean_vec[:] = mean
    metric = tape.add(tape.mul(x0_hat, tape.const(scale_vec)), tape.const(mean_vec))
    target_arr = np.stack(targets)
    target_pad = np.zeros((b, hor, 3))
    target_pad[:, :, :2] = target_arr
    mask = np.zeros((b, hor, 3))
    mask[:, :, :2] = 1.0
    masked = tape.mul(metric, tape.const(mask))
    loss = tape.mse(masked, tape.const(target_pad))
    if not np.isfinite(loss.data):
        raise nn.NonFiniteGradient("non-finite ogo loss")
    grads = tape.backward(loss)
    nn.optimizer_step(params, grads, lr)
    return float(loss.data)
