"""Kinematic bicycle dynamics, iLQR trajectory tracking, latched execution."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

ACCEL_MIN, ACCEL_MAX = -6.0, 4.0
STEER_MIN, STEER_MAX = -0.6, 0.6


class IlqrDivergence(RuntimeError):
    """Non-finite cost during rollout; caller should fall back to zero controls."""


@dataclass(frozen=True)
class VehState:
    x: float
    y: float
    yaw: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.v])


@dataclass(frozen=True)
class Control:
    accel: float
    steer: float

    def __post_init__(self):
        object.__setattr__(self, "accel", float(np.clip(self.accel, ACCEL_MIN, ACCEL_MAX)))
        object.__setattr__(self, "steer", float(np.clip(self.steer, STEER_MIN, STEER_MAX)))


@dataclass(frozen=True)
class IlqrConfig:
    q: np.ndarray = None          # diagonal state weights (x, y, yaw, v)
    r: np.ndarray = None          # diagonal control weights (accel, steer)
    max_iters: int = 50
    tol: float = 1e-4
    wheelbase: float = 2.8
    dt: float = 0.1

    def __post_init__(self):
        if self.q is None:
            object.__setattr__(self, "q", np.array([10.0, 10.0, 1.0, 1.0]))
        if self.r is None:
            object.__setattr__(self, "r", np.array([0.1, 1.0]))
        if np.any(self.q < 0) or np.any(self.r < 0):
            raise ValueError("cost weights must be non-negative")
        if self.wheelbase <= 0:
            raise ValueError("wheelbase must be positive")


def bicycle_step(s: VehState, u: Control, dt: float, wheelbase: float = 2.8) -> VehState:
    """Forward-Euler kinematic bicycle; speed clamps at zero (no reverse)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return VehState(
        x=s.x + s.v * math.cos(s.yaw) * dt,
        y=s.y + s.v * math.sin(s.yaw) * dt,
        yaw=s.yaw + (s.v / wheelbase) * math.tan(u.steer) * dt,
        v=max(0.0, s.v + u.accel * dt),
    )


def reference_from_trajectory(traj, start: VehState) -> List[VehState]:
    """Per-step reference states from trajectory waypoints.

    Positions come from waypoints, yaw from the finite-difference heading of
    consecutive waypoints, speed from the waypoint speed field; zero-length
    segments inherit the previous yaw (the first falls back to start.yaw).
    """
    pts = traj.points
    h = pts.shape[0]
    if h < 2:
        raise ValueError("trajectory needs at least 2 waypoints")
    refs: List[VehState] = []
    yaw_prev = start.yaw
    for k in range(h):
        a = pts[max(k - 1, 0), :2]
        b = pts[min(k + 1, h - 1), :2]
        d = b - a
        if np.hypot(d[0], d[1]) > 1e-9:
            yaw_prev = math.atan2(d[1], d[0])
        refs.append(VehState(float(pts[k, 0]), float(pts[k, 1]), yaw_prev, float(pts[k, 2])))
    return refs


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def _wrap(theta: float) -> float:
    return math.atan2(math.sin(theta), math.cos(theta))


def _forward(x0, controls, refs, q, r, dt, wb):
    """Roll controls through the bicycle; scalar math keeps this hot path fast."""
    h = refs.shape[0]
    states = np.empty((h, 4))
    states[0] = x0
    q0, q1, q2, q3 = q
    r0, r1 = r
    ex = x0[0] - refs[0, 0]
    ey = x0[1] - refs[0, 1]
    eyaw = _wrap(x0[2] - refs[0, 2])
    ev = x0[3] - refs[0, 3]
    cost = q0 * ex * ex + q1 * ey * ey + q2 * eyaw * eyaw + q3 * ev * ev
    x, y, yaw, v = x0
    for k in range(h - 1):
        accel = _clamp(controls[k, 0], ACCEL_MIN, ACCEL_MAX)
        steer = _clamp(controls[k, 1], STEER_MIN, STEER_MAX)
        x += v * math.cos(yaw) * dt
        y += v * math.sin(yaw) * dt
        yaw += (v / wb) * math.tan(steer) * dt
        v = max(0.0, v + accel * dt)
        states[k + 1, 0] = x
        states[k + 1, 1] = y
        states[k + 1, 2] = yaw
        states[k + 1, 3] = v
        ex = x - refs[k + 1, 0]
        ey = y - refs[k + 1, 1]
        eyaw = _wrap(yaw - refs[k + 1, 2])
        ev = v - refs[k + 1, 3]
        cost += (q0 * ex * ex + q1 * ey * ey + q2 * eyaw * eyaw + q3 * ev * ev
                 + r0 * accel * accel + r1 * steer * steer)
    if not math.isfinite(cost):
        raise IlqrDivergence("non-finite rollout cost")
    return states, cost


def _warm_start(x0, refs, dt, wb):
    """Initial controls from the reference's own finite-difference profile."""
    h = refs.shape[0]
    controls = np.zeros((h - 1, 2))
    for k in range(h - 1):
        dv = refs[k + 1, 3] - refs[k, 3]
        controls[k, 0] = _clamp(dv / dt, ACCEL_MIN, ACCEL_MAX)
        v = max(refs[k, 3], 0.5)
        dyaw = _wrap(refs[k + 1, 2] - refs[k, 2])
        controls[k, 1] = _clamp(math.atan(dyaw * wb / (v * dt)), STEER_MIN, STEER_MAX)
    return controls


def ilqr_solve(x0: VehState, ref: Sequence[VehState], cfg: IlqrConfig = IlqrConfig()) -> List[Control]:
    """Iteratively refine a tracking control sequence via local linearization.

    Minimizes sum ||x_k - ref_k||_Q^2 + ||u_k||_R^2 over the horizon with a
    backtracking line search; the accepted cost never increases. Returns
    len(ref)-1 controls within the actuator bounds.
    """
    h = len(ref)
    if h < 2:
        raise ValueError("reference must have at least 2 states")
    refs = np.array([s.as_array() for s in ref])
    q, r = cfg.q, cfg.r
    q0, q1, q2, q3 = (float(w) for w in q)
    r0, r1 = (float(w) for w in r)
    dt, wb = cfg.dt, cfg.wheelbase
    x0_arr = x0.as_array()
    controls = _warm_start(x0_arr, refs, dt, wb)
    states, cost = _forward(x0_arr, controls, refs, q, r, dt, wb)
    reg = 1e-6
    q_diag = np.diag([2.0 * q0, 2.0 * q1, 2.0 * q2, 2.0 * q3])
    r_diag = np.diag([2.0 * r0, 2.0 * r1])

    for _ in range(cfg.max_iters):
        # backward pass on the linearized system / quadraticized cost
        k_ff = np.zeros((h - 1, 2))
        k_fb = np.zeros((h - 1, 2, 4))
        vx = np.array([
            2.0 * q0 * (states[-1, 0] - refs[-1, 0]),
            2.0 * q1 * (states[-1, 1] - refs[-1, 1]),
            2.0 * q2 * _wrap(states[-1, 2] - refs[-1, 2]),
            2.0 * q3 * (states[-1, 3] - refs[-1, 3]),
        ])
        vxx = q_diag.copy()
        failed = False
        for k in range(h - 2, -1, -1):
            sx, sy, syaw, sv = states[k]
            accel = _clamp(controls[k, 0], ACCEL_MIN, ACCEL_MAX)
            steer = _clamp(controls[k, 1], STEER_MIN, STEER_MAX)
            cos_y, sin_y = math.cos(syaw), math.sin(syaw)
            tan_s = math.tan(steer)
            moving = 1.0 if sv + accel * dt > 0.0 else 0.0
            a_mat = np.array([
                [1.0, 0.0, -sv * sin_y * dt, cos_y * dt],
                [0.0, 1.0, sv * cos_y * dt, sin_y * dt],
                [0.0, 0.0, 1.0, tan_s / wb * dt],
                [0.0, 0.0, 0.0, moving],
            ])
            b_mat = np.array([
                [0.0, 0.0],
                [0.0, 0.0],
                [0.0, sv / wb * (1.0 + tan_s * tan_s) * dt],
                [moving * dt, 0.0],
            ])
            lx = np.array([
                2.0 * q0 * (sx - refs[k, 0]),
                2.0 * q1 * (sy - refs[k, 1]),
                2.0 * q2 * _wrap(syaw - refs[k, 2]),
                2.0 * q3 * (sv - refs[k, 3]),
            ])
            lu = np.array([2.0 * r0 * controls[k, 0], 2.0 * r1 * controls[k, 1]])
            qx = lx + a_mat.T @ vx
            qu = lu + b_mat.T @ vx
            qxx = q_diag + a_mat.T @ vxx @ a_mat
            quu = r_diag + b_mat.T @ vxx @ b_mat
            qux = b_mat.T @ vxx @ a_mat
            # closed-form inverse of the regularized 2x2 control Hessian
            m00 = quu[0, 0] + reg
            m11 = quu[1, 1] + reg
            m01 = quu[0, 1]
            det = m00 * m11 - m01 * m01
            if det <= 0.0 or m00 <= 0.0:
                failed = True
                break
            inv = np.array([[m11, -m01], [-m01, m00]]) / det
            k_ff[k] = -inv @ qu
            k_fb[k] = -inv @ qux
            vx = qx + k_fb[k].T @ quu @ k_ff[k] + k_fb[k].T @ qu + qux.T @ k_ff[k]
            vxx = qxx + k_fb[k].T @ quu @ k_fb[k] + k_fb[k].T @ qux + qux.T @ k_fb[k]
            vxx = 0.5 * (vxx + vxx.T)
        if failed:
            reg *= 10.0
            if reg > 1e8:
                break
            continue

        # forward pass with backtracking on the feedforward term
        improved = False
        for alpha in (1.0, 0.5, 0.25, 0.1, 0.03):
            new_controls = np.empty_like(controls)
            trial_states = np.empty_like(states)
            trial_states[0] = x0_arr
            x, y, yaw, v = x0_arr
            new_cost = (q0 * (x - refs[0, 0]) ** 2 + q1 * (y - refs[0, 1]) ** 2
                        + q2 * _wrap(yaw - refs[0, 2]) ** 2 + q3 * (v - refs[0, 3]) ** 2)
            for k in range(h - 1):
                dx0 = x - states[k, 0]
                dx1 = y - states[k, 1]
                dx2 = yaw - states[k, 2]
                dx3 = v - states[k, 3]
                ua = controls[k, 0] + alpha * k_ff[k, 0] + (
                    k_fb[k, 0, 0] * dx0 + k_fb[k, 0, 1] * dx1
                    + k_fb[k, 0, 2] * dx2 + k_fb[k, 0, 3] * dx3)
                us = controls[k, 1] + alpha * k_ff[k, 1] + (
                    k_fb[k, 1, 0] * dx0 + k_fb[k, 1, 1] * dx1
                    + k_fb[k, 1, 2] * dx2 + k_fb[k, 1, 3] * dx3)
                ua = _clamp(ua, ACCEL_MIN, ACCEL_MAX)
                us = _clamp(us, STEER_MIN, STEER_MAX)
                new_controls[k, 0] = ua
                new_controls[k, 1] = us
                x += v * math.cos(yaw) * dt
                y += v * math.sin(yaw) * dt
                yaw += (v / wb) * math.tan(us) * dt
                v = max(0.0, v + ua * dt)
                trial_states[k + 1] = (x, y, yaw, v)
                new_cost += (q0 * (x - refs[k + 1, 0]) ** 2
                             + q1 * (y - refs[k + 1, 1]) ** 2
                             + q2 * _wrap(yaw - refs[k + 1, 2]) ** 2
                             + q3 * (v - refs[k + 1, 3]) ** 2
                             + r0 * ua * ua + r1 * us * us)
            if not math.isfinite(new_cost):
                raise IlqrDivergence("non-finite cost in forward pass")
            if new_cost < cost - 1e-12:
                improved = True
                break
        if not improved:
            reg *= 10.0
            if reg > 1e8:
                break
            continue

        reg = max(reg * 0.5, 1e-9)
        decrease = cost - new_cost
        controls, states, cost = new_controls, trial_states, new_cost
        if decrease < cfg.tol:
            break

    return [Control(float(u[0]), float(u[1])) for u in controls]


class LatchPlan:
    """Sequential executor for the first h_reuse controls of one solve.

    Emits controls one at a time; ``abort()`` discards the remainder and
    requests replanning (used when the instantaneous TTC dips below the
    abort threshold).
    """

    def __init__(self, controls: Sequence[Control], h_reuse: int):
        if not 1 <= h_reuse <= len(controls):
            raise ValueError(f"h_reuse {h_reuse} out of range for {len(controls)} controls")
        self._controls = list(controls[:h_reuse])
        self._cursor = 0
        self.aborted = False

    @property
    def consumed(self) -> int:
        return self._cursor

    @property
    def exhausted(self) -> bool:
        return self.aborted or self._cursor >= len(self._controls)

    @property
    def replan_requested(self) -> bool:
        return self.exhausted

    def next_control(self) -> Control:
        if self.exhausted:
            raise RuntimeError("latch plan exhausted")
        u = self._controls[self._cursor]
        self._cursor += 1
        return u

    def abort(self) -> None:
        self.aborted = True


def latch_controls(controls: Sequence[Control], h_reuse: int) -> LatchPlan:
    return LatchPlan(controls, h_reuse)
