"""Autoregressive trajectory prediction with a trained ``SfmgNet``.

At every step the model sees each predicted agent's last ``n`` positions,
its goal direction, the nearest obstacle, up to nine neighbours and its group,
and returns a total force that is integrated semi-implicitly:
``v' = v + f dt``, ``p' = p + v' dt``. Agents whose history is too short to
fill a window are moved at constant velocity and only act as neighbours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Trajectory, obstacle_segments, unit_vectors
from .features import FeatureConfig, build_batch
from .goal_imm import GoalEstimator, ImmConfig

GOAL_SOURCES = ("imm", "annotated")
NEIGHBOR_MODES = ("joint", "cv")


def horizon_steps(horizon_s: float, dt: float) -> int:
    """Number of steps needed to cover ``horizon_s``; robust to float noise."""
    if horizon_s <= 0 or dt <= 0:
        raise ValueError("horizon and dt must be positive")
    return int(math.ceil(horizon_s / dt - 1e-9))


@dataclass
class RolloutConfig:
    horizon_s: float = 4.8
    goal_source: str = "imm"
    neighbor_mode: str = "joint"
    arrive_radius: float = 0.3
    nominal_speed: float = 1.34
    imm: ImmConfig = field(default_factory=ImmConfig)

    def __post_init__(self):
        if self.goal_source not in GOAL_SOURCES:
            raise ValueError(f"goal_source must be one of {GOAL_SOURCES}")
        if self.neighbor_mode not in NEIGHBOR_MODES:
            raise ValueError(f"neighbor_mode must be one of {NEIGHBOR_MODES}")


def feature_config(model, **overrides) -> FeatureConfig:
    c = model.config
    return FeatureConfig(n=c.n, dt=c.dt, max_neighbors=c.max_neighbors, **overrides)


def estimate_goals(histories: dict, dt: float, cfg: RolloutConfig, goals: Optional[dict] = None) -> dict:
    """Goal point per agent: annotated when requested and known, otherwise IMM."""
    est = GoalEstimator(cfg.imm)
    out = {}
    for aid, h in histories.items():
        if cfg.goal_source == "annotated" and goals is not None and aid in goals:
            out[aid] = np.asarray(goals[aid], dtype=float)
        elif len(h) >= 2:
            out[aid] = est.goal(h, dt)
        else:
            out[aid] = np.asarray(h[-1], dtype=float)
    return out


def _joint(model, windows, ego_ids, goal_pts, speeds, cv_pos, cv_vel, cv_ids, group_of,
           segments, n_steps, fcfg, arrive_radius):
    """Roll ``windows`` (A, n, 2) forward ``n_steps``; returns (A, n_steps, 2)."""
    dt = fcfg.dt
    W = windows.copy()
    ids = list(ego_ids) + list(cv_ids)
    gidx = np.array([group_of.get(i, -1) for i in ids])
    A = len(W)
    out = np.zeros((A, n_steps, 2))
    for s in range(n_steps):
        P = W[:, -1]
        e, dist = unit_vectors(goal_pts - P)
        e[dist < arrive_radius] = 0.0
        allp = np.concatenate([P, cv_pos + s * dt * cv_vel]) if len(cv_ids) else P
        batch = build_batch(W, e, speeds, np.arange(A), allp, ids, gidx, segments, fcfg)
        f, _ = model.forward(batch)
        v = (W[:, -1] - W[:, -2]) / dt + f * dt
        p = P + v * dt
        W = np.concatenate([W[:, 1:], p[:, None]], axis=1)
        out[:, s] = p
    return out


def rollout(model, histories: dict, horizon_s: float = 4.8, goals: Optional[dict] = None,
            groups=(), obstacles=(), desired_speeds: Optional[dict] = None,
            cfg: Optional[RolloutConfig] = None, out_every: int = 1, t0: int = 0) -> dict:
    """Predict every agent with at least ``n`` samples of history.

    ``histories`` maps agent id to its observed positions at the model's dt,
    all ending at the same instant. Returns ``{id: Trajectory}`` holding
    ``ceil(horizon_s / (dt * out_every))`` points sampled every ``out_every``
    model steps, numbered ``t0 + 1, t0 + 2, ...``.
    """
    cfg = cfg or RolloutConfig(horizon_s=horizon_s)
    n, dt = model.config.n, model.config.dt
    fcfg = feature_config(model, nominal_speed=cfg.nominal_speed)
    hist = {aid: np.asarray(h, dtype=float).reshape(-1, 2) for aid, h in histories.items()}
    egos = [aid for aid, h in hist.items() if len(h) >= n]
    if not egos:
        raise ValueError(f"no agent has the {n} samples of history the model needs")
    others = [aid for aid in hist if aid not in egos]
    n_out = horizon_steps(horizon_s, dt * out_every)
    n_steps = n_out * out_every

    goal_pts = estimate_goals({a: hist[a] for a in egos}, dt, cfg, goals)
    speeds = {a: (desired_speeds or {}).get(a, cfg.nominal_speed) for a in egos}
    group_of = {m: g.id for g in groups for m in g.member_ids}
    segments = obstacle_segments(list(obstacles))

    def cv_state(aids):
        pos = np.array([hist[a][-1] for a in aids]).reshape(-1, 2)
        vel = np.array([(hist[a][-1] - hist[a][-2]) / dt if len(hist[a]) > 1 else np.zeros(2)
                        for a in aids]).reshape(-1, 2)
        return pos, vel

    paths = {}
    if cfg.neighbor_mode == "joint":
        cv_pos, cv_vel = cv_state(others)
        res = _joint(model, np.array([hist[a][-n:] for a in egos]), egos,
                     np.array([goal_pts[a] for a in egos]), np.array([speeds[a] for a in egos]),
                     cv_pos, cv_vel, others, group_of, segments, n_steps, fcfg, cfg.arrive_radius)
        paths = dict(zip(egos, res))
    else:
        for a in egos:
            rest = [b for b in hist if b != a]
            cv_pos, cv_vel = cv_state(rest)
            res = _joint(model, hist[a][-n:][None], [a], goal_pts[a][None], np.array([speeds[a]]),
                         cv_pos, cv_vel, rest, group_of, segments, n_steps, fcfg, cfg.arrive_radius)
            paths[a] = res[0]
    steps = t0 + 1 + np.arange(n_out)
    return {a: Trajectory(a, steps, paths[a][out_every - 1::out_every]) for a in egos}


def constant_velocity(histories: dict, dt: float, horizon_s: float, out_every: int = 1,
                      min_samples: int = 2, t0: int = 0) -> dict:
    """Straight-line extrapolation at each agent's last observed velocity."""
    n_out = horizon_steps(horizon_s, dt * out_every)
    steps = t0 + 1 + np.arange(n_out)
    k = (np.arange(n_out) + 1) * out_every * dt
    out = {}
    for aid, h in histories.items():
        h = np.asarray(h, dtype=float).reshape(-1, 2)
        if len(h) < min_samples:
            continue
        v = (h[-1] - h[-2]) / dt if len(h) > 1 else np.zeros(2)
        out[aid] = Trajectory(aid, steps, h[-1] + k[:, None] * v)
    return out
