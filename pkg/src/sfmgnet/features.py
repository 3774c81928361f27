"""Per-agent network inputs extracted from trajectories, groups and obstacles.

Extraction follows a fixed order for every agent at every timestep: nearest
obstacle point, then the nine nearest co-present pedestrians, then the group
geometry (rotation angle to bring the other members into view, desired
velocity, unit vector to the group centroid).

Two representations exist: ``FeatureFrame`` for one agent at one timestep and
``FeatureBatch``, a struct of arrays used by training and rollout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Dict, Optional

import numpy as np

from .core import (
    ARRIVED_EPS,
    FAR_FIELD,
    Group,
    Obstacle,
    Trajectory,
    closest_points_on_segments,
    obstacle_segments,
    unit_vectors,
)
from .sim import COINCIDENT_EPS, rotation_to_view, tie_break_direction


@dataclass
class FeatureConfig:
    n: int = 10
    dt: float = 0.1
    max_neighbors: int = 9
    far_field: float = FAR_FIELD
    d_coh: float = 0.5
    fov_half_angle: float = math.radians(100.0)
    nominal_speed: float = 1.34
    exclude_group_neighbors: bool = False


@dataclass
class AnnotatedDataset:
    """Trajectories of one scene plus the annotations the extractor consumes.

    ``forces`` (synthetic data only) maps agent id to a ``(T, 5, 2)`` array
    aligned with that agent's trajectory samples.
    """

    trajectories: Dict[int, Trajectory]
    dt: float
    groups: list = field(default_factory=list)
    obstacles: list = field(default_factory=list)
    destinations: Optional[dict] = None
    desired_speeds: Optional[dict] = None
    forces: Optional[dict] = None
    name: str = ""

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for g in self.groups:
            missing = [m for m in g.member_ids if m not in self.trajectories]
            if missing:
                raise ValueError(f"group {g.id} has members without trajectories: {missing}")

    def __eq__(self, other):
        if not isinstance(other, AnnotatedDataset):
            return NotImplemented

        def same_map(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

        return (self.dt == other.dt and self.trajectories == other.trajectories
                and list(self.groups) == list(other.groups)
                and list(self.obstacles) == list(other.obstacles)
                and same_map(self.destinations, other.destinations)
                and same_map(self.desired_speeds, other.desired_speeds)
                and same_map(self.forces, other.forces))

    __hash__ = None

    def group_of(self, agent_id) -> Optional[Group]:
        for g in self.groups:
            if agent_id in g.member_ids:
                return g
        return None

    def step_range(self):
        if not self.trajectories:
            return 0, -1
        lo = min(int(t.steps[0]) for t in self.trajectories.values())
        hi = max(int(t.steps[-1]) for t in self.trajectories.values())
        return lo, hi

    def dense(self):
        """``(ids, k0, table)`` where ``table[a, k - k0]`` is a position or NaN."""
        ids = list(self.trajectories)
        k0, k1 = self.step_range()
        table = np.full((len(ids), max(k1 - k0 + 1, 0), 2), np.nan)
        for a, aid in enumerate(ids):
            tr = self.trajectories[aid]
            table[a, tr.steps - k0] = tr.positions
        return ids, k0, table


# ---------------------------------------------------------------------------
# single-frame view

@dataclass
class ObservationWindow:
    positions: np.ndarray  # (n, 2), most recent last
    dt_obs: float

    @property
    def n(self):
        return len(self.positions)


@dataclass
class NeighborFeature:
    eta: np.ndarray
    dist: float
    present: bool


@dataclass
class GroupFeature:
    theta: float = 0.0
    v_desired: np.ndarray = field(default_factory=lambda: np.zeros(2))
    eta_centroid: np.ndarray = field(default_factory=lambda: np.zeros(2))
    in_group: bool = False


@dataclass
class FeatureFrame:
    window: ObservationWindow
    goal_dir: np.ndarray
    obstacle_dist: float
    obstacle_eta: np.ndarray
    neighbors: list  # of NeighborFeature, ascending distance, present first
    group: GroupFeature


def normalize_window(positions, n: int):
    """Window relative to its first sample, and per-step displacement lengths."""
    p = np.asarray(positions, dtype=float)
    if p.shape != (n, 2):
        raise ValueError(f"expected a window of {n} positions, got shape {p.shape}")
    dp = p - p[0]
    steps = np.diff(dp, axis=0)
    return dp, np.hypot(steps[:, 0], steps[:, 1])


@dataclass
class FeatureBatch:
    dp: np.ndarray  # (B, n, 2)
    D: np.ndarray  # (B, n-1)
    e: np.ndarray  # (B, 2)
    d_obs: np.ndarray  # (B,)
    eta_obs: np.ndarray  # (B, 2)
    d_nb: np.ndarray  # (B, K)
    eta_nb: np.ndarray  # (B, K, 2)
    nb_present: np.ndarray  # (B, K) bool
    theta: np.ndarray  # (B,)
    v_des: np.ndarray  # (B, 2)
    eta_c: np.ndarray  # (B, 2)
    in_group: np.ndarray  # (B,) bool
    dt: float = 0.1

    def __len__(self):
        return len(self.e)

    def _arrays(self):
        return [f.name for f in fields(self) if f.name != "dt"]

    def __getitem__(self, idx) -> "FeatureBatch":
        return FeatureBatch(**{k: getattr(self, k)[idx] for k in self._arrays()}, dt=self.dt)

    @classmethod
    def concat(cls, batches) -> "FeatureBatch":
        batches = list(batches)
        names = [f.name for f in fields(cls) if f.name != "dt"]
        return cls(**{k: np.concatenate([getattr(b, k) for b in batches]) for k in names},
                   dt=batches[0].dt)

    @classmethod
    def empty(cls, n=10, k=9, dt=0.1) -> "FeatureBatch":
        z = np.zeros
        return cls(z((0, n, 2)), z((0, n - 1)), z((0, 2)), z(0), z((0, 2)), z((0, k)),
                   z((0, k, 2)), z((0, k), bool), z(0), z((0, 2)), z((0, 2)), z(0, bool), dt)

    def frame(self, i: int) -> FeatureFrame:
        n = self.dp.shape[1]
        nbs = [NeighborFeature(self.eta_nb[i, j].copy(), float(self.d_nb[i, j]), bool(self.nb_present[i, j]))
               for j in range(self.d_nb.shape[1])]
        grp = GroupFeature(float(self.theta[i]), self.v_des[i].copy(), self.eta_c[i].copy(),
                           bool(self.in_group[i]))
        return FeatureFrame(ObservationWindow(self.dp[i].copy(), self.dt), self.e[i].copy(),
                            float(self.d_obs[i]), self.eta_obs[i].copy(), nbs, grp)

    @classmethod
    def from_frames(cls, frames) -> "FeatureBatch":
        frames = list(frames)
        if not frames:
            return cls.empty()
        n = frames[0].window.n
        dps, Ds = zip(*(normalize_window(f.window.positions, n) for f in frames))
        return cls(
            dp=np.array(dps), D=np.array(Ds),
            e=np.array([f.goal_dir for f in frames]),
            d_obs=np.array([f.obstacle_dist for f in frames]),
            eta_obs=np.array([f.obstacle_eta for f in frames]),
            d_nb=np.array([[nb.dist for nb in f.neighbors] for f in frames]),
            eta_nb=np.array([[nb.eta for nb in f.neighbors] for f in frames]),
            nb_present=np.array([[nb.present for nb in f.neighbors] for f in frames]),
            theta=np.array([f.group.theta for f in frames]),
            v_des=np.array([f.group.v_desired for f in frames]),
            eta_c=np.array([f.group.eta_centroid for f in frames]),
            in_group=np.array([f.group.in_group for f in frames]),
            dt=frames[0].window.dt_obs,
        )


# ---------------------------------------------------------------------------
# extraction core

def build_batch(windows, e, speeds, ego_index, all_positions, all_ids, group_index,
                segments, cfg: FeatureConfig) -> FeatureBatch:
    """Features for a set of ego agents at one instant.

    ``windows`` ``(A, n, 2)`` are the egos' recent positions, ``e`` their goal
    directions and ``speeds`` their desired speeds. ``all_positions`` ``(M, 2)``
    holds every co-present agent (egos included, at ``ego_index``) and
    ``group_index`` gives a group label per entry of ``all_positions`` (-1 when
    ungrouped).
    """
    A, n = windows.shape[0], windows.shape[1]
    K = cfg.max_neighbors
    dp = windows - windows[:, :1]
    steps = np.diff(windows, axis=1)
    D = np.hypot(steps[..., 0], steps[..., 1])
    P = windows[:, -1]

    if len(segments):
        q, d_obs = closest_points_on_segments(P, segments)
        eta_obs, _ = unit_vectors(P - q)
    else:
        d_obs = np.full(A, cfg.far_field)
        eta_obs = np.zeros((A, 2))

    d_nb = np.full((A, K), cfg.far_field)
    eta_nb = np.zeros((A, K, 2))
    present = np.zeros((A, K), dtype=bool)
    M = len(all_positions)
    if M > 1:
        diff = P[:, None, :] - all_positions[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        mask = np.ones((A, M), dtype=bool)
        mask[np.arange(A), ego_index] = False
        if cfg.exclude_group_neighbors:
            g_ego = group_index[ego_index]
            mask &= ~((g_ego[:, None] >= 0) & (group_index[None, :] == g_ego[:, None]))
        keyed = np.where(mask, dist, np.inf)
        order = np.argsort(keyed, axis=1, kind="stable")[:, :K]
        k = order.shape[1]
        sd = np.take_along_axis(keyed, order, axis=1)
        present[:, :k] = np.isfinite(sd)
        d_nb[:, :k] = np.where(present[:, :k], sd, cfg.far_field)
        sdiff = np.take_along_axis(diff, order[..., None], axis=1)
        safe = np.where(sd < COINCIDENT_EPS, 1.0, np.where(np.isfinite(sd), sd, 1.0))
        eta_nb[:, :k] = np.where(present[:, :k, None], sdiff / safe[..., None], 0.0)
        for a, j in zip(*np.nonzero(present[:, :k] & (sd < COINCIDENT_EPS))):
            eta_nb[a, j] = tie_break_direction(all_ids[ego_index[a]], all_ids[order[a, j]])

    theta = np.zeros(A)
    v_des = np.zeros((A, 2))
    eta_c = np.zeros((A, 2))
    in_group = np.zeros(A, dtype=bool)
    vel = (windows[:, -1] - windows[:, -2]) / cfg.dt
    for a in range(A):
        g = group_index[ego_index[a]]
        if g < 0:
            continue
        members = np.nonzero(group_index == g)[0]
        others = members[members != ego_index[a]]
        if len(others) == 0:
            continue
        in_group[a] = True
        speed = math.hypot(*vel[a])
        gaze = vel[a] / speed if speed >= ARRIVED_EPS else e[a]
        theta[a] = rotation_to_view(gaze, P[a], all_positions[others].mean(axis=0), cfg.fov_half_angle)
        v_des[a] = speeds[a] * e[a]
        to_c = all_positions[members].mean(axis=0) - P[a]
        dist_c = math.hypot(*to_c)
        if dist_c >= cfg.d_coh and np.any(v_des[a]) and dist_c >= ARRIVED_EPS:
            eta_c[a] = to_c / dist_c

    return FeatureBatch(dp, D, e, d_obs, eta_obs, d_nb, eta_nb, present, theta, v_des,
                        eta_c, in_group, cfg.dt)


def _goal_dirs(P, goals):
    dirs, _ = unit_vectors(goals - P)
    return dirs


def _check_dt(dataset: AnnotatedDataset, cfg: FeatureConfig):
    if not math.isclose(dataset.dt, cfg.dt, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"dataset dt {dataset.dt} differs from feature dt {cfg.dt}; resample first")


def _speed(dataset, aid, cfg):
    if dataset.desired_speeds and aid in dataset.desired_speeds:
        return float(dataset.desired_speeds[aid])
    return cfg.nominal_speed


def extract_arrays(dataset: AnnotatedDataset, cfg: FeatureConfig, goals: Optional[dict] = None):
    """All eligible (agent, timestep) frames of a dataset.

    A frame at step ``t`` needs the agent at ``t`` and at each of the ``n``
    preceding steps. Goal directions come from ``goals`` (agent id to point) or
    the dataset's destinations. Returns ``(batch, targets, index)`` where
    ``targets`` is ``(B, 5, 2)`` or ``None`` and ``index`` lists ``(agent_id, t)``.
    """
    _check_dt(dataset, cfg)
    goals = goals if goals is not None else dataset.destinations
    if goals is None:
        raise ValueError("goal points are required (destinations or explicit goals)")
    n = cfg.n
    ids, k0, table = dataset.dense()
    if not ids or table.shape[1] == 0:
        return FeatureBatch.empty(n, cfg.max_neighbors, cfg.dt), None, []
    present = ~np.isnan(table[..., 0])
    gmap = {m: g.id for g in dataset.groups for m in g.member_ids}
    gidx_all = np.array([gmap.get(i, -1) for i in ids])
    goal_arr = np.array([goals[i] for i in ids], dtype=float).reshape(-1, 2)
    speed_arr = np.array([_speed(dataset, i, cfg) for i in ids])
    segments = obstacle_segments(dataset.obstacles)
    # run[a, t]: number of consecutive present samples ending at t
    run = np.zeros(present.shape, dtype=np.int64)
    for t in range(present.shape[1]):
        run[:, t] = np.where(present[:, t], (run[:, t - 1] if t else 0) + 1, 0)

    batches, index, tgt = [], [], []
    has_forces = dataset.forces is not None
    pos_in_traj = {aid: {int(k): j for j, k in enumerate(dataset.trajectories[aid].steps)}
                   for aid in ids} if has_forces else None
    for t in range(present.shape[1]):
        egos = np.nonzero(run[:, t] >= n + 1)[0]
        if len(egos) == 0:
            continue
        co = np.nonzero(present[:, t])[0]
        where = {a: j for j, a in enumerate(co)}
        windows = table[egos, t - n + 1:t + 1]
        P = windows[:, -1]
        e = _goal_dirs(P, goal_arr[egos])
        b = build_batch(windows, e, speed_arr[egos], np.array([where[a] for a in egos]),
                        table[co, t], [ids[a] for a in co], gidx_all[co], segments, cfg)
        batches.append(b)
        for a in egos:
            aid = ids[a]
            index.append((aid, t + k0))
            if has_forces:
                tgt.append(dataset.forces[aid][pos_in_traj[aid][t + k0]])
    if not batches:
        return FeatureBatch.empty(n, cfg.max_neighbors, cfg.dt), None, []
    targets = np.array(tgt) if has_forces else None
    return FeatureBatch.concat(batches), targets, index


def extract_frame(dataset: AnnotatedDataset, agent_id, t: int, cfg: FeatureConfig,
                  goals: Optional[dict] = None) -> FeatureFrame:
    """Feature frame for one agent at step ``t``."""
    _check_dt(dataset, cfg)
    goals = goals if goals is not None else dataset.destinations
    tr = dataset.trajectories.get(agent_id)
    if tr is None or tr.at(t) is None:
        raise ValueError(f"agent {agent_id!r} is not observed at step {t}")
    hist = [tr.at(k) for k in range(t - cfg.n, t + 1)]
    if any(h is None for h in hist):
        raise ValueError(f"agent {agent_id!r} lacks {cfg.n} samples of history at step {t}")
    co_ids = [aid for aid, other in dataset.trajectories.items() if other.at(t) is not None]
    allp = np.array([dataset.trajectories[a].at(t) for a in co_ids])
    gmap = {m: g.id for g in dataset.groups for m in g.member_ids}
    window = np.array(hist[1:])
    e = _goal_dirs(window[-1:], np.asarray(goals[agent_id], float).reshape(1, 2))
    b = build_batch(window[None], e, np.array([_speed(dataset, agent_id, cfg)]),
                    np.array([co_ids.index(agent_id)]), allp, co_ids,
                    np.array([gmap.get(a, -1) for a in co_ids]),
                    obstacle_segments(dataset.obstacles), cfg)
    frame = b.frame(0)
    frame.window = ObservationWindow(window, cfg.dt)
    return frame


def extract_all(dataset: AnnotatedDataset, cfg: FeatureConfig, goals: Optional[dict] = None):
    """Yield ``(agent_id, t, FeatureFrame, ForceBreakdown or None)`` for every eligible frame."""
    from .core import ForceBreakdown

    batch, targets, index = extract_arrays(dataset, cfg, goals)
    for i, (aid, t) in enumerate(index):
        frame = batch.frame(i)
        tr = dataset.trajectories[aid]
        j = int(np.searchsorted(tr.steps, t))
        frame.window = ObservationWindow(tr.positions[j - cfg.n + 1:j + 1].copy(), cfg.dt)
        yield aid, t, frame, (ForceBreakdown.from_array(targets[i]) if targets is not None else None)
