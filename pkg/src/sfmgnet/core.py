"""Domain types and geometric primitives.

Vectors are plain ``numpy`` arrays of shape ``(2,)``; batched vectors are
``(N, 2)``. All dataclasses are frozen and hold their own copies of array data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ARRIVED_EPS = 1e-12
FAR_FIELD = 100.0  # m, sentinel distance for "nothing there"


def vec(x, y=None) -> np.ndarray:
    if y is None:
        return np.asarray(x, dtype=float).reshape(2).copy()
    return np.array([x, y], dtype=float)


def _frozen_array(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


def unit_vector(start, end) -> np.ndarray:
    """Unit vector pointing from ``start`` to ``end``.

    Returns the zero vector when the points coincide (the "arrived" sentinel).
    """
    d = np.asarray(end, dtype=float) - np.asarray(start, dtype=float)
    n = float(np.hypot(d[0], d[1]))
    if n < ARRIVED_EPS:
        return np.zeros(2)
    return d / n


def unit_vectors(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalisation of ``(N, 2)`` offsets; returns ``(units, norms)``."""
    norms = np.hypot(d[..., 0], d[..., 1])
    safe = np.where(norms < ARRIVED_EPS, 1.0, norms)
    units = d / safe[..., None]
    units[norms < ARRIVED_EPS] = 0.0
    return units, norms


@dataclass(frozen=True)
class PedestrianState:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    desired_speed: float = 1.34
    group_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen_array(self.position, 2))
        object.__setattr__(self, "velocity", _frozen_array(self.velocity, 2))
        object.__setattr__(self, "goal", _frozen_array(self.goal, 2))
        if not self.desired_speed > 0:
            raise ValueError(f"desired_speed must be positive, got {self.desired_speed}")
        if not np.all(np.isfinite(self.goal)):
            raise ValueError("goal must be finite")

    def replace(self, **changes) -> "PedestrianState":
        kw = dict(id=self.id, position=self.position, velocity=self.velocity,
                  goal=self.goal, desired_speed=self.desired_speed, group_id=self.group_id)
        kw.update(changes)
        return PedestrianState(**kw)


@dataclass(frozen=True)
class Obstacle:
    """A polyline; a single vertex is a point obstacle."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) == 0:
            raise ValueError("obstacle needs at least one vertex")
        if len(v) > 1 and np.any(np.all(v[1:] == v[:-1], axis=1)):
            raise ValueError("consecutive obstacle vertices must be distinct")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def segments(self) -> np.ndarray:
        """``(M, 2, 2)`` array of segments; a point obstacle is a zero-length segment."""
        v = self.vertices
        if len(v) == 1:
            return np.stack([v, v], axis=1)
        return np.stack([v[:-1], v[1:]], axis=1)

    def __eq__(self, other):
        return isinstance(other, Obstacle) and np.array_equal(self.vertices, other.vertices)

    __hash__ = None


@dataclass(frozen=True)
class Group:
    id: int
    member_ids: tuple
    leader_id: int

    def __post_init__(self):
        object.__setattr__(self, "member_ids", tuple(self.member_ids))
        if self.leader_id not in self.member_ids:
            raise ValueError(f"leader {self.leader_id} is not a member of group {self.id}")
        if len(set(self.member_ids)) != len(self.member_ids):
            raise ValueError(f"duplicate members in group {self.id}")


@dataclass(frozen=True)
class Scene:
    dt: float
    agents: tuple
    obstacles: tuple = ()
    groups: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "groups", tuple(self.groups))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        known = set(ids)
        for g in self.groups:
            missing = [m for m in g.member_ids if m not in known]
            if missing:
                raise ValueError(f"group {g.id} references unknown agents {missing}")

    def agent(self, agent_id) -> PedestrianState:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(f"unknown agent id {agent_id!r}")

    def group_of(self, agent_id) -> Optional[Group]:
        for g in self.groups:
            if agent_id in g.member_ids:
                return g
        return None

    def segments(self) -> np.ndarray:
        return obstacle_segments(self.obstacles)


@dataclass(frozen=True)
class Trajectory:
    agent_id: int
    steps: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        steps = np.array(self.steps, dtype=np.int64).reshape(-1)
        pos = np.array(self.positions, dtype=float).reshape(-1, 2)
        if len(steps) != len(pos):
            raise ValueError("steps and positions differ in length")
        if len(steps) > 1 and np.any(np.diff(steps) <= 0):
            raise ValueError("timestep indices must be strictly increasing")
        steps.setflags(write=False)
        pos.setflags(write=False)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.steps)

    def __eq__(self, other):
        return (isinstance(other, Trajectory) and self.agent_id == other.agent_id
                and np.array_equal(self.steps, other.steps)
                and np.array_equal(self.positions, other.positions))

    __hash__ = None

    def at(self, step: int) -> Optional[np.ndarray]:
        i = np.searchsorted(self.steps, step)
        if i < len(self.steps) and self.steps[i] == step:
            return self.positions[i]
        return None


FORCE_NAMES = ("acceleration", "obstacle", "pedestrians", "group", "total")


@dataclass(frozen=True)
class ForceBreakdown:
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(2))
    obstacle: np.ndarray = field(default_factory=lambda: np.zeros(2))
    pedestrians: np.ndarray = field(default_factory=lambda: np.zeros(2))
    group: np.ndarray = field(default_factory=lambda: np.zeros(2))
    total: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        for name in FORCE_NAMES:
            object.__setattr__(self, name, _frozen_array(getattr(self, name), 2))

    @classmethod
    def from_array(cls, a) -> "ForceBreakdown":
        a = np.asarray(a, dtype=float).reshape(5, 2)
        return cls(*a)

    def as_array(self) -> np.ndarray:
        return np.stack([getattr(self, n) for n in FORCE_NAMES])


def obstacle_segments(obstacles: Sequence[Obstacle]) -> np.ndarray:
    if not obstacles:
        return np.zeros((0, 2, 2))
    return np.concatenate([o.segments() for o in obstacles], axis=0)


def closest_points_on_segments(points: np.ndarray, segments: np.ndarray):
    """Nearest point on any segment for each query point.

    ``points`` is ``(N, 2)``, ``segments`` is ``(M, 2, 2)`` with ``M >= 1``.
    Returns ``(nearest (N, 2), distance (N,))``.
    """
    a = segments[:, 0]
    ab = segments[:, 1] - a
    len2 = np.einsum("mi,mi->m", ab, ab)
    ap = points[:, None, :] - a[None, :, :]  # (N, M, 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.einsum("nmi,mi->nm", ap, ab) / len2
    s = np.where(len2 > 0, np.clip(s, 0.0, 1.0), 0.0)
    cand = a[None] + s[..., None] * ab[None]
    d2 = np.sum((points[:, None, :] - cand) ** 2, axis=-1)
    j = np.argmin(d2, axis=1)
    rows = np.arange(len(points))
    nearest = cand[rows, j]
    return nearest, np.sqrt(d2[rows, j])


def nearest_obstacle_point(p, obstacles: Sequence[Obstacle]):
    """Closest point on any obstacle polyline to ``p`` and its distance."""
    if not obstacles:
        raise ValueError("no obstacles")
    q, d = closest_points_on_segments(np.asarray(p, float).reshape(1, 2),
                                      obstacle_segments(obstacles))
    return q[0], float(d[0])
