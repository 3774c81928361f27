"""Social force model with group forces.

The per-agent functions (``acceleration_force`` ... ``total_force``) evaluate
one force term for one pedestrian and stay close to the underlying formulas.
``scene_forces`` evaluates every term for every agent at once with numpy and
drives ``step``/``simulate``; the two paths are checked against each other in
the test-suite.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import (
    ARRIVED_EPS,
    ForceBreakdown,
    Group,
    PedestrianState,
    Scene,
    Trajectory,
    closest_points_on_segments,
    nearest_obstacle_point,
    obstacle_segments,
    unit_vector,
    unit_vectors,
)

COINCIDENT_EPS = 1e-9


@dataclass(frozen=True)
class FieldOfView:
    half_angle: float = math.radians(100.0)

    def __post_init__(self):
        if not 0 < self.half_angle <= math.pi:
            raise ValueError("FOV half-angle must lie in (0, pi]")


@dataclass(frozen=True)
class SfmgParams:
    """Force-model constants.

    Only ``tau`` is fixed by the source model. The pedestrian repulsion is
    applied directly as a force, so ``V0`` is much stronger than the classic
    potential constant (2.1, with which point agents walk through each other
    at 0.1 s steps) and ``sigma`` shorter, so that avoidance stays a brief,
    close-range swerve instead of a long detour.
    """

    tau: float = 0.5
    V0: float = 60.0
    sigma: float = 0.1
    U0: float = 10.0
    R: float = 0.2
    lam: float = 0.2
    S_vis: float = 2.0
    S_att: float = 1.0
    d_coh: float = 0.5
    noise_std: float = 0.0
    fov: FieldOfView = field(default_factory=FieldOfView)
    max_speed_factor: float = 1.3
    goal_radius: float = 0.3

    def __post_init__(self):
        if self.tau <= 0 or self.sigma <= 0 or self.R <= 0:
            raise ValueError("tau, sigma and R must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.d_coh < 0 or self.noise_std < 0:
            raise ValueError("d_coh and noise_std must be non-negative")


# ---------------------------------------------------------------------------
# per-agent force terms

def acceleration_force(state: PedestrianState, params: SfmgParams) -> np.ndarray:
    e = unit_vector(state.position, state.goal)
    return (state.desired_speed * e - state.velocity) / params.tau


def obstacle_force(state: PedestrianState, obstacles, params: SfmgParams) -> np.ndarray:
    if not obstacles:
        return np.zeros(2)
    q, d = nearest_obstacle_point(state.position, obstacles)
    eta = unit_vector(q, state.position)
    return params.U0 * math.exp(-d / params.R) * eta


def tie_break_direction(id_a, id_b) -> np.ndarray:
    """Fixed unit vector from ``id_b`` toward ``id_a`` for coincident agents.

    The lower id gets the hashed direction, the higher id its negation, so the
    pair always pushes apart.
    """
    lo, hi = sorted((id_a, id_b), key=repr)
    angle = zlib.crc32(f"{lo!r}:{hi!r}".encode()) / 2**32 * 2.0 * math.pi
    u = np.array([math.cos(angle), math.sin(angle)])
    return u if id_a == lo else -u


def anisotropy(cos_phi, lam: float):
    return lam + (1.0 - lam) * (1.0 + cos_phi) / 2.0


def pedestrian_force(alpha: PedestrianState, beta: PedestrianState, params: SfmgParams) -> np.ndarray:
    """Anisotropic exponential repulsion of ``beta`` on ``alpha``."""
    if alpha.id == beta.id:
        raise ValueError("an agent does not repel itself")
    diff = alpha.position - beta.position
    d = float(np.hypot(diff[0], diff[1]))
    if d < COINCIDENT_EPS:
        return params.V0 * tie_break_direction(alpha.id, beta.id)
    eta = diff / d
    e = unit_vector(alpha.position, alpha.goal)
    cos_phi = float(np.dot(-eta, e))
    return params.V0 * math.exp(-d / params.sigma) * eta * anisotropy(cos_phi, params.lam)


def gaze_direction(position, velocity, goal) -> np.ndarray:
    speed = float(np.hypot(*velocity))
    if speed >= ARRIVED_EPS:
        return np.asarray(velocity, float) / speed
    return unit_vector(position, goal)


def rotation_to_view(gaze, position, target, half_angle: float) -> float:
    """Smallest rotation (rad) of ``gaze`` that brings ``target`` into the field of view."""
    bearing = unit_vector(position, target)
    if not np.any(gaze) or not np.any(bearing):
        return 0.0
    phi = math.acos(min(1.0, max(-1.0, float(np.dot(gaze, bearing)))))
    return max(0.0, phi - half_angle)


def group_force(member: PedestrianState, group: Group, all_states, fov: FieldOfView,
                params: SfmgParams) -> np.ndarray:
    """Visibility plus coherence force on one group member."""
    if member.id not in group.member_ids:
        raise ValueError(f"agent {member.id} is not in group {group.id}")
    present = [s for s in all_states if s.id in group.member_ids]
    others = [s for s in present if s.id != member.id]
    if not others:
        return np.zeros(2)
    e = unit_vector(member.position, member.goal)
    v_desired = member.desired_speed * e
    gaze = gaze_direction(member.position, member.velocity, member.goal)
    centroid_others = np.mean([s.position for s in others], axis=0)
    theta = rotation_to_view(gaze, member.position, centroid_others, fov.half_angle)
    f_vis = params.S_vis * theta * v_desired

    centroid = np.mean([s.position for s in present], axis=0)
    dist = float(np.hypot(*(centroid - member.position)))
    if dist >= params.d_coh and np.any(v_desired):
        f_att = params.S_att * unit_vector(member.position, centroid)
    else:
        f_att = np.zeros(2)
    return f_vis + f_att


def total_force(agent_id, scene: Scene, params: SfmgParams, rng_seed=None) -> ForceBreakdown:
    """Sum of the four force terms on one agent (plus noise if enabled)."""
    me = scene.agent(agent_id)
    f_acc = acceleration_force(me, params)
    f_obs = obstacle_force(me, scene.obstacles, params)
    f_ped = np.zeros(2)
    for other in scene.agents:
        if other.id != me.id:
            f_ped = f_ped + pedestrian_force(me, other, params)
    grp = scene.group_of(agent_id)
    f_grp = group_force(me, grp, scene.agents, params.fov, params) if grp else np.zeros(2)
    total = f_acc + f_obs + f_ped + f_grp
    if params.noise_std > 0:
        total = total + np.random.default_rng(rng_seed).normal(0.0, params.noise_std, 2)
    return ForceBreakdown(f_acc, f_obs, f_ped, f_grp, total)


# ---------------------------------------------------------------------------
# vectorised engine

def scene_forces(P, V, G, S, group_ids, agent_ids, segments, params: SfmgParams) -> np.ndarray:
    """All force terms for all agents.

    ``P, V, G`` are ``(N, 2)`` positions, velocities and goals, ``S`` desired
    speeds, ``group_ids`` an int array with -1 for "no group". Returns an
    ``(N, 5, 2)`` array ordered like ``ForceBreakdown`` (noise excluded).
    """
    N = len(P)
    out = np.zeros((N, 5, 2))
    if N == 0:
        return out
    e, _ = unit_vectors(G - P)
    out[:, 0] = (S[:, None] * e - V) / params.tau

    if len(segments):
        q, d = closest_points_on_segments(P, segments)
        eta_b, _ = unit_vectors(P - q)
        out[:, 1] = params.U0 * np.exp(-d / params.R)[:, None] * eta_b

    if N > 1:
        diff = P[:, None, :] - P[None, :, :]
        d = np.hypot(diff[..., 0], diff[..., 1])
        off = ~np.eye(N, dtype=bool)
        close = (d < COINCIDENT_EPS) & off
        safe = np.where(d < COINCIDENT_EPS, 1.0, d)
        eta = diff / safe[..., None]
        cos_phi = -np.einsum("abi,ai->ab", eta, e)
        mag = params.V0 * np.exp(-d / params.sigma) * anisotropy(cos_phi, params.lam)
        f = mag[..., None] * eta
        if np.any(close):
            for a, b in zip(*np.nonzero(close)):
                f[a, b] = params.V0 * tie_break_direction(agent_ids[a], agent_ids[b])
        f[~off] = 0.0
        out[:, 2] = f.sum(axis=1)

    for gid in np.unique(group_ids[group_ids >= 0]):
        idx = np.nonzero(group_ids == gid)[0]
        if len(idx) < 2:
            continue
        centroid = P[idx].mean(axis=0)
        for i in idx:
            others = idx[idx != i]
            c_others = P[others].mean(axis=0)
            gaze = gaze_direction(P[i], V[i], G[i])
            theta = rotation_to_view(gaze, P[i], c_others, params.fov.half_angle)
            v_desired = S[i] * e[i]
            f = params.S_vis * theta * v_desired
            to_c = centroid - P[i]
            if np.hypot(*to_c) >= params.d_coh and np.any(v_desired):
                f = f + params.S_att * unit_vector(P[i], centroid)
            out[i, 3] = f
    out[:, 4] = out[:, :4].sum(axis=1)
    return out


def _scene_arrays(scene: Scene):
    P = np.array([a.position for a in scene.agents]).reshape(-1, 2)
    V = np.array([a.velocity for a in scene.agents]).reshape(-1, 2)
    G = np.array([a.goal for a in scene.agents]).reshape(-1, 2)
    S = np.array([a.desired_speed for a in scene.agents], dtype=float)
    ids = [a.id for a in scene.agents]
    gmap = {m: g.id for g in scene.groups for m in g.member_ids}
    gid = np.array([gmap.get(i, -1) for i in ids], dtype=np.int64)
    return P, V, G, S, gid, ids


def integrate(P, V, F, S, dt, params: SfmgParams):
    """Semi-implicit Euler with the speed clamp; returns ``(P', V')``."""
    V1 = V + F * dt
    speed = np.hypot(V1[:, 0], V1[:, 1])
    vmax = params.max_speed_factor * S
    scale = np.where(speed > vmax, vmax / np.where(speed > 0, speed, 1.0), 1.0)
    V1 = V1 * scale[:, None]
    return P + V1 * dt, V1


def step(scene: Scene, params: SfmgParams, rng_seed=None, rng=None) -> Scene:
    """Advance every agent by one ``scene.dt``."""
    P, V, G, S, gid, ids = _scene_arrays(scene)
    F = scene_forces(P, V, G, S, gid, ids, scene.segments(), params)[:, 4]
    if params.noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(rng_seed)
        F = F + rng.normal(0.0, params.noise_std, F.shape)
    P1, V1 = integrate(P, V, F, S, scene.dt, params)
    agents = [a.replace(position=P1[i], velocity=V1[i]) for i, a in enumerate(scene.agents)]
    return replace(scene, agents=tuple(agents))


@dataclass
class SimulationResult:
    dt: float
    trajectories: dict  # agent id -> Trajectory
    forces: dict  # agent id -> (T, 5, 2) breakdown per recorded sample
    velocities: dict  # agent id -> (T, 2)
    initial: Scene
    arrived: set

    def breakdown(self, agent_id, k: int) -> ForceBreakdown:
        return ForceBreakdown.from_array(self.forces[agent_id][k])


def simulate(scene: Scene, params: SfmgParams, duration_s: float, rng_seed=None) -> SimulationResult:
    """Run the force model for ``duration_s`` seconds.

    Positions and force breakdowns are recorded at every step, ``t = 0``
    included. An agent that ends a step within ``goal_radius`` of its goal
    leaves the scene: it is neither recorded nor felt by others afterwards.
    """
    if not duration_s > 0:
        raise ValueError("duration must be positive")
    n_steps = int(round(duration_s / scene.dt))
    P, V, G, S, gid, ids = _scene_arrays(scene)
    segments = scene.segments()
    rng = np.random.default_rng(rng_seed)
    active = np.ones(len(ids), dtype=bool)
    rec_pos = {i: [] for i in ids}
    rec_vel = {i: [] for i in ids}
    rec_f = {i: [] for i in ids}
    rec_k = {i: [] for i in ids}
    arrived = set()

    for k in range(n_steps + 1):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        sub_ids = [ids[i] for i in idx]
        F = scene_forces(P[idx], V[idx], G[idx], S[idx], gid[idx], sub_ids, segments, params)
        if params.noise_std > 0:
            xi = rng.normal(0.0, params.noise_std, (len(idx), 2))
            F[:, 4] += xi
        for j, i in enumerate(idx):
            rec_k[ids[i]].append(k)
            rec_pos[ids[i]].append(P[i].copy())
            rec_vel[ids[i]].append(V[i].copy())
            rec_f[ids[i]].append(F[j].copy())
        if k == n_steps:
            break
        P[idx], V[idx] = integrate(P[idx], V[idx], F[:, 4], S[idx], scene.dt, params)
        dist = np.hypot(*(G[idx] - P[idx]).T)
        done = idx[dist < params.goal_radius]
        active[done] = False
        arrived.update(ids[i] for i in done)

    trajs, forces, vels = {}, {}, {}
    for i in ids:
        if rec_k[i]:
            trajs[i] = Trajectory(i, rec_k[i], np.array(rec_pos[i]))
            forces[i] = np.array(rec_f[i])
            vels[i] = np.array(rec_vel[i])
    return SimulationResult(scene.dt, trajs, forces, vels, scene, arrived)


def force_dump_rows(result: SimulationResult):
    """Rows ``t, agent, px, py, fax, fay, fbx, fby, fpx, fpy, fgx, fgy, ftx, fty`` ordered by time."""
    rows = []
    for aid, tr in result.trajectories.items():
        f = result.forces[aid].reshape(len(tr), 10)
        for j, k in enumerate(tr.steps):
            rows.append((int(k) * result.dt, aid, *tr.positions[j], *f[j]))
    rows.sort(key=lambda r: (r[0], repr(r[1])))
    return rows
