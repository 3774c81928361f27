"""Synthetic crossing-passageway scenes, ETH/UCY-style text files and splits.

File layout of a dataset directory (all plain text, '.' radix, '#' comments)::

    manifest.txt       format version, dt, name
    trajectories.txt   frame_id pedestrian_id x y
    groups.txt         one group per line, space separated ids (leader first)
    obstacles.txt      one polyline per line: x1 y1 x2 y2 ...
    destinations.txt   pedestrian_id x y
    speeds.txt         pedestrian_id desired_speed          (optional)
    forces.txt         frame_id pedestrian_id fax fay ... ftx fty (optional)
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Group, Obstacle, PedestrianState, Scene, Trajectory
from .features import AnnotatedDataset
from .sim import SfmgParams, simulate

FORMAT_VERSION = "sfmg-dataset v1"
_SPLIT = re.compile(r"[,\s]+")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------------------
# synthetic generation

@dataclass
class SyntheticConfig:
    runs: int = 1000
    duration_s: float = 30.0
    dt: float = 0.1
    n_peds_min: int = 2
    n_peds_max: int = 10
    group_prob: float = 0.5
    group_size_min: int = 2
    group_size_max: int = 4
    goal_dist_min: float = 7.0
    goal_dist_max: float = 10.0
    corridor_width: float = 4.0
    arm_length: float = 9.0
    zone_near: float = 3.5
    zone_far: float = 6.0
    desired_speed: float = 1.34
    init_speed_min: float = 0.0
    init_speed_max: float = 1.0
    init_heading_jitter_deg: float = 30.0
    min_spacing: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_peds_min <= self.n_peds_max:
            raise ValueError("need 2 <= n_peds_min <= n_peds_max")
        if not 2 <= self.group_size_min <= self.group_size_max:
            raise ValueError("group sizes must be at least 2")
        if not 0.0 <= self.group_prob <= 1.0:
            raise ValueError("group_prob must lie in [0, 1]")
        if self.runs < 0 or self.duration_s <= 0 or self.dt <= 0:
            raise ValueError("runs, duration and dt must be positive")


# travel direction and lateral axis of the four start zones
_ZONES = [((1.0, 0.0), (0.0, 1.0)), ((-1.0, 0.0), (0.0, -1.0)),
          ((0.0, 1.0), (-1.0, 0.0)), ((0.0, -1.0), (1.0, 0.0))]


def passageway_walls(cfg: SyntheticConfig) -> list:
    """Two crossing corridors closed at the ends."""
    h, L = cfg.corridor_width / 2.0, cfg.arm_length
    corners = [[(h, L), (h, h), (L, h)], [(-h, L), (-h, h), (-L, h)],
               [(-h, -L), (-h, -h), (-L, -h)], [(h, -L), (h, -h), (L, -h)]]
    caps = [[(-L, -h), (-L, h)], [(L, -h), (L, h)], [(-h, -L), (h, -L)], [(-h, L), (h, L)]]
    return [Obstacle(v) for v in corners + caps]


def run_rng(seed: int, run: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, run]))


def _place(rng, zone, lateral_half, cfg, taken, lat=None):
    a, l = np.array(zone[0]), np.array(zone[1])
    for attempt in range(200):
        along = rng.uniform(cfg.zone_near, cfg.zone_far)
        lt = rng.uniform(-lateral_half, lateral_half) if lat is None else lat + rng.uniform(-0.4, 0.4)
        lt = float(np.clip(lt, -lateral_half, lateral_half))
        p = -along * a + lt * l
        if all(math.hypot(*(p - q)) >= cfg.min_spacing for q in taken) or attempt == 199:
            return p, along, lt


def random_scene(rng: np.random.Generator, cfg: SyntheticConfig) -> Scene:
    """One randomised crossing-passageway scenario."""
    n = int(rng.integers(cfg.n_peds_min, cfg.n_peds_max + 1))
    size = 0
    if rng.random() < cfg.group_prob:
        size = int(rng.integers(cfg.group_size_min, min(cfg.group_size_max, n) + 1))
    lat_half = cfg.corridor_width / 2.0 - 0.5
    agents, taken, groups = [], [], []
    group_zone = int(rng.integers(4))
    group_dist = rng.uniform(cfg.goal_dist_min, cfg.goal_dist_max)
    anchor = None
    v0 = cfg.desired_speed
    for i in range(n):
        in_group = i < size
        zone = _ZONES[group_zone] if in_group else _ZONES[int(rng.integers(4))]
        a, l = np.array(zone[0]), np.array(zone[1])
        p, along, lt = _place(rng, zone, lat_half, cfg, taken, anchor if in_group and i else None)
        if in_group and anchor is None:
            anchor = lt
        taken.append(p)
        if in_group:
            goal = p + group_dist * a
        else:
            d = rng.uniform(cfg.goal_dist_min, cfg.goal_dist_max)
            glat = rng.uniform(-lat_half, lat_half)
            dlat = glat - lt
            goal = p + math.sqrt(max(d * d - dlat * dlat, 0.0)) * a + dlat * l
        to_goal = (goal - p) / np.linalg.norm(goal - p)
        ang = math.radians(rng.uniform(-cfg.init_heading_jitter_deg, cfg.init_heading_jitter_deg))
        c, s = math.cos(ang), math.sin(ang)
        heading = np.array([c * to_goal[0] - s * to_goal[1], s * to_goal[0] + c * to_goal[1]])
        speed = rng.uniform(cfg.init_speed_min, cfg.init_speed_max) * v0
        agents.append(PedestrianState(i, p, speed * heading, goal, v0, 0 if in_group else None))
    if size:
        members = tuple(range(size))
        groups.append(Group(0, members, members[int(rng.integers(size))]))
    return Scene(cfg.dt, agents, passageway_walls(cfg), groups)


def simulate_run(cfg: SyntheticConfig, params: SfmgParams, run: int) -> AnnotatedDataset:
    rng = run_rng(cfg.seed, run)
    scene = random_scene(rng, cfg)
    res = simulate(scene, params, cfg.duration_s, rng_seed=int(rng.integers(2**63)))
    return AnnotatedDataset(
        trajectories=res.trajectories, dt=cfg.dt, groups=list(scene.groups),
        obstacles=list(scene.obstacles),
        destinations={a.id: a.goal.copy() for a in scene.agents if a.id in res.trajectories},
        desired_speeds={a.id: a.desired_speed for a in scene.agents if a.id in res.trajectories},
        forces=res.forces, name=f"run_{run:04d}")


def generate_synthetic(cfg: SyntheticConfig, params: Optional[SfmgParams] = None,
                       first_run: int = 0) -> list:
    """One ``AnnotatedDataset`` (with force targets) per simulation run.

    Runs are numbered from ``first_run``; disjoint ranges of the same seed
    give disjoint, reproducible scene sets (e.g. training and held-out).
    """
    params = params or SfmgParams()
    return [simulate_run(cfg, params, r) for r in range(first_run, first_run + cfg.runs)]


# ---------------------------------------------------------------------------
# splitting

@dataclass
class SplitSpec:
    train: float = 0.50
    dev: float = 0.25
    test: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if abs(self.train + self.dev + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def split(n_samples: int, spec: SplitSpec = SplitSpec()):
    """Shuffle sample indices and cut them into train/dev/test index arrays."""
    perm = np.random.default_rng(spec.seed).permutation(n_samples)
    n_train = int(round(spec.train * n_samples))
    n_dev = int(round(spec.dev * n_samples))
    return perm[:n_train], perm[n_train:n_train + n_dev], perm[n_train + n_dev:]


# ---------------------------------------------------------------------------
# resampling

def resample(dataset: AnnotatedDataset, new_dt: float) -> AnnotatedDataset:
    """Change the sampling period by an integer factor.

    Coarser periods keep every k-th step; finer periods interpolate linearly
    inside contiguous stretches. Force targets survive only subsampling.
    """
    ratio = dataset.dt / new_dt
    if math.isclose(ratio, 1.0, rel_tol=1e-9):
        return dataset
    trajs, forces = {}, None
    if ratio > 1:
        k = int(round(ratio))
        if not math.isclose(k, ratio, rel_tol=1e-6):
            raise ValueError(f"dt {dataset.dt} is not an integer multiple of {new_dt}")
        for aid, tr in dataset.trajectories.items():
            steps, pos = [], []
            for j in range(len(tr)):
                s = int(tr.steps[j])
                steps.append(s * k)
                pos.append(tr.positions[j])
                if j + 1 < len(tr) and tr.steps[j + 1] == s + 1:
                    for f in range(1, k):
                        w = f / k
                        steps.append(s * k + f)
                        pos.append((1 - w) * tr.positions[j] + w * tr.positions[j + 1])
            trajs[aid] = Trajectory(aid, steps, np.array(pos))
    else:
        k = int(round(1 / ratio))
        if not math.isclose(k, 1 / ratio, rel_tol=1e-6):
            raise ValueError(f"{new_dt} is not an integer multiple of dt {dataset.dt}")
        forces = {} if dataset.forces is not None else None
        for aid, tr in dataset.trajectories.items():
            keep = tr.steps % k == 0
            if not keep.any():
                continue
            trajs[aid] = Trajectory(aid, tr.steps[keep] // k, tr.positions[keep])
            if forces is not None:
                forces[aid] = dataset.forces[aid][keep]
    groups = [g for g in dataset.groups if all(m in trajs for m in g.member_ids)]
    keep_ids = lambda m: None if m is None else {a: v for a, v in m.items() if a in trajs}
    return AnnotatedDataset(trajs, new_dt, groups, list(dataset.obstacles),
                            keep_ids(dataset.destinations), keep_ids(dataset.desired_speeds),
                            forces, dataset.name)


# ---------------------------------------------------------------------------
# text files

def _rows(path, min_cols=None, exact_cols=None):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = [p for p in _SPLIT.split(s) if p]
            if exact_cols is not None and len(parts) != exact_cols:
                raise DataError(f"{path}:{lineno}: expected {exact_cols} columns, got {len(parts)}")
            if min_cols is not None and len(parts) < min_cols:
                raise DataError(f"{path}:{lineno}: expected at least {min_cols} columns")
            yield lineno, parts


def _num(tok, path, lineno):
    try:
        v = float(tok)
    except ValueError:
        raise DataError(f"{path}:{lineno}: not a number: {tok!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{lineno}: non-finite value {tok!r}")
    return v


def _pid(tok, path, lineno):
    v = _num(tok, path, lineno)
    if v != int(v):
        raise DataError(f"{path}:{lineno}: pedestrian id must be an integer: {tok!r}")
    return int(v)


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.txt"
    if not path.exists():
        return {}
    out = {}
    for lineno, parts in _rows(path, min_cols=2):
        out[parts[0]] = " ".join(parts[1:])
    return out


def load_groups(path, known_ids, leader: str = "random", seed: int = 0) -> list:
    """Groups file: one group per line. ``leader`` is ``"first"`` or ``"random"`` (seeded per group)."""
    groups = []
    for lineno, parts in _rows(path, min_cols=1):
        ids = [_pid(p, path, lineno) for p in parts]
        unknown = [i for i in ids if i not in known_ids]
        if unknown:
            raise DataError(f"{path}:{lineno}: unknown pedestrian id(s) {unknown}")
        gid = len(groups)
        if leader == "first":
            lead = ids[0]
        else:
            lead = ids[int(np.random.default_rng([seed, gid]).integers(len(ids)))]
        groups.append(Group(gid, tuple(ids), lead))
    return groups


def load_obstacles(path) -> list:
    obs = []
    for lineno, parts in _rows(path, min_cols=2):
        if len(parts) % 2:
            raise DataError(f"{path}:{lineno}: odd number of coordinates")
        vals = [_num(p, path, lineno) for p in parts]
        try:
            obs.append(Obstacle(np.array(vals).reshape(-1, 2)))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return obs


def _load_id_values(path, ncols):
    out = {}
    for lineno, parts in _rows(path, exact_cols=ncols + 1):
        out[_pid(parts[0], path, lineno)] = np.array([_num(p, path, lineno) for p in parts[1:]])
    return out


def load_trajectories(path, dt: Optional[float] = None, fps: Optional[float] = None,
                      groups_path=None, obstacles_path=None, destinations_path=None,
                      leader: str = "random", seed: int = 0, frames_are_steps: bool = False,
                      name: str = "") -> AnnotatedDataset:
    """Read ``frame_id pedestrian_id x y`` rows (whitespace or comma separated).

    Frame ids are mapped to step indices by the smallest frame stride unless
    ``frames_are_steps``. ``dt`` is taken from the argument, else from
    ``stride / fps``.
    """
    frames, pids, xy = [], [], []
    for lineno, parts in _rows(path, exact_cols=4):
        frames.append(_num(parts[0], path, lineno))
        pids.append(_pid(parts[1], path, lineno))
        xy.append((_num(parts[2], path, lineno), _num(parts[3], path, lineno)))
    frames = np.array(frames)
    if frames_are_steps or len(frames) == 0:
        steps = frames.astype(np.int64)
        stride = 1.0
    else:
        uniq = np.unique(frames)
        stride = float(np.min(np.diff(uniq))) if len(uniq) > 1 else 1.0
        steps = np.round((frames - uniq[0]) / stride).astype(np.int64)
    if dt is None:
        if fps is None:
            raise DataError(f"{path}: sampling period unknown (give dt or fps)")
        dt = stride / fps
    by_id = {}
    for s, pid, p in zip(steps, pids, xy):
        by_id.setdefault(pid, []).append((int(s), p))
    trajs = {}
    for pid, rows in by_id.items():
        rows.sort(key=lambda r: r[0])
        st = [r[0] for r in rows]
        if len(set(st)) != len(st):
            raise DataError(f"{path}: pedestrian {pid} has duplicate frames")
        trajs[pid] = Trajectory(pid, st, np.array([r[1] for r in rows]))
    groups = load_groups(groups_path, trajs, leader, seed) if groups_path else []
    obstacles = load_obstacles(obstacles_path) if obstacles_path else []
    dest = None
    if destinations_path:
        dest = _load_id_values(destinations_path, 2)
        unknown = [k for k in dest if k not in trajs]
        if unknown:
            raise DataError(f"{destinations_path}: unknown pedestrian id(s) {unknown}")
    return AnnotatedDataset(trajs, float(dt), groups, obstacles, dest, name=name)


def _fmt(x) -> str:
    return repr(float(x))


def write_dataset(dataset: AnnotatedDataset, directory):
    """Write a dataset directory; reading it back with ``load_dataset`` is lossless."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "manifest.txt", "w") as fh:
        fh.write(f"format {FORMAT_VERSION}\ndt {_fmt(dataset.dt)}\nleaders first\n")
        if dataset.name:
            fh.write(f"name {dataset.name}\n")
    rows = sorted(((int(k), aid, p) for aid, tr in dataset.trajectories.items()
                   for k, p in zip(tr.steps, tr.positions)), key=lambda r: (r[0], r[1]))
    with open(d / "trajectories.txt", "w") as fh:
        fh.write("# frame_id pedestrian_id x y\n")
        for k, aid, p in rows:
            fh.write(f"{k} {aid} {_fmt(p[0])} {_fmt(p[1])}\n")
    with open(d / "groups.txt", "w") as fh:
        for g in dataset.groups:
            fh.write(" ".join(str(m) for m in g.member_ids) + "\n")
    with open(d / "leaders.txt", "w") as fh:
        for i, g in enumerate(dataset.groups):
            fh.write(f"{i} {g.leader_id}\n")
    with open(d / "obstacles.txt", "w") as fh:
        for o in dataset.obstacles:
            fh.write(" ".join(_fmt(x) for x in o.vertices.reshape(-1)) + "\n")
    if dataset.destinations is not None:
        with open(d / "destinations.txt", "w") as fh:
            for aid in sorted(dataset.destinations):
                g = dataset.destinations[aid]
                fh.write(f"{aid} {_fmt(g[0])} {_fmt(g[1])}\n")
    if dataset.desired_speeds is not None:
        with open(d / "speeds.txt", "w") as fh:
            for aid in sorted(dataset.desired_speeds):
                fh.write(f"{aid} {_fmt(dataset.desired_speeds[aid])}\n")
    if dataset.forces is not None:
        with open(d / "forces.txt", "w") as fh:
            fh.write("# frame_id pedestrian_id fax fay fbx fby fpx fpy fgx fgy ftx fty\n")
            frows = sorted(((int(k), aid, f) for aid, tr in dataset.trajectories.items()
                            for k, f in zip(tr.steps, dataset.forces[aid])),
                           key=lambda r: (r[0], r[1]))
            for k, aid, f in frows:
                fh.write(f"{k} {aid} " + " ".join(_fmt(x) for x in f.reshape(-1)) + "\n")


def load_dataset(directory) -> AnnotatedDataset:
    """Read a directory written by ``write_dataset`` (or a hand-made one with a manifest)."""
    d = Path(directory)
    if not (d / "trajectories.txt").exists():
        raise DataError(f"{d}: missing trajectories.txt")
    man = read_manifest(d)
    if man and man.get("format") != FORMAT_VERSION:
        raise DataError(f"{d}/manifest.txt: unsupported format {man.get('format')!r}")
    dt = float(man["dt"]) if "dt" in man else None
    opt = lambda f: (d / f) if (d / f).exists() else None
    ds = load_trajectories(d / "trajectories.txt", dt=dt, groups_path=opt("groups.txt"),
                           obstacles_path=opt("obstacles.txt"),
                           destinations_path=opt("destinations.txt"),
                           leader=man.get("leaders", "random"), frames_are_steps=bool(man),
                           name=man.get("name", ""))
    if opt("leaders.txt"):
        lead = {int(_num(p[0], d / "leaders.txt", i)): _pid(p[1], d / "leaders.txt", i)
                for i, p in _rows(d / "leaders.txt", exact_cols=2)}
        if sorted(lead) != list(range(len(ds.groups))):
            raise DataError(f"{d}/leaders.txt: expected one leader per group")
        ds.groups = [Group(g.id, g.member_ids, lead[g.id]) for g in ds.groups]
    if opt("speeds.txt"):
        ds.desired_speeds = {k: float(v[0]) for k, v in _load_id_values(d / "speeds.txt", 1).items()}
    if opt("forces.txt"):
        per = {}
        path = d / "forces.txt"
        for lineno, parts in _rows(path, exact_cols=12):
            k, pid = int(_num(parts[0], path, lineno)), _pid(parts[1], path, lineno)
            per.setdefault(pid, {})[k] = np.array([_num(p, path, lineno) for p in parts[2:]]).reshape(5, 2)
        forces = {}
        for pid, tr in ds.trajectories.items():
            rows = per.get(pid, {})
            missing = [int(k) for k in tr.steps if int(k) not in rows]
            if missing:
                raise DataError(f"{path}: pedestrian {pid} lacks forces for frames {missing[:5]}")
            forces[pid] = np.array([rows[int(k)] for k in tr.steps])
        ds.forces = forces
    return ds


def write_corpus(datasets, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, ds in enumerate(datasets):
        name = ds.name or f"scene_{i:04d}"
        write_dataset(ds, d / name)
        names.append(name)
    with open(d / "corpus.txt", "w") as fh:
        fh.write(f"# {FORMAT_VERSION} corpus\n")
        fh.write("\n".join(names) + "\n")


def load_corpus(directory) -> list:
    d = Path(directory)
    index = d / "corpus.txt"
    if not index.exists():
        if (d / "trajectories.txt").exists():
            return [load_dataset(d)]
        raise DataError(f"{d}: neither corpus.txt nor trajectories.txt found")
    return [load_dataset(d / parts[0]) for _, parts in _rows(index, exact_cols=1)]


SIDECARS = (".groups.txt", ".obstacles.txt", ".destinations.txt")


def load_benchmark(directory, dt: float = 0.4, leader: str = "random", seed: int = 0) -> list:
    """One dataset per ``<scene>.txt`` file of ``frame_id pedestrian_id x y`` rows.

    Optional sidecars ``<scene>.groups.txt``, ``<scene>.obstacles.txt`` and
    ``<scene>.destinations.txt`` are picked up by name.
    """
    d = Path(directory)
    files = sorted(f for f in d.glob("*.txt") if not f.name.endswith(SIDECARS)
                   and f.name not in ("corpus.txt", "manifest.txt"))
    if not files:
        raise DataError(f"{d}: no scene files (*.txt) found")
    out = []
    for f in files:
        stem = f.name[:-4]
        side = lambda suffix: (d / (stem + suffix)) if (d / (stem + suffix)).exists() else None
        out.append(load_trajectories(f, dt=dt, groups_path=side(".groups.txt"),
                                     obstacles_path=side(".obstacles.txt"),
                                     destinations_path=side(".destinations.txt"),
                                     leader=leader, seed=seed, name=stem))
    return out
