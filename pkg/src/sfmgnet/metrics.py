"""Displacement errors, near-collision rate and the evaluation harness.

``evaluate`` cuts each scene into observation/prediction segments, asks a
predictor for every agent with a full observation, and scores the agents
whose ground truth covers the whole horizon. Predictors are callables taking
a ``Segment`` and returning ``{agent_id: (H, 2) positions}`` at the
dataset's sampling interval.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from .core import Trajectory
from .datasets import resample
from .features import AnnotatedDataset
from .rollout import RolloutConfig, constant_velocity, horizon_steps, rollout

NEAR_COLLISION_M = 0.1
REFERENCE_AVERAGE = (0.15, 0.26)  # published ADE/FDE averages over the five benchmark scenes


def _xy(t):
    return t.positions if isinstance(t, Trajectory) else np.asarray(t, dtype=float).reshape(-1, 2)


def ade(pred, truth) -> float:
    """Mean Euclidean distance between aligned predicted and true positions."""
    p, q = _xy(pred), _xy(truth)
    if len(p) != len(q):
        raise ValueError(f"length mismatch: {len(p)} predicted vs {len(q)} true positions")
    if isinstance(pred, Trajectory) and isinstance(truth, Trajectory):
        if not np.array_equal(pred.steps, truth.steps):
            raise ValueError("timesteps of prediction and truth are not aligned")
    if len(p) == 0:
        raise ValueError("empty trajectory")
    d = p - q
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


def fde(pred, truth) -> float:
    """Euclidean distance between the final predicted and true positions."""
    p, q = _xy(pred), _xy(truth)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("empty trajectory")
    d = p[-1] - q[-1]
    return float(np.hypot(d[0], d[1]))  # same rounding as ade


def frame_has_near_collision(positions, threshold: float = NEAR_COLLISION_M) -> bool:
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    p = p[~np.isnan(p[:, 0])]
    if len(p) < 2:
        return False
    diff = p[:, None] - p[None]
    d = np.hypot(diff[..., 0], diff[..., 1])
    iu = np.triu_indices(len(p), 1)
    return bool(np.any(d[iu] < threshold))


def near_collision_counts(frames, threshold: float = NEAR_COLLISION_M):
    """``(violating frames, frames with at least two agents)``."""
    hits = total = 0
    for f in frames:
        p = np.asarray(f, dtype=float).reshape(-1, 2)
        if np.count_nonzero(~np.isnan(p[:, 0])) < 2:
            continue
        total += 1
        hits += frame_has_near_collision(p, threshold)
    return hits, total


def near_collision_pct(frames, threshold: float = NEAR_COLLISION_M) -> float:
    """Percentage of frames (with two or more agents) holding a pair closer than ``threshold``."""
    hits, total = near_collision_counts(frames, threshold)
    return 100.0 * hits / total if total else 0.0


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalProtocol:
    obs_s: float = 1.2
    horizon_s: float = 4.8
    sliding: bool = False
    threshold: float = NEAR_COLLISION_M

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:12]


@dataclass
class Segment:
    """One observation/prediction cut of a scene.

    ``dataset`` is at the predictor's working interval ``dt`` (a whole
    fraction ``1/out_every`` of the scene's sampling interval); ``t`` is the
    last observed step in that dataset. Predictions are wanted for ``egos``
    at ``horizon`` instants spaced ``out_every`` working steps apart.
    """

    dataset: AnnotatedDataset
    t: int
    egos: list
    histories: dict
    horizon: int
    out_every: int
    truth: dict
    scene: str = ""


@dataclass
class EvalReport:
    ade: float = math.nan
    fde: float = math.nan
    near_collision_pct: float = 0.0
    n_samples: int = 0
    n_segments: int = 0
    n_frames: int = 0
    per_scene: dict = field(default_factory=dict)  # name -> (ade, fde, n_samples)
    fingerprint: str = ""
    label: str = ""

    @property
    def empty(self) -> bool:
        return self.n_samples == 0

    def to_text(self) -> str:
        if self.empty:
            return f"{self.label or 'report'}: no segments"
        rows = ["scene\tade\tfde\tsamples"]
        for name, (a, f, n) in self.per_scene.items():
            rows.append(f"{name}\t{a:.4f}\t{f:.4f}\t{n}")
        rows.append(f"average\t{self.ade:.4f}\t{self.fde:.4f}\t{self.n_samples}")
        rows.append(f"near_collision_pct\t{self.near_collision_pct:.4f}\tframes\t{self.n_frames}")
        return "\n".join(rows)

    def to_records(self) -> list:
        recs = [{"scope": "average", "label": self.label, "ade": self.ade, "fde": self.fde,
                 "near_collision_pct": self.near_collision_pct, "samples": self.n_samples,
                 "segments": self.n_segments, "frames": self.n_frames,
                 "fingerprint": self.fingerprint}]
        for name, (a, f, n) in self.per_scene.items():
            recs.append({"scope": name, "label": self.label, "ade": a, "fde": f, "samples": n})
        return recs


def format_records(records) -> str:
    """``key=value`` lines, one record per line."""
    out = []
    for r in records:
        out.append(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return "\n".join(out)


def _working(dataset: AnnotatedDataset, dt: float):
    """Dataset at the working interval and the number of working steps per scene step."""
    if math.isclose(dataset.dt, dt, rel_tol=1e-9):
        return dataset, dataset, 1
    if dataset.dt < dt:
        coarse = resample(dataset, dt)
        return coarse, coarse, 1
    k = dataset.dt / dt
    if abs(k - round(k)) > 1e-6:
        raise ValueError(f"scene dt {dataset.dt} is not a whole multiple of working dt {dt}")
    return dataset, resample(dataset, dt), int(round(k))


def segments(dataset: AnnotatedDataset, dt: float, n: int, protocol: EvalProtocol):
    """Yield evaluation ``Segment``s of one scene at working interval ``dt``."""
    scene, work, k = _working(dataset, dt)
    obs_w = max(n, int(round(protocol.obs_s / dt)) + 1)
    obs_s = int(math.ceil((obs_w - 1) / k))  # observation span in scene steps
    H = horizon_steps(protocol.horizon_s, scene.dt)
    ids, k0, table = scene.dense()
    wids, w0, wtable = work.dense()
    if not ids:
        return
    present = ~np.isnan(table[..., 0])
    T = table.shape[1]
    stride = 1 if protocol.sliding else obs_s + H
    for ts in range(obs_s, T - 1, stride):
        lo = ts - obs_s
        observed = present[:, lo:ts + 1].all(axis=1)
        if not observed.any():
            continue
        tw = (ts + k0) * k - w0  # index into the working table
        egos, histories, truth = [], {}, {}
        for a, aid in enumerate(ids):
            if not present[a, ts]:
                continue
            wa = wids.index(aid)
            if observed[a]:
                egos.append(aid)
                histories[aid] = wtable[wa, tw - obs_w + 1:tw + 1].copy()
                fut = table[a, ts + 1:ts + 1 + H]
                if len(fut) == H and not np.isnan(fut[:, 0]).any():
                    truth[aid] = fut.copy()
            else:
                h = wtable[wa, max(tw - obs_w + 1, 0):tw + 1]
                histories[aid] = h[~np.isnan(h[:, 0])]
        if not truth:
            continue
        yield Segment(work, tw + w0, egos, histories, H, k, truth, dataset.name)


class ModelPredictor:
    """Rollouts of a trained model; goals annotated or IMM-estimated."""

    def __init__(self, model, goal_source: str = "imm", neighbor_mode: str = "joint",
                 rollout_cfg: Optional[RolloutConfig] = None):
        self.model = model
        self.cfg = rollout_cfg or RolloutConfig(goal_source=goal_source, neighbor_mode=neighbor_mode)
        self.dt = model.config.dt
        self.n = model.config.n

    def __call__(self, seg: Segment) -> dict:
        ds = seg.dataset
        horizon_s = seg.horizon * seg.out_every * ds.dt
        out = rollout(self.model, seg.histories, horizon_s, goals=ds.destinations,
                      groups=ds.groups, obstacles=ds.obstacles, desired_speeds=ds.desired_speeds,
                      cfg=self.cfg, out_every=seg.out_every)
        return {a: t.positions for a, t in out.items() if a in seg.egos}


class ConstantVelocity:
    """Straight-line reference at the last observed velocity."""

    def __init__(self, dt: float, n: int = 2):
        self.dt, self.n = dt, n

    def __call__(self, seg: Segment) -> dict:
        horizon_s = seg.horizon * seg.out_every * seg.dataset.dt
        out = constant_velocity({a: seg.histories[a] for a in seg.egos}, seg.dataset.dt,
                                horizon_s, seg.out_every)
        return {a: t.positions for a, t in out.items()}


class GroundTruthOracle:
    """Replays the recorded future; an upper bound for the harness itself."""

    def __init__(self, dt: float, n: int = 2):
        self.dt, self.n = dt, n

    def __call__(self, seg: Segment) -> dict:
        return {a: v.copy() for a, v in seg.truth.items()}


def evaluate(predictor: Callable, datasets, protocol: Optional[EvalProtocol] = None,
             label: str = "") -> EvalReport:
    """Score ``predictor`` on every eligible segment of every scene."""
    protocol = protocol or EvalProtocol()
    if isinstance(datasets, AnnotatedDataset):
        datasets = [datasets]
    dt = getattr(predictor, "dt")
    n = getattr(predictor, "n", 2)
    report = EvalReport(fingerprint=protocol.fingerprint(), label=label)
    ade_sum = fde_sum = 0.0
    hits = frames = 0
    for ds in datasets:
        s_ade = s_fde = 0.0
        s_n = 0
        for seg in segments(ds, dt, n, protocol):
            pred = predictor(seg)
            report.n_segments += 1
            for aid, true in seg.truth.items():
                p = pred[aid]
                s_ade += ade(p, true)
                s_fde += fde(p, true)
                s_n += 1
            stack = np.array([pred[a] for a in seg.egos if a in pred])
            if len(stack) >= 2:
                h, t = near_collision_counts(stack.transpose(1, 0, 2), protocol.threshold)
                hits += h
                frames += t
        if s_n:
            report.per_scene[ds.name or f"scene{len(report.per_scene)}"] = (s_ade / s_n, s_fde / s_n, s_n)
            ade_sum += s_ade
            fde_sum += s_fde
            report.n_samples += s_n
    if report.n_samples:
        report.ade = ade_sum / report.n_samples
        report.fde = fde_sum / report.n_samples
    report.n_frames = frames
    report.near_collision_pct = 100.0 * hits / frames if frames else 0.0
    return report


ABLATION_ORDER = ("att", "abr", "abrpr", "full")


def ablation_suite(models: dict, datasets, protocol: Optional[EvalProtocol] = None,
                   goal_source: str = "annotated") -> dict:
    """``{name: EvalReport}`` for each ablation variant present in ``models``."""
    return {name: evaluate(ModelPredictor(models[name], goal_source=goal_source), datasets,
                           protocol, label=name)
            for name in ABLATION_ORDER if name in models}


def ablation_ordering_holds(reports: dict, strict_last: float = 0.05) -> bool:
    """ADE non-increasing from att to full, with full at least ``strict_last`` below abrpr."""
    a = [reports[k].ade for k in ABLATION_ORDER]
    monotone = all(x >= y for x, y in zip(a, a[1:]))
    return monotone and a[3] <= (1.0 - strict_last) * a[2]


def table_grid(reports: dict, columns=None) -> str:
    """Scenes as rows, predictors as columns, ``ADE/FDE`` cells, plus the average row."""
    columns = list(columns or reports)
    scenes = []
    for c in columns:
        for s in reports[c].per_scene:
            if s not in scenes:
                scenes.append(s)
    w = max([len("Average")] + [len(s) for s in scenes]) + 2
    head = "".join(f"{c:>14}" for c in columns)
    rows = [f"{'scene':<{w}}{head}"]
    for s in scenes:
        cells = []
        for c in columns:
            v = reports[c].per_scene.get(s)
            cells.append(f"{v[0]:.2f}/{v[1]:.2f}" if v else "-")
        rows.append(f"{s:<{w}}" + "".join(f"{x:>14}" for x in cells))
    rows.append(f"{'Average':<{w}}" + "".join(
        f"{reports[c].ade:.2f}/{reports[c].fde:.2f}".rjust(14) if not reports[c].empty else "-".rjust(14)
        for c in columns))
    rows.append(f"{'Reference':<{w}}{f'{REFERENCE_AVERAGE[0]:.2f}/{REFERENCE_AVERAGE[1]:.2f}':>14}"
                "  (published average, informational)")
    return "\n".join(rows)
