"""Command-line pipeline: simulate, gen, train, predict, eval, ablate.

Configuration is a flat set of ``key = value`` pairs resolved in this order
(later wins): built-in defaults, ``--config FILE``, environment variables
``SFMG_<KEY>`` (e.g. ``SFMG_SEED=3``), then command-line flags and
``--set key=value``. Unknown keys are rejected. Every command writes into a
fresh run-stamped directory under ``--out`` and leaves a ``run.log`` with the
resolved configuration, its fingerprint and the metric values.

Exit codes: 0 success, 1 usage error, 2 data error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, fields, asdict, replace
from pathlib import Path

import numpy as np

from .core import FORCE_NAMES
from .datasets import (
    DataError,
    SplitSpec,
    SyntheticConfig,
    generate_synthetic,
    load_benchmark,
    load_corpus,
    random_scene,
    resample,
    run_rng,
    split,
    write_corpus,
)
from .features import FeatureBatch, FeatureConfig, extract_arrays
from .goal_imm import ImmConfig
from .metrics import (
    ConstantVelocity,
    EvalProtocol,
    ModelPredictor,
    ablation_ordering_holds,
    ablation_suite,
    evaluate,
    format_records,
    segments,
    table_grid,
)
from .model import (
    ABLATIONS,
    MODULES,
    ModelConfig,
    SfmgNet,
    TrainConfig,
    mask_for,
    module_mse,
    train_ablations,
    train_all,
)
from .rollout import GOAL_SOURCES, NEIGHBOR_MODES, RolloutConfig
from .sim import FieldOfView, SfmgParams, force_dump_rows, simulate

ENV_PREFIX = "SFMG_"
log = logging.getLogger("sfmgnet")


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    data: str = ""
    test_data: str = ""
    checkpoint: str = ""
    data_format: str = "corpus"  # corpus | benchmark
    benchmark_dt: float = 0.4
    # synthetic scenes
    runs: int = 1000
    test_runs: int = 100
    scene_run: int = 0
    duration_s: float = 30.0
    sim_dt: float = 0.1
    n_peds_min: int = 2
    n_peds_max: int = 10
    group_prob: float = 0.5
    group_size_min: int = 2
    group_size_max: int = 4
    # force model
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
    fov_deg: float = 100.0
    # network and training
    window_n: int = 10
    dt: float = 0.0  # working interval of the network; 0 uses the data's
    h_net1: int = 32
    h_net2: int = 16
    h_net3: int = 16
    h_agg: int = 32
    h_net4: int = 16
    h_rec: int = 16
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 10
    rec_lr: float = 0.1
    rec_max_epochs: int = 200
    # prediction and evaluation
    horizon_s: float = 4.8
    obs_s: float = 1.2
    sliding: bool = False
    goal_source: str = "annotated"
    neighbor_mode: str = "joint"
    ablation: str = "full"
    imm_turn_rates: str = "-0.4,-0.2,0,0.2,0.4"
    imm_horizon_s: float = 8.0

    def validate(self):
        choices = {"goal_source": GOAL_SOURCES, "neighbor_mode": NEIGHBOR_MODES,
                   "ablation": tuple(ABLATIONS), "data_format": ("corpus", "benchmark")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise UsageError(f"{key} must be one of {', '.join(allowed)}; got {getattr(self, key)!r}")
        if self.window_n < 2 or self.runs < 0 or self.test_runs < 0:
            raise UsageError("window_n must be >= 2 and run counts non-negative")
        for key in ("horizon_s", "obs_s", "duration_s", "sim_dt", "benchmark_dt"):
            if not getattr(self, key) > 0:
                raise UsageError(f"{key} must be positive")
        try:
            self.turn_rates()
        except ValueError:
            raise UsageError(f"imm_turn_rates is not a comma-separated list: {self.imm_turn_rates!r}")
        return self

    def turn_rates(self):
        return tuple(float(x) for x in self.imm_turn_rates.split(",") if x.strip())

    def fingerprint(self) -> str:
        text = "\n".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()) if k != "out")
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    # -- builders ---------------------------------------------------------

    def sfmg_params(self) -> SfmgParams:
        return SfmgParams(tau=self.tau, V0=self.V0, sigma=self.sigma, U0=self.U0, R=self.R,
                          lam=self.lam, S_vis=self.S_vis, S_att=self.S_att, d_coh=self.d_coh,
                          noise_std=self.noise_std, fov=FieldOfView(math.radians(self.fov_deg)))

    def synthetic(self, runs=None) -> SyntheticConfig:
        return SyntheticConfig(runs=self.runs if runs is None else runs, duration_s=self.duration_s,
                               dt=self.sim_dt, n_peds_min=self.n_peds_min, n_peds_max=self.n_peds_max,
                               group_prob=self.group_prob, group_size_min=self.group_size_min,
                               group_size_max=self.group_size_max, seed=self.seed)

    def model_config(self, dt) -> ModelConfig:
        return ModelConfig(n=self.window_n, dt=dt, h_net1=self.h_net1, h_net2=self.h_net2,
                           h_net3=self.h_net3, h_agg=self.h_agg, h_net4=self.h_net4,
                           h_rec=self.h_rec, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, rec_lr=self.rec_lr,
                           rec_max_epochs=self.rec_max_epochs, seed=self.seed)

    def protocol(self) -> EvalProtocol:
        return EvalProtocol(obs_s=self.obs_s, horizon_s=self.horizon_s, sliding=self.sliding)

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(horizon_s=self.horizon_s, goal_source=self.goal_source,
                             neighbor_mode=self.neighbor_mode,
                             imm=ImmConfig(turn_rates=self.turn_rates(), horizon_s=self.imm_horizon_s))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, raw: str):
    if key not in _FIELDS:
        raise UsageError(f"unknown configuration key {key!r}")
    kind = type(getattr(RunConfig(), key))
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r} (expected {kind.__name__})") from None


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" in s:
            key, _, value = s.partition("=")
        else:
            key, _, value = s.partition(" ")
        key = key.strip()
        if key not in _FIELDS:
            raise UsageError(f"{p}:{lineno}: unknown configuration key {key!r}")
        out[key] = _coerce(key, value)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    lower = {k.lower(): k for k in _FIELDS}
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = lower.get(name[len(ENV_PREFIX):].lower())
        if key is None:
            raise UsageError(f"environment variable {name} does not name a configuration key")
        out[key] = _coerce(key, value)
    return out


FLAG_KEYS = {"seed": "seed", "out": "out", "ablation": "ablation", "dt": "dt",
             "window_n": "window_n", "horizon_s": "horizon_s", "goal_source": "goal_source",
             "data": "data", "test_data": "test_data", "checkpoint": "checkpoint"}


def resolve_config(args, environ=None) -> RunConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    values.update(env_overrides(environ))
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = _coerce(key, str(v))
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _coerce(key.strip(), value)
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# run directories and logs

class Run:
    def __init__(self, command: str, cfg: RunConfig):
        self.command, self.cfg = command, cfg
        stamp = time.strftime("%Y%m%d-%H%M%S")
        base = Path(cfg.out) / f"{command}_{stamp}_{cfg.fingerprint()[:8]}"
        path, i = base, 1
        while path.exists():
            i += 1
            path = Path(f"{base}_{i}")
        path.mkdir(parents=True)
        self.dir = path
        self.metrics = {}
        (path / "config.txt").write_text(cfg.to_text())

    def metric(self, name, value):
        self.metrics[name] = value

    def close(self):
        lines = [f"command {self.command}", f"fingerprint {self.cfg.fingerprint()}",
                 f"seed {self.cfg.seed}"]
        lines += [f"config.{k} {v}" for k, v in asdict(self.cfg).items()]
        for k, v in self.metrics.items():
            lines.append(f"metric.{k} {v!r}" if isinstance(v, float) else f"metric.{k} {v}")
        (self.dir / "run.log").write_text("\n".join(lines) + "\n")
        print(f"outputs written to {self.dir}")


def _require(path: str, what: str, flag: str) -> Path:
    if not path:
        raise DataError(f"missing {what}: pass {flag} (or set it in the config)")
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing {what}: {p} does not exist")
    return p


def _load_scenes(cfg: RunConfig, path: str, what: str, flag: str, subdir: str) -> list:
    p = _require(path, what, flag)
    if cfg.data_format == "benchmark":
        return load_benchmark(p, dt=cfg.benchmark_dt, seed=cfg.seed)
    if (p / subdir / "corpus.txt").exists():
        p = p / subdir
    return load_corpus(p)


def _checkpoint_dir(cfg: RunConfig, ablation: str) -> Path:
    p = _require(cfg.checkpoint, "checkpoint", "--checkpoint")
    name = "checkpoint" if ablation == "full" else f"checkpoint_{ablation}"
    if (p / name / "manifest.txt").exists():
        return p / name
    if (p / "manifest.txt").exists():
        if ablation == "full" or p.name.endswith(ablation):
            return p
        sib = p.parent / name
        if (sib / "manifest.txt").exists():
            return sib
    raise DataError(f"missing checkpoint for ablation {ablation!r} under {p} "
                    f"(run the train command first; it writes {name}/)")


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg: RunConfig) -> int:
    run = Run("simulate", cfg)
    syn = cfg.synthetic()
    rng = run_rng(cfg.seed, cfg.scene_run)  # same scene as run ``scene_run`` of ``gen``
    scene = random_scene(rng, syn)
    res = simulate(scene, cfg.sfmg_params(), cfg.duration_s, rng_seed=int(rng.integers(2**63)))
    rows = force_dump_rows(res)
    if cfg.noise_std == 0:
        worst = max((float(np.max(np.abs(np.sum(f[:4], axis=0) - f[4])))
                     for fs in res.forces.values() for f in fs), default=0.0)
        if worst > 1e-9:
            raise InvariantError(f"total force differs from the component sum by {worst:g}")
    cols = ["t", "agent", "px", "py", "fax", "fay", "fbx", "fby", "fpx", "fpy", "fgx", "fgy", "ftx", "fty"]
    with open(run.dir / "forces.txt", "w") as fh:
        fh.write("# " + " ".join(cols) + "\n")
        for r in rows:
            fh.write(f"{r[0]:.10g} {r[1]} " + " ".join(repr(float(x)) for x in r[2:]) + "\n")
    with open(run.dir / "trajectories.txt", "w") as fh:
        fh.write("# t agent px py\n")
        for r in rows:
            fh.write(f"{r[0]:.10g} {r[1]} {float(r[2])!r} {float(r[3])!r}\n")
    run.metric("agents", len(res.trajectories))
    run.metric("arrived", len(res.arrived))
    run.metric("rows", len(rows))
    run.close()
    return 0


def cmd_gen(cfg: RunConfig) -> int:
    run = Run("gen", cfg)
    params = cfg.sfmg_params()
    train = generate_synthetic(cfg.synthetic(), params)
    test = generate_synthetic(cfg.synthetic(cfg.test_runs), params, first_run=cfg.runs)
    write_corpus(train, run.dir / "train")
    write_corpus(test, run.dir / "test")
    run.metric("train_scenes", len(train))
    run.metric("test_scenes", len(test))
    run.metric("train_agents", sum(len(d.trajectories) for d in train))
    run.close()
    return 0


def _training_arrays(scenes, fcfg: FeatureConfig):
    batches, targets = [], []
    for ds in scenes:
        if ds.forces is None:
            raise DataError(f"scene {ds.name!r} has no force targets; training needs simulated data")
        if not math.isclose(ds.dt, fcfg.dt, rel_tol=1e-9):
            if ds.dt > fcfg.dt:
                raise DataError(f"cannot train at dt {fcfg.dt} on data sampled at {ds.dt}")
            ds = resample(ds, fcfg.dt)
        b, y, _ = extract_arrays(ds, fcfg)
        if len(b):
            batches.append(b)
            targets.append(y)
    if not batches:
        raise DataError("no training frames: scenes are shorter than the observation window")
    return FeatureBatch.concat(batches), np.concatenate(targets)


def cmd_train(cfg: RunConfig) -> int:
    scenes = _load_scenes(cfg, cfg.data, "training data", "--data", "train")
    dt = cfg.dt or scenes[0].dt
    run = Run("train", cfg)
    mcfg = cfg.model_config(dt)
    fcfg = FeatureConfig(n=mcfg.n, dt=dt, max_neighbors=mcfg.max_neighbors, d_coh=cfg.d_coh,
                         fov_half_angle=math.radians(cfg.fov_deg))
    X, Y = _training_arrays(scenes, fcfg)
    tr, dv, te = split(len(X), SplitSpec(seed=cfg.seed))
    model = SfmgNet(mcfg)
    tcfg = cfg.train_config()
    log_lines = []

    def on_log(entry):
        log.info("%s: best epoch %d, dev MSE %.6g", entry.module, entry.best_epoch, entry.best_dev_mse)
        log_lines.append(entry.to_text())

    train, dev = (X[tr], Y[tr]), (X[dv], Y[dv])
    train_all(model, train, dev, tcfg, log_fn=on_log)
    for name in list(MODULES) + ["total"]:
        run.metric(f"test_mse.{name}", module_mse(model, name, X[te], Y[te]))
    model.meta["ablation"] = "full"
    model.save(run.dir / "checkpoint")
    for name, variant in train_ablations(model, train, dev, tcfg, names=("att", "abr", "abrpr")).items():
        run.metric(f"test_mse.total_{name}", module_mse(variant, "total", X[te], Y[te]))
        variant.save(run.dir / f"checkpoint_{name}", model.meta["data_fingerprint"])
    (run.dir / "train_log.txt").write_text("\n".join(log_lines) + "\n")
    run.metric("samples", len(X))
    run.metric("data_fingerprint", model.meta["data_fingerprint"])
    run.close()
    for k, v in run.metrics.items():
        if k.startswith("test_mse"):
            print(f"{k} {v:.6g}")
    return 0


def _model(cfg: RunConfig, ablation=None) -> SfmgNet:
    try:
        return SfmgNet.load(_checkpoint_dir(cfg, ablation or cfg.ablation))
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from None


def _test_scenes(cfg: RunConfig):
    path = cfg.test_data or cfg.data
    flag = "--test-data" if not cfg.data else "--data"
    return _load_scenes(cfg, path, "evaluation data", flag, "test")


def cmd_predict(cfg: RunConfig) -> int:
    model = _model(cfg)
    scenes = _test_scenes(cfg)
    run = Run("predict", cfg)
    predictor = ModelPredictor(model, rollout_cfg=cfg.rollout_config())
    count = 0
    with open(run.dir / "predictions.txt", "w") as fh:
        fh.write("# scene segment agent step kind x y   (kind: obs, pred, truth)\n")
        for ds in scenes:
            for si, seg in enumerate(segments(ds, model.config.dt, model.config.n, cfg.protocol())):
                pred = predictor(seg)
                k = seg.out_every
                for aid in seg.egos:
                    h = seg.histories[aid][::-1][::k][::-1]
                    for j, p in enumerate(h):
                        fh.write(f"{ds.name} {si} {aid} {j - len(h) + 1} obs {float(p[0])!r} {float(p[1])!r}\n")
                    for j, p in enumerate(pred[aid]):
                        fh.write(f"{ds.name} {si} {aid} {j + 1} pred {float(p[0])!r} {float(p[1])!r}\n")
                    if aid in seg.truth:
                        for j, p in enumerate(seg.truth[aid]):
                            fh.write(f"{ds.name} {si} {aid} {j + 1} truth {float(p[0])!r} {float(p[1])!r}\n")
                    count += 1
    run.metric("predicted_tracks", count)
    run.close()
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    model = _model(cfg)
    scenes = _test_scenes(cfg)
    run = Run("eval", cfg)
    protocol = cfg.protocol()
    label = f"sfmgnet-{cfg.ablation}"
    rep = evaluate(ModelPredictor(model, rollout_cfg=cfg.rollout_config()), scenes, protocol, label=label)
    cv = evaluate(ConstantVelocity(model.config.dt, model.config.n), scenes, protocol, label="cv")
    grid = table_grid({label: rep, "cv": cv})
    (run.dir / "report.txt").write_text(rep.to_text() + "\n")
    (run.dir / "records.txt").write_text(format_records(rep.to_records() + cv.to_records()) + "\n")
    (run.dir / "grid.txt").write_text(grid + "\n")
    print(rep.to_text())
    print(grid)
    print(f"near-collision frames: {rep.near_collision_pct:.3f}% of {rep.n_frames}")
    if rep.empty:
        print("no segments: no agent has a full observation and horizon")
    run.metric("ade", rep.ade)
    run.metric("fde", rep.fde)
    run.metric("near_collision_pct", rep.near_collision_pct)
    run.metric("samples", rep.n_samples)
    run.metric("cv_ade", cv.ade)
    run.metric("cv_fde", cv.fde)
    run.close()
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    models = {name: _model(cfg, name) for name in ABLATIONS}
    scenes = _test_scenes(cfg)
    run = Run("ablate", cfg)
    reports = ablation_suite(models, scenes, cfg.protocol(), goal_source=cfg.goal_source)
    grid = table_grid(reports)
    holds = ablation_ordering_holds(reports)
    (run.dir / "grid.txt").write_text(grid + "\n")
    recs = [r for rep in reports.values() for r in rep.to_records()]
    (run.dir / "records.txt").write_text(format_records(recs) + "\n")
    print(grid)
    print(f"ordering full <= abrpr <= abr <= att (full 5% below abrpr): {'holds' if holds else 'violated'}")
    for name, rep in reports.items():
        run.metric(f"ade.{name}", rep.ade)
        run.metric(f"fde.{name}", rep.fde)
    run.metric("ordering_holds", holds)
    run.close()
    return 0


COMMANDS = {"simulate": cmd_simulate, "gen": cmd_gen, "train": cmd_train,
            "predict": cmd_predict, "eval": cmd_eval, "ablate": cmd_ablate}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="parent directory for run-stamped outputs")
    common.add_argument("--ablation", choices=sorted(ABLATIONS))
    common.add_argument("--dt", type=float, help="working interval of the network (s)")
    common.add_argument("--window-n", dest="window_n", type=int)
    common.add_argument("--horizon-s", dest="horizon_s", type=float)
    common.add_argument("--goal-source", dest="goal_source", choices=GOAL_SOURCES)
    common.add_argument("--data", help="corpus, gen output or benchmark directory")
    common.add_argument("--test-data", dest="test_data")
    common.add_argument("--checkpoint", help="checkpoint or train output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any key")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="sfmgnet", description="Force-structured pedestrian trajectory prediction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"simulate": "simulate one scene; dump trajectories and force breakdowns",
             "gen": "generate training and held-out synthetic corpora",
             "train": "train the force modules, recombination and ablation variants",
             "predict": "roll out predictions with observations and ground truth",
             "eval": "ADE/FDE and near-collision report against constant velocity",
             "ablate": "evaluate the four ablation variants"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None, environ=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = resolve_config(args, environ)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
