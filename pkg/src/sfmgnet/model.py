"""Force networks whose layer structure follows the social force terms.

Four modules each predict one force component from a ``FeatureBatch``:

* ``net1`` acceleration: a desired-speed branch (sigmoid MLP on step lengths,
  scaled onto the goal direction) minus a velocity branch (tanh MLP on the
  normalised window);
* ``net2`` obstacle repulsion: an exponential distance unit times the
  obstacle direction, through a sigmoid layer;
* ``net3`` pedestrian repulsion: one small network per neighbour slot with an
  isotropic and an anisotropic relu branch, then an aggregator MLP;
* ``net4`` group force: relu branches on the view-rotation term and on the
  direction to the group centroid.

Every module subtracts its own response to the "nothing there" input inside
the forward pass, so an absent obstacle, neighbour or group contributes
exactly zero. A recombination MLP maps the sum of the active components to
the total force.
"""

from __future__ import annotations

import ast
import hashlib
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional

import numpy as np

from .core import ForceBreakdown
from .features import FeatureBatch
from .tinynn import (
    AdamState,
    Dense,
    adam_update,
    exp_unit,
    exp_unit_backward,
    load_params,
    save_params,
    sigmoid,
)

MODULES = ("net1", "net2", "net3", "net4")
ABLATIONS = {
    "att": ("net1",),
    "abr": ("net1", "net2"),
    "abrpr": ("net1", "net2", "net3"),
    "full": MODULES,
}
TARGET_COLUMN = {"net1": 0, "net2": 1, "net3": 2, "net4": 3, "total": 4}
CHECKPOINT_FORMAT = "sfmgnet-checkpoint v1"


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class ModelConfig:
    n: int = 10
    dt: float = 0.1
    max_neighbors: int = 9
    h_net1: int = 32
    h_net2: int = 16
    h_net3: int = 16
    h_agg: int = 32
    h_net4: int = 16
    h_rec: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("window length n must be at least 2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


def _uniform(rng, scale, *shape):
    return rng.uniform(-scale, scale, size=shape)


def _glorot(rng, rows, cols):
    s = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-s, s, size=(rows, cols))


# ---------------------------------------------------------------------------
# modules

class Net1:
    """Acceleration force: ``s(D) * e - v(dp)``."""

    name = "net1"

    def __init__(self, cfg: ModelConfig):
        self.n, self.h = cfg.n, cfg.h_net1

    def init(self, rng, cfg: ModelConfig) -> dict:
        h, n = self.h, self.n
        return {
            "net1.W_vd": _glorot(rng, h, n - 1),
            "net1.b_vd": np.zeros((1, h)),
            "net1.W_vds": _glorot(rng, 1, h),
            "net1.W_vi": _glorot(rng, h, 2 * n),
            "net1.b_vi": np.zeros((1, h)),
            "net1.W_vis": _glorot(rng, 2, h),
        }

    def forward(self, p, b: FeatureBatch):
        B = len(b)
        desired = Dense(p["net1.W_vd"], p["net1.b_vd"], "sigmoid")
        h1, c1 = desired.forward(b.D.reshape(B, -1))
        s, c1s = Dense(p["net1.W_vds"]).forward(h1)
        inst = Dense(p["net1.W_vi"], p["net1.b_vi"], "tanh")
        h2, c2 = inst.forward(b.dp.reshape(B, -1))
        v, c2s = Dense(p["net1.W_vis"]).forward(h2)
        return s * b.e - v, (b.e, c1, c1s, c2, c2s)

    def backward(self, p, cache, g):
        e, c1, c1s, c2, c2s = cache
        gs = np.sum(g * e, axis=1, keepdims=True)
        gh1, gW_vds, _ = Dense(p["net1.W_vds"]).backward(c1s, gs)
        _, gW_vd, gb_vd = Dense(p["net1.W_vd"], p["net1.b_vd"], "sigmoid").backward(c1, gh1)
        gh2, gW_vis, _ = Dense(p["net1.W_vis"]).backward(c2s, -g)
        _, gW_vi, gb_vi = Dense(p["net1.W_vi"], p["net1.b_vi"], "tanh").backward(c2, gh2)
        return {"net1.W_vd": gW_vd, "net1.b_vd": gb_vd, "net1.W_vds": gW_vds,
                "net1.W_vi": gW_vi, "net1.b_vi": gb_vi, "net1.W_vis": gW_vis}

    def baseline(self, p):
        return np.zeros(2)


class Net2:
    """Obstacle force: ``(sig(W_U exp(d/W_R) eta + b) - sig(b)) W_fB``."""

    name = "net2"

    def __init__(self, cfg: ModelConfig):
        self.h = cfg.h_net2

    def init(self, rng, cfg: ModelConfig) -> dict:
        h = self.h
        return {
            "net2.W_R": rng.uniform(-0.5, -0.2, size=(1, 1)),
            "net2.W_U": _glorot(rng, h, 2),
            "net2.b_U": np.zeros((1, h)),
            "net2.W_fB": _glorot(rng, 2, h),
        }

    def forward(self, p, b: FeatureBatch):
        y, cy = exp_unit(b.d_obs, p["net2.W_R"])
        u = y[:, None] * b.eta_obs
        z = u @ p["net2.W_U"].T + p["net2.b_U"]
        sz = sigmoid(z)
        h = sz - sigmoid(p["net2.b_U"])
        return h @ p["net2.W_fB"].T, (b.eta_obs, cy, u, sz, h)

    def backward(self, p, cache, g):
        eta, cy, u, sz, h = cache
        gW_fB = g.T @ h
        gh = g @ p["net2.W_fB"]
        gz = gh * sz * (1.0 - sz)
        sb = sigmoid(p["net2.b_U"])
        gb_U = gz.sum(axis=0, keepdims=True) - gh.sum(axis=0, keepdims=True) * sb * (1.0 - sb)
        gW_U = gz.T @ u
        gu = gz @ p["net2.W_U"]
        _, gW_R = exp_unit_backward(cy, np.sum(gu * eta, axis=1))
        return {"net2.W_R": gW_R, "net2.W_U": gW_U, "net2.b_U": gb_U, "net2.W_fB": gW_fB}

    def baseline(self, p):
        return (sigmoid(p["net2.b_U"]) @ p["net2.W_fB"].T).reshape(2)


class Net3:
    """Pedestrian repulsion over ``K`` neighbour slots plus an aggregator.

    Slot ``k`` has its own weights. Its isotropic branch is
    ``relu(W_A1 exp(d/w1) eta + b1)`` and its anisotropic branch is
    ``relu(W_A2 eta cos(phi) exp(-d/w2) + b2)``, where ``cos(phi) = -eta.e``.
    The slot output ``(branch1 + branch2 - baseline) W_ab`` is a 2-vector; the
    ``2K`` slot outputs feed a relu MLP whose zero-input response is removed.
    """

    name = "net3"

    def __init__(self, cfg: ModelConfig):
        self.k, self.h, self.ha = cfg.max_neighbors, cfg.h_net3, cfg.h_agg

    def init(self, rng, cfg: ModelConfig) -> dict:
        K, H, Ha = self.k, self.h, self.ha
        return {
            "net3.W_s1": rng.uniform(-0.5, -0.2, size=(K, 1)),
            "net3.W_A1": np.stack([_glorot(rng, H, 2) for _ in range(K)]).reshape(K, H * 2),
            "net3.b_A1": np.zeros((K, H)),
            "net3.W_s2": rng.uniform(0.2, 0.5, size=(K, 1)),
            "net3.W_A2": np.stack([_glorot(rng, H, 2) for _ in range(K)]).reshape(K, H * 2),
            "net3.b_A2": np.zeros((K, H)),
            "net3.W_ab": np.stack([_glorot(rng, 2, H) for _ in range(K)]).reshape(K, 2 * H),
            "net3.W_agg": _glorot(rng, Ha, 2 * K),
            "net3.b_agg": np.zeros((1, Ha)),
            "net3.W_out": _glorot(rng, 2, Ha),
        }

    def _shaped(self, p):
        K, H = self.k, self.h
        return (p["net3.W_A1"].reshape(K, H, 2), p["net3.W_A2"].reshape(K, H, 2),
                p["net3.W_ab"].reshape(K, 2, H))

    def slot_outputs(self, p, b: FeatureBatch):
        """Per-slot force estimates ``(B, K, 2)`` and the intermediate values."""
        WA1, WA2, Wab = self._shaped(p)
        d, eta = b.d_nb, b.eta_nb
        y1, c1 = exp_unit(d, p["net3.W_s1"])
        u1 = y1[..., None] * eta
        z1 = np.einsum("bki,khi->bkh", u1, WA1) + p["net3.b_A1"][None]
        cos = -np.einsum("bki,bi->bk", eta, b.e)
        y2, c2 = exp_unit(-d, p["net3.W_s2"])
        u2 = eta * (cos * y2)[..., None]
        z2 = np.einsum("bki,khi->bkh", u2, WA2) + p["net3.b_A2"][None]
        h = relu(z1) + relu(z2) - relu(p["net3.b_A1"])[None] - relu(p["net3.b_A2"])[None]
        o = np.einsum("bkh,kjh->bkj", h, Wab)
        return o, (eta, cos, y2, c1, c2, u1, u2, z1, z2, h)

    def forward(self, p, b: FeatureBatch):
        B = len(b)
        o, inner = self.slot_outputs(p, b)
        x = o.reshape(B, -1)
        za = x @ p["net3.W_agg"].T + p["net3.b_agg"]
        ra = relu(za) - relu(p["net3.b_agg"])
        return ra @ p["net3.W_out"].T, (inner, x, za, ra)

    def backward(self, p, cache, g):
        (eta, cos, y2, c1, c2, u1, u2, z1, z2, h), x, za, ra = cache
        K, H = self.k, self.h
        WA1, WA2, Wab = self._shaped(p)
        B = len(g)
        gW_out = g.T @ ra
        gra = g @ p["net3.W_out"]
        gza = gra * (za > 0)
        gb_agg = gza.sum(axis=0, keepdims=True) - gra.sum(axis=0, keepdims=True) * (p["net3.b_agg"] > 0)
        gW_agg = gza.T @ x
        go = (gza @ p["net3.W_agg"]).reshape(B, K, 2)
        gWab = np.einsum("bkj,bkh->kjh", go, h)
        gh = np.einsum("bkj,kjh->bkh", go, Wab)
        gz1 = gh * (z1 > 0)
        gz2 = gh * (z2 > 0)
        ghs = gh.sum(axis=0)
        gb_A1 = gz1.sum(axis=0) - ghs * (p["net3.b_A1"] > 0)
        gb_A2 = gz2.sum(axis=0) - ghs * (p["net3.b_A2"] > 0)
        gWA1 = np.einsum("bkh,bki->khi", gz1, u1)
        gWA2 = np.einsum("bkh,bki->khi", gz2, u2)
        gu1 = np.einsum("bkh,khi->bki", gz1, WA1)
        gu2 = np.einsum("bkh,khi->bki", gz2, WA2)
        _, gW_s1 = exp_unit_backward(c1, np.sum(gu1 * eta, axis=-1))
        _, gW_s2 = exp_unit_backward(c2, np.sum(gu2 * eta, axis=-1) * cos)
        return {"net3.W_s1": gW_s1, "net3.W_A1": gWA1.reshape(K, H * 2), "net3.b_A1": gb_A1,
                "net3.W_s2": gW_s2, "net3.W_A2": gWA2.reshape(K, H * 2), "net3.b_A2": gb_A2,
                "net3.W_ab": gWab.reshape(K, 2 * H), "net3.W_agg": gW_agg,
                "net3.b_agg": gb_agg, "net3.W_out": gW_out}

    def baseline(self, p):
        K, H = self.k, self.h
        _, _, Wab = self._shaped(p)
        slot = np.einsum("kh,kjh->kj", relu(p["net3.b_A1"]) + relu(p["net3.b_A2"]), Wab)
        return np.concatenate([slot.reshape(-1),
                               (relu(p["net3.b_agg"]) @ p["net3.W_out"].T).reshape(2)])


class Net4:
    """Group force: ``(relu(W_g1 theta v_des + b1) + relu(W_g2 eta_c + b2) - baseline) W_G``."""

    name = "net4"

    def __init__(self, cfg: ModelConfig):
        self.h = cfg.h_net4

    def init(self, rng, cfg: ModelConfig) -> dict:
        h = self.h
        return {
            "net4.W_g1": _glorot(rng, h, 2),
            "net4.b_g1": np.zeros((1, h)),
            "net4.W_g2": _glorot(rng, h, 2),
            "net4.b_g2": np.zeros((1, h)),
            "net4.W_G": _glorot(rng, 2, h),
        }

    def forward(self, p, b: FeatureBatch):
        u1 = b.theta[:, None] * b.v_des
        u2 = b.eta_c
        z1 = u1 @ p["net4.W_g1"].T + p["net4.b_g1"]
        z2 = u2 @ p["net4.W_g2"].T + p["net4.b_g2"]
        h = relu(z1) + relu(z2) - relu(p["net4.b_g1"]) - relu(p["net4.b_g2"])
        return h @ p["net4.W_G"].T, (u1, u2, z1, z2, h)

    def backward(self, p, cache, g):
        u1, u2, z1, z2, h = cache
        gW_G = g.T @ h
        gh = g @ p["net4.W_G"]
        gz1 = gh * (z1 > 0)
        gz2 = gh * (z2 > 0)
        ghs = gh.sum(axis=0, keepdims=True)
        return {"net4.W_g1": gz1.T @ u1,
                "net4.b_g1": gz1.sum(axis=0, keepdims=True) - ghs * (p["net4.b_g1"] > 0),
                "net4.W_g2": gz2.T @ u2,
                "net4.b_g2": gz2.sum(axis=0, keepdims=True) - ghs * (p["net4.b_g2"] > 0),
                "net4.W_G": gW_G}

    def baseline(self, p):
        return ((relu(p["net4.b_g1"]) + relu(p["net4.b_g2"])) @ p["net4.W_G"].T).reshape(2)


class Recombination:
    """``relu(s W_IF + b_IF) W_FF + b_FF`` over the summed component forces.

    Initialised so that the first four hidden units carry ``+s`` and ``-s``;
    the remaining units start small, so the untrained layer is close to the
    identity on ``s``.
    """

    name = "rec"

    def __init__(self, cfg: ModelConfig):
        if cfg.h_rec < 4:
            raise ValueError("recombination needs at least 4 hidden units")
        self.h = cfg.h_rec

    def init(self, rng, cfg: ModelConfig) -> dict:
        h = self.h
        W_IF = _uniform(rng, 0.01, h, 2)
        W_FF = _uniform(rng, 0.01, 2, h)
        W_IF[:4] = [[1, 0], [-1, 0], [0, 1], [0, -1]]
        W_FF[:, :4] = [[1, -1, 0, 0], [0, 0, 1, -1]]
        return {"rec.W_IF": W_IF, "rec.b_IF": np.zeros((1, h)),
                "rec.W_FF": W_FF, "rec.b_FF": np.zeros((1, 2))}

    def forward(self, p, s):
        z = s @ p["rec.W_IF"].T + p["rec.b_IF"]
        h = relu(z)
        return h @ p["rec.W_FF"].T + p["rec.b_FF"], (s, z, h)

    def backward(self, p, cache, g):
        s, z, h = cache
        gh = g @ p["rec.W_FF"]
        gz = gh * (z > 0)
        grads = {"rec.W_IF": gz.T @ s, "rec.b_IF": gz.sum(axis=0, keepdims=True),
                 "rec.W_FF": g.T @ h, "rec.b_FF": g.sum(axis=0, keepdims=True)}
        return grads, gz @ p["rec.W_IF"]


# ---------------------------------------------------------------------------
# full model

def mask_for(ablation: str) -> tuple:
    try:
        return ABLATIONS[ablation]
    except KeyError:
        raise ValueError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}") from None


class SfmgNet:
    """The four force modules, an ablation mask and the recombination layer."""

    def __init__(self, config: Optional[ModelConfig] = None, mask=MODULES, params=None):
        self.config = config or ModelConfig()
        mask = tuple(m for m in MODULES if m in set(mask))
        if "net1" not in mask:
            raise ValueError("net1 must be active in every configuration")
        self.mask = mask
        cfg = self.config
        self.modules = {"net1": Net1(cfg), "net2": Net2(cfg), "net3": Net3(cfg), "net4": Net4(cfg)}
        self.rec = Recombination(cfg)
        if params is None:
            params = self.init_params(cfg.seed)
        self.params = params
        self.meta = {}

    def init_params(self, seed) -> dict:
        ss = np.random.SeedSequence(seed)
        rngs = [np.random.default_rng(s) for s in ss.spawn(len(MODULES) + 1)]
        p = {}
        for rng, name in zip(rngs, MODULES):
            p.update(self.modules[name].init(rng, self.config))
        p.update(self.rec.init(rngs[-1], self.config))
        return p

    def module_keys(self, name) -> list:
        return [k for k in self.params if k.startswith(name + ".")]

    def with_mask(self, mask, fresh_recombination=True) -> "SfmgNet":
        """A model sharing this one's module weights under another mask."""
        params = dict(self.params)
        if fresh_recombination:
            for k in self.module_keys("rec"):
                del params[k]
            params.update(self.rec.init(np.random.default_rng(self.config.seed), self.config))
        else:
            params.update({k: params[k].copy() for k in self.module_keys("rec")})
        other = SfmgNet(self.config, mask, params)
        other.meta = dict(self.meta)
        return other

    def components(self, batch: FeatureBatch) -> np.ndarray:
        """``(B, 4, 2)`` module outputs; inactive modules are zero."""
        out = np.zeros((len(batch), len(MODULES), 2))
        for j, name in enumerate(MODULES):
            if name in self.mask:
                out[:, j], _ = self.modules[name].forward(self.params, batch)
        return out

    def forward(self, batch: FeatureBatch):
        """``(total (B, 2), components (B, 4, 2))``."""
        comps = self.components(batch)
        total, _ = self.rec.forward(self.params, comps.sum(axis=1))
        return total, comps

    def predict_forces(self, batch: FeatureBatch, chunk: int = 8192) -> np.ndarray:
        """``(B, 5, 2)`` in the ``ForceBreakdown`` column order."""
        out = np.zeros((len(batch), 5, 2))
        for s in range(0, len(batch), chunk):
            sub = batch[s:s + chunk]
            total, comps = self.forward(sub)
            out[s:s + chunk, :4] = comps
            out[s:s + chunk, 4] = total
        return out

    def total_force_forward(self, frame):
        """Total force and its breakdown for a single ``FeatureFrame``."""
        f = self.predict_forces(FeatureBatch.from_frames([frame]))[0]
        return f[4].copy(), ForceBreakdown.from_array(f)

    def baselines(self) -> dict:
        """Zero-input responses removed from each module's output."""
        return {name: self.modules[name].baseline(self.params) for name in MODULES}

    # -- checkpoints --------------------------------------------------------

    def save(self, directory, fingerprint: str = ""):
        os.makedirs(directory, exist_ok=True)
        save_params(os.path.join(directory, "weights.txt"), self.params,
                    {"format": CHECKPOINT_FORMAT})
        lines = [f"format {CHECKPOINT_FORMAT}", f"mask {','.join(self.mask)}",
                 f"data_fingerprint {fingerprint or self.meta.get('data_fingerprint', '-')}"]
        for k, v in asdict(self.config).items():
            lines.append(f"config.{k} {v!r}")
        for name, b in self.baselines().items():
            lines.append(f"baseline.{name} " + " ".join(repr(float(x)) for x in b))
        for k, v in self.meta.items():
            if k != "data_fingerprint":
                lines.append(f"meta.{k} {v}")
        with open(os.path.join(directory, "manifest.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "SfmgNet":
        manifest = os.path.join(directory, "manifest.txt")
        weights = os.path.join(directory, "weights.txt")
        for path in (manifest, weights):
            if not os.path.exists(path):
                raise FileNotFoundError(f"checkpoint is missing {path}")
        entries = {}
        with open(manifest) as fh:
            for line in fh:
                key, _, value = line.strip().partition(" ")
                if key:
                    entries[key] = value
        if entries.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{manifest}: unsupported checkpoint format {entries.get('format')!r}")
        kw = {}
        for f in ModelConfig.__dataclass_fields__.values():
            raw = entries.get(f"config.{f.name}")
            if raw is not None:
                kw[f.name] = type(getattr(ModelConfig(), f.name))(ast.literal_eval(raw))
        params, _ = load_params(weights)
        model = cls(ModelConfig(**kw), tuple(entries["mask"].split(",")), params)
        model.meta = {k[5:]: v for k, v in entries.items() if k.startswith("meta.")}
        model.meta["data_fingerprint"] = entries.get("data_fingerprint", "-")
        return model


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 10
    rec_lr: float = 0.1
    rec_max_epochs: int = 200
    rec_patience: int = 10
    seed: int = 0


@dataclass
class TrainLog:
    module: str
    epochs: list = field(default_factory=list)  # (epoch, train_mse, dev_mse)
    best_epoch: int = -1
    best_dev_mse: float = math.inf

    def to_text(self) -> str:
        rows = [f"{self.module} epoch {e} train {tr:.6g} dev {dv:.6g}" for e, tr, dv in self.epochs]
        rows.append(f"{self.module} best_epoch {self.best_epoch} best_dev {self.best_dev_mse:.6g}")
        return "\n".join(rows)


def mse(pred, target) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))


def module_mse(model: SfmgNet, name: str, batch: FeatureBatch, targets, chunk: int = 8192) -> float:
    """Mean squared error of one module (or ``"total"``) against its force column."""
    col = TARGET_COLUMN[name]
    se, count = 0.0, 0
    for s in range(0, len(batch), chunk):
        sub = batch[s:s + chunk]
        if name == "total":
            out, _ = model.forward(sub)
        else:
            out, _ = model.modules[name].forward(model.params, sub)
        se += float(np.sum((out - targets[s:s + chunk, col]) ** 2))
        count += out.size
    return se / count


def _check_data(batch, targets):
    if batch is None or len(batch) == 0:
        raise ValueError("empty training set")
    if targets is None or len(targets) != len(batch):
        raise ValueError("targets missing or misaligned with features")


def _fit(keys, params, step_grads, n_train, eval_dev, cfg, lr, max_epochs, patience, rng, log):
    """Shared minibatch loop with early stopping on the dev error."""
    state = AdamState(lr=lr)
    best = {k: params[k].copy() for k in keys}
    log.best_dev_mse = eval_dev()
    log.best_epoch = 0
    stale = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n_train)
        total, seen = 0.0, 0
        for s in range(0, n_train, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = step_grads(idx)
            adam_update(state, params, grads, keys)
            total += loss * len(idx)
            seen += len(idx)
        dev = eval_dev()
        log.epochs.append((epoch, total / seen, dev))
        if dev < log.best_dev_mse:
            log.best_dev_mse, log.best_epoch, stale = dev, epoch, 0
            best = {k: params[k].copy() for k in keys}
        else:
            stale += 1
            if stale >= patience:
                break
    params.update(best)
    return log


def train_module(model: SfmgNet, name: str, train, dev, cfg: TrainConfig = TrainConfig()) -> TrainLog:
    """Fit one module to its simulator force column; other weights stay untouched.

    ``train`` and ``dev`` are ``(FeatureBatch, targets (B, 5, 2))`` pairs.
    The best dev-error weights are restored at the end.
    """
    if name not in MODULES:
        raise ValueError(f"unknown module {name!r}")
    (xb, yb), (xd, yd) = train, dev
    _check_data(xb, yb)
    _check_data(xd, yd)
    net, p = model.modules[name], model.params
    keys = model.module_keys(name)
    col = TARGET_COLUMN[name]
    y = yb[:, col]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, MODULES.index(name)]))

    def step_grads(idx):
        out, cache = net.forward(p, xb[idx])
        r = out - y[idx]
        return float(np.mean(r * r)), net.backward(p, cache, 2.0 * r / r.size)

    return _fit(keys, p, step_grads, len(xb), lambda: module_mse(model, name, xd, yd), cfg,
                cfg.lr, cfg.max_epochs, cfg.patience, rng, TrainLog(name))


def train_recombination(model: SfmgNet, train, dev, cfg: TrainConfig = TrainConfig()) -> TrainLog:
    """Fit only the recombination layer on the frozen modules' summed output."""
    (xb, yb), (xd, yd) = train, dev
    _check_data(xb, yb)
    _check_data(xd, yd)
    p, rec = model.params, model.rec
    keys = model.module_keys("rec")
    s_train = model.predict_forces(xb)[:, :4].sum(axis=1)
    s_dev = model.predict_forces(xd)[:, :4].sum(axis=1)
    y, ydev = yb[:, 4], yd[:, 4]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, len(MODULES)]))

    def step_grads(idx):
        out, cache = rec.forward(p, s_train[idx])
        r = out - y[idx]
        grads, _ = rec.backward(p, cache, 2.0 * r / r.size)
        return float(np.mean(r * r)), grads

    def eval_dev():
        out, _ = rec.forward(p, s_dev)
        return mse(out, ydev)

    return _fit(keys, p, step_grads, len(xb), eval_dev, cfg, cfg.rec_lr, cfg.rec_max_epochs,
                cfg.rec_patience, rng, TrainLog("rec"))


def fingerprint(batch: FeatureBatch, targets=None) -> str:
    h = hashlib.sha256()
    for name in ("dp", "e", "d_obs", "d_nb", "theta", "eta_c"):
        h.update(np.ascontiguousarray(getattr(batch, name)).tobytes())
    if targets is not None:
        h.update(np.ascontiguousarray(targets).tobytes())
    return h.hexdigest()[:16]


def train_all(model: SfmgNet, train, dev, cfg: TrainConfig = TrainConfig(), modules=MODULES,
              log_fn=None) -> dict:
    """Train the listed modules, then the recombination layer; returns logs by name."""
    logs = {}
    for name in modules:
        logs[name] = train_module(model, name, train, dev, cfg)
        if log_fn:
            log_fn(logs[name])
    logs["rec"] = train_recombination(model, train, dev, cfg)
    if log_fn:
        log_fn(logs["rec"])
    model.meta["data_fingerprint"] = fingerprint(*train)
    return logs


def train_ablations(model: SfmgNet, train, dev, cfg: TrainConfig = TrainConfig(),
                    names=("att", "abr", "abrpr", "full")) -> dict:
    """Masked variants of a trained model, each with its own recombination layer."""
    out = {}
    for name in names:
        variant = model.with_mask(mask_for(name))
        train_recombination(variant, train, dev, cfg)
        variant.meta["ablation"] = name
        out[name] = variant
    return out
