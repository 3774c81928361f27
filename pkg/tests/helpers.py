"""Random scene builders shared by the unit and acceptance tests."""

import math

import numpy as np

import oracles
from sfmgnet.core import Group, Obstacle, PedestrianState, Scene
from sfmgnet.sim import FieldOfView, SfmgParams, scene_forces, total_force, _scene_arrays


def random_configuration(rng):
    """A random scene with 1-6 agents, up to two obstacles and up to one group."""
    n = int(rng.integers(1, 7))
    prm = dict(tau=rng.uniform(0.2, 1.0), U0=rng.uniform(1, 20), R=rng.uniform(0.1, 1.0),
               V0=rng.uniform(0.5, 80), sigma=rng.uniform(0.05, 1.0), lam=rng.uniform(0, 1),
               S_vis=rng.uniform(0, 3), S_att=rng.uniform(0, 2), d_coh=rng.uniform(0, 1.5),
               half_angle=rng.uniform(0.2, math.pi))
    agents = []
    for i in range(n):
        p = tuple(rng.uniform(-4, 4, 2))
        v = tuple(rng.uniform(-1.5, 1.5, 2)) if rng.random() > 0.1 else (0.0, 0.0)
        goal = tuple(rng.uniform(-10, 10, 2))
        agents.append(dict(id=i, p=p, v=v, goal=goal, v0=float(rng.uniform(0.5, 2.0))))
    polys = []
    for _ in range(int(rng.integers(0, 3))):
        k = int(rng.integers(1, 4))
        polys.append([tuple(x) for x in rng.uniform(-6, 6, (k, 2))])
    groups = []
    if n >= 2 and rng.random() < 0.7:
        size = int(rng.integers(2, min(4, n) + 1))
        groups.append(list(rng.choice(n, size, replace=False).tolist()))
    params = SfmgParams(tau=prm["tau"], V0=prm["V0"], sigma=prm["sigma"], U0=prm["U0"], R=prm["R"],
                        lam=prm["lam"], S_vis=prm["S_vis"], S_att=prm["S_att"], d_coh=prm["d_coh"],
                        fov=FieldOfView(prm["half_angle"]))
    scene = Scene(0.1, [PedestrianState(a["id"], a["p"], a["v"], a["goal"], a["v0"]) for a in agents],
                  [Obstacle(p) for p in polys],
                  [Group(0, tuple(g), g[0]) for g in groups])
    return agents, polys, groups, prm, scene, params


def worst_oracle_gap(rng):
    """Largest deviation of both force routes from the oracle on one random scene."""
    agents, polys, groups, prm, scene, params = random_configuration(rng)
    ref = oracles.breakdown(agents, polys, groups, prm)
    P, V, G, S, gid, ids = _scene_arrays(scene)
    vec = scene_forces(P, V, G, S, gid, ids, scene.segments(), params)
    worst = 0.0
    for i, a in enumerate(agents):
        want = np.array(ref[a["id"]])
        scalar = total_force(a["id"], scene, params).as_array()
        worst = max(worst, float(np.max(np.abs(scalar - want))), float(np.max(np.abs(vec[i] - want))))
    return worst


def random_batch(rng, B=6, n=10, K=9, dt=0.1, absent_frac=0.4):
    """A feature batch with plausible random values in every field."""
    from sfmgnet.features import FeatureBatch

    steps = rng.normal(0.12, 0.04, (B, n - 1, 2))
    pos = np.concatenate([np.zeros((B, 1, 2)), np.cumsum(steps, axis=1)], axis=1)
    D = np.hypot(steps[..., 0], steps[..., 1])
    ang = rng.uniform(0, 2 * math.pi, (B, 2 + K))
    units = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    d_nb = np.sort(rng.uniform(0.2, 4.0, (B, K)), axis=1)
    present = rng.random((B, K)) > absent_frac
    present = np.sort(present, axis=1)[:, ::-1]  # present slots first
    d_nb = np.where(present, d_nb, 100.0)
    eta_nb = np.where(present[..., None], units[:, 2:], 0.0)
    in_group = rng.random(B) < 0.6
    e = units[:, 0]
    theta = np.where(in_group, rng.uniform(0, 1.5, B), 0.0)
    v_des = np.where(in_group[:, None], 1.34 * e, 0.0)
    eta_c = np.where(in_group[:, None] & (rng.random((B, 1)) < 0.7), units[:, 1], 0.0)
    return FeatureBatch(pos, D, e, rng.uniform(0.1, 3.0, B), units[:, 1], d_nb, eta_nb, present,
                        theta, v_des, eta_c, in_group, dt)


def nudged_params(model, rng, std=0.1):
    """Copy of ``model.params`` with random biases so no relu sits on its kink."""
    p = {k: v.copy() for k, v in model.params.items()}
    for k in p:
        if ".b_" in k:
            b = p[k] + rng.normal(0.0, std, p[k].shape)
            p[k] = np.where(b >= 0, 1.0, -1.0) * np.maximum(np.abs(b), 1e-3)
    return p


def module_grad_error(model, name, batch, rng, keys=None):
    """Worst finite-difference error of one module (or ``"rec"``) on ``batch``."""
    from sfmgnet.tinynn import grad_check

    params = nudged_params(model, rng)
    if name == "rec":
        net = model.rec
        x = rng.normal(0.0, 1.0, (len(batch), 2))
    else:
        net, x = model.modules[name], batch
    R = rng.normal(size=(len(batch), 2))

    def loss(p):
        out, cache = net.forward(p, x)
        grads = net.backward(p, cache, R)
        if name == "rec":
            grads = grads[0]
        return float(np.sum(out * R)), grads

    keys = keys or [k for k in params if k.startswith(name + ".")]
    return grad_check(loss, params, keys=keys)


ACCEPTANCE = []  # one summary line per acceptance criterion, printed at session end


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed
