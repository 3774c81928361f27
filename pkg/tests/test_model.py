from dataclasses import replace

import numpy as np
import pytest

from helpers import module_grad_error, random_batch
from sfmgnet.datasets import SplitSpec, split
from sfmgnet.features import FeatureConfig, build_batch
from sfmgnet.model import (
    ABLATIONS,
    MODULES,
    ModelConfig,
    SfmgNet,
    TrainConfig,
    mask_for,
    module_mse,
    train_ablations,
    train_all,
    train_module,
    train_recombination,
)

SMALL = ModelConfig(h_net1=8, h_net2=6, h_net3=4, h_agg=8, h_net4=6, h_rec=6)
AGG_KEYS = ["net3.W_agg", "net3.b_agg", "net3.W_out"]


def empty_batch(B=3):
    """Frames with no obstacle, no neighbours, no group and an arrived goal."""
    b = random_batch(np.random.default_rng(0), B=B)
    return replace(b, e=np.zeros((B, 2)), d_obs=np.full(B, 100.0), eta_obs=np.zeros((B, 2)),
                   d_nb=np.full((B, 9), 100.0), eta_nb=np.zeros((B, 9, 2)),
                   nb_present=np.zeros((B, 9), bool), theta=np.zeros(B), v_des=np.zeros((B, 2)),
                   eta_c=np.zeros((B, 2)), in_group=np.zeros(B, bool))


@pytest.mark.parametrize("name", list(MODULES) + ["rec"])
@pytest.mark.parametrize("seed", [0, 1])
def test_module_gradients(name, seed):
    rng = np.random.default_rng(seed + 50)
    model = SfmgNet(replace(SMALL, seed=seed))
    assert module_grad_error(model, name, random_batch(rng), rng) < 1e-4


def test_aggregator_gradients():
    rng = np.random.default_rng(7)
    model = SfmgNet(SMALL)
    assert module_grad_error(model, "net3", random_batch(rng), rng, keys=AGG_KEYS) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_absent_inputs_give_zero_force(seed):
    rng = np.random.default_rng(seed)
    model = SfmgNet(ModelConfig(seed=seed))
    model.params = {k: v + rng.normal(0, 0.3, v.shape) for k, v in model.params.items()}
    comps = model.components(empty_batch())
    for j in (1, 2, 3):
        assert np.max(np.abs(comps[:, j])) < 1e-12


def test_arrived_goal_removes_desired_branch():
    b = random_batch(np.random.default_rng(3))
    model = SfmgNet()
    out0, _ = model.modules["net1"].forward(model.params, replace(b, e=np.zeros_like(b.e)))
    out1, _ = model.modules["net1"].forward(model.params, replace(b, e=np.zeros_like(b.e), D=b.D * 3))
    assert np.array_equal(out0, out1)


def test_all_zero_weights_give_zero_acceleration():
    model = SfmgNet()
    p = {k: np.zeros_like(v) for k, v in model.params.items()}
    out, _ = model.modules["net1"].forward(p, random_batch(np.random.default_rng(1)))
    assert np.array_equal(out, np.zeros_like(out))


def test_identity_recombination_returns_component_sum():
    model = SfmgNet()
    model.params["rec.W_FF"][:, 4:] = 0.0  # only the +s/-s units remain
    total, comps = model.forward(random_batch(np.random.default_rng(4)))
    assert np.allclose(total, comps.sum(axis=1), atol=1e-12)


def test_fresh_recombination_is_near_identity():
    model = SfmgNet()
    total, comps = model.forward(random_batch(np.random.default_rng(4)))
    assert np.allclose(total, comps.sum(axis=1), atol=1e-2)


def test_ablation_masks():
    assert ABLATIONS["att"] == ("net1",)
    assert ABLATIONS["abr"] == ("net1", "net2")
    assert ABLATIONS["abrpr"] == ("net1", "net2", "net3")
    assert ABLATIONS["full"] == MODULES
    with pytest.raises(ValueError):
        mask_for("none")
    with pytest.raises(ValueError):
        SfmgNet(mask=("net2",))


def test_masked_modules_contribute_zero():
    model = SfmgNet().with_mask(mask_for("att"))
    comps = model.components(random_batch(np.random.default_rng(5)))
    assert np.array_equal(comps[:, 1:], np.zeros_like(comps[:, 1:]))
    assert np.any(comps[:, 0])


def test_translation_invariance():
    rng = np.random.default_rng(8)
    windows = np.cumsum(rng.normal(0.1, 0.05, (3, 10, 2)), axis=1)
    others = rng.uniform(-3, 3, (4, 2))
    allp = np.concatenate([windows[:, -1], others])
    gidx = np.array([0, 0, -1, -1, 0, -1, -1])
    segs = np.array([[[-5.0, 2.0], [5.0, 2.0]]])
    e = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
    cfg = FeatureConfig()
    model = SfmgNet()
    outs = []
    for off in (np.zeros(2), np.array([123.4, -56.7])):
        b = build_batch(windows + off, e, np.full(3, 1.34), np.arange(3), allp + off, list(range(7)),
                        gidx, segs + off, cfg)
        outs.append(model.predict_forces(b))
    assert np.allclose(outs[0], outs[1], atol=1e-9)


def test_forward_is_deterministic():
    b = random_batch(np.random.default_rng(9))
    a1 = SfmgNet(ModelConfig(seed=4)).predict_forces(b)
    a2 = SfmgNet(ModelConfig(seed=4)).predict_forces(b)
    assert np.array_equal(a1, a2)


def test_checkpoint_roundtrip(tmp_path):
    model = SfmgNet(ModelConfig(n=8, dt=0.4, seed=2), mask=mask_for("abrpr"))
    model.meta["ablation"] = "abrpr"
    model.save(tmp_path / "ck", fingerprint="abc123")
    loaded = SfmgNet.load(tmp_path / "ck")
    b = random_batch(np.random.default_rng(0), n=8, dt=0.4)
    assert loaded.config == model.config and loaded.mask == model.mask
    assert np.array_equal(loaded.predict_forces(b), model.predict_forces(b))
    text = (tmp_path / "ck" / "manifest.txt").read_text()
    assert "data_fingerprint abc123" in text and "config.n 8" in text and "config.dt 0.4" in text
    assert "baseline.net2" in text
    assert loaded.meta["ablation"] == "abrpr"


def test_checkpoint_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        SfmgNet.load(tmp_path)


def test_total_force_forward_single_frame():
    b = random_batch(np.random.default_rng(2), B=1)
    model = SfmgNet()
    total, fb = model.total_force_forward(b.frame(0))
    assert np.allclose(total, model.predict_forces(b)[0, 4])
    assert np.allclose(fb.as_array(), model.predict_forces(b)[0])


# -- training ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def splits(small_arrays):
    X, Y = small_arrays
    tr, dv, te = split(len(X), SplitSpec(seed=0))
    return (X[tr], Y[tr]), (X[dv], Y[dv]), (X[te], Y[te])


def test_training_loss_decreases(splits):
    train, dev, _ = splits
    model = SfmgNet(SMALL)
    log = train_module(model, "net1", train, dev, TrainConfig(max_epochs=5, patience=10))
    losses = [e[1] for e in log.epochs]
    assert len(losses) == 5 and losses[-1] < losses[0]


def test_training_touches_only_its_module(splits):
    train, dev, _ = splits
    model = SfmgNet(SMALL)
    before = {k: v.copy() for k, v in model.params.items()}
    train_module(model, "net4", train, dev, TrainConfig(max_epochs=2))
    changed = {k for k in before if not np.array_equal(before[k], model.params[k])}
    assert changed and all(k.startswith("net4.") for k in changed)


def test_recombination_freezes_modules(splits):
    train, dev, _ = splits
    model = SfmgNet(SMALL)
    before = {k: v.copy() for k, v in model.params.items()}
    train_recombination(model, train, dev, TrainConfig(rec_max_epochs=3))
    for k in before:
        if not k.startswith("rec."):
            assert np.array_equal(before[k], model.params[k])


def test_early_stopping_restores_best(splits):
    train, dev, _ = splits
    model = SfmgNet(SMALL)
    log = train_module(model, "net2", train, dev, TrainConfig(max_epochs=6, patience=2))
    assert abs(module_mse(model, "net2", *dev) - log.best_dev_mse) < 1e-12
    assert log.best_dev_mse <= min(e[2] for e in log.epochs)


def test_shuffled_targets_do_not_learn(splits):
    train, dev, test = splits
    rng = np.random.default_rng(0)
    shuffled = (train[0], train[1][rng.permutation(len(train[1]))])
    model = SfmgNet(SMALL)
    train_module(model, "net1", shuffled, dev, TrainConfig(max_epochs=5))
    assert module_mse(model, "net1", *test) > 0.0132


def test_empty_training_set_rejected(splits):
    train, dev, _ = splits
    with pytest.raises(ValueError):
        train_module(SfmgNet(SMALL), "net1", (train[0][:0], train[1][:0]), dev)
    with pytest.raises(ValueError):
        train_module(SfmgNet(SMALL), "net9", train, dev)


def test_ablations_share_module_weights(splits):
    train, dev, _ = splits
    model = SfmgNet(SMALL)
    train_all(model, train, dev, TrainConfig(max_epochs=1, rec_max_epochs=1))
    variants = train_ablations(model, train, dev, TrainConfig(rec_max_epochs=1), names=("att", "abr"))
    for v in variants.values():
        for k in model.params:
            if not k.startswith("rec."):
                assert v.params[k] is model.params[k]
    assert variants["att"].mask == ("net1",)
    assert model.meta["data_fingerprint"] != "-"


def test_training_is_reproducible(splits):
    train, dev, _ = splits
    outs = []
    for _ in range(2):
        m = SfmgNet(SMALL)
        train_all(m, train, dev, TrainConfig(max_epochs=2, rec_max_epochs=2))
        outs.append(m.params)
    assert all(np.array_equal(outs[0][k], outs[1][k]) for k in outs[0])
