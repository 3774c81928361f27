"""
Learning the forces back
========================

Train the network on a small synthetic corpus, then roll it out on unseen
runs and compare against constant velocity. Under a minute on one core; the
full 1000-run setup lives in the acceptance tests.
"""

import numpy as np

from sfmgnet.datasets import SplitSpec, SyntheticConfig, generate_synthetic, split
from sfmgnet.features import FeatureBatch, FeatureConfig, extract_arrays
from sfmgnet.metrics import ConstantVelocity, EvalProtocol, ModelPredictor, evaluate, table_grid
from sfmgnet.model import MODULES, ModelConfig, SfmgNet, TrainConfig, module_mse, train_all

scenes = generate_synthetic(SyntheticConfig(runs=60, seed=0))
parts = [extract_arrays(ds, FeatureConfig()) for ds in scenes]
X = FeatureBatch.concat([b for b, _, _ in parts if len(b)])
Y = np.concatenate([y for b, y, _ in parts if len(b)])
tr, dv, te = split(len(X), SplitSpec(seed=0))
print(f"{len(X)} samples from {len(scenes)} runs")

model = SfmgNet(ModelConfig(seed=0))
train_all(model, (X[tr], Y[tr]), (X[dv], Y[dv]), TrainConfig(seed=0, max_epochs=30),
          log_fn=lambda log: print(f"  {log.module}: best dev {log.best_dev_mse:.3g} at epoch {log.best_epoch}"))

for name in list(MODULES) + ["total"]:
    print(f"test mse {name}: {module_mse(model, name, X[te], Y[te]):.3g}")

# held-out runs continue the numbering, so none of them was seen in training
held = generate_synthetic(SyntheticConfig(runs=10, seed=0), first_run=1000)
reports = {
    "model": evaluate(ModelPredictor(model, goal_source="annotated"), held, EvalProtocol(), "model"),
    "model+imm": evaluate(ModelPredictor(model, goal_source="imm"), held, EvalProtocol(), "model+imm"),
    "cv": evaluate(ConstantVelocity(0.1), held, EvalProtocol(), "cv"),
}
print(table_grid(reports))
