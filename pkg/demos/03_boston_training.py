#!/usr/bin/env python3
# Training a small regression network without gradients.
#
# Two relu layers of 32 units on the Boston housing table.  The ensemble
# method sees each minibatch once per epoch and never differentiates
# anything; plain SGD is run alongside for reference.  Expect roughly a
# minute of runtime.

from pathlib import Path

from kalman_learn import NoiseModel, SgdConfig, TrainConfig, ingest_csv, mlp, train_ekl, train_sgd

data = ingest_csv(Path(__file__).resolve().parents[1] / "data" / "boston_housing.csv", "MEDV", seed=0)
spec = mlp([13, 32, 32, 1])

_, ekl = train_ekl(spec, data, TrainConfig(epochs=5, ensemble_size=100, noise=NoiseModel(0.01)))
for rec in ekl.evaluations():
    print(f"EnKL epoch {rec['epoch']}: test RMSE {rec['test_metric']:.3f}")

_, sgd = train_sgd(spec, data, SgdConfig(epochs=200, lr=0.1))
tail = [r["test_metric"] for r in sgd.evaluations()][-20:]
print(f"SGD after 200 epochs: {sgd.final_test_metric:.3f} (mean of last 20 epochs {sum(tail) / len(tail):.3f})")
