"""Ensemble Kalman Learning and a plain SGD baseline.

One EnKL iteration evaluates the parameter ensemble on a minibatch, turns
each sample into an update matrix with the ensemble Kalman analysis
(parameters estimated, network outputs observed), averages the matrices and
right-multiplies the ensemble by that average.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ensemble import (
    STREAM_INIT,
    STREAM_OBS,
    STREAM_SHUFFLE,
    EnsembleSolveError,
    NoiseModel,
    child_rng,
    perturbed_observations,
    update_matrix,
)
from .network import (
    Dataset,
    NetworkSpec,
    forward,
    forward_ensemble,
    init_ensemble,
    loss_and_grad,
    param_layout,
)

__all__ = [
    "TrainConfig",
    "SgdConfig",
    "RunLog",
    "ekl_iteration",
    "adapt_tolerance",
    "train_ekl",
    "train_sgd",
    "evaluate",
]

LOG_FIELDS = (
    "iteration",
    "epoch",
    "train_metric",
    "test_metric",
    "mean_param_variance",
    "tolerance_r",
    "elapsed_ms",
)


@dataclass(frozen=True)
class TrainConfig:
    minibatch_size: int = 16
    ensemble_size: int = 100
    epochs: int = 5
    noise: NoiseModel = NoiseModel(0.01)
    init_mean: float = 0.0
    init_std: float = 0.01
    seed: int = 0
    # evaluate every this many iterations; 0 means at the end of each epoch
    eval_every: int = 0
    perturb: bool = True
    normalized: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be at least 1")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be at least 2")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.eval_every < 0:
            raise ValueError("eval_every must be nonnegative")
        if self.init_std < 0:
            raise ValueError("init_std must be nonnegative")


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.1
    minibatch_size: int = 16
    epochs: int = 200
    init_mean: float = 0.0
    init_std: float = 0.01
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass
class RunLog:
    """Per-iteration training records; ``test_metric`` is None between evaluations."""

    metric: str  # "rmse" or "accuracy"
    records: list = field(default_factory=list)
    error: str | None = None

    def append(self, **rec):
        if self.records and rec["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("iteration indices must increase")
        self.records.append({k: rec.get(k) for k in LOG_FIELDS})

    def column(self, name):
        return [r[name] for r in self.records]

    def evaluations(self):
        return [r for r in self.records if r["test_metric"] is not None]

    @property
    def final_test_metric(self):
        evals = self.evaluations()
        return evals[-1]["test_metric"] if evals else None


def ekl_iteration(
    A,
    inputs,
    targets,
    spec: NetworkSpec,
    noise: NoiseModel,
    rng=None,
    normalized: bool = False,
    threads: int = 1,
):
    """One learning-rule step ``A <- A @ mean_s M_s`` over a minibatch.

    Every ``M_s`` is computed from the same ``A``.  With ``rng=None`` the
    targets are replicated without perturbation.  Returns the new ensemble and
    a stats dict holding the minibatch loss of the ensemble-mean prediction.
    """
    A = np.asarray(A, dtype=float)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    S, E = inputs.shape[0], A.shape[1]
    if S == 0:
        raise ValueError("empty minibatch")
    if targets.shape != (S, spec.output_dim):
        raise ValueError(f"targets must have shape {(S, spec.output_dim)}, got {targets.shape}")
    P = forward_ensemble(spec, A, inputs, threads=threads)  # (S, out, E)
    if rng is None:
        Ys = [np.repeat(t[:, None], E, axis=1) for t in targets]
    else:
        # drawn up front in sample order so threading cannot reorder the stream
        Ys = [perturbed_observations(t, noise, E, rng=rng) for t in targets]

    def one(s):
        try:
            return update_matrix(P[s], Ys[s], noise, normalized)
        except EnsembleSolveError as exc:
            raise EnsembleSolveError(f"minibatch sample {s}: {exc}") from exc

    if threads > 1 and S > 1:
        with ThreadPoolExecutor(threads) as pool:
            Ms = list(pool.map(one, range(S)))
    else:
        Ms = [one(s) for s in range(S)]
    M = Ms[0].copy()
    for extra in Ms[1:]:
        M += extra
    M /= S
    loss = 0.5 * float(np.sum((P.mean(axis=2) - targets) ** 2)) / S
    return A @ M, {"loss": loss}


def adapt_tolerance(mean_variance: float, noise: NoiseModel) -> float:
    """``clamp(kappa * sqrt(mean_variance), r_min, r)`` for an adaptive noise model."""
    if mean_variance < 0:
        raise ValueError("mean_variance must be nonnegative")
    r = noise.adapt_kappa * np.sqrt(mean_variance)
    return float(min(max(r, noise.r_min), noise.r))


def evaluate(spec: NetworkSpec, alpha, data: Dataset, metric: str) -> float:
    out = forward(spec, alpha, data.inputs)
    if metric == "accuracy":
        return float(np.mean(out.argmax(axis=1) == data.targets.argmax(axis=1)))
    scale = 1.0 if data.target_std is None else np.asarray(data.target_std, dtype=float)
    return float(np.sqrt(np.mean(((out - data.targets) * scale) ** 2)))


def _metric_for(spec):
    return "accuracy" if spec.layers[-1].activation == "softmax" else "rmse"


def _splits(dataset):
    train = dataset.subset("train")
    test = dataset.subset("test") if dataset.split is not None else train
    if len(train) == 0:
        raise ValueError("training split is empty")
    return train, test


def _due(iteration, end_of_epoch, every):
    return end_of_epoch if every == 0 else iteration % every == 0 or end_of_epoch


def train_ekl(spec: NetworkSpec, dataset: Dataset, config: TrainConfig = TrainConfig(), on_record=None):
    """Train with Ensemble Kalman Learning.

    Returns ``(A, log)``.  The training split is reshuffled every epoch from
    the seeded shuffle stream and the last short minibatch is kept.  The
    test split is scored with the ensemble-mean parameter vector.  In
    adaptive mode the tolerance after each iteration is
    ``min(previous r, adapt_tolerance(mean variance))``.  A solver failure
    stops training; the partial log is attached to the exception as ``log``.
    """
    train, test = _splits(dataset)
    metric = _metric_for(spec)
    layout = param_layout(spec)
    A = init_ensemble(layout, config.init_mean, config.init_std, config.ensemble_size, config.seed)
    obs_rng = child_rng(config.seed, STREAM_OBS) if config.perturb else None
    shuffle_rng = child_rng(config.seed, STREAM_SHUFFLE)
    noise = config.noise
    r = noise.r
    log = RunLog(metric)
    t0 = time.perf_counter()

    def record(**rec):
        rec["elapsed_ms"] = (time.perf_counter() - t0) * 1e3
        log.append(**rec)
        if on_record is not None:
            on_record(log.records[-1])

    mean_var = float(A.var(axis=1, ddof=1).mean())
    record(
        iteration=0,
        epoch=0,
        train_metric=None,
        test_metric=evaluate(spec, A.mean(axis=1), test, metric),
        mean_param_variance=mean_var,
        tolerance_r=r,
    )
    it = 0
    S = config.minibatch_size
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        for b in range(0, len(order), S):
            idx = order[b : b + S]
            step_noise = noise if r == noise.r else NoiseModel(r, noise.adapt_kappa, noise.r_min, noise.mode)
            try:
                A, stats = ekl_iteration(
                    A,
                    train.inputs[idx],
                    train.targets[idx],
                    spec,
                    step_noise,
                    rng=obs_rng,
                    normalized=config.normalized,
                    threads=config.threads,
                )
            except EnsembleSolveError as exc:
                log.error = f"iteration {it + 1}: {exc}"
                exc.log = log
                raise
            it += 1
            mean_var = float(A.var(axis=1, ddof=1).mean())
            r_used = r
            if noise.mode == "adaptive":
                r = min(r, adapt_tolerance(mean_var, noise))
            end = b + S >= len(order)
            test_metric = None
            if _due(it, end, config.eval_every):
                test_metric = evaluate(spec, A.mean(axis=1), test, metric)
            record(
                iteration=it,
                epoch=epoch,
                train_metric=stats["loss"],
                test_metric=test_metric,
                mean_param_variance=mean_var,
                tolerance_r=r_used,
            )
    return A, log


def train_sgd(spec: NetworkSpec, dataset: Dataset, config: SgdConfig = SgdConfig(), on_record=None):
    """Minibatch gradient descent on the mean squared-error loss; returns ``(alpha, log)``."""
    train, test = _splits(dataset)
    metric = _metric_for(spec)
    layout = param_layout(spec)
    rng = child_rng(config.seed, STREAM_INIT)
    alpha = config.init_mean + config.init_std * rng.standard_normal(layout.total_dim)
    shuffle_rng = child_rng(config.seed, STREAM_SHUFFLE)
    log = RunLog(metric)
    t0 = time.perf_counter()

    def record(**rec):
        rec["elapsed_ms"] = (time.perf_counter() - t0) * 1e3
        log.append(**rec)
        if on_record is not None:
            on_record(log.records[-1])

    record(iteration=0, epoch=0, test_metric=evaluate(spec, alpha, test, metric))
    it = 0
    S = config.minibatch_size
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        for b in range(0, len(order), S):
            idx = order[b : b + S]
            loss, grad = loss_and_grad(spec, alpha, train.inputs[idx], train.targets[idx])
            alpha = alpha - config.lr * grad
            it += 1
            end = b + S >= len(order)
            test_metric = evaluate(spec, alpha, test, metric) if _due(it, end, config.eval_every) else None
            record(iteration=it, epoch=epoch, train_metric=loss, test_metric=test_metric)
    return alpha, log
