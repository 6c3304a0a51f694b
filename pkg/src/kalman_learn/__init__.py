"""Ensemble Kalman learning for neural networks and informative structure learning
of polynomial dynamical systems."""

from .ensemble import NoiseModel, EnsembleSolveError, analyze, update_matrix, perturbed_observations
from .network import Dataset, NetworkSpec, Layer, mlp, forward, forward_ensemble
from .trainer import TrainConfig, SgdConfig, RunLog, ekl_iteration, adapt_tolerance, train_ekl, train_sgd
from .dynsys import (
    TermDictionary,
    PolyModel,
    LorenzConfig,
    EstimationConfig,
    lorenz_rhs,
    integrate,
    make_training_set,
    estimate_parameters,
)
from .infosel import SelectionConfig, pairwise_mi, rank_mi, greedy_select, structure_learn
from .datasets import ingest_csv, ingest_idx

__version__ = "0.1.0"
