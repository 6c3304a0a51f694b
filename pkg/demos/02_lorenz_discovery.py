#!/usr/bin/env python3
# Recovering the Lorenz-63 equations from a trajectory.
#
# First the brute-force route: put an ensemble on all 27 quadratic
# coefficients and let the Kalman iterations shrink it onto the data.
# Then the informative route: start from an empty model and only add the
# terms whose values share the most information with what is still
# unexplained.

import time

import numpy as np

from kalman_learn import (
    EstimationConfig,
    LorenzConfig,
    PolyModel,
    SelectionConfig,
    TermDictionary,
    estimate_parameters,
    make_training_set,
    structure_learn,
)
from kalman_learn.dynsys import lorenz_true_coefficients

terms = TermDictionary(3, 2)
states, derivs = make_training_set(LorenzConfig(steps=3000))
truth = lorenz_true_coefficients(terms)
print(f"{len(states)} samples, dictionary {terms.names}")

# %% all 27 coefficients at once, prior N(0, 10^2)
t0 = time.perf_counter()
model = PolyModel.gaussian(terms, np.ones((3, 9), bool), 0.0, 10.0, 100, seed=0)
full = estimate_parameters(model, states, derivs, EstimationConfig(target_variance=1e-10, max_iters=200))
err = np.abs(full.model.mean_matrix() - truth).max()
print(f"\nfull dictionary: {full.iterations} iterations, max error {err:.2e}, {time.perf_counter() - t0:.2f} s")

# %% structure learning from the empty model
t0 = time.perf_counter()
res = structure_learn(terms, states, derivs, SelectionConfig(), EstimationConfig(max_iters=100), E=100)
print(f"\nstructure learning: {len(res.cycles)} cycles, {res.total_iterations} iterations, "
      f"{time.perf_counter() - t0:.2f} s")
for c in res.cycles:
    added = [f"dx{e + 1}:{terms.names[t]}" for e, t in c["added"]]
    pruned = [f"dx{e + 1}:{terms.names[t]}" for e, t in c["pruned"]]
    print(f"  cycle {c['cycle']}: added {added}, pruned {pruned}")

means = res.model.mean_matrix()
for i in range(3):
    rhs = " ".join(f"{means[i, j]:+.4f} {terms.names[j]}" for j in np.flatnonzero(res.model.active[i]))
    print(f"  dx{i + 1}/dt = {rhs}")
