#!/usr/bin/env python3
# A single ensemble Kalman analysis, by hand and through the library.
#
# Three members guess a scalar; we observe it directly at 2.5 with noise
# r = 1.  The update pulls every member toward the observation by an amount
# set by the ensemble's own spread, and the same correction can be written
# as a right-multiplication by an E x E matrix.

import numpy as np

from kalman_learn import NoiseModel, analyze

X = np.array([[1.0, 2.0, 4.0]])
Y = np.full_like(X, 2.5)
noise = NoiseModel(1.0)

X_plus, M = analyze(X, X, Y, noise)
print("prior    ", X[0], "mean", X.mean())
print("posterior", X_plus[0].round(4), "mean", round(X_plus.mean(), 4))

# the literal gain uses the unnormalized deviation product
s = np.sum((X - X.mean()) ** 2)
print("gain s/(s+r^2) =", round(s / (s + 1.0), 4))

# X @ M reproduces the posterior; columns of M sum to one plus an innovation term
print("X @ M matches:", np.allclose(X @ M, X_plus))

# with the normalized flag the sample covariance carries 1/(E-1) and the step is smaller
X_norm, _ = analyze(X, X, Y, noise, normalized=True)
print("normalized posterior mean", round(X_norm.mean(), 4))
