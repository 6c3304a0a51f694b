"""Polynomial dynamical systems: Lorenz-63 data and ensemble coefficient estimation."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .ensemble import NoiseModel, analyze, child_rng, STREAM_INIT

__all__ = [
    "TermDictionary",
    "PolyModel",
    "LorenzConfig",
    "EstimationConfig",
    "EstimationResult",
    "DivergenceError",
    "lorenz_rhs",
    "integrate",
    "term_values",
    "make_training_set",
    "poly_predict",
    "estimate_parameters",
    "lorenz_true_coefficients",
]

SIGMA, RHO, BETA = 10.0, 28.0, 8.0 / 3.0
DEFAULT_X0 = (-1.1, 2.2, -2.7)


class DivergenceError(ArithmeticError):
    """Integration produced a non-finite state."""


@dataclass(frozen=True)
class TermDictionary:
    """Monomials of total degree 1..max_degree over ``state_dim`` variables.

    Ordering is by degree, then lexicographic in the variable indices
    (``x1 x2`` before ``x1 x3`` before ``x1**2``... see ``names``).  For
    three variables and degree two this gives
    ``x1, x2, x3, x1x2, x1x3, x2x3, x1^2, x2^2, x3^2``.
    """

    state_dim: int
    max_degree: int = 2
    exponents: tuple = field(default=None, compare=False)

    def __post_init__(self):
        if self.exponents is None:
            object.__setattr__(self, "exponents", _monomials(self.state_dim, self.max_degree))
        exps = tuple(tuple(int(p) for p in e) for e in self.exponents)
        if len(set(exps)) != len(exps):
            raise ValueError("duplicate terms in dictionary")
        object.__setattr__(self, "exponents", exps)

    def __len__(self):
        return len(self.exponents)

    @property
    def names(self):
        return [_term_name(e) for e in self.exponents]

    def index(self, exponent) -> int:
        return self.exponents.index(tuple(exponent))

    def to_json(self) -> str:
        return json.dumps(
            {"state_dim": self.state_dim, "max_degree": self.max_degree, "exponents": self.exponents}
        )

    @classmethod
    def from_json(cls, text: str) -> "TermDictionary":
        d = json.loads(text)
        return cls(d["state_dim"], d["max_degree"], tuple(tuple(e) for e in d["exponents"]))


def _monomials(d, max_degree):
    terms = []
    for degree in range(1, max_degree + 1):
        by_degree = []
        # distinct products first (x1x2 ...), then pure powers (x1^2 ...)
        for combo in itertools.combinations_with_replacement(range(d), degree):
            e = [0] * d
            for v in combo:
                e[v] += 1
            by_degree.append(tuple(e))
        by_degree.sort(key=lambda e: (max(e) > 1 and degree > 1, [-p for p in e]))
        terms.extend(by_degree)
    return tuple(terms)


def _term_name(e):
    parts = []
    for v, p in enumerate(e):
        if p == 1:
            parts.append(f"x{v + 1}")
        elif p > 1:
            parts.append(f"x{v + 1}^{p}")
    return "".join(parts) or "1"


def term_values(dictionary: TermDictionary, x) -> np.ndarray:
    """Monomials evaluated at ``x``; a batch ``(T, d)`` gives ``(T, n_terms)``."""
    x = np.asarray(x, dtype=float)
    exps = np.array(dictionary.exponents)
    if x.shape[-1] != dictionary.state_dim:
        raise ValueError(f"state has {x.shape[-1]} components, dictionary expects {dictionary.state_dim}")
    return np.prod(x[..., None, :] ** exps, axis=-1)


def lorenz_rhs(x, sigma=SIGMA, rho=RHO, beta=BETA) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        [sigma * (x2 - x1), rho * x1 - x2 - x1 * x3, -beta * x3 + x1 * x2], axis=-1
    )


@dataclass(frozen=True)
class LorenzConfig:
    sigma: float = SIGMA
    rho: float = RHO
    beta: float = BETA
    x0: tuple = DEFAULT_X0
    dt: float = 0.01
    steps: int = 3000
    integrator: str = "rk4"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.steps < 0:
            raise ValueError(f"steps must be nonnegative, got {self.steps}")
        if self.integrator not in ("rk4", "euler"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if len(self.x0) != 3:
            raise ValueError("x0 must have three components")

    def rhs(self, x):
        return lorenz_rhs(x, self.sigma, self.rho, self.beta)


def integrate(cfg: LorenzConfig) -> np.ndarray:
    """Trajectory of shape ``(steps + 1, 3)`` starting at ``cfg.x0``."""
    traj = np.empty((cfg.steps + 1, 3))
    x = np.asarray(cfg.x0, dtype=float)
    traj[0] = x
    dt, f = cfg.dt, cfg.rhs
    for i in range(1, cfg.steps + 1):
        if cfg.integrator == "euler":
            x = x + dt * f(x)
        else:
            k1 = f(x)
            k2 = f(x + 0.5 * dt * k1)
            k3 = f(x + 0.5 * dt * k2)
            k4 = f(x + dt * k3)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"state became non-finite at step {i}")
        traj[i] = x
    return traj


def make_training_set(cfg: LorenzConfig, derivatives: str = "exact"):
    """States along a trajectory and their time derivatives.

    ``derivatives="exact"`` evaluates the vector field at each state;
    ``"central"`` differences the trajectory (one-sided at the ends).
    """
    states = integrate(cfg)
    if derivatives == "exact":
        return states, cfg.rhs(states)
    if derivatives != "central":
        raise ValueError(f"unknown derivative mode {derivatives!r}")
    if len(states) < 2:
        raise ValueError("finite differences need at least two states")
    return states, np.gradient(states, cfg.dt, axis=0, edge_order=2 if len(states) > 2 else 1)


def lorenz_true_coefficients(dictionary: TermDictionary, sigma=SIGMA, rho=RHO, beta=BETA) -> np.ndarray:
    """Coefficient matrix ``(3, n_terms)`` that reproduces the Lorenz vector field."""
    C = np.zeros((3, len(dictionary)))
    C[0, dictionary.index((1, 0, 0))] = -sigma
    C[0, dictionary.index((0, 1, 0))] = sigma
    C[1, dictionary.index((1, 0, 0))] = rho
    C[1, dictionary.index((0, 1, 0))] = -1.0
    C[1, dictionary.index((1, 0, 1))] = -1.0
    C[2, dictionary.index((0, 0, 1))] = -beta
    C[2, dictionary.index((1, 1, 0))] = 1.0
    return C


class PolyModel:
    """Active (equation, term) pairs and an ensemble over their coefficients.

    ``coeffs`` has one row per active pair, ordered equation-major then by
    term index (the order of ``np.argwhere(active)``), and one column per
    ensemble member.
    """

    def __init__(self, dictionary: TermDictionary, active, coeffs):
        self.dictionary = dictionary
        self.active = np.array(active, dtype=bool)
        if self.active.shape[1] != len(dictionary):
            raise ValueError("active mask width must match the dictionary")
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim != 2 or coeffs.shape[0] != self.active.sum():
            raise ValueError(
                f"need one coefficient row per active pair ({self.active.sum()}), got {coeffs.shape}"
            )
        self.coeffs = coeffs

    @classmethod
    def empty(cls, dictionary: TermDictionary, n_equations: int, E: int) -> "PolyModel":
        return cls(dictionary, np.zeros((n_equations, len(dictionary)), bool), np.zeros((0, E)))

    @classmethod
    def gaussian(cls, dictionary, active, mean, std, E, seed) -> "PolyModel":
        active = np.asarray(active, dtype=bool)
        rng = child_rng(seed, STREAM_INIT)
        return cls(dictionary, active, mean + std * rng.standard_normal((int(active.sum()), E)))

    @property
    def n_equations(self) -> int:
        return self.active.shape[0]

    @property
    def E(self) -> int:
        return self.coeffs.shape[1]

    def pairs(self):
        """Active ``(equation, term)`` pairs in coefficient-row order."""
        return [tuple(p) for p in np.argwhere(self.active)]

    def row_of(self, equation: int, term: int) -> int:
        return self.pairs().index((equation, term))

    def coefficient_matrices(self) -> np.ndarray:
        """Dense ``(E, n_equations, n_terms)`` coefficients, zero where inactive."""
        full = np.zeros((self.E,) + self.active.shape)
        eq, tm = np.nonzero(self.active)
        full[:, eq, tm] = self.coeffs.T
        return full

    def mean_matrix(self) -> np.ndarray:
        full = np.zeros(self.active.shape)
        full[self.active] = self.coeffs.mean(axis=1)
        return full

    def std_matrix(self) -> np.ndarray:
        full = np.zeros(self.active.shape)
        if self.E > 1:
            full[self.active] = self.coeffs.std(axis=1, ddof=1)
        return full

    def copy(self) -> "PolyModel":
        return PolyModel(self.dictionary, self.active.copy(), self.coeffs.copy())


def _design(model: PolyModel, x):
    """Linear map from the coefficient rows to predictions at ``x``: ``(n_eq, n_rows)``."""
    tv = term_values(model.dictionary, x)
    H = np.zeros((model.n_equations, model.coeffs.shape[0]))
    for row, (eq, tm) in enumerate(model.pairs()):
        H[eq, row] = tv[tm]
    return H


def poly_predict(model: PolyModel, x) -> np.ndarray:
    """Predicted derivatives at state ``x`` for every member: ``(n_equations, E)``."""
    return _design(model, x) @ model.coeffs


@dataclass(frozen=True)
class EstimationConfig:
    target_variance: float = 1e-10
    max_iters: int = 200
    r: float = 1e-5
    seed: int = 0
    start: int = 0
    stride: int = 1
    batch: int = 1
    normalized: bool = False


@dataclass
class EstimationResult:
    model: PolyModel
    converged: bool
    iterations: int
    variance: list
    means: list
    next_index: int


def estimate_parameters(model: PolyModel, states, derivs, cfg: EstimationConfig = EstimationConfig()):
    """Fit the active coefficients by repeated ensemble Kalman analyses.

    Each iteration takes the next training pair (or ``cfg.batch`` pairs
    stacked into one observation), observes the derivative with replicated,
    unperturbed targets and updates the coefficient ensemble.  Stops once the
    mean coefficient variance reaches ``cfg.target_variance``.

    Returns an :class:`EstimationResult`; ``converged`` is False when
    ``max_iters`` ran out first.
    """
    states = np.atleast_2d(states)
    derivs = np.atleast_2d(derivs)
    if len(states) == 0 or len(states) != len(derivs):
        raise ValueError("need matching, nonempty state and derivative arrays")
    if model.coeffs.shape[0] == 0:
        raise ValueError("model has no active terms")
    noise = NoiseModel(cfg.r)
    model = model.copy()
    T = len(states)
    idx = cfg.start % T
    variance, means = [], []

    def var_now():
        return float(model.coeffs.var(axis=1, ddof=1).mean())

    converged = var_now() <= cfg.target_variance
    it = 0
    while not converged and it < cfg.max_iters:
        rows = [(idx + k * cfg.stride) % T for k in range(cfg.batch)]
        idx = (idx + cfg.batch * cfg.stride) % T
        H = np.vstack([_design(model, states[t]) for t in rows])
        y = np.concatenate([derivs[t] for t in rows])
        Z = H @ model.coeffs
        Y = np.repeat(y[:, None], model.E, axis=1)
        model.coeffs, _ = analyze(model.coeffs, Z, Y, noise, normalized=cfg.normalized)
        it += 1
        variance.append(var_now())
        means.append(model.coeffs.mean(axis=1))
        converged = variance[-1] <= cfg.target_variance
    return EstimationResult(model, converged, it, variance, means, idx)
